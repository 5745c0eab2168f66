//! Plots and summary tables rendered from a run directory's JSON reports.

use std::collections::BTreeMap;

use anyhow::Result;
use memlab_core::data::InjectionSchedule;
use memlab_core::interventions::CrossModelResult;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::pipeline::{AblationReport, ArmReport, CkptSweepReport, DependencyRecord, SingleShotReport, UnlearningSummary};
use crate::plot::{Heatmap, LineChart, Series};
use crate::rundir::RunDir;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportIndex {
    pub plots: Vec<String>,
    pub tables: Vec<String>,
    /// Expected inputs that were not found.
    pub missing: Vec<String>,
}

/// Reports the preset is expected to produce.
fn expected(cfg: &ExperimentConfig) -> Vec<String> {
    let mut v = vec!["reports/injection.json".to_string()];
    match cfg.preset.as_str() {
        "single-shot" => v.push("reports/single_shot.json".into()),
        "ckpt-sweep" => v.push("reports/ckpt_sweep.json".into()),
        "frozen-ablation" => v.push("reports/frozen_ablation.json".into()),
        _ => {
            for s in &cfg.analysis.stages {
                match s.as_str() {
                    "measure" => v.extend(["memorization_start", "memorization_control", "memorization_treatment"].map(|a| format!("reports/{a}.json"))),
                    "depend" => v.push("reports/dependency.json".into()),
                    "cross" => v.push("reports/cross.json".into()),
                    "stress" => v.push("reports/stress_baseline.json".into()),
                    "unlearn" => v.push("reports/unlearning.json".into()),
                    _ => {}
                }
            }
        }
    }
    v
}

struct Out<'a> {
    run: &'a mut RunDir,
    index: ReportIndex,
}

impl Out<'_> {
    fn chart(&mut self, name: &str, c: &LineChart) -> Result<()> {
        self.emit(name, c.to_svg(), c.to_csv())
    }

    fn heatmap(&mut self, name: &str, h: &Heatmap) -> Result<()> {
        self.emit(name, h.to_svg(), h.to_csv())
    }

    fn emit(&mut self, name: &str, svg: String, csv: String) -> Result<()> {
        let (p, t) = (format!("plots/{name}.svg"), format!("reports/{name}.csv"));
        self.run.write_bytes(&p, svg.as_bytes())?;
        self.run.write_bytes(&t, csv.as_bytes())?;
        self.index.plots.push(p);
        self.index.tables.push(t);
        Ok(())
    }

    fn table(&mut self, name: &str, csv: String) -> Result<()> {
        let t = format!("reports/{name}.csv");
        self.run.write_bytes(&t, csv.as_bytes())?;
        self.index.tables.push(t);
        Ok(())
    }
}

/// Global steps at which the treatment stream carried sequence `i`.
fn injection_steps(sched: &InjectionSchedule, i: usize, start: u64, steps: usize) -> Vec<f64> {
    let Some(inj) = sched.injections().get(i) else { return Vec::new() };
    (0..steps).filter(|&s| inj.fires_at(s)).map(|s| (start + s as u64) as f64).collect()
}

/// Renders every plot whose inputs exist and lists the missing ones.
pub fn render(run: &mut RunDir, cfg: &ExperimentConfig) -> Result<ReportIndex> {
    let missing: Vec<String> = expected(cfg).into_iter().filter(|p| !run.exists(p)).collect();
    let mut out = Out { run, index: ReportIndex { missing, ..Default::default() } };

    let sched: Option<InjectionSchedule> = out.run.read_json("reports/schedule.json").ok();
    let steps = cfg.treatment_steps();
    let start = cfg.training.start_step as u64;
    for arm in ["control", "treatment"] {
        let Ok(rep) = out.run.read_json::<ArmReport>(&format!("reports/memorization_{arm}.json")) else { continue };
        let mut len = LineChart { title: format!("Memorization length ({arm})"), x_label: "step".into(), y_label: "verbatim length".into(), ..Default::default() };
        let mut ppl = LineChart { title: format!("Perplexity ({arm})"), x_label: "step".into(), y_label: "perplexity".into(), ..Default::default() };
        for (i, r) in rep.reports.iter().enumerate() {
            let markers = match (&sched, arm) {
                (Some(s), "treatment") => injection_steps(s, i, start, steps),
                _ => Vec::new(),
            };
            let mut trace = r.trace.clone();
            if trace.first().map_or(true, |p| p.step != start) {
                if let Ok(before) = out.run.read_json::<ArmReport>("reports/memorization_start.json") {
                    if let Some(b) = before.reports.get(i) {
                        trace.insert(0, memlab_core::metrics::TracePoint { step: start, occurrences: 0, length: b.verbatim_mem_length, perplexity: b.perplexity });
                    }
                }
            }
            len.series.push(Series { name: r.sequence_id.clone(), points: trace.iter().map(|p| (p.step as f64, p.length as f64)).collect(), markers: markers.clone() });
            ppl.series.push(Series { name: r.sequence_id.clone(), points: trace.iter().map(|p| (p.step as f64, p.perplexity)).collect(), markers });
        }
        out.chart(&format!("memorization_{arm}"), &len)?;
        out.chart(&format!("perplexity_{arm}"), &ppl)?;
    }

    if let Ok(r) = out.run.read_json::<SingleShotReport>("reports/single_shot.json") {
        let c = LineChart {
            title: "Single-shot memorization".into(),
            x_label: "steps after injection".into(),
            y_label: "mean verbatim length".into(),
            series: r
                .rows
                .iter()
                .map(|row| Series {
                    name: format!("batch {}", row.batch_size),
                    points: row.mean_by_step.iter().enumerate().map(|(k, &m)| ((k + 1) as f64, m)).collect(),
                    markers: Vec::new(),
                })
                .collect(),
        };
        out.chart("single_shot", &c)?;
    }

    if let Ok(r) = out.run.read_json::<CkptSweepReport>("reports/ckpt_sweep.json") {
        let mut c = LineChart { title: "Memorization by checkpoint age".into(), x_label: "checkpoint age (steps)".into(), y_label: "mean verbatim length".into(), ..Default::default() };
        for &s in &r.seeds {
            let pts = r.ages.iter().zip(r.means(s)).map(|(&a, m)| (a as f64, m)).collect();
            c.series.push(Series { name: format!("seed {s}"), points: pts, markers: Vec::new() });
        }
        out.chart("ckpt_sweep", &c)?;
    }

    if let Ok(r) = out.run.read_json::<AblationReport>("reports/frozen_ablation.json") {
        let n = r.rows.iter().map(|row| row.lengths.len()).max().unwrap_or(0);
        let h = Heatmap {
            title: "Memorization length by trainable mask".into(),
            x_label: "sequence".into(),
            y_label: "mask".into(),
            x_ticks: (0..n).map(|i| i.to_string()).collect(),
            y_ticks: r.rows.iter().map(|row| row.mask.clone()).collect(),
            values: r.rows.iter().map(|row| row.lengths.iter().map(|&l| l as f64).collect()).collect(),
        };
        out.heatmap("frozen_ablation", &h)?;
        let mut csv = String::from("mask,mean_length\n");
        for row in &r.rows {
            csv.push_str(&format!("{},{}\n", row.mask, row.mean_length));
        }
        out.table("frozen_ablation_means", csv)?;
    }

    if let Ok(recs) = out.run.read_json::<Vec<DependencyRecord>>("reports/dependency.json") {
        let mut dt = LineChart { title: "Dependency score by decode step".into(), x_label: "decode step t".into(), y_label: "d_t".into(), ..Default::default() };
        let mut nt = LineChart { title: "Dependency count by decode step".into(), x_label: "decode step t".into(), y_label: "locations changed".into(), ..Default::default() };
        for rec in &recs {
            dt.series.push(Series { name: rec.sequence_id.clone(), points: rec.profile.iter().map(|d| (d.step as f64, d.d_t)).collect(), markers: Vec::new() });
            nt.series.push(Series { name: rec.sequence_id.clone(), points: rec.profile.iter().map(|d| (d.step as f64, d.n_changed as f64)).collect(), markers: Vec::new() });
            // flip rate per (layer, trigger token), averaged over the decode steps after the first
            let later: Vec<_> = if rec.profile.len() > 1 { rec.profile[1..].iter().collect() } else { rec.profile.iter().collect() };
            let (layers, n) = (later.first().map_or(0, |d| d.p.len()), rec.trigger.len());
            let values = (0..layers)
                .map(|k| (0..n).map(|j| later.iter().map(|d| 1.0 - d.p[k][j]).sum::<f64>() / later.len() as f64).collect())
                .collect();
            let h = Heatmap {
                title: format!("Trigger dependency ({})", rec.sequence_id),
                x_label: "trigger token".into(),
                y_label: "layer".into(),
                x_ticks: (0..n).map(|j| j.to_string()).collect(),
                y_ticks: (0..layers).map(|k| k.to_string()).collect(),
                values,
            };
            out.heatmap(&format!("dependency_{}", rec.sequence_id), &h)?;
        }
        out.chart("dependency_dt", &dt)?;
        out.chart("dependency_count", &nt)?;
    }

    if let Ok(r) = out.run.read_json::<CrossModelResult>("reports/cross.json") {
        for &n in &r.ns {
            let mut by: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for s in &r.sets {
                if let Some(&p) = s.p.get(&n) {
                    let key = format!("{:?}.{:?}", s.set.variant, s.set.component).to_lowercase();
                    by.entry(key).or_default().push((s.set.layer as f64, p));
                }
            }
            let c = LineChart {
                title: format!("Cross-model match rate, n = {n}"),
                x_label: "layer".into(),
                y_label: "p".into(),
                series: by.into_iter().map(|(name, points)| Series { name, points, markers: Vec::new() }).collect(),
            };
            out.chart(&format!("cross_p_n{n}"), &c)?;
        }
        let mut by: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for q in &r.reuse {
            let key = format!("{:?} n={}", q.component, q.n).to_lowercase();
            by.entry(key).or_default().push((q.layer as f64, q.ratio.value.unwrap_or(f64::NAN)));
        }
        let c = LineChart {
            title: "Reuse ratio".into(),
            x_label: "layer".into(),
            y_label: "R".into(),
            series: by.into_iter().map(|(name, points)| Series { name, points, markers: Vec::new() }).collect(),
        };
        out.chart("reuse_ratio", &c)?;
    }

    if let Ok(u) = out.run.read_json::<UnlearningSummary>("reports/unlearning.json") {
        let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &u.rows {
            for (cat, v) in [("original", r.original_len), ("position", r.position_len), ("semantic", r.semantic_len)] {
                by.entry(format!("{} {cat}", r.method)).or_default().push(v as f64);
            }
        }
        let c = LineChart {
            title: "Stress-test length distribution".into(),
            x_label: "quantile".into(),
            y_label: "match length".into(),
            series: by
                .into_iter()
                .map(|(name, mut xs)| {
                    xs.sort_by(f64::total_cmp);
                    let d = (xs.len().max(2) - 1) as f64;
                    Series { name, points: xs.iter().enumerate().map(|(i, &x)| (i as f64 / d, x)).collect(), markers: Vec::new() }
                })
                .collect(),
        };
        out.chart("stress_lengths", &c)?;
        let mut csv = String::from("task,method,match_before,match_after,retain_ppl_before,retain_ppl_after,changed_weights,pruned_units\n");
        for r in &u.reports {
            let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.task,
                r.method,
                r.match_before,
                r.match_after,
                f(r.retain_ppl_before),
                f(r.retain_ppl_after),
                r.changed_weights,
                r.pruned.len()
            ));
        }
        out.table("unlearning", csv)?;
    }

    let index = out.index;
    run.write_json("reports/index.json", &index)?;
    run.save_manifest()?;
    Ok(index)
}
