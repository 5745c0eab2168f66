use memlab_tensor::{Gradients, ParamId, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Moments for every parameter plus the number of applied updates.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamW,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    /// Zero moments shaped like `params`.
    pub fn fresh(hyper: AdamW, params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape().to_vec());
        Self { hyper, step: 0, m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect() }
    }

    pub fn check_shapes(&self, params: &[Tensor]) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && params.iter().zip(&self.m).zip(&self.v).all(|((p, m), v)| p.shape() == m.shape() && p.shape() == v.shape());
        if ok {
            Ok(())
        } else {
            Err(LabError::Invalid("optimizer moments do not match parameter shapes".into()))
        }
    }
}

/// One AdamW update of every parameter that has a gradient.
///
/// Weight decay is decoupled: `p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)`,
/// both terms evaluated at the pre-step `p`. Parameters absent from `grads`
/// are left untouched, decay included.
pub fn adamw_step(params: &mut [Tensor], grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    adamw_step_masked(params, grads, state, None)
}

/// [`adamw_step`] restricted to elements where `mask[param][elem]` is set.
/// Unmasked elements keep their value and moments bitwise.
pub fn adamw_step_masked(
    params: &mut [Tensor],
    grads: &Gradients,
    state: &mut OptimizerState,
    mask: Option<&[Vec<bool>]>,
) -> Result<()> {
    let h = state.hyper;
    if !(h.lr > 0.0) {
        return Err(LabError::Invalid(format!("learning rate must be positive, got {}", h.lr)));
    }
    state.check_shapes(params)?;
    for (id, g) in grads.iter() {
        let p = params.get(id.0).ok_or(LabError::OutOfRange { what: "parameter", index: id.0, limit: params.len() })?;
        if g.shape() != p.shape() {
            return Err(LabError::Invalid(format!("gradient shape {:?} vs parameter {:?}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(LabError::Invalid(format!("non-finite gradient for parameter {}", id.0)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = (1.0 - h.beta1.powi(t)) as f32;
    let bc2 = (1.0 - h.beta2.powi(t)) as f32;
    let (lr, b1, b2, eps) = (h.lr as f32, h.beta1 as f32, h.beta2 as f32, h.eps as f32);
    let decay = (h.lr * h.weight_decay) as f32;
    for (ParamId(i), g) in grads.iter() {
        let elem_mask = mask.map(|m| m[i].as_slice());
        let p = params[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for k in 0..p.len() {
            if elem_mask.is_some_and(|em| !em[k]) {
                continue;
            }
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] = p[k] - decay * p[k] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use memlab_tensor::Tape;

    fn grads_of(vals: &[Tensor], f: impl Fn(&mut Tape, &[memlab_tensor::Var]) -> memlab_tensor::Var) -> Gradients {
        let mut tape = Tape::new();
        let vars: Vec<_> = vals.iter().enumerate().map(|(i, t)| tape.param(ParamId(i), t.clone()).unwrap()).collect();
        let loss = f(&mut tape, &vars);
        tape.backward(loss).unwrap()
    }

    fn zero_grads(vals: &[Tensor]) -> Gradients {
        grads_of(vals, |tape, vars| {
            let s = tape.sum(vars[0]).unwrap();
            tape.scale(s, 0.0).unwrap()
        })
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let mut p = vec![Tensor::from_vec(vec![1.5, -2.0, 0.25])];
        let before = p.clone();
        let mut st = OptimizerState::fresh(AdamW { weight_decay: 0.0, lr: 0.1, ..AdamW::default() }, &p);
        let g = zero_grads(&p);
        adamw_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_decay_scales_params() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0, 4.0])];
        let mut st = OptimizerState::fresh(AdamW { weight_decay: 0.01, lr: 0.1, ..AdamW::default() }, &p);
        let g = zero_grads(&p);
        adamw_step(&mut p, &g, &mut st).unwrap();
        for (a, b) in p[0].data().iter().zip([1.0f32, -2.0, 4.0]) {
            assert!((a - b * 0.999).abs() < 1e-6, "{a} vs {}", b * 0.999);
        }
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        let mut p = vec![Tensor::from_vec(vec![0.0])];
        let mut st = OptimizerState::fresh(AdamW { lr: 0.1, weight_decay: 0.0, ..AdamW::default() }, &p);
        // d(sum p)/dp = 1
        let g = grads_of(&p, |tape, vars| tape.sum(vars[0]).unwrap());
        adamw_step(&mut p, &g, &mut st).unwrap();
        // m_hat = 1, v_hat = 1 -> step = 0.1 / (1 + 1e-8)
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((p[0].data()[0] as f64 - expect).abs() < 1e-6, "{}", p[0].data()[0]);
    }

    #[test]
    fn full_mask_equals_unmasked() {
        let init = vec![Tensor::from_vec(vec![0.3, -0.7, 1.1]), Tensor::from_vec(vec![2.0, 0.5])];
        let f = |tape: &mut Tape, vars: &[memlab_tensor::Var]| {
            let a = tape.mul(vars[0], vars[0]).unwrap();
            let a = tape.sum(a).unwrap();
            let b = tape.sum(vars[1]).unwrap();
            tape.add(a, b).unwrap()
        };
        let (mut p1, mut p2) = (init.clone(), init.clone());
        let mut s1 = OptimizerState::fresh(AdamW::with_lr(0.05), &init);
        let mut s2 = s1.clone();
        let mask: Vec<Vec<bool>> = init.iter().map(|t| vec![true; t.len()]).collect();
        for _ in 0..5 {
            let g1 = grads_of(&p1, f);
            adamw_step(&mut p1, &g1, &mut s1).unwrap();
            let g2 = grads_of(&p2, f);
            adamw_step_masked(&mut p2, &g2, &mut s2, Some(&mask)).unwrap();
        }
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn rejects_nan_gradient_and_bad_lr() {
        let mut p = vec![Tensor::from_vec(vec![1.0])];
        let mut st = OptimizerState::fresh(AdamW::with_lr(0.0), &p);
        let g = zero_grads(&p);
        assert!(adamw_step(&mut p, &g, &mut st).is_err());
        st.hyper.lr = 0.1;
        let nan = Gradients::from_map([(ParamId(0), Tensor::from_vec(vec![f32::NAN]))].into());
        assert!(adamw_step(&mut p, &nan, &mut st).is_err());
        assert_eq!(st.step, 0);
        assert_eq!(p[0].data(), &[1.0]);
    }
}
