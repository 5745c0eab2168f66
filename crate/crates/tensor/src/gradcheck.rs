use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

pub const ABS_FLOOR: f64 = 1e-6;

/// Largest relative disagreement between autodiff and central differences.
///
/// `f` builds a scalar from the given inputs on a fresh tape. The error for
/// one coordinate is `|autodiff - fd| / (max(|autodiff|, |fd|) + ABS_FLOOR)`;
/// the maximum over all coordinates of all inputs is returned. The floor keeps
/// analytically zero gradients, whose differences are pure roundoff, from
/// dominating.
pub fn grad_check_many<S, F>(f: F, inputs: &[Tensor<S>], eps: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(TensorError::Invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(ParamId(i), t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |xs: &[Tensor<S>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = xs.iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let y = f(&mut tape, &vars)?;
        Ok(tape.value(y).item()?.as_f64())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let g = grads.get(ParamId(i)).expect("every input is a parameter");
        for j in 0..input.len() {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + S::lit(eps);
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - S::lit(eps);
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let fd = (up - down) / (2.0 * eps);
            let ad = g.data()[j].as_f64();
            let rel = (ad - fd).abs() / (ad.abs().max(fd.abs()) + ABS_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, eps: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}
