//! Finite-difference gradient checking.
//!
//! The numeric side evaluates the forward pass only, so it stays an
//! independent oracle for the reverse-mode implementation.

use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Central finite differences of a scalar function at `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + step;
        let fp = f(&xp);
        xp[i] = orig - step;
        let fm = f(&xp);
        xp[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Worst relative disagreement, with a unit floor on the scale so that
/// near-zero gradient pairs compare absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Check the tape gradients of a scalar-valued graph against central
/// finite differences over every entry of `inputs`. The builder is called
/// once per evaluation with freshly registered variables, so it must be a
/// pure function of the tape slots it is given.
///
/// Returns the worst relative error; panics if it reaches `tol`.
pub fn check_gradients(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[VarId]) -> VarId,
    step: f64,
    tol: f64,
    context: &str,
) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &ids);
    let grads = tape.backward(out).expect("backward on scalar output");
    let analytic: Vec<f64> = ids
        .iter()
        .zip(inputs)
        .flat_map(|(&id, t)| match grads.wrt(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = central_diff(
        |x| {
            let mut tape = Tape::new();
            let mut off = 0;
            let ids: Vec<VarId> = inputs
                .iter()
                .map(|t| {
                    let data = x[off..off + t.numel()].to_vec();
                    off += t.numel();
                    tape.variable(Tensor::from_vec(t.shape(), data).expect("shape fixed"))
                })
                .collect();
            let out = build(&mut tape, &ids);
            tape.scalar(out)
        },
        &flat,
        step,
    );

    let err = max_rel_err(&analytic, &numeric);
    assert!(
        err < tol,
        "{context}: max relative gradient error {err:.3e} >= {tol:.1e}"
    );
    err
}
