//! Central finite-difference gradient checker. Independent of the reverse
//! sweep: it only re-evaluates the forward closure, so it can serve as the
//! oracle for every analytic gradient in the crate.

use ndarray::ArrayD;

use super::graph::{Graph, Var};
use crate::scalar::Scalar;

pub struct GradCheckReport {
    /// max over inputs of max-norm-relative gradient error
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
}

/// Compare analytic gradients of `build` (a scalar-valued graph function of
/// the given leaves) against central finite differences with step `h`.
pub fn check_gradients<T, F>(inputs: &[ArrayD<T>], h: f64, build: F) -> GradCheckReport
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Var,
{
    // analytic
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let y = build(&mut g, &vars);
    let analytic = g.grad_arrays(y, &vars);

    let eval = |perturbed: &[ArrayD<T>]| -> f64 {
        let mut g = Graph::<T>::new();
        let vars: Vec<Var> = perturbed.iter().map(|a| g.constant(a.clone())).collect();
        let y = build(&mut g, &vars);
        g.scalar_value(y).to_f64x()
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, arr) in inputs.iter().enumerate() {
        let mut numeric = ArrayD::<f64>::zeros(arr.raw_dim());
        for idx in 0..arr.len() {
            let mut plus: Vec<ArrayD<T>> = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[idx] += T::from_f64(h);
            let mut minus: Vec<ArrayD<T>> = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[idx] -= T::from_f64(h);
            numeric.as_slice_mut().unwrap()[idx] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let ga = analytic[i].mapv(|v| v.to_f64x());
        let scale = ga
            .iter()
            .chain(numeric.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-8);
        let diff = (&ga - &numeric).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        per_input.push(diff / scale);
    }
    let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
    GradCheckReport { max_rel_err, per_input }
}
