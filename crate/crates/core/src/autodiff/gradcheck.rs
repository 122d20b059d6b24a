//! Central-difference verification of reverse-mode gradients (64-bit only).

use std::collections::BTreeMap;

use crate::autodiff::params::ParamStore;
use crate::autodiff::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step, expected in `[1e-7, 1e-3]`.
    pub step: f64,
    /// Upper bound on probed coordinates per parameter; coordinates are then
    /// taken at evenly spaced flat indices.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords_per_param: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Max over probed coordinates of `|numeric − analytic| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub per_param: BTreeMap<String, f64>,
    pub worst: Option<(String, usize)>,
    pub coords: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= tolerance
    }
}

pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / analytic.abs().max(1.0)
}

fn eval<F>(f: &F, params: &ParamStore<f64>) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let out = f(&tape, params)?;
    Ok(out.value().item())
}

fn probe_indices(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares `analytic` gradients against central differences of `f`.
pub fn compare_with_finite_differences<F>(
    f: &F,
    params: &ParamStore<f64>,
    analytic: &BTreeMap<String, Tensor<f64>>,
    options: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>,
{
    let h = options.step;
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for (name, grad) in analytic {
        let mut worst = 0.0f64;
        for idx in probe_indices(grad.len(), options.max_coords_per_param) {
            let original = work.value(name).expect("gradient for known parameter").data()[idx];
            work.value_mut(name).unwrap().data_mut()[idx] = original + h;
            let plus = eval(f, &work)?;
            work.value_mut(name).unwrap().data_mut()[idx] = original - h;
            let minus = eval(f, &work)?;
            work.value_mut(name).unwrap().data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(numeric, grad.data()[idx]);
            let err = if err.is_nan() { f64::INFINITY } else { err };
            if err > worst {
                worst = err;
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.worst = Some((name.clone(), idx));
                report.max_rel_error = report.max_rel_error.max(err);
            }
            report.coords += 1;
        }
        report.per_param.insert(name.clone(), worst);
    }
    Ok(report)
}

/// Runs reverse mode on `f` at `params` and checks every trainable
/// coordinate against central differences.
pub fn finite_difference_check<F>(f: F, params: &ParamStore<f64>, options: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let loss = f(&tape, params)?;
    let analytic = tape.backpropagate(loss, params)?;
    drop(tape);
    compare_with_finite_differences(&f, params, &analytic, options)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::from_f64(&[1], &[3.0]).unwrap(), true).unwrap();
        let report = finite_difference_check(
            |tape, p| Ok(tape.param(p, "x")?.square().sum_all()),
            &params,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-9, "{report:?}");
        assert_eq!(report.coords, 1);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::from_f64(&[2], &[0.5, -1.5]).unwrap(), true).unwrap();
        fn f<'t>(tape: &'t Tape<f64>, p: &ParamStore<f64>) -> Result<Var<'t, f64>> {
            Ok(tape.param(p, "x")?.exp().sum_all())
        }
        let tape = Tape::new();
        let loss = f(&tape, &params).unwrap();
        let mut grads = tape.backpropagate(loss, &params).unwrap();
        for g in grads.values_mut() {
            *g = g.map(|v| -v);
        }
        let report = compare_with_finite_differences(&f, &params, &grads, GradCheckOptions::default()).unwrap();
        assert!(!report.passes(1e-4));
        assert_eq!(report.worst.as_ref().unwrap().0, "x");
    }

    #[test]
    fn probing_limits_coordinates() {
        assert_eq!(probe_indices(10, Some(3)), vec![0, 3, 6]);
        assert_eq!(probe_indices(2, Some(3)), vec![0, 1]);
    }
}
