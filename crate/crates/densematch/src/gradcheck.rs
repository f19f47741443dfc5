//! Finite-difference gradient checking (central differences, f64).

use crate::error::Result;
use crate::tensor::{Array, Tape, Value};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with a floor so near-zero gradients compare sensibly.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_floored(analytic, numeric, 1e-8)
}

/// Relative error with an explicit denominator floor. Larger floors absorb
/// the central-difference roundoff noise (~eps * |f| / h) that dominates
/// coordinates whose true gradient is essentially zero, as happens in deep
/// composite forwards.
pub fn rel_err_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Check the gradient of a scalar-valued function of one array input.
/// Returns the max relative error over all coordinates.
pub fn grad_check<F>(f: F, x: &Array, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Value) -> Result<Value>,
{
    let eval = |data: &[f64]| -> Result<f64> {
        let mut t = Tape::inference();
        let v = t.input(Array::new(x.shape.clone(), data.to_vec())?)?;
        let y = f(&mut t, v)?;
        Ok(t.data(y)[0])
    };

    // analytic pass
    let mut t = Tape::new();
    let v = t.input(x.clone())?;
    let y = f(&mut t, v)?;
    let gs = t.backward(y)?;
    let analytic: Vec<f64> = gs
        .get(v)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut worst: f64 = 0.0;
    let mut data = x.data.clone();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + h;
        let fp = eval(&data)?;
        data[i] = orig - h;
        let fm = eval(&data)?;
        data[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Gradient check for a scalar function of a full parameter store:
/// compares the provided analytic per-parameter gradients against central
/// differences of `f`. Returns the max relative error over all coordinates.
pub fn grad_check_params<F>(
    params: &crate::params::ParameterStore,
    analytic: &std::collections::HashMap<String, Vec<f64>>,
    f: F,
    h: f64,
) -> Result<f64>
where
    F: Fn(&crate::params::ParameterStore) -> Result<f64>,
{
    grad_check_params_floored(params, analytic, f, h, 1e-8)
}

/// As [`grad_check_params`] but with an explicit relative-error floor.
pub fn grad_check_params_floored<F>(
    params: &crate::params::ParameterStore,
    analytic: &std::collections::HashMap<String, Vec<f64>>,
    f: F,
    h: f64,
    floor: f64,
) -> Result<f64>
where
    F: Fn(&crate::params::ParameterStore) -> Result<f64>,
{
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for name in params.names().to_vec() {
        let n = params.get(&name)?.value.len();
        let ana = analytic
            .get(&name)
            .cloned()
            .unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = probe.get(&name)?.value.data[i];
            probe.get_mut(&name)?.value.data[i] = orig + h;
            let fp = f(&probe)?;
            probe.get_mut(&name)?.value.data[i] = orig - h;
            let fm = f(&probe)?;
            probe.get_mut(&name)?.value.data[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err_floored(ana[i], numeric, floor));
        }
    }
    Ok(worst)
}
