//! Finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error between analytic and numeric gradients:
/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-8)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function at `x`:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` per coordinate.
pub fn central_diff(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at perturbed coordinate {i}"
            )));
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Compare the tape gradient of `f` w.r.t. `x` against central differences;
/// returns the max relative error over coordinates.
pub fn grad_check(
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
    x: &Tensor,
    h: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x, true);
    let loss = f(&mut tape, v)?;
    if tape.numel(loss) != 1 {
        return Err(Error::InvalidArgument("grad_check target must be scalar".into()));
    }
    if !tape.data(loss)[0].is_finite() {
        return Err(Error::NonFinite("objective at base point".into()));
    }
    tape.backward(loss)?;
    let analytic = tape
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let numeric = central_diff(
        |probe| {
            let mut t = Tape::new();
            let pv = t.leaf(probe, false);
            let out = f(&mut t, pv)?;
            Ok(t.data(out)[0])
        },
        x,
        h,
    )?;
    Ok(max_rel_error(&analytic, &numeric))
}
