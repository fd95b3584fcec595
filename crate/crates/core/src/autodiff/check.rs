use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar-valued `f` at `x` against
/// central differences and returns
/// `max_i |analytic_i − numeric_i| / (|analytic_i| + 1e-8)`.
///
/// `f` receives a fresh graph and the leaf holding `x`, and must return a
/// scalar. It is evaluated twice at the unperturbed point; differing results
/// are reported as [`Error::NonDeterministic`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::InvalidArgument(format!("step {h} outside [1e-7, 1e-4]")));
    }

    let eval = |point: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.leaf(point.clone(), false);
        let out = f(&mut g, leaf)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let out = f(&mut g, leaf)?;
    let base = g.value(out).item();
    let analytic = g.backward(out)?.get(leaf);

    if eval(x)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
    }
    Ok(worst)
}
