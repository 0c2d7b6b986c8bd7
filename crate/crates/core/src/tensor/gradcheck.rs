use super::{Tape, Tensor, Var};
use crate::Result;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Elements skipped because `|analytic| + |numeric|` was below the floor.
    pub skipped: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol
    }
}

const NEGLIGIBLE: f64 = 1e-8;

/// Compares the tape gradient of scalar `f` at `x` with `(f(x+h) − f(x−h)) / 2h`.
///
/// `f` receives a fresh tape and the leaf holding `x`, and returns the scalar
/// output node. Relative error per element is `|a − n| / max(|a|, |n|)`;
/// elements where both are negligible are skipped. A NaN anywhere makes the
/// reported error NaN, which never passes.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradcheck_with_floor(f, x, h, NEGLIGIBLE)
}

/// [`gradcheck`] skipping elements where `max(|a|, |n|) < floor`. Useful for
/// large parameter vectors where some gradients sit below the central
/// difference noise level.
pub fn gradcheck_with_floor<F>(f: F, x: &Tensor, h: f64, floor: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone())?;
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe.clone())?;
        let o = f(&mut t, v)?;
        Ok(t.value(o).item())
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }

    let mut max_rel_error = 0.0f64;
    let mut worst_index = None;
    let mut skipped = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        if a.is_nan() || n.is_nan() {
            max_rel_error = f64::NAN;
            worst_index = Some(i);
            break;
        }
        if a.abs() + n.abs() < NEGLIGIBLE || a.abs().max(n.abs()) < floor {
            skipped += 1;
            continue;
        }
        let rel = (a - n).abs() / a.abs().max(n.abs());
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = Some(i);
        }
    }
    Ok(GradcheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        skipped,
    })
}
