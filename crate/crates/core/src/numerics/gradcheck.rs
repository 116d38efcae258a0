use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of [`finite_difference_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|a - n| / max(1, |a|, |n|)` over all coordinates.
    pub max_rel_error: f64,
    /// `(tensor, coordinate)` where the largest error occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares the tape gradient of `f` against central differences with step `h`
/// on every coordinate of every tensor in `params`.
///
/// `f` records a scalar loss on the tape given one variable per parameter
/// tensor. It must be deterministic; two evaluations at the same point that
/// disagree bitwise are reported as an error.
pub fn finite_difference_check<S, F>(params: &[Tensor<S>], h: f64, f: F) -> Result<GradCheck>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<S>]| -> Result<S> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.value(loss).item();
    if eval(params)?.to_bits_f64() != base.to_bits_f64() {
        return Err(Error::Numeric("loss function is not deterministic".into()));
    }
    tape.backward(loss)?;

    let hs = S::lit(h);
    let mut work = params.to_vec();
    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0), coordinates: 0 };
    for (t, &v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(v) {
            Some(g) => g.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; params[t].numel()],
        };
        for (c, &a) in analytic.iter().enumerate() {
            let orig = work[t].data()[c];
            work[t].data_mut()[c] = orig + hs;
            let up = eval(&work)?.as_f64();
            work[t].data_mut()[c] = orig - hs;
            let down = eval(&work)?.as_f64();
            work[t].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = (t, c);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

trait Bits {
    fn to_bits_f64(self) -> u64;
}

impl<S: Scalar> Bits for S {
    fn to_bits_f64(self) -> u64 {
        self.as_f64().to_bits()
    }
}
