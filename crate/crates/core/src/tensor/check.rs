use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub passed: bool,
    pub cause: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.coords.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.coords
            .iter()
            .map(|c| c.rel_error)
            .fold(0.0, |m, e| if e.is_nan() || e > m { e } else { m })
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordCheck> {
        self.coords.iter().filter(|c| !c.passed)
    }
}

fn evaluate<F>(f: &F, input: &Tensor, tape: &mut Tape) -> core::result::Result<f64, String>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let x = tape.leaf(input);
    match f(tape, x) {
        Ok(y) if tape.value(y).len() == 1 => {
            let v = tape.item(y);
            if v.is_finite() {
                Ok(v)
            } else {
                Err("non-finite forward value".to_string())
            }
        }
        Ok(y) => Err(alloc::format!("non-scalar output {:?}", tape.shape(y))),
        Err(e) => Err(e.to_string()),
    }
}

/// Compares the tape's gradient of `f` at `input` against central finite
/// differences. Relative error uses a `max(|a|, |n|, 1e-8)` denominator.
pub fn grad_check<F>(f: F, input: &Tensor, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_on(Tape::new, f, input, step, tolerance)
}

/// Like [`grad_check`], with `new_tape` supplying the tape for the analytic
/// pass (a fault-injected one, say).
pub fn grad_check_on<F>(
    new_tape: impl Fn() -> Tape,
    f: F,
    input: &Tensor,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let leaf = input.clone().with_requires_grad(true);
    let mut tape = new_tape();
    let x = tape.leaf(&leaf);
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get(x).map(<[f64]>::to_vec).unwrap_or_default();

    let mut coords = Vec::with_capacity(input.len());
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += step;
        let mut minus = input.clone();
        minus.data_mut()[i] -= step;
        let fp = evaluate(&f, &plus, &mut Tape::new());
        let fm = evaluate(&f, &minus, &mut Tape::new());
        let a = analytic.get(i).copied().unwrap_or(0.0);
        let check = match (fp, fm) {
            (Ok(fp), Ok(fm)) => {
                let n = (fp - fm) / (2.0 * step);
                let denom = a.abs().max(n.abs()).max(1e-8);
                let rel = (a - n).abs() / denom;
                CoordCheck {
                    index: i,
                    analytic: a,
                    numeric: n,
                    rel_error: rel,
                    passed: rel <= tolerance,
                    cause: None,
                }
            }
            (Err(cause), _) | (_, Err(cause)) => CoordCheck {
                index: i,
                analytic: a,
                numeric: f64::NAN,
                rel_error: f64::NAN,
                passed: false,
                cause: Some(cause),
            },
        };
        coords.push(check);
    }
    Ok(GradCheckReport { coords, tolerance })
}
