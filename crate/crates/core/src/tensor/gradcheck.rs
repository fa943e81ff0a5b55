use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor of the relative error, so that entries whose true
/// gradient is ~0 are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst entry.
    pub worst: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_error >= self.tol)
    }
}

fn evaluate<F>(f: &F, theta: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = theta.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Compares tape gradients of the scalar function `f` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h`, entry by entry.
///
/// The error of one entry is `|g_tape − g_fd| / max(|g_tape|, |g_fd|, 1e-5)`.
pub fn check_gradients<F>(f: F, theta: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = theta.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor> = theta.to_vec();
    let mut params = Vec::with_capacity(theta.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(theta[pi].shape()));
        let mut check = ParamCheck {
            index: pi,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: 0,
        };
        for j in 0..theta[pi].numel() {
            let orig = theta[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let up = evaluate(&f, &work)?;
            work[pi].data_mut()[j] = orig - h;
            let down = evaluate(&f, &work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            check.max_abs_error = check.max_abs_error.max(abs);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst = j;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { params, tol })
}
