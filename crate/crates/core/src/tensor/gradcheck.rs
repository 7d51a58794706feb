use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-3;

/// Five-point central difference `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`.
fn five_point(mut f: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let near = f(h)? - f(-h)?;
    let far = f(2.0 * h)? - f(-2.0 * h)?;
    Ok((8.0 * near - far) / (12.0 * h))
}

/// Denominator floor of the relative error: `|a − n| / max(|a|, |n|, floor)`.
/// Keeps coordinates whose true derivative is ~0 from reporting truncation
/// noise as a relative error.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    /// Relative error per parameter, per coordinate.
    pub rel_errors: Vec<Vec<f64>>,
    pub max_rel_err: f64,
    /// `(parameter, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
}

/// Compares reverse-mode gradients of the scalar built by `f` with
/// five-point central differences of step [`FD_STEP`], coordinate by
/// coordinate.
///
/// `f` receives a fresh graph and one parameter leaf per entry of `params`.
pub fn grad_check<Fun>(f: Fun, params: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let vars = ps
            .iter()
            .map(|p| g.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::<f64>::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut rel_errors = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.of(*var).to_f64_vec();
        let mut errs = Vec::with_capacity(analytic.len());
        for (ci, &a) in analytic.iter().enumerate() {
            let orig = work[pi].data()[ci];
            let numeric = five_point(
                |delta| {
                    work[pi].data_mut()[ci] = orig + delta;
                    let y = eval(&work);
                    work[pi].data_mut()[ci] = orig;
                    y
                },
                FD_STEP,
            )?;
            let denom = a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            let e = (a - numeric).abs() / denom;
            if e > max_rel_err || worst.is_none() {
                max_rel_err = e;
                worst = Some((pi, ci));
            }
            errs.push(e);
        }
        rel_errors.push(errs);
    }
    Ok(GradCheckReport {
        tol,
        rel_errors,
        max_rel_err,
        worst,
        passed: max_rel_err < tol,
    })
}
