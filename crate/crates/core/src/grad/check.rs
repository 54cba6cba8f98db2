use super::{GradError, Graph, Tensor, Var};

/// Denominator floor for relative errors. Coordinates whose gradients are
/// below it are effectively held to an absolute tolerance of `tol * 1e-3`.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// Max relative error per parameter tensor, in the order supplied.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Smallest |ReLU input| at the unperturbed point, if any ReLU was used.
    pub relu_margin: Option<f64>,
    pub evaluations: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn evaluate<F, E>(f: &F, params: &[Tensor]) -> Result<(Graph, Vec<Var>, Var), E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<GradError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    if !g.value(root).is_scalar() {
        return Err(GradError::NonScalarRoot {
            shape: g.value(root).shape().to_vec(),
        }
        .into());
    }
    Ok((g, vars, root))
}

/// Checks `f`'s reverse-mode gradient against central differences with
/// step `step` on every coordinate of every parameter tensor.
///
/// `f` receives a fresh graph and the parameter handles and must return a
/// scalar node.
pub fn finite_difference_check<F, E>(
    f: F,
    params: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<FdReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<GradError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let (g, vars, root) = evaluate(&f, params)?;
    let grads = g.backward(root)?;
    let relu_margin = g.relu_margin();
    drop(g);

    let mut per_param = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.to_vec();
    let mut evaluations = 1;
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut worst = 0.0f64;
        for c in 0..params[p].len() {
            let orig = params[p].data()[c];
            work[p].data_mut()[c] = orig + step;
            let plus = evaluate(&f, &work)?;
            let fp = plus.0.scalar(plus.2);
            work[p].data_mut()[c] = orig - step;
            let minus = evaluate(&f, &work)?;
            let fm = minus.0.scalar(minus.2);
            work[p].data_mut()[c] = orig;
            evaluations += 2;

            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[c], numeric));
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(FdReport {
        per_param,
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
        relu_margin,
        evaluations,
    })
}
