use super::{Graph, NumericsError, Real, Result, Tensor, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (parameter index, element index) of the worst entry.
    pub worst_entry: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
}

const REL_FLOOR: f64 = 1e-12;

/// Checks the gradient of a scalar function of `params`.
///
/// `function` builds the computation on a fresh graph from one leaf per
/// parameter. The error per entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)` and the
/// report carries the maximum over every entry of every parameter.
pub fn grad_check<T, F>(function: F, params: &[Tensor<T>], epsilon: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(NumericsError::Contract(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let eval = |values: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = function(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(NumericsError::Contract(
                "grad_check function must return a scalar".into(),
            ));
        }
        let x = v.item().as_f64();
        if !x.is_finite() {
            return Err(NumericsError::NonFinite {
                name: "grad_check function value".into(),
            });
        }
        Ok(x)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let root = function(&mut g, &vars)?;
    if !g.value(root).item().as_f64().is_finite() {
        return Err(NumericsError::NonFinite {
            name: "grad_check function value".into(),
        });
    }
    let grads = g.backward(root)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_entry: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries_checked: 0,
    };
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (pi, &var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(var);
        for e in 0..params[pi].numel() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = T::from_f64(orig.as_f64() + epsilon);
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = T::from_f64(orig.as_f64() - epsilon);
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.data()[e].as_f64();
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            let err = (a - numeric).abs() / denom;
            report.entries_checked += 1;
            if err > report.max_relative_error || report.entries_checked == 1 {
                report.max_relative_error = err;
                report.worst_entry = (pi, e);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
