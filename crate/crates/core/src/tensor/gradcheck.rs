use super::{Result, Tensor, TensorError};

/// Gradients smaller than this are compared on absolute rather than
/// relative error: central differences at `eps = 1e-6` carry roughly
/// `1e-16 * |f| / eps` of roundoff, which would dominate a tiny gradient.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// `(input index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
}

/// `|a - b| / max(|a|, |b|, GRAD_CHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `f` is evaluated on copies of `inputs`; only inputs that track gradients
/// are checked. `probes` restricts the check to `(input, element)` pairs;
/// `None` checks every element.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    probes: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let fresh: Vec<Tensor> = inputs
        .iter()
        .map(|t| {
            if t.requires_grad() {
                Tensor::parameter(t.shape(), t.data().to_vec())
            } else {
                Tensor::new(t.shape(), t.data().to_vec())
            }
        })
        .collect::<Result<_>>()?;
    let loss = f(&fresh)?;
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarBackward(loss.shape().to_vec()));
    }
    let grads = loss.gradients(false)?;

    let all: Vec<(usize, usize)>;
    let probes = match probes {
        Some(p) => p,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .filter(|(_, t)| t.requires_grad())
                .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
                .collect();
            &all
        }
    };

    let eval = |which: usize, elem: usize, delta: f64| -> Result<f64> {
        let perturbed: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut d = t.data().to_vec();
                if i == which {
                    d[elem] += delta;
                }
                Tensor::new(t.shape(), d)
            })
            .collect::<Result<_>>()?;
        Ok(f(&perturbed)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
    };
    for &(which, elem) in probes {
        let t = inputs.get(which).ok_or_else(|| TensorError::InvalidArgument {
            op: "grad_check",
            reason: format!("probe input {which} out of range"),
        })?;
        if !t.requires_grad() || elem >= t.numel() {
            return Err(TensorError::InvalidArgument {
                op: "grad_check",
                reason: format!("probe ({which}, {elem}) is not a differentiable element"),
            });
        }
        let analytic = grads.get(&fresh[which]).map_or(0.0, |g| g[elem]);
        let numeric = (eval(which, elem, eps)? - eval(which, elem, -eps)?) / (2.0 * eps);
        let rel = relative_error(analytic, numeric);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((which, elem));
        }
    }
    Ok(report)
}
