//! Central finite-difference check of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a gradient check over every input element.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(max|analytic|, max|numeric|)` over all
    /// elements of all inputs.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub elements: usize,
}

/// Compares `d loss / d input` from [`Graph::backward`] against central
/// differences with step `h`. `build` must create a scalar loss from the
/// input leaves it receives.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let probes: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    grad_check_at(inputs, &probes, h, build)
}

/// Like [`grad_check`] but only perturbs the `(input, element)` pairs in
/// `probes`; for inputs too large to sweep.
pub fn grad_check_at<F>(
    inputs: &[Tensor],
    probes: &[(usize, usize)],
    h: f64,
    build: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor], grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), grad)).collect();
        let loss = build(&mut g, &vars)?;
        let value = g.value(loss).item();
        let mut grads = Vec::new();
        if grad {
            g.backward(loss)?;
            for (v, t) in vars.iter().zip(vals) {
                grads.push(
                    g.grad(*v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(t.shape())),
                );
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let (mut max_err, mut scale) = (0.0f64, 0.0f64);
    for &(i, j) in probes {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let (fp, _) = eval(&work, false)?;
        work[i].data_mut()[j] = orig - h;
        let (fm, _) = eval(&work, false)?;
        work[i].data_mut()[j] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let an = analytic[i].data()[j];
        if !numeric.is_finite() || !an.is_finite() {
            return Err(Error::NonFinite("grad_check".into()));
        }
        max_err = max_err.max((an - numeric).abs());
        scale = scale.max(an.abs()).max(numeric.abs());
    }
    Ok(GradCheck {
        max_rel_error: if scale > 0.0 {
            max_err / scale
        } else {
            max_err
        },
        max_abs_error: max_err,
        elements: probes.len(),
    })
}
