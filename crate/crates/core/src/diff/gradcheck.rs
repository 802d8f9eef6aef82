use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Lower bound of the relative-error denominator. Coordinates whose
    /// gradient is below the resolution of the finite difference (roughly
    /// `ulp(f) / eps`) are compared in absolute terms against this floor.
    pub floor: f64,
    /// Use the fourth-order stencil `(8(f(x+h)-f(x-h)) - (f(x+2h)-f(x-2h))) / 12h`
    /// instead of `(f(x+h)-f(x-h)) / 2h`.
    pub fourth_order: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-8,
            fourth_order: false,
        }
    }
}

/// Compares reverse-mode gradients of `f` at `x` against central differences.
///
/// The relative error of a coordinate is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`. A function
/// that is discontinuous near `x` shows up as a large error, not a failure.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    grad_check_with(
        f,
        x,
        GradCheckOptions {
            eps,
            ..GradCheckOptions::default()
        },
    )
}

pub fn grad_check_with<F>(f: F, x: &Tensor, opts: GradCheckOptions) -> Result<GradCheck>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let eps = opts.eps;
    let mut g = Graph::new();
    let input = g.leaf(x.clone());
    let out = f(&mut g, input)?;
    let value = g.value(out).item().ok_or_else(|| Error::NonScalarLoss(g.value(out).shape().to_vec()))?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            location: "f(x)".into(),
            value,
        });
    }
    let analytic = g
        .backward(out)?
        .take(input)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let input = g.constant(probe);
        let out = f(&mut g, input)?;
        Ok(g.value(out).item().unwrap_or(f64::NAN))
    };

    let mut numeric = Vec::with_capacity(x.len());
    let mut worst = (0.0, 0);
    for i in 0..x.len() {
        let probe = |h: f64| -> Result<f64> {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let v = eval(p)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("coordinate {i} (x{}{}eps)", if h < 0.0 { "-" } else { "+" }, if h.abs() > eps { "2" } else { "" }),
                    value: v,
                });
            }
            Ok(v)
        };
        let near = probe(eps)? - probe(-eps)?;
        let num = if opts.fourth_order {
            let far = probe(2.0 * eps)? - probe(-2.0 * eps)?;
            (8.0 * near - far) / (12.0 * eps)
        } else {
            near / (2.0 * eps)
        };
        let ana = analytic[i];
        if !ana.is_finite() {
            return Err(Error::NonFinite {
                location: format!("analytic gradient at coordinate {i}"),
                value: ana,
            });
        }
        let rel = (ana - num).abs() / (ana.abs() + num.abs()).max(opts.floor);
        if rel > worst.0 {
            worst = (rel, i);
        }
        numeric.push(num);
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    })
}
