use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Inputs closer than this to zero (the ReLU/ELU kink) are shifted up by it.
    pub kink_margin: f64,
    /// Denominator floor of the relative error, in units of `max(1, |f(x)|)`.
    /// Entries whose true gradient is zero carry central-difference roundoff of
    /// order `1e-10·|f|` at `h = 1e-5` (accumulated `ε·|f|/h`); the floor keeps
    /// that noise from reading as relative error.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            h: 1e-5,
            kink_margin: 1e-3,
            floor: 1e-5,
        }
    }
}

/// Worst element of one input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputCheck {
    pub rel_error: f64,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares analytic gradients of a scalar-valued computation with central
/// differences. `build` receives one var per input and must return a scalar.
///
/// Returns the largest `|analytic - numeric| / max(|analytic|, |numeric|, floor·max(1, |f|))`
/// over every element of every input.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], build: F, cfg: GradcheckConfig) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    Ok(gradcheck_inputs(inputs, build, cfg)?
        .iter()
        .fold(0.0, |m, c| m.max(c.rel_error)))
}

/// Per-input breakdown of [`gradcheck`].
pub fn gradcheck_inputs<F>(inputs: &[Tensor<f64>], build: F, cfg: GradcheckConfig) -> Result<Vec<InputCheck>>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let inputs: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| {
            t.map(|v| {
                if v.abs() < cfg.kink_margin {
                    v + cfg.kink_margin
                } else {
                    v
                }
            })
        })
        .collect();

    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.param_owned(t.clone())).collect();
        let loss = build(&g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter().map(|&v| grads.get(v)).collect()
    };

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = probe.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&g, &vars)?;
        let v = loss.value();
        if v.len() != 1 {
            return Err(Error::Contract("gradcheck builder must return a scalar".into()));
        }
        Ok(v.data()[0])
    };

    let floor = cfg.floor * eval(&inputs)?.abs().max(1.0);
    let mut probe = inputs.clone();
    let mut report = Vec::with_capacity(inputs.len());
    for (which, grad) in analytic.iter().enumerate() {
        let mut worst = InputCheck {
            rel_error: 0.0,
            element: 0,
            analytic: grad.data()[0],
            numeric: f64::NAN,
        };
        for j in 0..inputs[which].len() {
            let x0 = inputs[which].data()[j];
            probe[which].data_mut()[j] = x0 + cfg.h;
            let up = eval(&probe)?;
            probe[which].data_mut()[j] = x0 - cfg.h;
            let down = eval(&probe)?;
            probe[which].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * cfg.h);
            if !numeric.is_finite() {
                return Err(Error::Oracle(format!(
                    "non-finite central difference for input {which}, element {j}"
                )));
            }
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > worst.rel_error || j == 0 {
                worst = InputCheck {
                    rel_error: rel.max(worst.rel_error),
                    element: j,
                    analytic: a,
                    numeric,
                };
            }
        }
        report.push(worst);
    }
    Ok(report)
}
