use serde::{Deserialize, Serialize};

use super::poisson::RateEstimate;
use super::spectrum::FluxRatio;
use crate::error::RatesError;

/// A derived quantity with a symmetric first-order error and asymmetric
/// endpoints from propagating the upper and lower input errors separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Propagated {
    pub value: f64,
    pub sigma: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Propagated {
    pub fn err_high(&self) -> f64 {
        self.hi - self.value
    }

    pub fn err_low(&self) -> f64 {
        self.value - self.lo
    }
}

/// Split of the measured rates into gamma-induced and excess parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcessSolution {
    pub r_so_gamma: Propagated,
    pub r_sc_gamma: Propagated,
    pub r_excess: Propagated,
    pub a_lmo: f64,
    pub a_lmo_sigma: f64,
    /// The central excess rate came out negative.
    pub negative_excess: bool,
}

/// One input with value and (lower, upper) deviations.
struct Input {
    down: f64,
    up: f64,
}

impl Input {
    fn sigma(&self) -> f64 {
        0.5 * (self.down + self.up)
    }
}

fn propagate(value: f64, grads: &[f64], inputs: &[Input]) -> Propagated {
    let mut var = 0.0;
    let mut up = 0.0;
    let mut down = 0.0;
    for (g, x) in grads.iter().zip(inputs) {
        var += (g * x.sigma()).powi(2);
        // Raising an input with a positive gradient raises the output.
        let (rise, fall) = if *g >= 0.0 {
            (x.up, x.down)
        } else {
            (x.down, x.up)
        };
        up += (g * rise).powi(2);
        down += (g * fall).powi(2);
    }
    Propagated {
        value,
        sigma: var.sqrt(),
        lo: value - down.sqrt(),
        hi: value + up.sqrt(),
    }
}

/// Solves
///
/// ```text
/// R_so = R_so_γ + R_excess
/// R_sc = R_sc_γ + R_excess
/// R_so_γ = A · R_sc_γ
/// ```
///
/// for the gamma-induced and excess rates.
pub fn solve_excess_rate(
    r_so: &RateEstimate,
    r_sc: &RateEstimate,
    a_lmo: &FluxRatio,
) -> Result<ExcessSolution, RatesError> {
    let a = a_lmo.ratio;
    if !(a > 1.0 + 1e-9) || !a.is_finite() {
        return Err(RatesError::DegenerateRatio(a));
    }
    let (s, c) = (r_so.rate, r_sc.rate);
    let k = a - 1.0;
    let sc_g = (s - c) / k;
    let so_g = a * sc_g;
    let excess = c - sc_g;

    let inputs = [
        Input {
            down: r_so.err_low(),
            up: r_so.err_high(),
        },
        Input {
            down: r_sc.err_low(),
            up: r_sc.err_high(),
        },
        Input {
            down: a_lmo.sigma,
            up: a_lmo.sigma,
        },
    ];
    let d = (s - c) / (k * k);
    let r_sc_gamma = propagate(sc_g, &[1.0 / k, -1.0 / k, -d], &inputs);
    let r_so_gamma = propagate(so_g, &[a / k, -a / k, -d], &inputs);
    let r_excess = propagate(excess, &[-1.0 / k, a / k, d], &inputs);
    Ok(ExcessSolution {
        r_so_gamma,
        r_sc_gamma,
        r_excess,
        a_lmo: a,
        a_lmo_sigma: a_lmo.sigma,
        negative_excess: excess < 0.0,
    })
}
