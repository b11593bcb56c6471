//! Vintage hazards under account-level frailty.
//!
//! Every account has a hazard rising to a flat limit, `z * h0 * (1 - exp(-a / tau))`,
//! with a lognormal multiplier `z = exp(omega * N(0, 1))`. High-`z` accounts
//! default early, so the hazard of the surviving vintage falls after a peak.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{EmvError, Result};

/// Quadrature nodes over the standard normal log-frailty.
pub const QUADRATURE_NODES: usize = 2001;
const QUADRATURE_HALF_WIDTH: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrailtyScenario {
    /// Limiting monthly hazard of the median account.
    pub h0: f64,
    /// Rise timescale in months.
    pub tau: f64,
    /// Standard deviation of the log-frailty.
    pub omega: f64,
    /// Frailty quantiles of the displayed account curves.
    pub quantiles: Vec<f64>,
    /// Last age in months.
    pub horizon: u32,
}

impl Default for FrailtyScenario {
    fn default() -> Self {
        FrailtyScenario {
            h0: 0.04,
            tau: 3.0,
            omega: 0.8,
            quantiles: (1..=9).map(|i| i as f64 / 10.0).collect(),
            horizon: 60,
        }
    }
}

impl FrailtyScenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EmvError::InvalidSpec(m.to_string()));
        if !(self.h0 > 0.0 && self.h0.is_finite()) {
            return bad("h0 must be positive");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return bad("omega must be nonnegative");
        }
        if self.quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            return bad("quantiles must lie in (0, 1)");
        }
        if self.quantiles.windows(2).any(|w| w[0] >= w[1]) {
            return bad("quantiles must be strictly increasing");
        }
        Ok(())
    }

    /// Hazard of an account with multiplier `z` at age `a`, clipped below 1.
    pub fn account_hazard(&self, z: f64, age: u32) -> f64 {
        (z * self.h0 * (1.0 - (-(age as f64) / self.tau).exp())).min(1.0 - 1e-12)
    }

    /// Frailty multiplier at probability `p`.
    pub fn frailty_quantile(&self, p: f64) -> f64 {
        if self.omega == 0.0 {
            return 1.0;
        }
        (self.omega * Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)).exp()
    }

    /// `E[z]`.
    pub fn mean_frailty(&self) -> f64 {
        (self.omega * self.omega / 2.0).exp()
    }

    /// Multipliers and normalised weights of the frailty quadrature.
    fn nodes(&self) -> Vec<(f64, f64)> {
        if self.omega == 0.0 {
            return vec![(1.0, 1.0)];
        }
        let n = QUADRATURE_NODES;
        let step = 2.0 * QUADRATURE_HALF_WIDTH / (n - 1) as f64;
        let raw: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let x = -QUADRATURE_HALF_WIDTH + step * i as f64;
                let end = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                ((self.omega * x).exp(), end * (-0.5 * x * x).exp())
            })
            .collect();
        let total: f64 = raw.iter().map(|r| r.1).sum();
        raw.into_iter().map(|(z, w)| (z, w / total)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrailtyCurves {
    pub scenario: FrailtyScenario,
    pub ages: Vec<u32>,
    /// One hazard curve per scenario quantile.
    pub account_hazard: Vec<Vec<f64>>,
    pub vintage_hazard: Vec<f64>,
    /// Fraction of the vintage still open at each age.
    pub survival: Vec<f64>,
}

fn log_or_neg_inf(h: f64) -> f64 {
    if h > 0.0 {
        h.ln()
    } else {
        f64::NEG_INFINITY
    }
}

impl FrailtyCurves {
    pub fn vintage_log_hazard(&self) -> Vec<f64> {
        self.vintage_hazard.iter().map(|&h| log_or_neg_inf(h)).collect()
    }

    pub fn account_log_hazard(&self) -> Vec<Vec<f64>> {
        self.account_hazard
            .iter()
            .map(|c| c.iter().map(|&h| log_or_neg_inf(h)).collect())
            .collect()
    }

    /// Age with the largest vintage hazard.
    pub fn peak_age(&self) -> u32 {
        let mut best = 0;
        for (i, h) in self.vintage_hazard.iter().enumerate() {
            if *h > self.vintage_hazard[best] {
                best = i;
            }
        }
        self.ages[best]
    }

    /// Column label for a quantile: `0.1 -> q10`, `0.25 -> q25`.
    pub fn quantile_label(q: f64) -> String {
        let pct = q * 100.0;
        if (pct - pct.round()).abs() < 1e-9 {
            format!("q{}", pct.round() as i64)
        } else {
            format!("q{pct}")
        }
    }

    /// `age, q.., vintage_log_hazard, vintage_hazard`; account columns are log-hazards.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("age");
        for q in &self.scenario.quantiles {
            out.push(',');
            out.push_str(&Self::quantile_label(*q));
        }
        out.push_str(",vintage_log_hazard,vintage_hazard\n");
        let logs = self.account_log_hazard();
        let vlog = self.vintage_log_hazard();
        for (i, a) in self.ages.iter().enumerate() {
            out.push_str(&a.to_string());
            for c in &logs {
                out.push(',');
                out.push_str(&c[i].to_string());
            }
            out.push_str(&format!(",{},{}\n", vlog[i], self.vintage_hazard[i]));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Account-quantile and vintage hazards for ages `0..=horizon`.
pub fn simulate_vintage_hazard(scenario: &FrailtyScenario) -> Result<FrailtyCurves> {
    scenario.validate()?;
    let ages: Vec<u32> = (0..=scenario.horizon).collect();
    let account_hazard = scenario
        .quantiles
        .iter()
        .map(|&q| {
            let z = scenario.frailty_quantile(q);
            ages.iter().map(|&a| scenario.account_hazard(z, a)).collect()
        })
        .collect();

    let nodes = scenario.nodes();
    // survival of each node at the current age
    let mut surv: Vec<f64> = vec![1.0; nodes.len()];
    let mut vintage_hazard = Vec::with_capacity(ages.len());
    let mut survival = Vec::with_capacity(ages.len());
    for &a in &ages {
        let mut num = 0.0;
        let mut den = 0.0;
        for ((z, w), s) in nodes.iter().zip(surv.iter_mut()) {
            let h = scenario.account_hazard(*z, a);
            num += w * h * *s;
            den += w * *s;
            *s *= 1.0 - h;
        }
        vintage_hazard.push(if den > 0.0 { num / den } else { 0.0 });
        survival.push(den);
    }
    if scenario.omega == 0.0 {
        // single atom: the vintage is the account
        vintage_hazard = ages.iter().map(|&a| scenario.account_hazard(1.0, a)).collect();
    }
    Ok(FrailtyCurves {
        scenario: scenario.clone(),
        ages,
        account_hazard,
        vintage_hazard,
        survival,
    })
}
