//! Weighted training objective and its logged breakdown.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which guidance strategy a run trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Plain codec, no guidance.
    Baseline,
    /// Guidance fused into the latent; no distillation term.
    Fusion,
    /// Global semantic/contextual distillation.
    Distill,
    /// Distillation against window-aligned contextual rows.
    ContextAlign,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Fusion, Variant::Distill, Variant::ContextAlign];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Fusion => "fusion",
            Variant::Distill => "distill",
            Variant::ContextAlign => "context-align",
        }
    }

    pub fn has_distill(self) -> bool {
        matches!(self, Variant::Distill | Variant::ContextAlign)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected baseline|fusion|distill|context-align)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub time: f64,
    pub freq: f64,
    pub gen: f64,
    pub feat: f64,
    pub commit: f64,
    pub distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { time: 1.0, freq: 1.0, gen: 3.0, feat: 3.0, commit: 1.0, distill: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("time", self.time),
            ("freq", self.freq),
            ("gen", self.gen),
            ("feat", self.feat),
            ("commit", self.commit),
            ("distill", self.distill),
        ];
        for (name, w) in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("weight {name} = {w} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss values of one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub time: f64,
    pub freq: f64,
    pub gen: f64,
    pub feat: f64,
    pub commit: f64,
    /// Absent for variants without a distillation term.
    pub distill: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub components: LossComponents,
    pub weights: LossWeights,
    /// Discriminator hinge loss of the same step; not part of `total`.
    pub disc: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 10] =
        ["step", "l_time", "l_freq", "l_gen", "l_feat", "l_commit", "l_distill", "l_disc", "total", "skipped"];

    /// One whitespace-separated log row in [`LossBreakdown::COLUMNS`] order.
    pub fn log_row(&self, step: u64, skipped: u64) -> String {
        let c = &self.components;
        let distill = c.distill.map_or_else(|| "NA".to_string(), |d| format!("{d:.10e}"));
        format!(
            "{step} {:.10e} {:.10e} {:.10e} {:.10e} {:.10e} {distill} {:.10e} {:.10e} {skipped}",
            c.time, c.freq, c.gen, c.feat, c.commit, self.disc, self.total
        )
    }
}

/// Weighted sum of the components. Variants without distillation ignore the
/// distill term entirely (it is also dropped from the breakdown).
pub fn total_loss(components: &LossComponents, weights: &LossWeights, variant: Variant) -> Result<LossBreakdown> {
    weights.validate()?;
    let mut components = components.clone();
    if !variant.has_distill() {
        components.distill = None;
    }
    let c = &components;
    let mut total = weights.time * c.time;
    total += weights.freq * c.freq;
    total += weights.gen * c.gen;
    total += weights.feat * c.feat;
    total += weights.commit * c.commit;
    if let Some(d) = c.distill {
        total += weights.distill * d;
    }
    Ok(LossBreakdown { components, weights: weights.clone(), disc: 0.0, total })
}
