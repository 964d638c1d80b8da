//! Negative models: lagged EMA copies of the target network, or the fixed
//! and input-as-negative sources used for comparison.

use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, Error, Result};
use crate::nets::{combine, init_params, restore, ParamSet, RestorationNetConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NegativeMode {
    /// EMA shadows of the target, refreshed every `s_i` iterations.
    Latency,
    /// The degraded input itself is the single negative.
    Input,
    /// One frozen copy of previously trained parameters.
    FixedPretrained,
    /// One frozen randomly initialized network.
    FixedRandom,
}

impl NegativeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            NegativeMode::Latency => "latency",
            NegativeMode::Input => "input",
            NegativeMode::FixedPretrained => "fixed_pretrained",
            NegativeMode::FixedRandom => "fixed_random",
        }
    }
}

impl fmt::Display for NegativeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NegativeMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "latency" => Ok(NegativeMode::Latency),
            "input" => Ok(NegativeMode::Input),
            "fixed_pretrained" => Ok(NegativeMode::FixedPretrained),
            "fixed_random" => Ok(NegativeMode::FixedRandom),
            other => Err(format!("unknown negative mode `{other}`")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Shadow {
    /// Update interval; `None` for frozen shadows.
    pub step: Option<u64>,
    pub params: ParamSet,
    /// EMA updates applied so far.
    pub updates: u64,
}

#[derive(Clone, Debug)]
pub struct NegativeBank {
    mode: NegativeMode,
    shadows: Vec<Shadow>,
    w: f64,
}

impl NegativeBank {
    /// Builds a bank for `target`.
    ///
    /// Latency shadows start as exact copies of the target, so the negative
    /// loss is zero until the target moves. `steps` are sorted; duplicates
    /// are rejected. `pretrained` is required (and only used) in
    /// [`NegativeMode::FixedPretrained`].
    pub fn new(
        mode: NegativeMode,
        target: &ParamSet,
        steps: &[u64],
        w: f64,
        seed: u64,
        pretrained: Option<&ParamSet>,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&w) {
            return Err(config_err(format!("EMA weight must lie in [0, 1), got {w}")));
        }
        let shadows = match mode {
            NegativeMode::Latency => {
                if steps.is_empty() {
                    return Err(config_err("latency mode needs at least one negative step"));
                }
                let mut sorted = steps.to_vec();
                sorted.sort_unstable();
                if sorted.windows(2).any(|p| p[0] == p[1]) {
                    return Err(config_err(format!("duplicate negative steps in {steps:?}")));
                }
                if sorted[0] == 0 {
                    return Err(config_err("negative steps must be positive"));
                }
                sorted
                    .into_iter()
                    .map(|s| Shadow {
                        step: Some(s),
                        params: target.clone(),
                        updates: 0,
                    })
                    .collect()
            }
            NegativeMode::Input => Vec::new(),
            NegativeMode::FixedRandom => {
                let cfg = RestorationNetConfig::from_params(target)?;
                vec![frozen(init_params(&cfg, seed)?)]
            }
            NegativeMode::FixedPretrained => {
                let p = pretrained
                    .ok_or_else(|| config_err("fixed_pretrained mode needs a checkpoint"))?;
                p.check_compatible(target)?;
                vec![frozen(p.clone())]
            }
        };
        Ok(NegativeBank { mode, shadows, w })
    }

    pub fn mode(&self) -> NegativeMode {
        self.mode
    }

    pub fn ema_weight(&self) -> f64 {
        self.w
    }

    pub fn shadows(&self) -> &[Shadow] {
        &self.shadows
    }

    /// Number of negatives produced per input.
    pub fn count(&self) -> usize {
        match self.mode {
            NegativeMode::Input => 1,
            _ => self.shadows.len(),
        }
    }

    /// `θ′ ← wθ′ + (1−w)θ` for every shadow whose step divides `t`.
    /// Only latency banks change; returns the number of shadows updated.
    pub fn maybe_update(&mut self, target: &ParamSet, t: u64) -> Result<usize> {
        if t == 0 {
            return Err(Error::Contract("iteration index starts at 1".into()));
        }
        if self.mode != NegativeMode::Latency {
            return Ok(0);
        }
        let mut updated = 0;
        for shadow in &mut self.shadows {
            let Some(step) = shadow.step else { continue };
            if t.is_multiple_of(step) {
                shadow.params = combine(&shadow.params, target, self.w, 1.0 - self.w)?;
                shadow.updates += 1;
                updated += 1;
            }
        }
        Ok(updated)
    }

    /// `I_neg,i = f_θ′_i(I_lq)`, computed without any tape recording.
    pub fn generate_negatives(&self, input_lq: &Tensor) -> Result<Vec<Tensor>> {
        match self.mode {
            NegativeMode::Input => Ok(vec![input_lq.clone()]),
            _ => self
                .shadows
                .iter()
                .map(|s| restore(&s.params, input_lq))
                .collect(),
        }
    }
}

fn frozen(params: ParamSet) -> Shadow {
    Shadow {
        step: None,
        params,
        updates: 0,
    }
}

/// Rescales negative steps tuned for a 20k-iteration schedule to a shorter
/// run: `ceil(s · total / 20000)`, deduplicated. Longer runs keep `steps`.
pub fn scale_steps(steps: &[u64], total_iters: u64) -> Vec<u64> {
    const REFERENCE_ITERS: u64 = 20_000;
    let mut out: Vec<u64> = if total_iters >= REFERENCE_ITERS {
        steps.to_vec()
    } else {
        steps
            .iter()
            .map(|&s| (s * total_iters).div_ceil(REFERENCE_ITERS).max(1))
            .collect()
    };
    out.sort_unstable();
    out.dedup();
    out
}
