//! Reconstruction loss, negative feature loss and their combination.

use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, Error, Result};
use crate::nets::{embed_with, EmbeddingNet};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum LossKind {
    #[default]
    Mae,
    Mse,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mae => "mae",
            LossKind::Mse => "mse",
        })
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mae" | "l1" => Ok(LossKind::Mae),
            "mse" | "l2" => Ok(LossKind::Mse),
            other => Err(format!("unknown loss kind `{other}`")),
        }
    }
}

/// Scalar values of one step's losses.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub neg: f64,
    pub total: f64,
    pub per_negative: Vec<f64>,
}

pub fn reconstruction_loss(tape: &mut Tape, rec: Var, hq: Var, kind: LossKind) -> Result<Var> {
    Ok(match kind {
        LossKind::Mae => tape.l1_mean(rec, hq)?,
        LossKind::Mse => tape.mse_mean(rec, hq)?,
    })
}

/// Mean over negatives of the tap-averaged feature L1 distance between the
/// reconstruction and each negative. Returns the averaged loss and the
/// per-negative terms. `embed_params` are the embedding weights bound on
/// `tape` (see [`EmbeddingNet::bind`]).
pub fn negative_loss(
    tape: &mut Tape,
    embedding: &EmbeddingNet,
    embed_params: &[Var],
    rec: Var,
    negatives: &[Var],
) -> Result<(Var, Vec<Var>)> {
    if negatives.is_empty() {
        return Err(Error::Contract("negative loss needs at least one negative".into()));
    }
    let cfg = embedding.config();
    let rec_features = embed_with(tape, cfg, embed_params, rec)?;
    let mut per_negative = Vec::with_capacity(negatives.len());
    for &neg in negatives {
        let neg_features = embed_with(tape, cfg, embed_params, neg)?;
        let mut acc: Option<Var> = None;
        for (&fr, &fn_) in rec_features.iter().zip(&neg_features) {
            let d = tape.l1_mean(fr, fn_)?;
            acc = Some(match acc {
                None => d,
                Some(a) => tape.add(a, d)?,
            });
        }
        let li = tape.scale(acc.unwrap(), 1.0 / rec_features.len() as f64);
        per_negative.push(li);
    }
    let mut sum = per_negative[0];
    for &li in &per_negative[1..] {
        sum = tape.add(sum, li)?;
    }
    let mean = tape.scale(sum, 1.0 / negatives.len() as f64);
    Ok((mean, per_negative))
}

/// `L = L_rec − λ·L_neg`. With `λ = 0` the reconstruction loss itself is
/// returned, so the negative branch cannot influence gradients at all.
pub fn total_loss(tape: &mut Tape, rec_loss: Var, neg_loss: Var, lambda: f64) -> Result<Var> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(config_err(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(rec_loss);
    }
    let weighted = tape.scale(neg_loss, lambda);
    Ok(tape.sub(rec_loss, weighted)?)
}
