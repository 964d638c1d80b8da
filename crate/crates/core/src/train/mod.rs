//! The training loop: reconstruction minus weighted negative loss, Adam,
//! gated EMA refresh of the negative models, evaluation and collapse
//! detection.

pub mod adam;
pub mod checkpoint;

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::degrade::{make_dataset, DatasetSpec, ImagePair};
use crate::error::{config_err, Error, Result};
use crate::loss::{negative_loss, reconstruction_loss, total_loss, LossBreakdown, LossKind};
use crate::metrics::{self, MetricValue};
use crate::negbank::{scale_steps, NegativeBank, NegativeMode};
use crate::nets::{
    forward_restore, init_params, restore, EmbeddingNet, EmbeddingNetConfig, ParamSet,
    RestorationNetConfig,
};
use crate::tensor::{Tape, Tensor};

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub ema_w: f64,
    /// Negative steps before scaling.
    pub steps: Vec<u64>,
    /// Rescale `steps` to `total_iters` (see [`scale_steps`]).
    pub scale_steps: bool,
    pub mode: NegativeMode,
    pub loss_kind: LossKind,
    pub lr: f64,
    pub total_iters: u64,
    pub batch: usize,
    pub seed: u64,
    pub eval_every: u64,
    pub net: RestorationNetConfig,
    pub embed: EmbeddingNetConfig,
    pub dataset: DatasetSpec,
    /// Checkpoint for [`NegativeMode::FixedPretrained`].
    pub pretrained: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e-4,
            ema_w: 0.1,
            steps: vec![100, 500, 1000, 2000],
            scale_steps: true,
            mode: NegativeMode::Latency,
            loss_kind: LossKind::Mae,
            lr: 1e-3,
            total_iters: 5000,
            batch: 8,
            seed: 0,
            eval_every: 250,
            net: RestorationNetConfig::default(),
            embed: EmbeddingNetConfig::default(),
            dataset: DatasetSpec::default(),
            pretrained: None,
        }
    }
}

impl TrainConfig {
    /// Small grayscale 2× super-resolution setup sized to train 5000
    /// iterations in a couple of minutes on one core.
    pub fn desk_sr2x() -> Self {
        TrainConfig {
            batch: 4,
            seed: 42,
            net: RestorationNetConfig {
                depth: 2,
                width: 8,
                ..Default::default()
            },
            dataset: DatasetSpec {
                count: 64,
                size: 32,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config_err(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.ema_w) {
            return Err(config_err(format!("ema_w must lie in [0, 1), got {}", self.ema_w)));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(config_err(format!("lr must be positive, got {}", self.lr)));
        }
        if self.total_iters == 0 || self.batch == 0 || self.eval_every == 0 {
            return Err(config_err("total_iters, batch and eval_every must be positive"));
        }
        if self.mode == NegativeMode::Latency && self.steps.is_empty() {
            return Err(config_err("latency mode needs at least one negative step"));
        }
        if self.steps.contains(&0) {
            return Err(config_err("negative steps must be positive"));
        }
        self.net.validate()?;
        self.embed.validate()?;
        self.dataset.validate()?;
        let c = self.net.in_channels;
        if self.embed.in_channels != c || self.dataset.channels != c {
            return Err(config_err("net, embedding and dataset channel counts differ"));
        }
        if self.dataset.size < self.embed.receptive_field() {
            return Err(config_err(format!(
                "data.size {} is smaller than the embedding receptive field {}",
                self.dataset.size,
                self.embed.receptive_field()
            )));
        }
        if self.dataset.count < 2 {
            return Err(config_err("data.count must be >= 2 to hold out an eval split"));
        }
        Ok(())
    }

    /// Negative steps actually used by the bank.
    pub fn effective_steps(&self) -> Vec<u64> {
        if self.scale_steps {
            scale_steps(&self.steps, self.total_iters)
        } else {
            let mut s = self.steps.clone();
            s.sort_unstable();
            s.dedup();
            s
        }
    }

    pub fn set_channels(&mut self, c: usize) {
        self.net.in_channels = c;
        self.embed.in_channels = c;
        self.dataset.channels = c;
    }
}

/// Mutable per-run state touched by one optimisation step.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamSet,
    pub optimizer: Adam,
    pub bank: NegativeBank,
}

fn check_finite(iter: u64, what: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Collapse { iter, what, value })
    }
}

/// One iteration at index `t ≥ 1`: forward, detached negatives, losses,
/// backward, Adam, then the gated EMA refresh of the bank.
pub fn train_step(
    state: &mut TrainState,
    embedding: &EmbeddingNet,
    batch: &[&ImagePair],
    cfg: &TrainConfig,
    t: u64,
) -> Result<LossBreakdown> {
    if t == 0 {
        return Err(Error::Contract("iteration index starts at 1".into()));
    }
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let lq = Tensor::stack(&batch.iter().map(|p| &p.lq).collect::<Vec<_>>())?;
    let hq = Tensor::stack(&batch.iter().map(|p| &p.hq).collect::<Vec<_>>())?;
    let negatives = state.bank.generate_negatives(&lq)?;

    let mut tape = Tape::new();
    let param_vars = state.params.bind(&mut tape, true);
    let embed_vars = embedding.bind(&mut tape);
    let x = tape.constant(lq);
    let y = tape.constant(hq);
    let neg_vars: Vec<_> = negatives.into_iter().map(|n| tape.constant(n)).collect();

    let rec = forward_restore(&mut tape, &param_vars, x)?;
    let rec_loss = reconstruction_loss(&mut tape, rec, y, cfg.loss_kind)?;
    let (neg_loss, per_negative) = negative_loss(&mut tape, embedding, &embed_vars, rec, &neg_vars)?;
    let total = total_loss(&mut tape, rec_loss, neg_loss, cfg.lambda)?;

    let breakdown = LossBreakdown {
        rec: tape.item(rec_loss),
        neg: tape.item(neg_loss),
        total: tape.item(total),
        per_negative: per_negative.iter().map(|&v| tape.item(v)).collect(),
    };
    check_finite(t, "rec_loss", breakdown.rec)?;
    check_finite(t, "neg_loss", breakdown.neg)?;
    check_finite(t, "total_loss", breakdown.total)?;

    tape.backward(total)?;
    let grads: Vec<Option<Vec<f64>>> = param_vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec))
        .collect();
    drop(tape);
    state.optimizer.step(&mut state.params, &grads);
    state.bank.maybe_update(&state.params, t)?;
    Ok(breakdown)
}

/// Seeded epoch-wise shuffling over the training indices.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c_0000_0001),
            order: (0..len).collect(),
            cursor: len,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Splits a generated dataset into (train, eval): the last quarter
/// (at least one pair) is held out.
pub fn split_dataset(mut pairs: Vec<ImagePair>) -> (Vec<ImagePair>, Vec<ImagePair>) {
    let n_eval = (pairs.len() / 4).max(1);
    let eval = pairs.split_off(pairs.len() - n_eval);
    (pairs, eval)
}

/// Mean PSNR/SSIM of `params` on `pairs` (restorations clamped to [0, 1]),
/// plus per-pair values.
pub fn evaluate_pairs(params: &ParamSet, pairs: &[ImagePair]) -> Result<(MetricValue, Vec<MetricValue>)> {
    let images: Vec<_> = pairs.iter().map(|p| (&p.lq, &p.hq)).collect();
    evaluate_images(params, &images)
}

/// [`evaluate_pairs`] over bare `(lq, hq)` images.
pub fn evaluate_images(params: &ParamSet, images: &[(&Tensor, &Tensor)]) -> Result<(MetricValue, Vec<MetricValue>)> {
    let mut per = Vec::with_capacity(images.len());
    for (lq, hq) in images {
        let out = restore(params, lq)?.map(|v| v.clamp(0.0, 1.0));
        per.push(metrics::evaluate(&out, hq)?);
    }
    Ok((mean_metric(&per), per))
}

/// Mean PSNR/SSIM of the degraded inputs themselves.
pub fn input_metrics(pairs: &[ImagePair]) -> Result<MetricValue> {
    let per = pairs
        .iter()
        .map(|p| metrics::evaluate(&p.lq, &p.hq))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_metric(&per))
}

fn mean_metric(per: &[MetricValue]) -> MetricValue {
    let n = per.len().max(1) as f64;
    MetricValue {
        psnr: per.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: per.iter().map(|m| m.ssim).sum::<f64>() / n,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub iter: u64,
    pub rec_loss: f64,
    pub neg_loss: f64,
    pub total_loss: f64,
    pub per_negative: Vec<f64>,
    pub eval_psnr: Option<f64>,
    pub eval_ssim: Option<f64>,
    pub wall_ms: f64,
}

pub const CSV_HEADER: &str = "iter,rec_loss,neg_loss,total_loss,eval_psnr,eval_ssim,wall_ms";

/// Nine significant digits.
pub fn fmt_sig9(v: f64) -> String {
    format!("{v:.8e}")
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_sig9).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.iter,
            fmt_sig9(self.rec_loss),
            fmt_sig9(self.neg_loss),
            fmt_sig9(self.total_loss),
            opt(self.eval_psnr),
            opt(self.eval_ssim),
            fmt_sig9(self.wall_ms)
        )
    }
}

pub fn write_metrics_csv(mut w: impl Write, records: &[MetricsRecord]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Completed,
    Collapsed { iter: u64, what: &'static str, value: f64 },
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: ParamSet,
    pub records: Vec<MetricsRecord>,
    pub status: RunStatus,
    /// Degraded-input metrics on the eval split.
    pub input_metrics: MetricValue,
    /// Metrics of the last evaluation, if any ran.
    pub final_eval: Option<MetricValue>,
}

impl TrainReport {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    state: TrainState,
    embedding: EmbeddingNet,
    train: Vec<ImagePair>,
    eval: Vec<ImagePair>,
    sampler: BatchSampler,
    t: u64,
}

impl Trainer {
    /// Builds data, parameters and the negative bank. A `pretrained`
    /// parameter set takes precedence over `cfg.pretrained`.
    pub fn new(cfg: TrainConfig, pretrained: Option<ParamSet>) -> Result<Self> {
        cfg.validate()?;
        let pretrained = match (pretrained, &cfg.pretrained) {
            (Some(p), _) => Some(p),
            (None, Some(path)) if cfg.mode == NegativeMode::FixedPretrained => {
                Some(load_checkpoint(path)?.params)
            }
            _ => None,
        };
        let (train, eval) = split_dataset(make_dataset(&cfg.dataset)?);
        let params = init_params(&cfg.net, cfg.seed)?;
        let bank = NegativeBank::new(
            cfg.mode,
            &params,
            &cfg.effective_steps(),
            cfg.ema_w,
            cfg.seed.wrapping_add(1),
            pretrained.as_ref(),
        )?;
        let embedding = EmbeddingNet::new(cfg.embed)?;
        let sampler = BatchSampler::new(train.len(), cfg.seed);
        Ok(Trainer {
            state: TrainState {
                optimizer: Adam::new(cfg.lr, &params),
                params,
                bank,
            },
            cfg,
            embedding,
            train,
            eval,
            sampler,
            t: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.state.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.state.params
    }

    pub fn bank(&self) -> &NegativeBank {
        &self.state.bank
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn train_pairs(&self) -> &[ImagePair] {
        &self.train
    }

    pub fn eval_pairs(&self) -> &[ImagePair] {
        &self.eval
    }

    /// Advances one iteration on the next sampled batch.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let idx = self.sampler.next_batch(self.cfg.batch);
        let batch: Vec<&ImagePair> = idx.iter().map(|&i| &self.train[i]).collect();
        let t = self.t + 1;
        let out = train_step(&mut self.state, &self.embedding, &batch, &self.cfg, t)?;
        self.t = t;
        Ok(out)
    }

    pub fn evaluate(&self) -> Result<MetricValue> {
        Ok(evaluate_pairs(&self.state.params, &self.eval)?.0)
    }

    pub fn run(self) -> Result<TrainReport> {
        self.run_with(|_, _| {})
    }

    /// Runs to `total_iters` or collapse, calling `observe` after every
    /// logged iteration.
    pub fn run_with(mut self, mut observe: impl FnMut(&MetricsRecord, &Trainer)) -> Result<TrainReport> {
        let start = Instant::now();
        let input_metrics = input_metrics(&self.eval)?;
        let mut records = Vec::with_capacity(self.cfg.total_iters as usize);
        let mut final_eval = None;
        let mut status = RunStatus::Completed;
        while self.t < self.cfg.total_iters {
            let losses = match self.step() {
                Ok(l) => l,
                Err(Error::Collapse { iter, what, value }) => {
                    status = RunStatus::Collapsed { iter, what, value };
                    break;
                }
                Err(e) => return Err(e),
            };
            let t = self.t;
            let eval = if t.is_multiple_of(self.cfg.eval_every) || t == self.cfg.total_iters {
                let m = self.evaluate()?;
                final_eval = Some(m);
                Some(m)
            } else {
                None
            };
            let record = MetricsRecord {
                iter: t,
                rec_loss: losses.rec,
                neg_loss: losses.neg,
                total_loss: losses.total,
                per_negative: losses.per_negative,
                eval_psnr: eval.map(|m| m.psnr),
                eval_ssim: eval.map(|m| m.ssim),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            observe(&record, &self);
            records.push(record);
        }
        Ok(TrainReport {
            params: self.state.params,
            records,
            status,
            input_metrics,
            final_eval,
        })
    }
}

/// Trains from scratch under `cfg`.
pub fn fit(cfg: TrainConfig) -> Result<TrainReport> {
    Trainer::new(cfg, None)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            total_iters: 12,
            batch: 2,
            eval_every: 5,
            net: RestorationNetConfig {
                depth: 1,
                width: 4,
                ..Default::default()
            },
            dataset: DatasetSpec {
                count: 8,
                size: 32,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn first_step_has_zero_negative_loss() {
        let mut trainer = Trainer::new(tiny(), None).unwrap();
        let l = trainer.step().unwrap();
        assert_eq!(l.neg, 0.0);
        assert!(l.per_negative.iter().all(|&v| v == 0.0));
        assert_eq!(l.total, l.rec);
        let l = trainer.step().unwrap();
        assert!(l.neg > 0.0);
    }

    #[test]
    fn run_is_reproducible() {
        let a = fit(tiny()).unwrap();
        let b = fit(tiny()).unwrap();
        assert!(a.params.bits_eq(&b.params));
        assert_eq!(a.records.len(), 12);
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!((x.rec_loss, x.neg_loss, x.eval_psnr), (y.rec_loss, y.neg_loss, y.eval_psnr));
        }
        let evals: Vec<u64> = a.records.iter().filter(|r| r.eval_psnr.is_some()).map(|r| r.iter).collect();
        assert_eq!(evals, vec![5, 10, 12]);
    }

    #[test]
    fn nan_weight_collapses_at_first_iteration() {
        let mut trainer = Trainer::new(tiny(), None).unwrap();
        trainer.params_mut().tensors_mut().next().unwrap().data_mut()[0] = f64::NAN;
        let report = trainer.run().unwrap();
        assert!(matches!(report.status, RunStatus::Collapsed { iter: 1, .. }));
        assert!(report.records.is_empty());
    }

    #[test]
    fn default_step_schedule_scales() {
        assert_eq!(TrainConfig::default().effective_steps(), vec![25, 125, 250, 500]);
        let cfg = TrainConfig {
            scale_steps: false,
            steps: vec![500, 100, 100],
            ..Default::default()
        };
        assert_eq!(cfg.effective_steps(), vec![100, 500]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.ema_w = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.dataset.size = 24;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.embed.in_channels = 3;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::desk_sr2x().validate().is_ok());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn csv_formatting() {
        let r = MetricsRecord {
            iter: 3,
            rec_loss: 0.125,
            neg_loss: 1.0 / 3.0,
            total_loss: 0.1,
            per_negative: vec![],
            eval_psnr: None,
            eval_ssim: Some(0.5),
            wall_ms: 12.0,
        };
        assert_eq!(
            r.csv_row(),
            "3,1.25000000e-1,3.33333333e-1,1.00000000e-1,,5.00000000e-1,1.20000000e1"
        );
    }

    #[test]
    fn sampler_covers_every_index_per_epoch() {
        let mut s = BatchSampler::new(6, 1);
        let mut seen = s.next_batch(6);
        seen.sort_unstable();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }
}
