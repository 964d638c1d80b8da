#![allow(dead_code)]

use mclab::degrade::{make_dataset, DatasetSpec, ImagePair};
use mclab::loss::{negative_loss, reconstruction_loss, total_loss, LossKind};
use mclab::nets::{forward_restore, init_params, restore, EmbeddingNet, EmbeddingNetConfig, ParamSet, RestorationNetConfig};
use mclab::train::TrainConfig;
use mclab::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small fast run: 1-block net, 32 px images.
pub fn tiny_cfg(total_iters: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk_sr2x();
    cfg.total_iters = total_iters;
    cfg.batch = 2;
    cfg.eval_every = 50;
    cfg.net.depth = 1;
    cfg.net.width = 4;
    cfg.dataset.count = 12;
    cfg
}

/// Fixture for gradient checks: a depth-2/width-4 net with jittered
/// biases, one SR pair and two negatives from unrelated nets.
pub struct GradFixture {
    pub net: ParamSet,
    pub embedding: EmbeddingNet,
    pub lq: Tensor,
    pub hq: Tensor,
    pub negatives: Vec<Tensor>,
    pub lambda: f64,
    pub kind: LossKind,
}

impl GradFixture {
    pub fn new(lambda: f64, kind: LossKind) -> Self {
        let cfg = RestorationNetConfig { depth: 2, width: 4, ..Default::default() };
        let mut net = init_params(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (name, t) in net.clone().entries() {
            if name.ends_with(".bias") {
                for v in net.get_mut(name).unwrap().data_mut() {
                    *v = rng.gen_range(-0.05..0.05);
                }
            }
            let _ = t;
        }
        let pair: ImagePair = make_dataset(&DatasetSpec { count: 1, size: 32, ..Default::default() })
            .unwrap()
            .remove(0);
        let negatives = [12, 13]
            .iter()
            .map(|&s| restore(&init_params(&cfg, s).unwrap(), &pair.lq).unwrap())
            .collect();
        GradFixture {
            net,
            embedding: EmbeddingNet::new(EmbeddingNetConfig::default()).unwrap(),
            lq: pair.lq,
            hq: pair.hq,
            negatives,
            lambda,
            kind,
        }
    }

    /// Total loss and, when `grad` is set, gradients for the net and the
    /// embedding parameters (in entry order).
    pub fn eval(&self, net: &ParamSet, emb: &ParamSet, grad: bool) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let nv = net.bind(&mut tape, grad);
        let ev = emb.bind(&mut tape, grad);
        let x = tape.constant(self.lq.clone());
        let y = tape.constant(self.hq.clone());
        let negs: Vec<_> = self.negatives.iter().map(|n| tape.constant(n.clone())).collect();
        let rec = forward_restore(&mut tape, &nv, x).unwrap();
        let rl = reconstruction_loss(&mut tape, rec, y, self.kind).unwrap();
        let (nl, _) = negative_loss(&mut tape, &self.embedding, &ev, rec, &negs).unwrap();
        let tl = total_loss(&mut tape, rl, nl, self.lambda).unwrap();
        let value = tape.item(tl);
        if !grad {
            return (value, vec![], vec![]);
        }
        tape.backward(tl).unwrap();
        let collect = |vars: &[mclab::Var], tape: &Tape| -> Vec<Vec<f64>> {
            vars.iter()
                .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
                .collect()
        };
        (value, collect(&nv, &tape), collect(&ev, &tape))
    }
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// `|a − n| / max(|a|, |n|)`, with differences below `floor` treated as 0.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    let d = (a - n).abs();
    if d <= floor {
        0.0
    } else {
        d / a.abs().max(n.abs())
    }
}

/// Central differences with step `h` against the analytic gradient of
/// every parameter of both networks.
pub fn gradient_check(fx: &GradFixture, h: f64, floor: f64) -> GradReport {
    let emb = fx.embedding.params().clone();
    let (_, g_net, g_emb) = fx.eval(&fx.net, &emb, true);
    let mut report = GradReport::default();
    let mut probe = |which: &str, base: &ParamSet, grads: &[Vec<f64>], net_side: bool| {
        let mut p = base.clone();
        let names: Vec<String> = base.entries().iter().map(|(n, _)| n.clone()).collect();
        for (ti, name) in names.iter().enumerate() {
            for i in 0..base.entries()[ti].1.len() {
                let orig = base.entries()[ti].1.data()[i];
                p.get_mut(name).unwrap().data_mut()[i] = orig + h;
                let plus = if net_side { fx.eval(&p, &emb, false).0 } else { fx.eval(&fx.net, &p, false).0 };
                p.get_mut(name).unwrap().data_mut()[i] = orig - h;
                let minus = if net_side { fx.eval(&p, &emb, false).0 } else { fx.eval(&fx.net, &p, false).0 };
                p.get_mut(name).unwrap().data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let e = rel_err(grads[ti][i], numeric, floor);
                report.checked += 1;
                if e > report.max_rel {
                    report.max_rel = e;
                    report.worst = format!("{which}:{name}[{i}] analytic {:e} numeric {numeric:e}", grads[ti][i]);
                }
            }
        }
    };
    probe("net", &fx.net, &g_net, true);
    probe("embed", &emb, &g_emb, false);
    report
}
