//! Restoration network, frozen embedding network and parameter sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, Result};
use crate::tensor::{Shape, Tape, Tensor, TensorError, Var};

/// Ordered, uniquely named parameter tensors of one architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    arch_id: String,
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(arch_id: impl Into<String>, entries: Vec<(String, Tensor)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(other, _)| other == name) {
                return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
            }
        }
        Ok(ParamSet {
            arch_id: arch_id.into(),
            entries,
        })
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }

    pub fn has_any_grad(&self) -> bool {
        self.tensors().any(|t| t.grad().is_some())
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        self.arch_id == other.arch_id
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.bits_eq(b))
    }

    /// ‖a − b‖∞ over all parameters.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        self.check_compatible(other)?;
        let mut worst = 0.0f64;
        for (a, b) in self.tensors().zip(other.tensors()) {
            worst = worst.max(a.max_abs_diff(b)?);
        }
        Ok(worst)
    }

    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.arch_id != other.arch_id {
            return Err(Error::Contract(format!(
                "architecture mismatch: `{}` vs `{}`",
                self.arch_id, other.arch_id
            )));
        }
        Ok(())
    }

    /// Puts every tensor on the tape as a leaf, in order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.tensors()
            .map(|t| tape.leaf(t.clone().with_requires_grad(requires_grad)))
            .collect()
    }
}

/// Elementwise `wa·a + wb·b`. A zero weight drops its operand entirely so
/// that `(1, 0)` and `(0, 1)` return exact copies.
pub fn combine(a: &ParamSet, b: &ParamSet, wa: f64, wb: f64) -> Result<ParamSet> {
    a.check_compatible(b)?;
    let mut entries = Vec::with_capacity(a.len());
    for ((name, ta), (nb, tb)) in a.entries.iter().zip(&b.entries) {
        if name != nb || ta.shape() != tb.shape() {
            return Err(Error::Contract(format!(
                "parameter layout mismatch at `{name}` / `{nb}`"
            )));
        }
        let data = if wb == 0.0 {
            ta.data().iter().map(|x| wa * x).collect()
        } else if wa == 0.0 {
            tb.data().iter().map(|y| wb * y).collect()
        } else {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| wa * x + wb * y)
                .collect()
        };
        entries.push((name.clone(), Tensor::from_vec(ta.shape(), data)?));
    }
    Ok(ParamSet {
        arch_id: a.arch_id.clone(),
        entries,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RestorationNetConfig {
    /// Residual conv blocks.
    pub depth: usize,
    pub width: usize,
    pub kernel: usize,
    pub in_channels: usize,
}

impl Default for RestorationNetConfig {
    fn default() -> Self {
        RestorationNetConfig {
            depth: 4,
            width: 16,
            kernel: 3,
            in_channels: 1,
        }
    }
}

impl RestorationNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.in_channels == 0 {
            return Err(config_err("net depth, width and in_channels must be positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(config_err(format!("net kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    pub fn arch_id(&self) -> String {
        format!(
            "restore-d{}-w{}-k{}-c{}",
            self.depth, self.width, self.kernel, self.in_channels
        )
    }

    /// Recovers the configuration from a parameter layout.
    pub fn from_params(params: &ParamSet) -> Result<Self> {
        let n = params.len();
        if n < 6 || !n.is_multiple_of(4) {
            return Err(Error::Contract(format!(
                "parameter set with {n} entries is not a restoration net"
            )));
        }
        let head = params.entries[0].1.shape();
        let cfg = RestorationNetConfig {
            depth: (n - 4) / 4,
            width: head.n,
            kernel: head.h,
            in_channels: head.c,
        };
        if cfg.arch_id() != params.arch_id {
            return Err(Error::Contract(format!(
                "parameter layout does not match arch id `{}`",
                params.arch_id
            )));
        }
        Ok(cfg)
    }

    fn layers(&self) -> Vec<(String, usize, usize)> {
        let mut layers = vec![("head".to_string(), self.in_channels, self.width)];
        for i in 0..self.depth {
            layers.push((format!("block{i}.conv1"), self.width, self.width));
            layers.push((format!("block{i}.conv2"), self.width, self.width));
        }
        layers.push(("tail".to_string(), self.width, self.in_channels));
        layers
    }
}

fn conv_entries(
    layers: &[(String, usize, usize)],
    kernel: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(String, Tensor)> {
    let mut entries = Vec::with_capacity(layers.len() * 2);
    for (name, c_in, c_out) in layers {
        let fan_in = c_in * kernel * kernel;
        let bound = (3.0 / fan_in as f64).sqrt();
        let shape = Shape::new(*c_out, *c_in, kernel, kernel);
        let data = (0..shape.len())
            .map(|_| (2.0 * rng.gen::<f64>() - 1.0) * bound)
            .collect();
        entries.push((format!("{name}.weight"), Tensor::from_vec(shape, data).unwrap()));
        entries.push((
            format!("{name}.bias"),
            Tensor::zeros(Shape::new(1, *c_out, 1, 1)),
        ));
    }
    entries
}

/// Seeded uniform(±√(3/fan_in)) weights, zero biases.
pub fn init_params(config: &RestorationNetConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = conv_entries(&config.layers(), config.kernel, &mut rng);
    ParamSet::new(config.arch_id(), entries)
}

/// `I_rec = I_lq + Δ(I_lq)` on the tape. `params` are the bound tensors of
/// a restoration [`ParamSet`] in layout order.
pub fn forward_restore(tape: &mut Tape, params: &[Var], input: Var) -> Result<Var> {
    if params.len() < 6 || !params.len().is_multiple_of(4) {
        return Err(Error::Contract(format!(
            "{} bound tensors do not form a restoration net",
            params.len()
        )));
    }
    let k = tape.value(params[0]).shape().h;
    let s = tape.value(input).shape();
    if s.h < k || s.w < k {
        let (axis, found) = if s.h < k { ("h", s.h) } else { ("w", s.w) };
        return Err(TensorError::Dimension {
            op: "forward_restore",
            axis,
            expected: k,
            found,
        }
        .into());
    }
    let pad = k / 2;
    let convs: Vec<(Var, Var)> = params.chunks(2).map(|p| (p[0], p[1])).collect();
    let (head, rest) = convs.split_first().unwrap();
    let (tail, blocks) = rest.split_last().unwrap();

    let mut h = tape.conv2d(input, head.0, head.1, 1, pad)?;
    for pair in blocks.chunks(2) {
        let a = tape.conv2d(h, pair[0].0, pair[0].1, 1, pad)?;
        let a = tape.relu(a);
        let b = tape.conv2d(a, pair[1].0, pair[1].1, 1, pad)?;
        h = tape.add(h, b)?;
    }
    let h = tape.relu(h);
    let delta = tape.conv2d(h, tail.0, tail.1, 1, pad)?;
    Ok(tape.add(input, delta)?)
}

/// Detached inference: no tape recording, no gradients.
pub fn restore(params: &ParamSet, input: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let x = tape.constant(input.clone());
    let y = forward_restore(&mut tape, &vars, x)?;
    Ok(tape.take(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingNetConfig {
    /// Feature stages whose outputs enter the loss.
    pub taps: usize,
    pub width: usize,
    pub seed: u64,
    pub in_channels: usize,
}

impl Default for EmbeddingNetConfig {
    fn default() -> Self {
        EmbeddingNetConfig {
            taps: 3,
            width: 8,
            seed: 7,
            in_channels: 1,
        }
    }
}

impl EmbeddingNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taps == 0 || self.width == 0 || self.in_channels == 0 {
            return Err(config_err("embed taps, width and in_channels must be positive"));
        }
        Ok(())
    }

    /// Receptive field (pixels) of one unit of the last tap.
    pub fn receptive_field(&self) -> usize {
        // each stage: 3×3 stride-1 conv then 3×3 stride-2 conv
        let (mut rf, mut jump) = (1, 1);
        for _ in 0..self.taps {
            rf += 2 * jump;
            rf += 2 * jump;
            jump *= 2;
        }
        rf
    }
}

/// Fixed, seed-initialized multi-scale feature extractor. Its weights never
/// receive gradients; gradients flow through it into the image.
#[derive(Clone, Debug)]
pub struct EmbeddingNet {
    config: EmbeddingNetConfig,
    params: ParamSet,
}

const EMBED_KERNEL: usize = 3;

impl EmbeddingNet {
    pub fn new(config: EmbeddingNetConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut c_in = config.in_channels;
        for i in 0..config.taps {
            layers.push((format!("stage{i}.conv"), c_in, config.width));
            layers.push((format!("stage{i}.down"), config.width, config.width));
            c_in = config.width;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let entries = conv_entries(&layers, EMBED_KERNEL, &mut rng);
        let arch = format!(
            "embed-t{}-w{}-c{}-s{}",
            config.taps, config.width, config.in_channels, config.seed
        );
        Ok(EmbeddingNet {
            config,
            params: ParamSet::new(arch, entries)?,
        })
    }

    pub fn config(&self) -> &EmbeddingNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Binds the frozen weights as constants.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.bind(tape, false)
    }

    pub fn embed(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        let vars = self.bind(tape);
        embed_with(tape, &self.config, &vars, image)
    }
}

/// Feature stack: per stage `conv → relu → stride-2 conv`; each stage's
/// stride-2 output is a tap and its rectified copy feeds the next stage.
pub fn embed_with(
    tape: &mut Tape,
    config: &EmbeddingNetConfig,
    params: &[Var],
    image: Var,
) -> Result<Vec<Var>> {
    let s = tape.value(image).shape();
    if s.c != config.in_channels {
        return Err(TensorError::Dimension {
            op: "embed",
            axis: "c",
            expected: config.in_channels,
            found: s.c,
        }
        .into());
    }
    let rf = config.receptive_field();
    if s.h < rf || s.w < rf {
        let (axis, found) = if s.h < rf { ("h", s.h) } else { ("w", s.w) };
        return Err(TensorError::Dimension {
            op: "embed",
            axis,
            expected: rf,
            found,
        }
        .into());
    }
    let pad = EMBED_KERNEL / 2;
    let mut taps = Vec::with_capacity(config.taps);
    let mut x = image;
    for stage in params.chunks(4).take(config.taps) {
        let a = tape.conv2d(x, stage[0], stage[1], 1, pad)?;
        let a = tape.relu(a);
        let f = tape.conv2d(a, stage[2], stage[3], 2, pad)?;
        taps.push(f);
        x = tape.relu(f);
    }
    Ok(taps)
}
