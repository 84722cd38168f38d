//! Encoder–decoder network with skip concatenations.
//!
//! Encoder block: conv → sigmoid → batch norm, then 2×2 max pooling.
//! Decoder block: ×2 nearest upsampling and a conv, concatenation with the
//! matching encoder features, then conv → sigmoid → batch norm. A final conv
//! with linear activation produces the six output channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::network::config::UNetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv { name: String, cin: usize, cout: usize },
    Norm { name: String, channels: usize },
}

/// Layers in the order the forward pass consumes them.
fn layers(cfg: &UNetConfig) -> Vec<Layer> {
    let conv = |name: String, cin, cout| Layer::Conv { name, cin, cout };
    let norm = |name: String, channels| Layer::Norm { name, channels };
    let mut out = Vec::new();
    let mut cin = cfg.in_channels();
    for i in 0..cfg.depth {
        out.push(conv(format!("enc{i}.conv"), cin, cfg.channels(i)));
        out.push(norm(format!("enc{i}.bn"), cfg.channels(i)));
        cin = cfg.channels(i);
    }
    out.push(conv("bottom.conv".into(), cin, cfg.channels(cfg.depth)));
    out.push(norm("bottom.bn".into(), cfg.channels(cfg.depth)));
    for i in (0..cfg.depth).rev() {
        let c = cfg.channels(i);
        out.push(conv(format!("dec{i}.up"), cfg.channels(i + 1), c));
        out.push(conv(format!("dec{i}.conv"), 2 * c, c));
        out.push(norm(format!("dec{i}.bn"), c));
    }
    out.push(conv("head.conv".into(), cfg.channels(0), cfg.out_channels()));
    out
}

/// Extra factor on the output layer's init range, so that an untrained
/// network starts close to all-zero maps instead of large negative R2*.
pub const HEAD_INIT_GAIN: f64 = 0.01;

/// Trainable tensors plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights {
    pub config: UNetConfig,
    /// Conv weight and bias, then batch-norm scale and shift, per layer.
    pub params: Vec<(String, Tensor)>,
    /// Running mean and variance per batch-norm layer.
    pub buffers: Vec<(String, Tensor)>,
}

impl NetworkWeights {
    /// Conv weights uniform in `±sqrt(6 / (fan_in + fan_out))`, zero biases,
    /// unit batch-norm scale. The output layer range is scaled by
    /// [`HEAD_INIT_GAIN`].
    pub fn init(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel;
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for layer in layers(config) {
            match layer {
                Layer::Conv { name, cin, cout } => {
                    let gain = if name == "head.conv" { HEAD_INIT_GAIN } else { 1.0 };
                    let limit = gain * (6.0 / ((cin + cout) * k * k) as f64).sqrt();
                    let shape = [cout, cin, k, k];
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
                    params.push((format!("{name}.weight"), Tensor::new(shape.to_vec(), data)?));
                    params.push((format!("{name}.bias"), Tensor::zeros(&[cout])));
                }
                Layer::Norm { name, channels } => {
                    params.push((format!("{name}.gamma"), Tensor::full(&[channels], 1.0)));
                    params.push((format!("{name}.beta"), Tensor::zeros(&[channels])));
                    buffers.push((format!("{name}.running_mean"), Tensor::zeros(&[channels])));
                    buffers.push((format!("{name}.running_var"), Tensor::full(&[channels], 1.0)));
                }
            }
        }
        Ok(Self { config: config.clone(), params, buffers })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks that tensor names and shapes match what `config` requires.
    pub fn check_layout(&self) -> Result<()> {
        let expected = Self::init(&self.config, 0)?;
        let same = |a: &[(String, Tensor)], b: &[(String, Tensor)]| {
            a.len() == b.len() && a.iter().zip(b).all(|((na, ta), (nb, tb))| na == nb && ta.shape == tb.shape)
        };
        if !same(&self.params, &expected.params) || !same(&self.buffers, &expected.buffers) {
            return Err(Error::Config("weights do not match the network configuration".into()));
        }
        Ok(())
    }

    /// Records every trainable tensor as a leaf.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| {
                let mut t = t.clone();
                t.requires_grad = trainable;
                t.grad = None;
                tape.leaf(t)
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Network output `[batch, 6, h, w]` for input `[batch, 2N, h, w]`.
    /// `vars` must come from [`NetworkWeights::record`] on the same tape.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, vars: &[Var], mode: ForwardMode) -> Result<Var> {
        let [_, c, h, w] = tape.value(x).dims4()?;
        if c != self.config.in_channels() {
            return Err(Error::Geometry(format!("input has {c} channels, network expects {}", self.config.in_channels())));
        }
        self.config.check_input(h, w)?;
        if vars.len() != self.params.len() {
            return Err(Error::InvalidInput("parameter handles do not match the weights".into()));
        }
        let mut cursor = Cursor { vars, next: 0, norm: 0 };
        let buffers = &mut self.buffers;
        let mut block = |tape: &mut Tape, cur: &mut Cursor, input: Var| -> Result<Var> {
            let (wv, bv) = cur.conv();
            let y = tape.conv2d(input, wv, bv)?;
            let y = tape.sigmoid(y);
            let (g, b, idx) = cur.norm();
            let (mean, var) = buffers.split_at_mut(2 * idx + 1);
            let (mean, var) = (&mut mean[2 * idx].1, &mut var[0].1);
            match mode {
                ForwardMode::Train => tape.batch_norm_train(y, g, b, mean, var),
                ForwardMode::Eval => tape.batch_norm_eval(y, g, b, mean, var),
            }
        };

        let mut skips = Vec::with_capacity(self.config.depth);
        let mut y = x;
        for _ in 0..self.config.depth {
            let feat = block(tape, &mut cursor, y)?;
            skips.push(feat);
            y = tape.max_pool2(feat)?;
        }
        y = block(tape, &mut cursor, y)?;
        while let Some(skip) = skips.pop() {
            let up = tape.upsample2(y)?;
            let (wv, bv) = cursor.conv();
            let up = tape.conv2d(up, wv, bv)?;
            let cat = tape.concat(up, skip)?;
            y = block(tape, &mut cursor, cat)?;
        }
        let (wv, bv) = cursor.conv();
        tape.conv2d(y, wv, bv)
    }
}

struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
    norm: usize,
}

impl Cursor<'_> {
    fn conv(&mut self) -> (Var, Var) {
        let out = (self.vars[self.next], self.vars[self.next + 1]);
        self.next += 2;
        out
    }

    fn norm(&mut self) -> (Var, Var, usize) {
        let out = (self.vars[self.next], self.vars[self.next + 1], self.norm);
        self.next += 2;
        self.norm += 1;
        out
    }
}
