use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::spec::{gn_groups, BackboneSpec, Layer};
use crate::engine::{Array, Tape, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const GN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

/// How normalization layers behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics normalize; they are reported for the running update.
    Train,
    /// Running statistics normalize.
    Eval,
    /// Running statistics normalize; each batch-norm input additionally exposes
    /// its batch mean and variance as differentiable taps.
    Taps,
}

/// Differentiable batch statistics of one batch-norm layer's input.
#[derive(Clone, Copy, Debug)]
pub struct BnTap {
    pub mean: Var,
    pub var: Var,
}

/// Per-channel batch statistics (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Result of [`Model::forward`].
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// Parameter handles, aligned with [`Model::params`].
    pub params: Vec<Var>,
    /// Raw convolution outputs in tap order.
    pub conv_taps: Vec<Var>,
    /// Batch-norm input statistics in batch-norm order ([`Mode::Taps`] only).
    pub bn_taps: Vec<BnTap>,
    /// Batch statistics used for normalization ([`Mode::Train`] only).
    pub bn_batch_stats: Vec<BatchStats>,
}

#[derive(Clone, Debug)]
enum Unit {
    Conv {
        w: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        index: usize,
    },
    GroupNorm {
        gamma: usize,
        beta: usize,
        groups: usize,
    },
    Relu,
    AvgPool(usize),
    GlobalAvgPool,
    ChannelShuffle(usize),
    Flatten,
    Linear {
        w: usize,
        b: usize,
    },
    Residual {
        body: Vec<Unit>,
        shortcut: Vec<Unit>,
    },
}

/// Shape of a convolution tap's output for a single image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// A backbone with its parameters and batch-norm buffers.
#[derive(Clone, Debug)]
pub struct Model {
    spec: BackboneSpec,
    seed: u64,
    names: Vec<String>,
    params: Vec<Array>,
    running: Vec<RunningStats>,
    running_names: Vec<String>,
    units: Vec<Unit>,
    conv_shapes: Vec<TapShape>,
    pub epochs_trained: usize,
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Array>,
    running: Vec<RunningStats>,
    running_names: Vec<String>,
    conv_shapes: Vec<TapShape>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, value: Array) -> usize {
        self.names.push(name);
        self.params.push(value);
        self.params.len() - 1
    }

    fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Array {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Array::new(shape.to_vec(), data).expect("shape matches data")
    }

    /// Compiles `layers` starting from `shape = [c, h, w]` or `[features]`.
    fn compile(&mut self, layers: &[Layer], prefix: &str, mut shape: Vec<usize>) -> (Vec<Unit>, Vec<usize>) {
        let mut units = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let path = if prefix.is_empty() {
                i.to_string()
            } else {
                format!("{prefix}.{i}")
            };
            let unit = match layer {
                Layer::Conv {
                    out,
                    k,
                    stride,
                    pad,
                    groups,
                } => {
                    let c = shape[0];
                    let w = self.kaiming(&[*out, c / groups, *k, *k], (c / groups) * k * k);
                    let w = self.add(format!("{path}.weight"), w);
                    let h = (shape[1] + 2 * pad - k) / stride + 1;
                    let wd = (shape[2] + 2 * pad - k) / stride + 1;
                    shape = vec![*out, h, wd];
                    self.conv_shapes.push(TapShape {
                        channels: *out,
                        height: h,
                        width: wd,
                    });
                    Unit::Conv {
                        w,
                        stride: *stride,
                        pad: *pad,
                        groups: *groups,
                    }
                }
                Layer::BatchNorm => {
                    let c = shape[0];
                    let gamma = self.add(format!("{path}.gamma"), Array::full(&[c], 1.0));
                    let beta = self.add(format!("{path}.beta"), Array::zeros(&[c]));
                    self.running.push(RunningStats {
                        mean: vec![0.0; c],
                        var: vec![1.0; c],
                    });
                    self.running_names.push(path.clone());
                    Unit::BatchNorm {
                        gamma,
                        beta,
                        index: self.running.len() - 1,
                    }
                }
                Layer::GroupNorm => {
                    let c = shape[0];
                    let gamma = self.add(format!("{path}.gamma"), Array::full(&[c], 1.0));
                    let beta = self.add(format!("{path}.beta"), Array::zeros(&[c]));
                    Unit::GroupNorm {
                        gamma,
                        beta,
                        groups: gn_groups(c),
                    }
                }
                Layer::Relu => Unit::Relu,
                Layer::AvgPool { k } => {
                    shape = vec![shape[0], shape[1] / k, shape[2] / k];
                    Unit::AvgPool(*k)
                }
                Layer::GlobalAvgPool => {
                    shape = vec![shape[0]];
                    Unit::GlobalAvgPool
                }
                Layer::ChannelShuffle { groups } => Unit::ChannelShuffle(*groups),
                Layer::Flatten => {
                    shape = vec![shape.iter().product()];
                    Unit::Flatten
                }
                Layer::Linear => unreachable!("classifier head compiled by Model::build"),
                Layer::Residual { body, shortcut } => {
                    let (body, out) = self.compile(body, &format!("{path}.body"), shape.clone());
                    let (shortcut, _) = self.compile(shortcut, &format!("{path}.shortcut"), shape.clone());
                    shape = out;
                    Unit::Residual { body, shortcut }
                }
            };
            units.push(unit);
        }
        (units, shape)
    }
}

impl Model {
    /// Builds a freshly initialized model; identical `(spec, seed)` give
    /// bitwise-identical parameters.
    pub fn build(spec: &BackboneSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            rng: &mut rng,
            names: Vec::new(),
            params: Vec::new(),
            running: Vec::new(),
            running_names: Vec::new(),
            conv_shapes: Vec::new(),
        };
        let n = spec.layers.len();
        let (mut units, shape) = b.compile(&spec.layers[..n - 1], "", spec.input.to_vec());
        let features = shape[0];
        let w = b.kaiming(&[spec.classes, features], features);
        let w = b.add(format!("{}.weight", n - 1), w);
        let bias = b.add(format!("{}.bias", n - 1), Array::zeros(&[spec.classes]));
        units.push(Unit::Linear { w, b: bias });
        Ok(Model {
            spec: spec.clone(),
            seed,
            names: b.names,
            params: b.params,
            running: b.running,
            running_names: b.running_names,
            units,
            conv_shapes: b.conv_shapes,
            epochs_trained: 0,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn params(&self) -> &[Array] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Array::len).sum()
    }

    pub fn running(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    /// Layer paths of the batch-norm layers, in batch-norm order.
    pub fn bn_names(&self) -> &[String] {
        &self.running_names
    }

    pub fn bn_count(&self) -> usize {
        self.running.len()
    }

    pub fn conv_count(&self) -> usize {
        self.conv_shapes.len()
    }

    /// Per-image output shape of each convolution tap.
    pub fn conv_shapes(&self) -> &[TapShape] {
        &self.conv_shapes
    }

    /// Channel count of each batch-norm layer.
    pub fn bn_channels(&self) -> Vec<usize> {
        self.running.iter().map(|r| r.mean.len()).collect()
    }

    /// Blends batch statistics into the running statistics:
    /// `running = (1 − momentum)·running + momentum·batch`.
    pub fn update_running(&mut self, stats: &[BatchStats], momentum: f64) {
        assert_eq!(stats.len(), self.running.len());
        for (r, s) in self.running.iter_mut().zip(stats) {
            for (rm, bm) in r.mean.iter_mut().zip(&s.mean) {
                *rm = (1.0 - momentum) * *rm + momentum * bm;
            }
            for (rv, bv) in r.var.iter_mut().zip(&s.var) {
                *rv = (1.0 - momentum) * *rv + momentum * bv;
            }
        }
    }

    /// Records the forward pass of `x: [B, C, H, W]` on `tape`.
    ///
    /// With `trainable`, parameters enter the tape as gradient-requiring leaves;
    /// otherwise as constants.
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode, trainable: bool) -> Result<Forward> {
        let s = tape.value(x).shape();
        if s.len() != 4 || s[1..] != self.spec.input {
            return Err(Error::shape(
                "forward",
                format!("{} expects [B, {:?}], got {s:?}", self.spec.name, self.spec.input),
            ));
        }
        if s[0] == 0 {
            return Err(Error::shape("forward", "empty batch"));
        }
        let params = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        let mut out = Forward {
            logits: x,
            params,
            conv_taps: Vec::with_capacity(self.conv_count()),
            bn_taps: Vec::new(),
            bn_batch_stats: Vec::new(),
        };
        out.logits = self.run(tape, &self.units, x, mode, &mut out)?;
        Ok(out)
    }

    fn run(&self, tape: &mut Tape, units: &[Unit], mut h: Var, mode: Mode, out: &mut Forward) -> Result<Var> {
        for unit in units {
            h = match unit {
                Unit::Conv { w, stride, pad, groups } => {
                    let y = tape.conv2d(h, out.params[*w], *stride, *pad, *groups)?;
                    out.conv_taps.push(y);
                    y
                }
                Unit::BatchNorm { gamma, beta, index } => {
                    let (g, b) = (out.params[*gamma], out.params[*beta]);
                    match mode {
                        Mode::Train => {
                            let (y, mean, var) = tape.batch_norm_train(h, g, b, BN_EPS)?;
                            out.bn_batch_stats.push(BatchStats { mean, var });
                            y
                        }
                        Mode::Eval | Mode::Taps => {
                            if mode == Mode::Taps {
                                let mean = tape.mean_axes(h, &[0, 2, 3])?;
                                let var = tape.var_axes(h, &[0, 2, 3])?;
                                out.bn_taps.push(BnTap { mean, var });
                            }
                            let r = &self.running[*index];
                            tape.batch_norm_eval(h, g, b, &r.mean, &r.var, BN_EPS)?
                        }
                    }
                }
                Unit::GroupNorm { gamma, beta, groups } => {
                    tape.group_norm(h, out.params[*gamma], out.params[*beta], *groups, GN_EPS)?
                }
                Unit::Relu => tape.relu(h),
                Unit::AvgPool(k) => tape.avg_pool2d(h, *k)?,
                Unit::GlobalAvgPool => tape.global_avg_pool(h)?,
                Unit::ChannelShuffle(g) => tape.channel_shuffle(h, *g)?,
                Unit::Flatten => tape.flatten(h)?,
                Unit::Linear { w, b } => tape.linear(h, out.params[*w], out.params[*b])?,
                Unit::Residual { body, shortcut } => {
                    let a = self.run(tape, body, h, mode, out)?;
                    let s = self.run(tape, shortcut, h, mode, out)?;
                    tape.add(a, s)?
                }
            };
        }
        Ok(h)
    }

    /// Eval-mode logits `[N, classes]` for `images: [N, C, H, W]`, computed in
    /// independent chunks of `batch` images.
    pub fn predict(&self, images: &Array, batch: usize) -> Result<Array> {
        let n = images.shape().first().copied().unwrap_or(0);
        let batch = batch.max(1);
        let starts: Vec<usize> = (0..n).step_by(batch).collect();
        let chunks: Vec<Result<Vec<f64>>> = starts
            .par_iter()
            .map(|&s| {
                let mut tape = Tape::new();
                let x = tape.constant(images.slice_rows(s, (s + batch).min(n)));
                let f = self.forward(&mut tape, x, Mode::Eval, false)?;
                Ok(tape.value(f.logits).data().to_vec())
            })
            .collect();
        let mut data = Vec::with_capacity(n * self.classes());
        for c in chunks {
            data.extend(c?);
        }
        Array::new(vec![n, self.classes()], data)
    }

    /// Fraction of `images` whose eval-mode argmax equals the label.
    pub fn accuracy(&self, images: &Array, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("accuracy of an empty set".into()));
        }
        let logits = self.predict(images, 256)?;
        let hits = labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| argmax(logits.row(i)) == y)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }

    pub(crate) fn set_state(&mut self, params: Vec<Array>, running: Vec<RunningStats>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
            || running.len() != self.running.len()
            || running
                .iter()
                .zip(&self.running)
                .any(|(a, b)| a.mean.len() != b.mean.len() || a.var.len() != b.var.len())
        {
            return Err(Error::Mismatch(format!(
                "stored tensors do not fit backbone {}",
                self.spec.name
            )));
        }
        self.params = params;
        self.running = running;
        Ok(())
    }
}

/// Index of the largest entry (first on ties).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
