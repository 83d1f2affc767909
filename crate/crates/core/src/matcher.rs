//! Disparity estimators.
//!
//! `Direct` keeps one latent field per training sample and view and ignores
//! the images; it isolates the losses and renderer from learning dynamics
//! and cannot generalize across samples. `TinyNet` is a small shared-weight
//! cost-volume network: two conv layers of features per view, a
//! correlation volume over `0..=max_disparity` of features squashed to
//! `(-1, 1)`, two aggregation layers shared across disparity planes (added
//! back to the raw correlation), a horizontal context term that mixes in the
//! blurred scores of pixels up to 12 columns away on either side, and a
//! soft-argmin readout. Both produce disparities in `[0, max_disparity]`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Gradients, Shape, Tape, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Direct,
    TinyNet,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Direct => "direct",
            EstimatorKind::TinyNet => "tinynet",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(EstimatorKind::Direct),
            "tinynet" => Ok(EstimatorKind::TinyNet),
            other => Err(Error::invalid(format!(
                "unknown estimator {other:?}; expected direct or tinynet"
            ))),
        }
    }
}

/// Which real view a disparity field is aligned with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum View {
    Left,
    Right,
}

/// Where an estimate lives, for estimators that store per-sample state.
/// `x0, y0` locate the input window inside the full sample image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FieldKey {
    pub sample: usize,
    pub view: View,
    pub x0: usize,
    pub y0: usize,
}

impl FieldKey {
    pub fn new(sample: usize, view: View) -> Self {
        FieldKey {
            sample,
            view,
            x0: 0,
            y0: 0,
        }
    }

    pub fn at(self, x0: usize, y0: usize) -> Self {
        FieldKey { x0, y0, ..self }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Array,
}

/// Estimator weights with their layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorParams {
    pub kind: EstimatorKind,
    pub max_disparity: usize,
    /// Soft-argmin temperature.
    pub tau: f64,
    /// Image channels the network consumes (`TinyNet`).
    pub in_channels: usize,
    /// Feature channels (`TinyNet`).
    pub features: usize,
    /// Hidden channels per disparity plane in aggregation (`TinyNet`).
    pub agg_hidden: usize,
    pub tensors: Vec<NamedTensor>,
}

const LEAK: f64 = 0.1;

/// Column offsets of the blurred score volume mixed into each pixel, one
/// learned weight per offset (initially 0).
const CONTEXT_SHIFTS: [i64; 8] = [-12, -8, -4, -2, 2, 4, 8, 12];

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, fan_in: usize) -> Array {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array::from_fn(shape, |_, _, _| rng.gen_range(-bound..bound)).expect("finite init")
}

impl EstimatorParams {
    /// Direct fields for `samples` samples of `width x height`, latent 0
    /// (disparity `max_disparity / 2`).
    pub fn direct(samples: usize, width: usize, height: usize, max_disparity: usize) -> Result<Self> {
        if samples == 0 || max_disparity == 0 || width <= max_disparity {
            return Err(Error::invalid(format!(
                "direct estimator needs samples > 0 and width {width} > max disparity {max_disparity} > 0"
            )));
        }
        let mut tensors = Vec::with_capacity(2 * samples);
        for i in 0..samples {
            for view in ["left", "right"] {
                tensors.push(NamedTensor {
                    name: format!("latent.{i}.{view}"),
                    value: Array::zeros(Shape::plane(height, width)),
                });
            }
        }
        Ok(EstimatorParams {
            kind: EstimatorKind::Direct,
            max_disparity,
            tau: 1.0,
            in_channels: 0,
            features: 0,
            agg_hidden: 0,
            tensors,
        })
    }

    /// Network with default widths and weights uniform in
    /// `+-1/sqrt(fan_in)` drawn from `seed`.
    pub fn tinynet(in_channels: usize, max_disparity: usize, seed: u64) -> Result<Self> {
        Self::tinynet_with(in_channels, max_disparity, 4, 2, 0.03, seed)
    }

    pub fn tinynet_with(
        in_channels: usize,
        max_disparity: usize,
        features: usize,
        agg_hidden: usize,
        tau: f64,
        seed: u64,
    ) -> Result<Self> {
        if in_channels == 0 || max_disparity == 0 || features == 0 || agg_hidden == 0 || !(tau > 0.0) {
            return Err(Error::invalid("tinynet sizes and temperature must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, f, a) = (in_channels, features, agg_hidden);
        let mut tensors = Vec::new();
        let mut push = |name: &str, shape: Shape, fan_in: usize, rng: &mut ChaCha8Rng| {
            tensors.push(NamedTensor {
                name: name.into(),
                value: uniform(rng, shape, fan_in),
            });
        };
        push("feat1.weight", Shape::new(f * c, 3, 3), 9 * c, &mut rng);
        push("feat1.bias", Shape::new(f, 1, 1), 9 * c, &mut rng);
        push("feat2.weight", Shape::new(f * f, 3, 3), 9 * f, &mut rng);
        push("feat2.bias", Shape::new(f, 1, 1), 9 * f, &mut rng);
        push("agg1.weight", Shape::new(a, 3, 3), 9, &mut rng);
        push("agg2.weight", Shape::new(a, 3, 3), 9 * a, &mut rng);
        for i in 0..CONTEXT_SHIFTS.len() {
            tensors.push(NamedTensor {
                name: format!("context.{i}"),
                value: Array::zeros(Shape::SCALAR),
            });
        }
        Ok(EstimatorParams {
            kind: EstimatorKind::TinyNet,
            max_disparity,
            tau,
            in_channels,
            features,
            agg_hidden,
            tensors,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::invalid(format!("missing tensor {name}")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Array> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    /// Starts a binding through which estimates register weights on a tape.
    pub fn bind(&self, trainable: bool) -> Binding<'_> {
        Binding {
            params: self,
            vars: vec![None; self.tensors.len()],
            trainable,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_disparity == 0 || !(self.tau > 0.0) {
            return Err(Error::invalid("max disparity and temperature must be positive"));
        }
        if self.kind == EstimatorKind::TinyNet {
            let reference = Self::tinynet_with(
                self.in_channels,
                self.max_disparity,
                self.features,
                self.agg_hidden,
                self.tau,
                0,
            )?;
            let want: Vec<_> = reference.tensors.iter().map(|t| (&t.name, t.value.shape())).collect();
            let have: Vec<_> = self.tensors.iter().map(|t| (&t.name, t.value.shape())).collect();
            if want != have {
                return Err(Error::invalid("tensor layout does not match the network"));
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            manifest: self
                .tensors
                .iter()
                .map(|t| {
                    let s = t.value.shape();
                    TensorShape {
                        name: t.name.clone(),
                        shape: [s.channels, s.height, s.width],
                    }
                })
                .collect(),
            params: self.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint version {} not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if ck.manifest.len() != ck.params.tensors.len() {
            return Err(Error::invalid("checkpoint manifest and tensors disagree"));
        }
        for (m, t) in ck.manifest.iter().zip(&ck.params.tensors) {
            let s = t.value.shape();
            if m.name != t.name || m.shape != [s.channels, s.height, s.width] {
                return Err(Error::invalid(format!(
                    "tensor {} does not match its manifest entry",
                    t.name
                )));
            }
        }
        ck.params.validate()?;
        Ok(ck.params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            reason: e.to_string(),
        })?;
        Self::from_checkpoint(ck)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    /// `[channels, height, width]`
    pub shape: [usize; 3],
}

/// Versioned on-disk form of [`EstimatorParams`] with a shape manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub manifest: Vec<TensorShape>,
    pub params: EstimatorParams,
}

/// Weights registered on one tape. Frozen bindings insert constants.
pub struct Binding<'a> {
    params: &'a EstimatorParams,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl Binding<'_> {
    fn var(&mut self, tape: &mut Tape, i: usize) -> Var {
        if let Some(v) = self.vars[i] {
            return v;
        }
        let value = self.params.tensors[i].value.clone();
        let v = if self.trainable {
            tape.param(value)
        } else {
            tape.constant(value)
        };
        self.vars[i] = Some(v);
        v
    }

    fn named(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        let i = self.params.index(name)?;
        Ok(self.var(tape, i))
    }

    /// Adds this tape's gradients into `acc` (one slot per tensor).
    pub fn accumulate(&self, grads: &Gradients, acc: &mut [Option<Array>]) {
        for (slot, var) in acc.iter_mut().zip(&self.vars) {
            let Some(v) = var else { continue };
            let Some(g) = grads.get(*v) else { continue };
            match slot {
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
                None => *slot = Some(g.clone()),
            }
        }
    }

    /// Gradient per tensor, `None` for tensors the tape never used.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<Array>> {
        let mut acc = vec![None; self.vars.len()];
        self.accumulate(grads, &mut acc);
        acc
    }
}

fn check_inputs(tape: &Tape, left: Var, right: Var, params: &EstimatorParams) -> Result<(Shape, Shape)> {
    let (ls, rs) = (tape.value(left).shape(), tape.value(right).shape());
    if ls != rs {
        return Err(Error::shape("estimate", format!("left {ls} vs right {rs}")));
    }
    if ls.width <= params.max_disparity {
        return Err(Error::invalid(format!(
            "image width {} must exceed max disparity {}",
            ls.width, params.max_disparity
        )));
    }
    Ok((ls, rs))
}

fn direct_field(tape: &mut Tape, b: &mut Binding<'_>, shape: Shape, key: FieldKey) -> Result<Var> {
    let view = match key.view {
        View::Left => "left",
        View::Right => "right",
    };
    let latent = b.named(tape, &format!("latent.{}.{view}", key.sample))?;
    let ls = tape.value(latent).shape();
    let latent = if (key.x0, key.y0, shape.width, shape.height) == (0, 0, ls.width, ls.height) {
        latent
    } else {
        tape.crop(latent, key.x0, key.y0, shape.width, shape.height)?
    };
    let s = tape.sigmoid(latent)?;
    tape.mul_scalar(s, b.params.max_disparity as f64)
}

fn features(tape: &mut Tape, b: &mut Binding<'_>, image: Var) -> Result<Var> {
    let f = b.params.features;
    let w1 = b.named(tape, "feat1.weight")?;
    let b1 = b.named(tape, "feat1.bias")?;
    let w2 = b.named(tape, "feat2.weight")?;
    let b2 = b.named(tape, "feat2.bias")?;
    let x = tape.conv2d(image, w1, f, 1, 1, 1)?;
    let x = tape.bias_add(x, b1)?;
    let x = tape.leaky_relu(x, LEAK)?;
    let x = tape.conv2d(x, w2, f, 1, 1, 1)?;
    let x = tape.bias_add(x, b2)?;
    let x = tape.sigmoid(x)?;
    let x = tape.mul_scalar(x, 2.0)?;
    tape.sub_scalar(x, 1.0)
}

fn tinynet(tape: &mut Tape, b: &mut Binding<'_>, left: Var, right: Var) -> Result<Var> {
    let p = b.params;
    let (planes, hidden, dmax, tau) = (p.max_disparity + 1, p.agg_hidden, p.max_disparity, p.tau);
    let fl = features(tape, b, left)?;
    let fr = features(tape, b, right)?;
    let corr = tape.correlation(fl, fr, dmax)?;
    let a1 = b.named(tape, "agg1.weight")?;
    let a2 = b.named(tape, "agg2.weight")?;
    let h = tape.conv2d(corr, a1, hidden, 1, 1, planes)?;
    let h = tape.leaky_relu(h, LEAK)?;
    let h = tape.conv2d(h, a2, 1, 1, 1, planes)?;
    let local = tape.add(corr, h)?;
    let s = tape.value(local).shape();
    let blurred = tape.avg_pool3(local)?;
    let blurred = tape.avg_pool3(blurred)?;
    let mut score = local;
    for (i, &shift) in CONTEXT_SHIFTS.iter().enumerate() {
        let coords = Array::from_fn(Shape::plane(s.height, s.width), |_, _, x| (x as i64 + shift) as f64)?;
        let coords = tape.constant(coords);
        let (shifted, _) = tape.hsample(blurred, coords)?;
        let w = b.named(tape, &format!("context.{i}"))?;
        let term = tape.mul(shifted, w)?;
        score = tape.add(score, term)?;
    }
    // soft-argmin over cost = -score
    let cost = tape.neg(score)?;
    tape.soft_argmin(cost, tau)
}

/// Disparity aligned with `left` (one plane, values in `[0, max_disparity]`).
pub fn estimate(tape: &mut Tape, b: &mut Binding<'_>, left: Var, right: Var, key: FieldKey) -> Result<Var> {
    let (ls, _) = check_inputs(tape, left, right, b.params)?;
    match b.params.kind {
        EstimatorKind::Direct => direct_field(tape, b, ls, key),
        EstimatorKind::TinyNet => {
            if ls.channels != b.params.in_channels {
                return Err(Error::shape(
                    "estimate",
                    format!("network expects {} channels, got {}", b.params.in_channels, ls.channels),
                ));
            }
            tinynet(tape, b, left, right)
        }
    }
}

/// Disparity aligned with `right`: both views are mirrored and swapped,
/// estimated, and the result mirrored back. Direct fields ignore images,
/// so they read the right-view latent without mirroring.
pub fn estimate_right_disparity(
    tape: &mut Tape,
    b: &mut Binding<'_>,
    left: Var,
    right: Var,
    key: FieldKey,
) -> Result<Var> {
    let key = FieldKey {
        view: View::Right,
        ..key
    };
    if b.params.kind == EstimatorKind::Direct {
        let (rs, _) = check_inputs(tape, left, right, b.params)?;
        return direct_field(tape, b, rs, key);
    }
    let fl = tape.hflip(right)?;
    let fr = tape.hflip(left)?;
    let d = estimate(tape, b, fl, fr, key)?;
    tape.hflip(d)
}

/// Plain-value estimate without gradients.
pub fn infer(params: &EstimatorParams, left: &Array, right: &Array, key: FieldKey) -> Result<Array> {
    let mut tape = Tape::new();
    let mut b = params.bind(false);
    let l = tape.constant(left.clone());
    let r = tape.constant(right.clone());
    let d = estimate(&mut tape, &mut b, l, r, key)?;
    Ok(tape.value(d).clone())
}

/// Plain-value right-aligned estimate without gradients.
pub fn infer_right(params: &EstimatorParams, left: &Array, right: &Array, key: FieldKey) -> Result<Array> {
    let mut tape = Tape::new();
    let mut b = params.bind(false);
    let l = tape.constant(left.clone());
    let r = tape.constant(right.clone());
    let d = estimate_right_disparity(&mut tape, &mut b, l, r, key)?;
    Ok(tape.value(d).clone())
}
