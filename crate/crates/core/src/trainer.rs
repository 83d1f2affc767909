//! Training strategies: BASELINE on real pairs, PS (a real-pair branch and
//! a pseudo-pair branch built from the right view) and FPS (pseudo pairs
//! built from either view). Photometric feedback always uses real views
//! unless `loss.feedback = "pseudo"`.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DisparityField, Image, OcclusionMask, SceneSample, StereoPair};
use crate::diffcore::{Array, Tape};
use crate::error::{Error, Result};
use crate::loss::{lambda_at, view_loss, Branch, Feedback, LossBreakdown, LossConfig};
use crate::matcher::{estimate, infer, infer_right, EstimatorKind, EstimatorParams, FieldKey, View};
use crate::render::{generate_pseudo_pair, generate_pseudo_pair_narrow, occlusion_mask, occlusion_mask_rightward};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Base {
    Baseline,
    Ps,
    Fps,
}

/// A training strategy: the input scheme plus the occlusion-mask and
/// wider-generation switches. Rows `a`..`h` of the ablation are the
/// supported combinations with letters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Strategy {
    pub base: Base,
    pub occ_mask: bool,
    pub wider_gen: bool,
}

const LABELS: [(char, Base, bool, bool); 8] = [
    ('a', Base::Baseline, false, false),
    ('b', Base::Baseline, true, false),
    ('c', Base::Ps, false, false),
    ('d', Base::Fps, false, false),
    ('e', Base::Ps, true, false),
    ('f', Base::Fps, true, false),
    ('g', Base::Ps, true, true),
    ('h', Base::Fps, true, true),
];

impl Strategy {
    pub fn new(base: Base, occ_mask: bool, wider_gen: bool) -> Result<Self> {
        if base == Base::Baseline && wider_gen {
            return Err(Error::invalid("wider generation needs a pseudo-stereo strategy"));
        }
        Ok(Strategy {
            base,
            occ_mask,
            wider_gen,
        })
    }

    pub fn from_label(label: char) -> Result<Self> {
        LABELS
            .iter()
            .find(|l| l.0 == label.to_ascii_lowercase())
            .map(|&(_, base, occ_mask, wider_gen)| Strategy {
                base,
                occ_mask,
                wider_gen,
            })
            .ok_or_else(|| Error::invalid(format!("unknown strategy {label:?}; {}", Self::help())))
    }

    /// Ablation letter, when this combination has one.
    pub fn label(&self) -> Option<char> {
        LABELS
            .iter()
            .find(|l| (l.1, l.2, l.3) == (self.base, self.occ_mask, self.wider_gen))
            .map(|l| l.0)
    }

    pub fn all() -> Vec<Strategy> {
        LABELS
            .iter()
            .map(|l| Strategy::from_label(l.0).expect("table label"))
            .collect()
    }

    /// Lists the valid labels and names, for error messages.
    pub fn help() -> String {
        let rows: Vec<String> = Self::all()
            .iter()
            .map(|s| format!("{} = {s}", s.label().unwrap()))
            .collect();
        format!("valid strategies: {}", rows.join(", "))
    }

    /// Probability of the first branch (REAL for PS, LEFT for FPS).
    fn branches(&self) -> (Branch, Branch) {
        match self.base {
            Base::Baseline => (Branch::Real, Branch::Real),
            Base::Ps => (Branch::Real, Branch::Right),
            Base::Fps => (Branch::Left, Branch::Right),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.base {
            Base::Baseline => "baseline",
            Base::Ps => "ps",
            Base::Fps => "fps",
        })?;
        if self.wider_gen {
            f.write_str("+wider")?;
        }
        if self.occ_mask {
            f.write_str("+occ")?;
        }
        Ok(())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts a letter `a`..`h` or a name such as `fps+wider+occ`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s.len() == 1 {
            return Strategy::from_label(s.chars().next().unwrap());
        }
        let mut parts = s.split('+');
        let base = match parts.next() {
            Some("baseline") => Base::Baseline,
            Some("ps") => Base::Ps,
            Some("fps") => Base::Fps,
            _ => return Err(Error::invalid(format!("unknown strategy {s:?}; {}", Self::help()))),
        };
        let (mut occ, mut wider) = (false, false);
        for p in parts {
            match p {
                "occ" => occ = true,
                "wider" => wider = true,
                _ => return Err(Error::invalid(format!("unknown strategy flag {p:?}; {}", Self::help()))),
            }
        }
        Strategy::new(base, occ, wider)
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub iterations: u64,
    /// Leading iterations trained on the real-pair branch only (with the
    /// strategy's mask setting) before the strategy's branches take over.
    pub warmup_iters: u64,
    pub batch_size: usize,
    pub crop_width: usize,
    pub crop_height: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Brightness offsets are drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub estimator: EstimatorKind,
    pub max_disparity: usize,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: u64,
    /// Record wall-clock milliseconds in logs; off keeps logs byte-identical.
    pub log_timing: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::from_label('h').expect("table label"),
            iterations: 2000,
            warmup_iters: 0,
            batch_size: 4,
            crop_width: 64,
            crop_height: 48,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            brightness: 0.2,
            contrast_min: 0.8,
            contrast_max: 1.2,
            estimator: EstimatorKind::TinyNet,
            max_disparity: 16,
            checkpoint_every: 0,
            log_timing: false,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.crop_width < Image::MIN_SIDE || self.crop_height < Image::MIN_SIDE {
            return Err(Error::invalid(format!(
                "crop {}x{} smaller than {m}x{m}",
                self.crop_width,
                self.crop_height,
                m = Image::MIN_SIDE
            )));
        }
        if self.max_disparity == 0 || self.crop_width <= self.max_disparity {
            return Err(Error::invalid(format!(
                "max_disparity {} must be in [1, crop_width)",
                self.max_disparity
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if !(self.brightness >= 0.0 && self.brightness <= 1.0) {
            return Err(Error::invalid("brightness must lie in [0, 1]"));
        }
        if !(self.contrast_min > 0.0 && self.contrast_min <= self.contrast_max) {
            return Err(Error::invalid("contrast range must satisfy 0 < min <= max"));
        }
        self.loss.validate()
    }

    /// Checks the config against image dimensions.
    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        self.validate()?;
        if self.crop_width > width || self.crop_height > height {
            return Err(Error::invalid(format!(
                "crop {}x{} larger than images {width}x{height}",
                self.crop_width, self.crop_height
            )));
        }
        if self.strategy.wider_gen && width - self.crop_width < self.max_disparity {
            return Err(Error::Margin {
                required: self.max_disparity,
                available: width - self.crop_width,
            });
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Cosine-annealed learning rate for 0-based step `iter`.
    pub fn lr_at(&self, iter: u64) -> f64 {
        if self.iterations == 0 {
            return self.learning_rate;
        }
        let t = (iter as f64 / self.iterations as f64).min(1.0);
        0.5 * self.learning_rate * (1.0 + (PI * t).cos())
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: u64,
    pub branch: Branch,
    /// Batch means over the samples that were not skipped.
    pub lp: Option<f64>,
    pub ls: Option<f64>,
    pub total: Option<f64>,
    pub lambda: f64,
    pub lr: f64,
    pub used: usize,
    pub skipped: usize,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: EstimatorParams,
    pub adam_m: Vec<Array>,
    pub adam_v: Vec<Array>,
    /// Completed iterations.
    pub iter: u64,
    /// Adam updates applied (iterations with at least one usable sample).
    pub adam_steps: u64,
    /// Root of the per-step random streams.
    pub seed: u64,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    pub fn new(params: EstimatorParams, seed: u64) -> Self {
        let zeros: Vec<Array> = params.tensors.iter().map(|t| Array::zeros(t.value.shape())).collect();
        TrainState {
            params,
            adam_m: zeros.clone(),
            adam_v: zeros,
            iter: 0,
            adam_steps: 0,
            seed,
            history: Vec::new(),
        }
    }

    /// Fresh state with estimator weights initialized from the config seed.
    pub fn initial(cfg: &TrainConfig, pairs: &[StereoPair]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::invalid("training set is empty"))?;
        let params = match cfg.estimator {
            EstimatorKind::Direct => {
                EstimatorParams::direct(pairs.len(), first.left.width(), first.left.height(), cfg.max_disparity)?
            }
            EstimatorKind::TinyNet => EstimatorParams::tinynet(first.left.channels(), cfg.max_disparity, cfg.seed)?,
        };
        Ok(TrainState::new(params, cfg.seed))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).expect("state serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let state: TrainState = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            reason: e.to_string(),
        })?;
        state.params.validate()?;
        let shapes_match = |a: &[Array]| {
            a.len() == state.params.tensors.len()
                && a.iter()
                    .zip(&state.params.tensors)
                    .all(|(x, t)| x.shape() == t.value.shape())
        };
        if !shapes_match(&state.adam_m) || !shapes_match(&state.adam_v) {
            return Err(Error::invalid(format!(
                "{}: optimizer moments do not match weights",
                path.display()
            )));
        }
        Ok(state)
    }
}

/// Pairs usable for training, named by scene seed.
pub fn pairs_from_scenes(scenes: &[SceneSample]) -> Vec<StereoPair> {
    scenes
        .iter()
        .map(|s| StereoPair {
            name: s.seed.to_string(),
            left: s.left.clone(),
            right: s.right.clone(),
        })
        .collect()
}

/// Crop window inside the full images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

/// Brightness offset and contrast scale shared by both input views.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
}

impl Jitter {
    pub const IDENTITY: Jitter = Jitter {
        brightness: 0.0,
        contrast: 1.0,
    };

    pub fn apply(&self, a: &Array) -> Array {
        let (b, c) = (self.brightness, self.contrast);
        a.map(|v| (c * (v - 0.5) + 0.5 + b).clamp(0.0, 1.0)).expect("finite")
    }
}

/// Draws a crop window. Columns `[x0, x0 + width + reserve)` always fit,
/// where `reserve` is the wider-generation margin.
pub fn draw_window(rng: &mut impl Rng, w: usize, h: usize, cfg: &TrainConfig) -> Result<Window> {
    if cfg.crop_width > w || cfg.crop_height > h {
        return Err(Error::invalid(format!(
            "crop {}x{} larger than images {w}x{h}",
            cfg.crop_width, cfg.crop_height
        )));
    }
    let reserve = cfg.max_disparity.min(w - cfg.crop_width);
    Ok(Window {
        x0: rng.gen_range(0..=w - cfg.crop_width - reserve),
        y0: rng.gen_range(0..=h - cfg.crop_height),
        width: cfg.crop_width,
        height: cfg.crop_height,
    })
}

pub fn draw_jitter(rng: &mut impl Rng, cfg: &TrainConfig) -> Jitter {
    let brightness = if cfg.brightness > 0.0 {
        rng.gen_range(-cfg.brightness..=cfg.brightness)
    } else {
        0.0
    };
    let contrast = if cfg.contrast_max > cfg.contrast_min {
        rng.gen_range(cfg.contrast_min..=cfg.contrast_max)
    } else {
        cfg.contrast_min
    };
    Jitter { brightness, contrast }
}

/// Input augmentation: one crop window and one jitter for both views,
/// clamped to `[0, 1]`.
pub fn augment(left: &Image, right: &Image, rng: &mut impl Rng, cfg: &TrainConfig) -> Result<(Image, Image)> {
    let win = draw_window(rng, left.width(), left.height(), cfg)?;
    let jitter = draw_jitter(rng, cfg);
    let l = left.crop(win.x0, win.y0, win.width, win.height)?;
    let r = right.crop(win.x0, win.y0, win.width, win.height)?;
    Ok((
        Image::new(jitter.apply(l.array()))?,
        Image::new(jitter.apply(r.array()))?,
    ))
}

#[derive(Clone, Copy)]
enum Stream {
    Branch = 1,
    Sample = 2,
    Window = 3,
    Jitter = 4,
}

/// Counter-based generator: independent per (seed, purpose, item) and
/// positioned by iteration, so no draw depends on earlier steps.
fn stream(seed: u64, purpose: Stream, item: u64, iter: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&item.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(iter);
    rng
}

/// Branch for step `iter`.
pub fn draw_branch(seed: u64, iter: u64, strategy: Strategy, p: f64) -> Branch {
    let (first, second) = strategy.branches();
    if first == second {
        return first;
    }
    if stream(seed, Stream::Branch, 0, iter).gen_bool(p) {
        first
    } else {
        second
    }
}

enum MaskSource {
    None,
    /// Left-side occlusion of the detached trained estimate.
    FromEstimate,
    Given(OcclusionMask),
}

/// Everything one sample contributes to a step, before the trained pass.
struct Prepared {
    input_left: Array,
    input_right: Array,
    target: Array,
    source: Array,
    sign: f64,
    mask: MaskSource,
    key: FieldKey,
}

/// Values seen by the photometric term of one sample.
#[derive(Clone, Debug)]
pub struct ItemTrace {
    pub sample: usize,
    pub branch: Branch,
    pub window: Window,
    pub input_left: Array,
    pub input_right: Array,
    pub target: Array,
    pub source: Array,
    pub sign: f64,
    /// Occlusion part of the photometric mask, if any.
    pub occ: Option<OcclusionMask>,
    pub skipped: bool,
}

struct ItemResult {
    breakdown: Option<LossBreakdown>,
    grads: Vec<Option<Array>>,
    trace: Option<ItemTrace>,
}

fn crop_array(img: &Image, win: &Window, width: usize) -> Result<Array> {
    Ok(img.crop(win.x0, win.y0, width, win.height)?.into_array())
}

/// Owns the data and drives optimizer steps.
pub struct Trainer<'a> {
    pairs: &'a [StereoPair],
    cfg: TrainConfig,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(pairs: &'a [StereoPair], cfg: TrainConfig, state: TrainState) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::invalid("training set is empty"))?;
        let (w, h, c) = (first.left.width(), first.left.height(), first.left.channels());
        if let Some(p) = pairs
            .iter()
            .find(|p| (p.left.width(), p.left.height(), p.left.channels()) != (w, h, c))
        {
            return Err(Error::invalid(format!(
                "pair {} differs in size from pair {}",
                p.name, first.name
            )));
        }
        cfg.validate_for(w, h)?;
        state.params.validate()?;
        if state.params.max_disparity != cfg.max_disparity {
            return Err(Error::invalid(format!(
                "estimator max disparity {} differs from config {}",
                state.params.max_disparity, cfg.max_disparity
            )));
        }
        if state.params.kind != cfg.estimator {
            return Err(Error::invalid(format!(
                "estimator {} differs from config {}",
                state.params.kind, cfg.estimator
            )));
        }
        Ok(Trainer { pairs, cfg, state })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn done(&self) -> bool {
        self.state.iter >= self.cfg.iterations
    }

    fn prepare(&self, sample: usize, branch: Branch, win: Window, jitter: Jitter) -> Result<Prepared> {
        let pair = &self.pairs[sample];
        let strategy = self.cfg.strategy;
        let left = crop_array(&pair.left, &win, win.width)?;
        let right = crop_array(&pair.right, &win, win.width)?;
        let key = FieldKey::new(sample, View::Left).at(win.x0, win.y0);
        if branch == Branch::Real {
            return Ok(Prepared {
                input_left: jitter.apply(&left),
                input_right: jitter.apply(&right),
                target: left,
                source: right,
                sign: -1.0,
                mask: if strategy.occ_mask {
                    MaskSource::FromEstimate
                } else {
                    MaskSource::None
                },
                key,
            });
        }
        let disp = self.generation_disparity(sample, branch, win)?;
        self.prepare_pseudo(sample, branch, win, jitter, &disp)
    }

    fn gen_width(&self, win: &Window) -> usize {
        if self.cfg.strategy.wider_gen {
            win.width + self.cfg.max_disparity
        } else {
            win.width
        }
    }

    /// Estimate on the real pair, aligned with the branch's reference view.
    /// Computed without a tape, so nothing flows back through it.
    fn generation_disparity(&self, sample: usize, branch: Branch, win: Window) -> Result<DisparityField> {
        let pair = &self.pairs[sample];
        let gen_width = self.gen_width(&win);
        let gen_l = crop_array(&pair.left, &win, gen_width)?;
        let gen_r = crop_array(&pair.right, &win, gen_width)?;
        let key = FieldKey::new(sample, View::Left).at(win.x0, win.y0);
        DisparityField::new(match branch {
            Branch::Right => infer_right(&self.state.params, &gen_l, &gen_r, key)?,
            _ => infer(&self.state.params, &gen_l, &gen_r, key)?,
        })
    }

    fn prepare_pseudo(
        &self,
        sample: usize,
        branch: Branch,
        win: Window,
        jitter: Jitter,
        disp: &DisparityField,
    ) -> Result<Prepared> {
        let pair = &self.pairs[sample];
        let strategy = self.cfg.strategy;
        let left = crop_array(&pair.left, &win, win.width)?;
        let right = crop_array(&pair.right, &win, win.width)?;
        let key = FieldKey::new(sample, View::Left).at(win.x0, win.y0);
        let (reference, view) = match branch {
            Branch::Right => (&pair.right, View::Right),
            _ => (&pair.left, View::Left),
        };
        let reference = reference.crop(win.x0, win.y0, self.gen_width(&win), win.height)?;
        let pp = if strategy.wider_gen {
            generate_pseudo_pair(&reference, disp, win.width)?
        } else {
            generate_pseudo_pair_narrow(&reference, disp)?
        };
        let (target, real_source, real_sign) = match branch {
            Branch::Right => (right, left, 1.0),
            _ => (left, right, -1.0),
        };
        let (source, sign, occ) = match self.cfg.loss.feedback {
            Feedback::Real => {
                let occ = match branch {
                    Branch::Right => occlusion_mask_rightward(disp)?.crop(0, 0, win.width, win.height)?,
                    _ => pp.occ.clone(),
                };
                (real_source, real_sign, occ)
            }
            Feedback::Pseudo => (pp.pseudo.array().clone(), -1.0, pp.occ.clone()),
        };
        Ok(Prepared {
            input_left: jitter.apply(pp.reference.array()),
            input_right: jitter.apply(pp.pseudo.array()),
            target,
            source,
            sign,
            mask: if strategy.occ_mask {
                MaskSource::Given(occ)
            } else {
                MaskSource::None
            },
            key: FieldKey { view, ..key },
        })
    }

    fn run_item(&self, slot: usize, branch: Branch, lambda: f64, trace: bool) -> Result<ItemResult> {
        let (seed, iter) = (self.state.seed, self.state.iter);
        let sample = stream(seed, Stream::Sample, slot as u64, iter).gen_range(0..self.pairs.len());
        let (w, h) = (self.pairs[sample].left.width(), self.pairs[sample].left.height());
        let win = draw_window(&mut stream(seed, Stream::Window, slot as u64, iter), w, h, &self.cfg)?;
        let jitter = draw_jitter(&mut stream(seed, Stream::Jitter, slot as u64, iter), &self.cfg);
        let prep = self.prepare(sample, branch, win, jitter)?;
        let input_left = trace.then(|| prep.input_left.clone());
        let input_right = trace.then(|| prep.input_right.clone());
        let target = trace.then(|| prep.target.clone());
        let source = trace.then(|| prep.source.clone());
        let sign = prep.sign;
        let (breakdown, grads, occ) = self.objective(prep, branch, lambda, win.width)?;
        let trace = trace.then(|| ItemTrace {
            sample,
            branch,
            window: win,
            input_left: input_left.unwrap(),
            input_right: input_right.unwrap(),
            target: target.unwrap(),
            source: source.unwrap(),
            sign,
            occ,
            skipped: breakdown.is_none(),
        });
        Ok(ItemResult {
            breakdown,
            grads,
            trace,
        })
    }

    /// Trained pass on prepared inputs. A sample whose mask keeps no pixel
    /// yields no breakdown and no gradients.
    #[allow(clippy::type_complexity)]
    fn objective(
        &self,
        prep: Prepared,
        branch: Branch,
        lambda: f64,
        width: usize,
    ) -> Result<(Option<LossBreakdown>, Vec<Option<Array>>, Option<OcclusionMask>)> {
        let mut tape = Tape::new();
        let mut binding = self.state.params.bind(true);
        let li = tape.constant(prep.input_left.clone());
        let ri = tape.constant(prep.input_right.clone());
        let disp = estimate(&mut tape, &mut binding, li, ri, prep.key)?;
        let occ = match prep.mask {
            MaskSource::None => None,
            MaskSource::FromEstimate => {
                let detached = DisparityField::new(tape.value(disp).clone())?;
                Some(occlusion_mask(&detached, width)?)
            }
            MaskSource::Given(m) => Some(m),
        };
        let nodes = view_loss(
            &mut tape,
            &prep.target,
            &prep.source,
            disp,
            prep.sign,
            occ.as_ref(),
            lambda,
            &self.cfg.loss,
        );
        let (breakdown, grads) = match nodes {
            Ok(nodes) => {
                let b = nodes.breakdown(&tape, lambda, branch);
                let g = tape.backward(nodes.total)?;
                (Some(b), binding.gradients(&g))
            }
            Err(Error::Degenerate(_)) => (None, Vec::new()),
            Err(e) => return Err(e),
        };
        Ok((breakdown, grads, occ))
    }

    /// One optimizer step over a batch.
    pub fn step(&mut self) -> Result<StepRecord> {
        self.step_inner(false).map(|(r, _)| r)
    }

    /// As [`Trainer::step`], also returning what each sample's loss saw.
    pub fn step_traced(&mut self) -> Result<(StepRecord, Vec<ItemTrace>)> {
        self.step_inner(true)
    }

    fn step_inner(&mut self, trace: bool) -> Result<(StepRecord, Vec<ItemTrace>)> {
        let start = Instant::now();
        let iter = self.state.iter;
        let branch = if iter < self.cfg.warmup_iters {
            Branch::Real
        } else {
            draw_branch(
                self.state.seed,
                iter,
                self.cfg.strategy,
                self.cfg.loss.branch_probability,
            )
        };
        let lambda = lambda_at(iter, &self.cfg.loss);
        let lr = self.cfg.lr_at(iter);
        let results: Vec<Result<ItemResult>> = (0..self.cfg.batch_size)
            .into_par_iter()
            .map(|slot| self.run_item(slot, branch, lambda, trace))
            .collect();
        let results = results.into_iter().collect::<Result<Vec<_>>>().map_err(|e| match e {
            Error::NonFinite(op) => Error::Divergence {
                iter,
                detail: format!("non-finite value in {op}"),
            },
            e => e,
        })?;

        let n = self.state.params.tensors.len();
        let mut acc: Vec<Option<Array>> = vec![None; n];
        let (mut used, mut lp, mut ls, mut total) = (0usize, 0.0, 0.0, 0.0);
        for r in &results {
            let Some(b) = r.breakdown else { continue };
            used += 1;
            lp += b.lp;
            ls += b.ls;
            total += b.total;
            for (a, g) in acc.iter_mut().zip(&r.grads) {
                let Some(g) = g else { continue };
                match a {
                    Some(a) => {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                    None => *a = Some(g.clone()),
                }
            }
        }
        let skipped = results.len() - used;
        let mean = |v: f64| (used > 0).then(|| v / used as f64);
        if let Some(t) = mean(total) {
            if !t.is_finite() {
                return Err(Error::Divergence {
                    iter,
                    detail: format!("loss {t}"),
                });
            }
        }
        if used > 0 {
            self.adam_update(&acc, used as f64, lr, iter)?;
        }
        let record = StepRecord {
            iter,
            branch,
            lp: mean(lp),
            ls: mean(ls),
            total: mean(total),
            lambda,
            lr,
            used,
            skipped,
            wall_ms: if self.cfg.log_timing {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        self.state.iter += 1;
        self.state.history.push(record.clone());
        let traces = results.into_iter().filter_map(|r| r.trace).collect();
        Ok((record, traces))
    }

    fn adam_update(&mut self, grads: &[Option<Array>], count: f64, lr: f64, iter: u64) -> Result<()> {
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.epsilon);
        self.state.adam_steps += 1;
        let t = self.state.adam_steps as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let st = &mut self.state;
        for (i, tensor) in st.params.tensors.iter_mut().enumerate() {
            let g = grads[i].as_ref();
            let m = st.adam_m[i].data_mut();
            let v = st.adam_v[i].data_mut();
            let p = tensor.value.data_mut();
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g.data()[k] / count);
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                if !p[k].is_finite() {
                    return Err(Error::Divergence {
                        iter,
                        detail: format!("parameter {} became non-finite", tensor.name),
                    });
                }
            }
        }
        Ok(())
    }

    /// Steps until `iter` (capped at the configured iterations).
    pub fn run_until(
        &mut self,
        iter: u64,
        mut on_step: impl FnMut(&StepRecord, &TrainState) -> Result<()>,
    ) -> Result<()> {
        let stop = iter.min(self.cfg.iterations);
        while self.state.iter < stop {
            let rec = self.step()?;
            on_step(&rec, &self.state)?;
        }
        Ok(())
    }
}

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_STATE: &str = "final_state.json";
pub const MODEL_FILE: &str = "model.json";

pub fn checkpoint_path(dir: &Path, iter: u64) -> PathBuf {
    dir.join(format!("ckpt_{iter:07}.json"))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn log_row(r: &StepRecord) -> [String; 7] {
    [
        r.iter.to_string(),
        if r.used == 0 {
            "skipped".to_string()
        } else {
            r.branch.to_string()
        },
        fmt_opt(r.lp),
        fmt_opt(r.ls),
        r.lambda.to_string(),
        r.lr.to_string(),
        r.wall_ms.to_string(),
    ]
}

pub const LOG_HEADER: [&str; 7] = ["iter", "branch", "lp", "ls", "lambda", "lr", "wall_ms"];

/// Writes a history as the training CSV log.
pub fn write_log(path: impl AsRef<Path>, history: &[StepRecord]) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(LOG_HEADER).map_err(io)?;
    for r in history {
        w.write_record(log_row(r)).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains to `cfg.iterations`, starting from `state` (fresh or resumed).
/// With an output directory, writes periodic checkpoints, the final state,
/// the final weights and the CSV log of the whole history.
pub fn train(pairs: &[StereoPair], cfg: &TrainConfig, state: TrainState, out: Option<&Path>) -> Result<TrainState> {
    let mut trainer = Trainer::new(pairs, cfg.clone(), state)?;
    let every = cfg.checkpoint_every;
    trainer.run_until(cfg.iterations, |_, st| {
        if let Some(dir) = out {
            if every > 0 && st.iter % every == 0 {
                st.save(checkpoint_path(dir, st.iter))?;
            }
        }
        Ok(())
    })?;
    let state = trainer.into_state();
    if let Some(dir) = out {
        state.save(dir.join(FINAL_STATE))?;
        state.params.save(dir.join(MODEL_FILE))?;
        write_log(dir.join(LOG_FILE), &state.history)?;
    }
    Ok(state)
}
