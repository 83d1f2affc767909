//! Photometric and smoothness losses built on the differentiation tape.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::OcclusionMask;
use crate::diffcore::{Array, Shape, Tape, Var};
use crate::error::{Error, Result};

/// Which images the photometric term compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feedback {
    /// A real view against a backward warp of the other real view.
    #[default]
    Real,
    /// A real view against a backward warp of its rendered pseudo view.
    Pseudo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// SSIM weight in the photometric error.
    pub alpha: f64,
    /// Probability of the first branch per step.
    pub branch_probability: f64,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub lambda_ramp_iters: u64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub feedback: Feedback,
    /// Treat the disparity mean in the smoothness normalization as a constant.
    pub detach_mean: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.85,
            branch_probability: 0.5,
            lambda_start: 0.001,
            lambda_end: 0.5,
            lambda_ramp_iters: 10_000,
            ssim_c1: 1e-4,
            ssim_c2: 9e-4,
            feedback: Feedback::Real,
            detach_mean: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.branch_probability) {
            return Err(Error::invalid(format!(
                "branch probability {} outside [0, 1]",
                self.branch_probability
            )));
        }
        if !(self.lambda_start <= self.lambda_end) || self.lambda_start < 0.0 {
            return Err(Error::invalid("lambda_start must be within [0, lambda_end]"));
        }
        if self.lambda_ramp_iters == 0 {
            return Err(Error::invalid("lambda_ramp_iters must be at least 1"));
        }
        if !(self.ssim_c1 > 0.0 && self.ssim_c2 > 0.0) {
            return Err(Error::invalid("SSIM constants must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// Pseudo pair built from the left view.
    Left,
    /// Pseudo pair built from the right view.
    Right,
    /// The real stereo pair.
    Real,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Left => "left",
            Branch::Right => "right",
            Branch::Real => "real",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lp: f64,
    pub ls: f64,
    pub lambda: f64,
    pub total: f64,
    pub branch: Branch,
}

/// Column-index plane `x` for an `h x w` grid.
fn x_grid(h: usize, w: usize) -> Array {
    Array::from_raw(Shape::plane(h, w), (0..h * w).map(|p| (p % w) as f64).collect())
}

/// Samples `source` at `x + sign * disp`. Use `sign = -1` to reconstruct a
/// left view from the right one and `+1` for the opposite direction.
pub fn backward_warp(tape: &mut Tape, source: Var, disp: Var, sign: f64) -> Result<(Var, Array)> {
    if sign != 1.0 && sign != -1.0 {
        return Err(Error::invalid(format!("warp sign must be +1 or -1, got {sign}")));
    }
    let s = tape.value(disp).shape();
    let grid = tape.constant(x_grid(s.height, s.width));
    let offset = tape.mul_scalar(disp, sign)?;
    let coords = tape.add(grid, offset)?;
    tape.hsample(source, coords)
}

/// Per-pixel SSIM over 3x3 box statistics, averaged over channels.
pub fn ssim_map(tape: &mut Tape, a: Var, b: Var, cfg: &LossConfig) -> Result<Var> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::shape("ssim", format!("{sa} vs {sb}")));
    }
    let mu_a = tape.avg_pool3(a)?;
    let mu_b = tape.avg_pool3(b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = tape.avg_pool3(aa)?;
    let e_bb = tape.avg_pool3(bb)?;
    let e_ab = tape.avg_pool3(ab)?;
    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let l_num = tape.mul_scalar(mu_ab, 2.0)?;
    let l_num = tape.add_scalar(l_num, cfg.ssim_c1)?;
    let c_num = tape.mul_scalar(cov, 2.0)?;
    let c_num = tape.add_scalar(c_num, cfg.ssim_c2)?;
    let num = tape.mul(l_num, c_num)?;

    let l_den = tape.add(mu_aa, mu_bb)?;
    let l_den = tape.add_scalar(l_den, cfg.ssim_c1)?;
    let c_den = tape.add(var_a, var_b)?;
    let c_den = tape.add_scalar(c_den, cfg.ssim_c2)?;
    let den = tape.mul(l_den, c_den)?;

    let ssim = tape.div(num, den)?;
    tape.channel_mean(ssim)
}

/// `alpha / 2 * (1 - SSIM) + (1 - alpha) * mean_c |a - b|`, one plane.
pub fn pe(tape: &mut Tape, a: Var, b: Var, cfg: &LossConfig) -> Result<Var> {
    let ssim = ssim_map(tape, a, b, cfg)?;
    let dssim = tape.rsub_scalar(1.0, ssim)?;
    let dssim = tape.mul_scalar(dssim, cfg.alpha / 2.0)?;
    let diff = tape.sub(a, b)?;
    let l1 = tape.abs(diff)?;
    let l1 = tape.channel_mean(l1)?;
    let l1 = tape.mul_scalar(l1, 1.0 - cfg.alpha)?;
    tape.add(dssim, l1)
}

/// Pixels kept by the photometric term: non-occluded and validly sampled.
pub fn feedback_mask(occ: Option<&OcclusionMask>, validity: &Array) -> Result<Array> {
    match occ {
        None => Ok(validity.clone()),
        Some(m) => {
            if m.array().shape() != validity.shape() {
                return Err(Error::shape(
                    "feedback mask",
                    format!("occlusion {} vs validity {}", m.array().shape(), validity.shape()),
                ));
            }
            let data = m
                .array()
                .data()
                .iter()
                .zip(validity.data())
                .map(|(a, b)| a * b)
                .collect();
            Array::new(validity.shape(), data)
        }
    }
}

/// Masked mean of `pe(target, warped)` over pixels with `mask = 1`.
pub fn photometric_loss(tape: &mut Tape, target: Var, warped: Var, mask: &Array, cfg: &LossConfig) -> Result<Var> {
    if !mask.data().contains(&1.0) {
        return Err(Error::Degenerate("photometric mask selects no pixel".into()));
    }
    let err = pe(tape, target, warped, cfg)?;
    tape.reduce_mean(err, Some(mask))
}

/// Channel-mean absolute forward differences of a guide image, as
/// `(exp(-|dx|), exp(-|dy|))` edge weights.
pub fn edge_weights(guide: &Array) -> Result<(Array, Array)> {
    let s = guide.shape();
    if s.width < 2 || s.height < 2 {
        return Err(Error::shape("edge_weights", format!("guide {s}")));
    }
    let (h, w) = (s.height, s.width);
    let mut wx = vec![0.0; h * (w - 1)];
    let mut wy = vec![0.0; (h - 1) * w];
    for c in 0..s.channels {
        let p = guide.plane(c);
        for y in 0..h {
            for x in 0..w - 1 {
                wx[y * (w - 1) + x] += (p[y * w + x + 1] - p[y * w + x]).abs();
            }
        }
        for y in 0..h - 1 {
            for x in 0..w {
                wy[y * w + x] += (p[(y + 1) * w + x] - p[y * w + x]).abs();
            }
        }
    }
    let k = s.channels as f64;
    let to_weight = |g: Vec<f64>| g.into_iter().map(|v| (-v / k).exp()).collect::<Vec<_>>();
    Ok((
        Array::new(Shape::plane(h, w - 1), to_weight(wx))?,
        Array::new(Shape::plane(h - 1, w), to_weight(wy))?,
    ))
}

/// Edge-aware smoothness of the mean-normalized disparity `disp / mean(disp)`.
pub fn smoothness_loss(tape: &mut Tape, disp: Var, guide: &Array, detach_mean: bool) -> Result<Var> {
    let ds = tape.value(disp).shape();
    if ds.channels != 1 || !ds.same_plane(&guide.shape()) {
        return Err(Error::shape(
            "smoothness",
            format!("disparity {ds} vs guide {}", guide.shape()),
        ));
    }
    let mean = tape.reduce_mean(disp, None)?;
    if tape.value(mean).item() < 1e-9 {
        return Err(Error::Degenerate("disparity mean below 1e-9".into()));
    }
    let mean = if detach_mean { tape.detach(mean) } else { mean };
    let norm = tape.div(disp, mean)?;
    let (wx, wy) = edge_weights(guide)?;
    let dx = tape.diff_x(norm)?;
    let dx = tape.abs(dx)?;
    let wx = tape.constant(wx);
    let tx = tape.mul(dx, wx)?;
    let tx = tape.reduce_mean(tx, None)?;
    let dy = tape.diff_y(norm)?;
    let dy = tape.abs(dy)?;
    let wy = tape.constant(wy);
    let ty = tape.mul(dy, wy)?;
    let ty = tape.reduce_mean(ty, None)?;
    tape.add(tx, ty)
}

/// Linear ramp from `lambda_start` to `lambda_end` over `lambda_ramp_iters`.
pub fn lambda_at(iter: u64, cfg: &LossConfig) -> f64 {
    if iter >= cfg.lambda_ramp_iters {
        return cfg.lambda_end;
    }
    let t = iter as f64 / cfg.lambda_ramp_iters as f64;
    cfg.lambda_start + (cfg.lambda_end - cfg.lambda_start) * t
}

/// `lp + lambda * ls`.
pub fn total_loss(tape: &mut Tape, lp: Var, ls: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.mul_scalar(ls, lambda)?;
    tape.add(lp, weighted)
}

/// Nodes of one branch objective.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub lp: Var,
    pub ls: Var,
    pub total: Var,
}

impl LossNodes {
    pub fn breakdown(&self, tape: &Tape, lambda: f64, branch: Branch) -> LossBreakdown {
        LossBreakdown {
            lp: tape.value(self.lp).item(),
            ls: tape.value(self.ls).item(),
            lambda,
            total: tape.value(self.total).item(),
            branch,
        }
    }
}

/// Full objective for one view: the photometric error between `target` and
/// `source` warped by `disp` (restricted to `occ` when given) plus the
/// weighted smoothness of `disp` guided by `target`.
#[allow(clippy::too_many_arguments)]
pub fn view_loss(
    tape: &mut Tape,
    target: &Array,
    source: &Array,
    disp: Var,
    sign: f64,
    occ: Option<&OcclusionMask>,
    lambda: f64,
    cfg: &LossConfig,
) -> Result<LossNodes> {
    let t = tape.constant(target.clone());
    let s = tape.constant(source.clone());
    let (warped, validity) = backward_warp(tape, s, disp, sign)?;
    let mask = feedback_mask(occ, &validity)?;
    let lp = photometric_loss(tape, t, warped, &mask, cfg)?;
    let ls = smoothness_loss(tape, disp, target, cfg.detach_mean)?;
    let total = total_loss(tape, lp, ls, lambda)?;
    Ok(LossNodes { lp, ls, total })
}
