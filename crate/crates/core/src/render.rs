//! Forward (scatter) rendering of pseudo-images.
//!
//! Every source pixel `(x, y)` moves to `(round(x - d), y)` on a canvas at
//! least as wide as the source. On collisions the larger disparity wins and
//! equal disparities keep the smaller source `x`. Losers and pixels that
//! leave the canvas are marked occluded. Rendering consumes plain values
//! and is never differentiated.

use crate::data::{DisparityField, Image, OcclusionMask};
use crate::diffcore::{Array, Shape};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RenderResult {
    /// Rendered canvas; holes are 0.
    pub pseudo: Image,
    /// 1 where some source pixel landed, 0 at holes (canvas-sized).
    pub hole_mask: OcclusionMask,
    /// 1 where the source pixel survived (reference-sized).
    pub occ: OcclusionMask,
    /// Winning disparity per canvas pixel; 0 at holes.
    pub zbuffer: DisparityField,
}

impl RenderResult {
    pub fn hole_count(&self) -> usize {
        self.hole_mask.invert().count()
    }
}

/// Per-row scatter. `winner[y * canvas + t]` is the source column that
/// landed at `t`, and `alive[y * w + x]` whether source `x` survived.
struct Scatter {
    winner: Vec<Option<usize>>,
    alive: Vec<bool>,
}

fn target(x: usize, d: f64) -> f64 {
    // f64::round rounds half away from zero
    (x as f64 - d).round()
}

fn scatter(disp: &DisparityField, canvas: usize) -> Result<Scatter> {
    let (w, h) = (disp.width(), disp.height());
    if canvas < w {
        return Err(Error::invalid(format!(
            "canvas width {canvas} narrower than source width {w}"
        )));
    }
    let mut winner = vec![None; h * canvas];
    let mut alive = vec![false; h * w];
    for y in 0..h {
        let zrow = &mut winner[y * canvas..(y + 1) * canvas];
        for x in 0..w {
            let d = disp.get(y, x);
            let t = target(x, d);
            if t < 0.0 || t >= canvas as f64 {
                continue;
            }
            let t = t as usize;
            match zrow[t] {
                Some(inc) if disp.get(y, inc) >= d => {}
                prev => {
                    if let Some(inc) = prev {
                        alive[y * w + inc] = false;
                    }
                    zrow[t] = Some(x);
                    alive[y * w + x] = true;
                }
            }
        }
    }
    Ok(Scatter { winner, alive })
}

/// Scatters `reference` by `disp` onto a canvas `canvas_width` wide.
pub fn forward_render(reference: &Image, disp: &DisparityField, canvas_width: usize) -> Result<RenderResult> {
    let (w, h, ch) = (reference.width(), reference.height(), reference.channels());
    if disp.width() != w || disp.height() != h {
        return Err(Error::shape(
            "forward_render",
            format!("disparity {}x{} vs reference {w}x{h}", disp.width(), disp.height()),
        ));
    }
    let s = scatter(disp, canvas_width)?;
    let cw = canvas_width;
    let mut pseudo = vec![0.0; ch * h * cw];
    let mut zbuf = vec![0.0; h * cw];
    let mut rendered = vec![false; h * cw];
    for y in 0..h {
        for t in 0..cw {
            if let Some(x) = s.winner[y * cw + t] {
                rendered[y * cw + t] = true;
                zbuf[y * cw + t] = disp.get(y, x);
                for c in 0..ch {
                    pseudo[(c * h + y) * cw + t] = reference.get(c, y, x);
                }
            }
        }
    }
    Ok(RenderResult {
        pseudo: Image::new(Array::new(Shape::new(ch, h, cw), pseudo)?)?,
        hole_mask: OcclusionMask::from_bits(cw, h, &rendered)?,
        occ: OcclusionMask::from_bits(w, h, &s.alive)?,
        zbuffer: DisparityField::new(Array::new(Shape::plane(h, cw), zbuf)?)?,
    })
}

/// The `occ` field of [`forward_render`] without touching pixel values.
/// Marks pixels of the disparity's own view that are not visible from a
/// viewpoint to its right.
pub fn occlusion_mask(disp: &DisparityField, canvas_width: usize) -> Result<OcclusionMask> {
    let s = scatter(disp, canvas_width)?;
    OcclusionMask::from_bits(disp.width(), disp.height(), &s.alive)
}

/// Mask for a view whose partner lies to its left (pixels move to
/// `x + d`): rendered in mirrored coordinates and mirrored back.
pub fn occlusion_mask_rightward(disp: &DisparityField) -> Result<OcclusionMask> {
    Ok(occlusion_mask(&disp.hflip(), disp.width())?.hflip())
}

/// Synchronous 4-neighbor hole filling over a planar array; `rendered`
/// flags valid pixels of one plane.
pub fn fill_holes_array(values: &Array, rendered: &[bool]) -> Result<Array> {
    let s = values.shape();
    let (h, w, n) = (s.height, s.width, s.plane_len());
    if rendered.len() != n {
        return Err(Error::shape("fill_holes", "mask size differs from canvas"));
    }
    if !rendered.iter().any(|&r| r) {
        return Err(Error::Degenerate("pseudo-image has no rendered pixel".into()));
    }
    let mut data = values.data().to_vec();
    let mut known = rendered.to_vec();
    let mut next_known = known.clone();
    let mut next = data.clone();
    while known.iter().any(|&k| !k) {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if known[p] {
                    continue;
                }
                let mut nb = [0usize; 4];
                let mut cnt = 0;
                let mut push = |q: usize| {
                    if known[q] {
                        nb[cnt] = q;
                        cnt += 1;
                    }
                };
                if x > 0 {
                    push(p - 1);
                }
                if x + 1 < w {
                    push(p + 1);
                }
                if y > 0 {
                    push(p - w);
                }
                if y + 1 < h {
                    push(p + w);
                }
                if cnt == 0 {
                    continue;
                }
                for c in 0..s.channels {
                    let base = c * n;
                    let sum: f64 = nb[..cnt].iter().map(|&q| data[base + q]).sum();
                    next[base + p] = sum / cnt as f64;
                }
                next_known[p] = true;
            }
        }
        data.copy_from_slice(&next);
        known.copy_from_slice(&next_known);
    }
    Array::new(s, data)
}

/// Fills every hole of a render with the mean of its known 4-neighbors,
/// pass by pass, until none remain.
pub fn fill_holes(result: &RenderResult) -> Result<Image> {
    let rendered: Vec<bool> = result.hole_mask.array().data().iter().map(|&v| v == 1.0).collect();
    Image::new(fill_holes_array(result.pseudo.array(), &rendered)?)
}

/// Network input pair produced from one real view.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoPair {
    pub reference: Image,
    /// Hole-filled pseudo view.
    pub pseudo: Image,
    pub occ: OcclusionMask,
    /// Holes of the pseudo view before filling.
    pub hole_mask: OcclusionMask,
}

/// Smallest margin that lets every cropped column receive content.
pub fn required_margin(disp: &DisparityField) -> usize {
    disp.max().ceil() as usize
}

/// Wider generation: render on the full wide canvas, fill holes, then keep
/// columns `[0, crop_width)`.
pub fn generate_pseudo_pair(
    reference_wide: &Image,
    disp_wide: &DisparityField,
    crop_width: usize,
) -> Result<PseudoPair> {
    let (w, h) = (reference_wide.width(), reference_wide.height());
    let required = required_margin(disp_wide);
    let available = w.saturating_sub(crop_width);
    if crop_width == 0 || crop_width > w || available < required {
        return Err(Error::Margin { required, available });
    }
    let r = forward_render(reference_wide, disp_wide, w)?;
    let filled = fill_holes(&r)?;
    Ok(PseudoPair {
        reference: reference_wide.crop(0, 0, crop_width, h)?,
        pseudo: filled.crop(0, 0, crop_width, h)?,
        occ: r.occ.crop(0, 0, crop_width, h)?,
        hole_mask: r.hole_mask.crop(0, 0, crop_width, h)?,
    })
}

/// Generation without extra support: the right-edge band is left to hole
/// filling.
pub fn generate_pseudo_pair_narrow(reference: &Image, disp: &DisparityField) -> Result<PseudoPair> {
    let r = forward_render(reference, disp, reference.width())?;
    let pseudo = fill_holes(&r)?;
    Ok(PseudoPair {
        reference: reference.clone(),
        pseudo,
        occ: r.occ,
        hole_mask: r.hole_mask,
    })
}
