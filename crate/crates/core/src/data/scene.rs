//! Synthetic layered stereo scenes with exact ground truth.
//!
//! A [`World`] is a background plane plus fronto-parallel foreground
//! layers, all parameterized in left-view coordinates. Both views are
//! rendered per pixel by brute-force visibility: among every surface that
//! projects to a pixel, the one with the largest disparity wins. A left
//! pixel at `x` with disparity `d` appears at `x - d` in the right view.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::types::{DisparityField, Image, OcclusionMask};
use crate::diffcore::{Array, Shape};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Largest disparity in pixels; at most `width / 4`.
    pub max_disparity: f64,
    pub num_foreground_layers: usize,
    pub texture_octaves: u32,
    /// Peak-to-peak intensity swing of the value-noise textures, in `(0, 1]`.
    pub texture_contrast: f64,
    pub seed: u64,
    /// Restrict every disparity to an integer (background constant per row).
    pub integer_disparity: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 96,
            height: 64,
            max_disparity: 16.0,
            num_foreground_layers: 3,
            texture_octaves: 4,
            texture_contrast: 0.6,
            seed: 0,
            integer_disparity: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < Image::MIN_SIDE || self.height < Image::MIN_SIDE {
            return Err(Error::invalid(format!(
                "scene {}x{} smaller than {m}x{m}",
                self.width,
                self.height,
                m = Image::MIN_SIDE
            )));
        }
        if !(self.max_disparity > 0.0) || self.max_disparity > self.width as f64 / 4.0 {
            return Err(Error::invalid(format!(
                "max disparity {} must be in (0, width/4 = {}]",
                self.max_disparity,
                self.width as f64 / 4.0
            )));
        }
        if self.integer_disparity && self.max_disparity < 3.0 {
            return Err(Error::invalid("integer scenes need max disparity >= 3"));
        }
        if self.texture_octaves == 0 {
            return Err(Error::invalid("texture needs at least one octave"));
        }
        if !(self.texture_contrast > 0.0 && self.texture_contrast <= 1.0) {
            return Err(Error::invalid(format!(
                "texture contrast {} outside (0, 1]",
                self.texture_contrast
            )));
        }
        Ok(())
    }
}

/// Multi-octave value noise over the continuous plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub seed: u64,
    pub mean: f64,
    pub contrast: f64,
    pub octaves: u32,
    /// Lattice spacing of the coarsest octave, in pixels.
    pub base_cell: f64,
}

impl Texture {
    pub fn flat(value: f64) -> Self {
        Texture {
            seed: 0,
            mean: value,
            contrast: 0.0,
            octaves: 1,
            base_cell: 16.0,
        }
    }

    pub fn value(&self, u: f64, y: f64) -> f64 {
        if self.contrast == 0.0 {
            return self.mean.clamp(0.0, 1.0);
        }
        let mut sum = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        let mut cell = self.base_cell;
        for o in 0..self.octaves {
            sum += amp * lattice_noise(u / cell, y / cell, self.seed.wrapping_add(o as u64 * 0x9e37));
            norm += amp;
            amp *= 0.6;
            cell = (cell / 2.0).max(4.0);
        }
        let n = sum / norm;
        (self.mean + self.contrast * (n - 0.5)).clamp(0.0, 1.0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(ix: i64, iy: i64, seed: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64((ix as u64).wrapping_mul(0x1f1f_1f1f) ^ (iy as u64).wrapping_shl(32)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn lattice_noise(u: f64, v: f64, seed: u64) -> f64 {
    let (fu, fv) = (u.floor(), v.floor());
    let (tu, tv) = (u - fu, v - fv);
    let (su, sv) = (tu * tu * (3.0 - 2.0 * tu), tv * tv * (3.0 - 2.0 * tv));
    let (iu, iv) = (fu as i64, fv as i64);
    let a = lattice(iu, iv, seed);
    let b = lattice(iu + 1, iv, seed);
    let c = lattice(iu, iv + 1, seed);
    let d = lattice(iu + 1, iv + 1, seed);
    let top = a + (b - a) * su;
    let bot = c + (d - c) * su;
    top + (bot - top) * sv
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Footprint {
    /// `[x0, x1) x [y0, y1)`
    Rect {
        x0: f64,
        x1: f64,
        y0: f64,
        y1: f64,
    },
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
    },
}

impl Footprint {
    pub fn contains(&self, u: f64, y: f64) -> bool {
        match *self {
            Footprint::Rect { x0, x1, y0, y1 } => u >= x0 && u < x1 && y >= y0 && y < y1,
            Footprint::Ellipse { cx, cy, rx, ry } => {
                let (a, b) = ((u - cx) / rx, (y - cy) / ry);
                a * a + b * b <= 1.0
            }
        }
    }

    /// `(x0, x1, y0, y1)` bounding box.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        match *self {
            Footprint::Rect { x0, x1, y0, y1 } => (x0, x1, y0, y1),
            Footprint::Ellipse { cx, cy, rx, ry } => (cx - rx, cx + rx, cy - ry, cy + ry),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub footprint: Footprint,
    pub disparity: f64,
    pub texture: Texture,
}

/// Background disparity `c0 + cx * u + cy * y` (left coordinates). With
/// `integer` set, `cx` must be zero and each row's disparity is rounded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub c0: f64,
    pub cx: f64,
    pub cy: f64,
    pub integer: bool,
    pub texture: Texture,
}

impl Background {
    pub fn constant(disparity: f64, texture: Texture) -> Self {
        Background {
            c0: disparity,
            cx: 0.0,
            cy: 0.0,
            integer: false,
            texture,
        }
    }

    pub fn disparity(&self, u: f64, y: f64) -> f64 {
        if self.integer {
            (self.c0 + self.cy * y).round()
        } else {
            self.c0 + self.cx * u + self.cy * y
        }
    }

    /// Left coordinate of the background point seen at right column `xr`.
    fn preimage(&self, xr: f64, y: f64) -> f64 {
        if self.integer {
            xr + (self.c0 + self.cy * y).round()
        } else {
            (xr + self.c0 + self.cy * y) / (1.0 - self.cx)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Background,
    Layer(usize),
}

/// The visible surface point at some view location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub surface: Surface,
    /// Left-view horizontal coordinate of the surface point.
    pub u: f64,
    pub disparity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub background: Background,
    pub layers: Vec<Layer>,
}

impl World {
    pub fn validate(&self) -> Result<()> {
        let b = &self.background;
        if b.integer && b.cx != 0.0 {
            return Err(Error::invalid("integer background must not vary along x"));
        }
        if b.cx >= 1.0 {
            return Err(Error::invalid("background x-slope must stay below 1"));
        }
        Ok(())
    }

    fn texture(&self, s: Surface) -> &Texture {
        match s {
            Surface::Background => &self.background.texture,
            Surface::Layer(i) => &self.layers[i].texture,
        }
    }

    /// Surface visible at left-view location `(u, y)`.
    pub fn left_hit(&self, u: f64, y: f64) -> Hit {
        let mut best = Hit {
            surface: Surface::Background,
            u,
            disparity: self.background.disparity(u, y),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.disparity > best.disparity && layer.footprint.contains(u, y) {
                best = Hit {
                    surface: Surface::Layer(i),
                    u,
                    disparity: layer.disparity,
                };
            }
        }
        best
    }

    /// Surface visible at right-view location `(xr, y)`.
    pub fn right_hit(&self, xr: f64, y: f64) -> Hit {
        let u = self.background.preimage(xr, y);
        let mut best = Hit {
            surface: Surface::Background,
            u,
            disparity: self.background.disparity(u, y),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let u = xr + layer.disparity;
            if layer.disparity > best.disparity && layer.footprint.contains(u, y) {
                best = Hit {
                    surface: Surface::Layer(i),
                    u,
                    disparity: layer.disparity,
                };
            }
        }
        best
    }

    pub fn intensity(&self, hit: &Hit, y: f64) -> f64 {
        self.texture(hit.surface).value(hit.u, y)
    }

    /// Renders both views and their ground truth at `width x height`.
    pub fn render(&self, width: usize, height: usize, seed: u64) -> Result<SceneSample> {
        self.validate()?;
        let (wf, n) = (width as f64, width * height);
        let mut left = vec![0.0; n];
        let mut right = vec![0.0; n];
        let mut disp_l = vec![0.0; n];
        let mut disp_r = vec![0.0; n];
        let mut occ_l = vec![false; n];
        let mut occ_r = vec![false; n];
        for y in 0..height {
            let yf = y as f64;
            for x in 0..width {
                let p = y * width + x;
                let xf = x as f64;

                let hl = self.left_hit(xf, yf);
                left[p] = self.intensity(&hl, yf);
                disp_l[p] = hl.disparity as f32 as f64;
                let xr = xf - hl.disparity;
                occ_l[p] = xr > -0.5 && self.right_hit(xr, yf).surface == hl.surface;

                let hr = self.right_hit(xf, yf);
                right[p] = self.intensity(&hr, yf);
                disp_r[p] = hr.disparity as f32 as f64;
                let ul = xf + hr.disparity;
                occ_r[p] = ul < wf - 0.5 && self.left_hit(ul, yf).surface == hr.surface;
            }
        }
        let plane = Shape::plane(height, width);
        Ok(SceneSample {
            left: Image::new(Array::new(plane, left)?)?,
            right: Image::new(Array::new(plane, right)?)?,
            gt_disp_left: DisparityField::new(Array::new(plane, disp_l)?)?,
            gt_disp_right: DisparityField::new(Array::new(plane, disp_r)?)?,
            gt_occ_left: OcclusionMask::from_bits(width, height, &occ_l)?,
            gt_occ_right: OcclusionMask::from_bits(width, height, &occ_r)?,
            seed,
        })
    }
}

/// A rectified stereo pair with exact disparities and occlusion masks for
/// both views.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub left: Image,
    pub right: Image,
    pub gt_disp_left: DisparityField,
    pub gt_disp_right: DisparityField,
    pub gt_occ_left: OcclusionMask,
    pub gt_occ_right: OcclusionMask,
    pub seed: u64,
}

/// Draws a random world for `config`.
///
/// Foreground layers lie entirely inside both views. Bounding boxes that
/// share rows are kept at least `max_disparity` apart horizontally; a layer
/// that cannot be placed after a bounded number of attempts is dropped.
pub fn random_world(config: &SceneConfig) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (w, h) = (config.width as f64, config.height as f64);
    let dmax = config.max_disparity;
    let texture = |rng: &mut ChaCha8Rng| Texture {
        seed: rng.gen(),
        mean: rng.gen_range(0.3..0.7),
        contrast: config.texture_contrast,
        octaves: config.texture_octaves,
        base_cell: 16.0,
    };

    let d_top = rng.gen_range(0.1 * dmax..0.25 * dmax);
    let d_bottom = rng.gen_range(d_top..0.4 * dmax);
    let cy = (d_bottom - d_top) / (h - 1.0);
    let cx = if config.integer_disparity {
        0.0
    } else {
        // keep the plane above 0.1 * dmax across the extended right-view support
        let min_cx = -(d_top - 0.1 * dmax) / (w + dmax);
        rng.gen_range(min_cx..=0.0)
    };
    let background = Background {
        c0: d_top,
        cx,
        cy,
        integer: config.integer_disparity,
        texture: texture(&mut rng),
    };

    let mut layers: Vec<Layer> = Vec::new();
    let fg_lo = 0.4 * dmax;
    for _ in 0..config.num_foreground_layers {
        for _attempt in 0..100 {
            let lw = rng.gen_range(w / 10.0..w / 4.0);
            let lh = rng.gen_range(h / 6.0..h / 2.5);
            // fully inside both views: the right view sees it shifted by up to dmax
            let x0 = rng.gen_range(dmax..w - lw);
            let y0 = rng.gen_range(0.0..h - lh);
            let footprint = if rng.gen_bool(0.5) {
                Footprint::Rect {
                    x0,
                    x1: x0 + lw,
                    y0,
                    y1: y0 + lh,
                }
            } else {
                Footprint::Ellipse {
                    cx: x0 + lw / 2.0,
                    cy: y0 + lh / 2.0,
                    rx: lw / 2.0,
                    ry: lh / 2.0,
                }
            };
            let (bx0, bx1, by0, by1) = footprint.bbox();
            let clash = layers.iter().any(|l| {
                let (ox0, ox1, oy0, oy1) = l.footprint.bbox();
                let rows_overlap = by0 < oy1 + 1.0 && oy0 < by1 + 1.0;
                let cols_close = bx0 < ox1 + dmax && ox0 < bx1 + dmax;
                rows_overlap && cols_close
            });
            if clash {
                continue;
            }
            let disparity = if config.integer_disparity {
                let lo = fg_lo.floor() as i64 + 1;
                let hi = dmax.floor() as i64;
                rng.gen_range(lo..=hi) as f64
            } else {
                rng.gen_range((fg_lo + 0.05 * dmax)..=dmax)
            };
            layers.push(Layer {
                footprint,
                disparity,
                texture: texture(&mut rng),
            });
            break;
        }
    }
    Ok(World { background, layers })
}

pub fn generate_scene(config: &SceneConfig) -> Result<SceneSample> {
    let world = random_world(config)?;
    world.render(config.width, config.height, config.seed)
}
