//! Procedural image pairs with known deformation.
//!
//! A pair is rendered from one continuous texture `tex(x, y)` on the plane:
//! the source is `tex(p)` and the target is `tex(M(p))`, where
//! `M(p) = c + s R(theta) (p - c) + t + d(p)` is a global similarity about
//! the canvas centre `c` plus a smooth local displacement `d`. The ground
//! truth therefore lives on the target grid: `target(p) = source(p + flow(p))`
//! with `flow(p) = M(p) - p`, and `A(p)` is the Jacobian of `M`.

use super::{DataError, Image, Keypoint, KeypointSet, Mask};
use crate::geometry::{AffineField, FlowField, PixelCoord};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    Blobs,
    Checker,
    Noise,
    Mixed,
}

impl TextureKind {
    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Blobs => "blobs",
            TextureKind::Checker => "checker",
            TextureKind::Noise => "noise",
            TextureKind::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "blobs" => TextureKind::Blobs,
            "checker" => TextureKind::Checker,
            "noise" => TextureKind::Noise,
            "mixed" => TextureKind::Mixed,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Square canvas side in pixels.
    pub size: usize,
    pub scale_range: (f64, f64),
    /// Degrees.
    pub rot_range: (f64, f64),
    /// Horizontal translation range in pixels.
    pub trans_x: (f64, f64),
    /// Vertical translation range in pixels.
    pub trans_y: (f64, f64),
    /// Cap on the translation vector length; longer samples are rescaled.
    pub trans_max: f64,
    /// Bound on `|d(p)|` in pixels.
    pub local_warp_amp: f64,
    /// Shortest wavelength of the local displacement, as a fraction of `size`.
    pub local_warp_smoothness: f64,
    pub texture: TextureKind,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            scale_range: (0.9, 1.1),
            rot_range: (-15.0, 15.0),
            trans_x: (-8.0, 8.0),
            trans_y: (-8.0, 8.0),
            trans_max: 8.0,
            local_warp_amp: 2.0,
            local_warp_smoothness: 0.5,
            texture: TextureKind::Mixed,
        }
    }
}

impl SynthConfig {
    /// No deformation at all.
    pub fn identity(size: usize) -> Self {
        Self {
            size,
            scale_range: (1.0, 1.0),
            rot_range: (0.0, 0.0),
            trans_x: (0.0, 0.0),
            trans_y: (0.0, 0.0),
            trans_max: 0.0,
            local_warp_amp: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let range = |name: &str, (lo, hi): (f64, f64), min: f64, max: f64| {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < min || hi > max {
                Err(DataError::Config(format!(
                    "{name} range ({lo}, {hi}) must satisfy {min} <= lo <= hi <= {max}"
                )))
            } else {
                Ok(())
            }
        };
        if self.size < 8 {
            return Err(DataError::Config(format!("size {} is below 8", self.size)));
        }
        range("scale", self.scale_range, 0.5, 2.0)?;
        range("rotation", self.rot_range, -45.0, 45.0)?;
        let half = self.size as f64 / 2.0;
        range("trans_x", self.trans_x, -half, half)?;
        range("trans_y", self.trans_y, -half, half)?;
        if !(self.trans_max.is_finite() && self.trans_max >= 0.0) {
            return Err(DataError::Config(format!("trans_max {} must be >= 0", self.trans_max)));
        }
        if !(self.local_warp_amp.is_finite() && self.local_warp_amp >= 0.0) {
            return Err(DataError::Config(format!(
                "local_warp_amp {} must be >= 0",
                self.local_warp_amp
            )));
        }
        if !(self.local_warp_smoothness.is_finite() && self.local_warp_smoothness > 0.0) {
            return Err(DataError::Config(format!(
                "local_warp_smoothness {} must be > 0",
                self.local_warp_smoothness
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub source: Image,
    pub target: Image,
    /// Image-grid field on the target grid, mapping into the source.
    pub gt_field: AffineField,
    pub gt_flow: FlowField,
    pub fg_mask: Mask,
    pub seed: u64,
}

struct Wave {
    amp: f64,
    kx: f64,
    ky: f64,
    phase: f64,
}

impl Wave {
    fn eval(&self, x: f64, y: f64) -> f64 {
        self.amp * (self.kx * x + self.ky * y + self.phase).sin()
    }

    fn grad(&self, x: f64, y: f64) -> (f64, f64) {
        let c = self.amp * (self.kx * x + self.ky * y + self.phase).cos();
        (c * self.kx, c * self.ky)
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    inv_two_sigma2: f64,
    rgb: [f64; 3],
}

struct Texture {
    kind: TextureKind,
    // object
    centre: (f64, f64),
    radii: (f64, f64),
    orient: f64,
    wobble: Vec<(f64, f64, f64)>,
    fg_base: [f64; 3],
    fg_blobs: Vec<Blob>,
    checker_period: f64,
    checker_angle: f64,
    checker_rgb: [f64; 3],
    noise: Vec<(Wave, [f64; 3])>,
    // background
    bg_base: [f64; 3],
    bg_waves: Vec<(Wave, [f64; 3])>,
}

fn rand_rgb(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl Texture {
    fn random(size: f64, kind: TextureKind, rng: &mut ChaCha8Rng) -> Self {
        let c = size / 2.0;
        let centre = (c + rng.gen_range(-0.05..0.05) * size, c + rng.gen_range(-0.05..0.05) * size);
        let radii = (rng.gen_range(0.28..0.36) * size, rng.gen_range(0.28..0.36) * size);
        let wobble = (2..5)
            .map(|n| (n as f64, rng.gen_range(-0.06..0.06), rng.gen_range(0.0..2.0 * PI)))
            .collect();
        let n_blobs = (size * size / 60.0) as usize;
        let fg_blobs = (0..n_blobs)
            .map(|_| {
                let sigma: f64 = rng.gen_range(2.0..5.0);
                Blob {
                    cx: centre.0 + rng.gen_range(-1.1..1.1) * radii.0,
                    cy: centre.1 + rng.gen_range(-1.1..1.1) * radii.1,
                    inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                    rgb: rand_rgb(rng, -0.6, 0.6),
                }
            })
            .collect();
        let noise = (0..6)
            .map(|k| {
                let wl = rng.gen_range(5.0..12.0) * (1.0 + k as f64 * 0.3);
                let a = rng.gen_range(0.0..2.0 * PI);
                let w = Wave {
                    amp: 1.0,
                    kx: 2.0 * PI / wl * a.cos(),
                    ky: 2.0 * PI / wl * a.sin(),
                    phase: rng.gen_range(0.0..2.0 * PI),
                };
                (w, rand_rgb(rng, -0.08, 0.08))
            })
            .collect();
        let bg_waves = (0..3)
            .map(|_| {
                let wl = rng.gen_range(10.0..24.0);
                let a = rng.gen_range(0.0..2.0 * PI);
                let w = Wave {
                    amp: 1.0,
                    kx: 2.0 * PI / wl * a.cos(),
                    ky: 2.0 * PI / wl * a.sin(),
                    phase: rng.gen_range(0.0..2.0 * PI),
                };
                (w, rand_rgb(rng, -0.12, 0.12))
            })
            .collect();
        Texture {
            kind,
            centre,
            radii,
            orient: rng.gen_range(0.0..PI),
            wobble,
            fg_base: rand_rgb(rng, 0.35, 0.65),
            fg_blobs,
            checker_period: rng.gen_range(9.0..14.0),
            checker_angle: rng.gen_range(0.0..PI),
            checker_rgb: rand_rgb(rng, -0.2, 0.2),
            noise,
            bg_base: rand_rgb(rng, 0.15, 0.35),
            bg_waves,
        }
    }

    /// Signed object membership: > 0 inside, in units of the normalised radius.
    fn shape(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.centre.0, y - self.centre.1);
        let (s, c) = self.orient.sin_cos();
        let (u, v) = ((c * dx + s * dy) / self.radii.0, (-s * dx + c * dy) / self.radii.1);
        let r = (u * u + v * v).sqrt();
        let ang = v.atan2(u);
        let limit = 1.0 + self.wobble.iter().map(|(n, a, ph)| a * (n * ang + ph).sin()).sum::<f64>();
        limit - r
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        self.shape(x, y) > 0.0
    }

    fn foreground(&self, x: f64, y: f64) -> [f64; 3] {
        let mut rgb = self.fg_base;
        let blobs = matches!(self.kind, TextureKind::Blobs | TextureKind::Mixed);
        let checker = matches!(self.kind, TextureKind::Checker | TextureKind::Mixed);
        let noise = matches!(self.kind, TextureKind::Noise | TextureKind::Mixed);
        if blobs {
            for b in &self.fg_blobs {
                let r2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
                let e = (-r2 * b.inv_two_sigma2).exp();
                if e > 1e-6 {
                    rgb.iter_mut().zip(b.rgb).for_each(|(v, c)| *v += c * e);
                }
            }
        }
        if checker {
            let (s, c) = self.checker_angle.sin_cos();
            let k = 2.0 * PI / self.checker_period;
            let q = ((c * x + s * y) * k).sin() * ((-s * x + c * y) * k).sin();
            let t = (3.0 * q).tanh();
            rgb.iter_mut().zip(self.checker_rgb).for_each(|(v, c)| *v += c * t);
        }
        if noise {
            for (w, col) in &self.noise {
                let t = w.eval(x, y);
                rgb.iter_mut().zip(col).for_each(|(v, c)| *v += c * t);
            }
        }
        rgb
    }

    fn background(&self, x: f64, y: f64) -> [f64; 3] {
        let mut rgb = self.bg_base;
        for (w, col) in &self.bg_waves {
            let t = w.eval(x, y);
            rgb.iter_mut().zip(col).for_each(|(v, c)| *v += c * t);
        }
        rgb
    }

    fn eval(&self, x: f64, y: f64) -> [f64; 3] {
        // soft edge about one pixel wide
        let edge = smoothstep(-0.5, 0.5, self.shape(x, y) * self.radii.0.min(self.radii.1));
        let bg = self.background(x, y);
        if edge <= 0.0 {
            return bg;
        }
        let fg = self.foreground(x, y);
        [0, 1, 2].map(|c| (bg[c] + edge * (fg[c] - bg[c])).clamp(0.0, 1.0))
    }
}

struct Deformation {
    centre: (f64, f64),
    linear: [[f64; 2]; 2],
    trans: (f64, f64),
    dx: Vec<Wave>,
    dy: Vec<Wave>,
}

impl Deformation {
    fn random(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let pick = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
            if lo == hi {
                lo
            } else {
                rng.gen_range(lo..hi)
            }
        };
        let s = pick(rng, cfg.scale_range);
        let th = pick(rng, cfg.rot_range).to_radians();
        let (sin, cos) = th.sin_cos();
        let mut t = (pick(rng, cfg.trans_x), pick(rng, cfg.trans_y));
        let len = (t.0 * t.0 + t.1 * t.1).sqrt();
        if len > cfg.trans_max {
            let k = if len > 0.0 { cfg.trans_max / len } else { 0.0 };
            t = (t.0 * k, t.1 * k);
        }
        let size = cfg.size as f64;
        let c = (size - 1.0) / 2.0;
        // each component bounded by amp / sqrt(2) so |d| <= amp
        let waves = |rng: &mut ChaCha8Rng| -> Vec<Wave> {
            if cfg.local_warp_amp == 0.0 {
                return Vec::new();
            }
            let weights: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..1.0)).collect();
            let total: f64 = weights.iter().sum();
            let bound = cfg.local_warp_amp / 2f64.sqrt();
            weights
                .iter()
                .map(|w| {
                    let wl = size * cfg.local_warp_smoothness * rng.gen_range(1.0..2.0);
                    let a = rng.gen_range(0.0..2.0 * PI);
                    Wave {
                        amp: bound * w / total,
                        kx: 2.0 * PI / wl * a.cos(),
                        ky: 2.0 * PI / wl * a.sin(),
                        phase: rng.gen_range(0.0..2.0 * PI),
                    }
                })
                .collect()
        };
        let dx = waves(rng);
        let dy = waves(rng);
        Deformation {
            centre: (c, c),
            linear: [[s * cos, -s * sin], [s * sin, s * cos]],
            trans: t,
            dx,
            dy,
        }
    }

    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.dx.iter().map(|w| w.eval(x, y)).sum(),
            self.dy.iter().map(|w| w.eval(x, y)).sum(),
        )
    }

    /// Source location and Jacobian for target pixel `(x, y)`.
    fn map(&self, x: f64, y: f64) -> ((f64, f64), [[f64; 2]; 2]) {
        let (px, py) = (x - self.centre.0, y - self.centre.1);
        let l = self.linear;
        let (lx, ly) = self.local(x, y);
        let mx = self.centre.0 + l[0][0] * px + l[0][1] * py + self.trans.0 + lx;
        let my = self.centre.1 + l[1][0] * px + l[1][1] * py + self.trans.1 + ly;
        let mut jac = l;
        for w in &self.dx {
            let (gx, gy) = w.grad(x, y);
            jac[0][0] += gx;
            jac[0][1] += gy;
        }
        for w in &self.dy {
            let (gx, gy) = w.grad(x, y);
            jac[1][0] += gx;
            jac[1][1] += gy;
        }
        ((mx, my), jac)
    }
}

/// Renders a reproducible pair from `seed`.
pub fn gen_pair(seed: u64, cfg: &SynthConfig) -> Result<SyntheticPair, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.size;
    let tex = Texture::random(n as f64, cfg.texture, &mut rng);
    let def = Deformation::random(cfg, &mut rng);

    let mut src = Vec::with_capacity(n * n * 3);
    let mut tgt = Vec::with_capacity(n * n * 3);
    let mut field = Vec::with_capacity(n * n * 6);
    let mut flow = Vec::with_capacity(n * n * 2);
    let mut mask = Vec::with_capacity(n * n);
    let max = (n - 1) as f64;
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64, y as f64);
            src.extend(tex.eval(xf, yf));
            let ((mx, my), jac) = def.map(xf, yf);
            tgt.extend(tex.eval(mx, my));
            let (u, v) = (mx - xf, my - yf);
            field.extend([jac[0][0], jac[0][1], jac[1][0], jac[1][1], u, v]);
            flow.extend([u, v]);
            let on_canvas = (0.0..=max).contains(&mx) && (0.0..=max).contains(&my);
            mask.push(on_canvas && tex.inside(mx, my));
        }
    }
    let gt_field = AffineField::from_params(
        Tensor::new(&[n, n, 6], field).map_err(|e| DataError::Dimensions(e.to_string()))?,
    )
    .map_err(|e| DataError::Dimensions(e.to_string()))?;
    Ok(SyntheticPair {
        source: Image::new(n, n, src)?,
        target: Image::new(n, n, tgt)?,
        gt_field,
        gt_flow: FlowField::new(n, n, flow).map_err(|e| DataError::Dimensions(e.to_string()))?,
        fg_mask: Mask::new(n, n, mask)?,
        seed,
    })
}

/// Picks `count` foreground target pixels and their ground-truth source
/// locations, returned as `(target keypoints, source keypoints)` sharing ids.
pub fn pair_keypoints(pair: &SyntheticPair, count: usize, seed: u64) -> (KeypointSet, KeypointSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = &pair.fg_mask;
    let candidates: Vec<(usize, usize)> = (0..m.height())
        .flat_map(|y| (0..m.width()).map(move |x| (x, y)))
        .filter(|&(x, y)| m.get(x, y))
        .collect();
    let picks = rand::seq::index::sample(&mut rng, candidates.len(), count.min(candidates.len()));
    let mut tgt = Vec::new();
    let mut src = Vec::new();
    for (id, k) in picks.iter().enumerate() {
        let (x, y) = candidates[k];
        let [u, v] = pair.gt_flow.sample(PixelCoord::new(x as f64, y as f64));
        tgt.push(Keypoint { id: id as u64, x: x as f64, y: y as f64 });
        src.push(Keypoint { id: id as u64, x: x as f64 + u, y: y as f64 + v });
    }
    (KeypointSet::new(tgt).expect("unique ids"), KeypointSet::new(src).expect("unique ids"))
}
