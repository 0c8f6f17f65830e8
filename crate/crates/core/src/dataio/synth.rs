//! Seeded multi-part, low-contrast synthetic scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::png_io::quantize;
use crate::clicksim::connected_components;
use crate::error::{Error, Result};
use crate::segmenter::{check_dims, Image, Mask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub width: usize,
    pub height: usize,
    /// Inclusive `[min, max]` number of disjoint parts per object.
    pub parts_per_object: [usize; 2],
    /// 0 keeps the full palette contrast, 1 makes the object the background colour.
    pub camouflage_level: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            width: 64,
            height: 64,
            parts_per_object: [2, 4],
            camouflage_level: 0.6,
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        check_dims(self.width, self.height).map_err(|e| Error::Config(e.to_string()))?;
        let [lo, hi] = self.parts_per_object;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("parts_per_object [{lo}, {hi}] is not a valid range")));
        }
        if hi > 8 || self.width.min(self.height) < 16 {
            return Err(Error::Config(format!("{hi} parts do not fit a {}x{} image", self.width, self.height)));
        }
        if !(0.0..=1.0).contains(&self.camouflage_level) {
            return Err(Error::Config(format!("camouflage_level {} outside [0, 1]", self.camouflage_level)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma {} must be non-negative", self.noise_sigma)));
        }
        Ok(())
    }
}

/// One generated sample.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Image,
    /// Union of all parts.
    pub gt: Mask,
    pub parts: Vec<Mask>,
    pub background: [f64; 3],
    pub foreground: Vec<[f64; 3]>,
}

/// Pixels within Chebyshev distance `r` of a set pixel.
fn dilate(mask: &Mask, r: usize) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    Mask::from_fn(w, h, |x, y| {
        let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        (y0..=y1).any(|yy| (x0..=x1).any(|xx| mask.get(xx, yy)))
    })
}

/// A thresholded sum of Gaussian bumps, reduced to the component holding
/// the main bump's centre.
fn blob(rng: &mut ChaCha8Rng, w: usize, h: usize, radius: f64) -> Option<Mask> {
    let margin = radius + 1.0;
    if (w as f64) <= 2.0 * margin || (h as f64) <= 2.0 * margin {
        return None;
    }
    let cx = rng.random_range(margin..w as f64 - margin);
    let cy = rng.random_range(margin..h as f64 - margin);
    let main_s = radius / (2.0 * std::f64::consts::LN_2).sqrt();
    let mut bumps = vec![(cx, cy, main_s)];
    for _ in 0..rng.random_range(1..=3) {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let dist = radius * rng.random_range(0.5..1.0);
        let s = main_s * rng.random_range(0.45..0.75);
        bumps.push((cx + dist * angle.cos(), cy + dist * angle.sin(), s));
    }
    let field = Mask::from_fn(w, h, |x, y| {
        let v: f64 = bumps
            .iter()
            .map(|&(bx, by, s)| (-((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)) / (2.0 * s * s)).exp())
            .sum();
        v >= 0.5
    });
    let centre = cy.round() as usize * w + cx.round() as usize;
    let comp = connected_components(&field).into_iter().find(|c| c.binary_search(&centre).is_ok())?;
    let mut bits = vec![false; w * h];
    for p in comp {
        bits[p] = true;
    }
    let m = Mask::from_bits(w, h, bits).ok()?;
    // keep a one-pixel border free so every part is fully visible
    let touches_border = (0..w).any(|x| m.get(x, 0) || m.get(x, h - 1)) || (0..h).any(|y| m.get(0, y) || m.get(w - 1, y));
    (!touches_border && m.area() >= 9).then_some(m)
}

const GAP: usize = 2;

fn place_parts(rng: &mut ChaCha8Rng, w: usize, h: usize, n: usize) -> Option<Vec<Mask>> {
    let side = w.min(h) as f64;
    let mut parts: Vec<Mask> = Vec::with_capacity(n);
    let mut blocked = Mask::empty(w, h);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..60 {
            let radius = side * rng.random_range(0.07..0.14);
            let Some(b) = blob(rng, w, h, radius) else { continue };
            if b.bits().iter().zip(blocked.bits()).any(|(&a, &c)| a && c) {
                continue;
            }
            blocked.union_with(&dilate(&b, GAP)).ok()?;
            parts.push(b);
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    Some(parts)
}

/// Deterministic scene number `index` of the dataset described by `cfg`.
pub fn generate_scene(cfg: &SynthConfig, index: u64) -> Result<Scene> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);

    let [lo, hi] = cfg.parts_per_object;
    let n_parts = rng.random_range(lo..=hi);
    let parts = (0..100)
        .find_map(|_| place_parts(&mut rng, w, h, n_parts))
        .ok_or_else(|| Error::Config(format!("could not place {n_parts} separated parts in {w}x{h}")))?;

    let mut background = [0.0; 3];
    for c in &mut background {
        *c = if rng.random_bool(0.5) { rng.random_range(0.15..0.35) } else { rng.random_range(0.65..0.85) };
    }
    let pull = 1.0 - cfg.camouflage_level;
    let foreground: Vec<[f64; 3]> = parts
        .iter()
        .map(|_| {
            let jitter = rng.random_range(0.85..=1.0);
            background.map(|b| b + pull * jitter * ((1.0 - b) - b))
        })
        .collect();

    // shared low-frequency texture
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.08..0.3);
            (freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.01..0.035))
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");

    let mut owner = vec![usize::MAX; w * h];
    for (k, p) in parts.iter().enumerate() {
        for (i, &b) in p.bits().iter().enumerate() {
            if b {
                owner[i] = k;
            }
        }
    }
    let mut px = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let tex: f64 = waves.iter().map(|&(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
            let base = match owner[y * w + x] {
                usize::MAX => background,
                k => foreground[k],
            };
            for b in base {
                let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                px.push(quantize((b + tex + n).clamp(0.0, 1.0)) as f64 / 255.0);
            }
        }
    }
    let image = Image::new(w, h, px)?;
    let mut gt = Mask::empty(w, h);
    for p in &parts {
        gt.union_with(p)?;
    }
    Ok(Scene { image, gt, parts, background, foreground })
}
