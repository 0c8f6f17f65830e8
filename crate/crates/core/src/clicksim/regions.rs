//! Error regions between a prediction and the ground truth, and the oracle
//! click placed at the centre of the largest one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmenter::{Click, Mask, Sign};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Object pixels the prediction missed; corrected with a positive click.
    FalseNegative,
    /// Background pixels the prediction claimed; corrected with a negative click.
    FalsePositive,
}

impl Polarity {
    pub fn click_sign(self) -> Sign {
        match self {
            Polarity::FalseNegative => Sign::Positive,
            Polarity::FalsePositive => Sign::Negative,
        }
    }
}

/// One 4-connected component of erroneous pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRegion {
    /// Row-major pixel indices, ascending.
    pub pixels: Vec<usize>,
    pub polarity: Polarity,
    pub area: usize,
    /// Pixel farthest from the region boundary, as `(x, y)`.
    pub anchor: (usize, usize),
}

/// 4-connected components of the set pixels, each as ascending row-major
/// indices. Components are ordered by their first pixel.
pub fn connected_components(mask: &Mask) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width(), mask.height());
    let bits = mask.bits();
    let mut seen = vec![false; bits.len()];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..bits.len() {
        if !bits[start] || seen[start] {
            continue;
        }
        let mut pixels = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if bits[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        pixels.sort_unstable();
        components.push(pixels);
    }
    components
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
/// `f[0]` must be finite; infinite entries never contribute.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from each region pixel to the nearest pixel
/// outside the region; pixels beyond the image border count as outside.
/// Returned in the same order as `pixels`.
pub fn squared_distance_to_boundary(pixels: &[usize], width: usize) -> Vec<f64> {
    if pixels.is_empty() {
        return Vec::new();
    }
    let xs = pixels.iter().map(|p| p % width);
    let ys = pixels.iter().map(|p| p / width);
    let (x0, x1) = (xs.clone().min().unwrap(), xs.max().unwrap());
    let (y0, y1) = (ys.clone().min().unwrap(), ys.max().unwrap());
    // Bounding box plus a one-pixel ring of guaranteed background.
    let bw = x1 - x0 + 3;
    let bh = y1 - y0 + 3;
    let local = |p: usize| (p / width - y0 + 1) * bw + (p % width - x0 + 1);

    let mut grid = vec![0.0; bw * bh];
    for &p in pixels {
        grid[local(p)] = f64::INFINITY;
    }

    let longest = bw.max(bh);
    let mut f = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest + 1];
    for x in 0..bw {
        for y in 0..bh {
            f[y] = grid[y * bw + x];
        }
        edt_1d(&f[..bh], &mut out[..bh], &mut v, &mut z);
        for y in 0..bh {
            grid[y * bw + x] = out[y];
        }
    }
    for y in 0..bh {
        let row = &mut grid[y * bw..(y + 1) * bw];
        f[..bw].copy_from_slice(row);
        edt_1d(&f[..bw], &mut out[..bw], &mut v, &mut z);
        row.copy_from_slice(&out[..bw]);
    }
    pixels.iter().map(|&p| grid[local(p)]).collect()
}

fn region(pixels: Vec<usize>, polarity: Polarity, width: usize) -> ErrorRegion {
    let dist = squared_distance_to_boundary(&pixels, width);
    let mut best = 0;
    for (i, &d) in dist.iter().enumerate() {
        if d > dist[best] {
            best = i;
        }
    }
    let anchor = (pixels[best] % width, pixels[best] / width);
    ErrorRegion { area: pixels.len(), anchor, polarity, pixels }
}

/// All false-negative and false-positive regions (FN first).
pub fn error_regions(pred: &Mask, gt: &Mask) -> Result<Vec<ErrorRegion>> {
    pred.ensure_same_shape(gt)?;
    let (w, h) = (gt.width(), gt.height());
    let fn_mask = Mask::from_bits(w, h, gt.bits().iter().zip(pred.bits()).map(|(&g, &p)| g && !p).collect())?;
    let fp_mask = Mask::from_bits(w, h, gt.bits().iter().zip(pred.bits()).map(|(&g, &p)| p && !g).collect())?;
    let mut regions: Vec<ErrorRegion> =
        connected_components(&fn_mask).into_iter().map(|c| region(c, Polarity::FalseNegative, w)).collect();
    regions.extend(connected_components(&fp_mask).into_iter().map(|c| region(c, Polarity::FalsePositive, w)));
    Ok(regions)
}

/// The simulated user's next click: centre of the largest error region.
///
/// Ties on area prefer false negatives, then the region whose first pixel
/// comes earliest in row-major order.
pub fn next_click(pred: &Mask, gt: &Mask) -> Result<Click> {
    let regions = error_regions(pred, gt)?;
    let largest = regions
        .into_iter()
        .min_by_key(|r| {
            let polarity_rank = match r.polarity {
                Polarity::FalseNegative => 0,
                Polarity::FalsePositive => 1,
            };
            (std::cmp::Reverse(r.area), polarity_rank, r.pixels[0])
        })
        .ok_or_else(|| Error::Protocol("prediction already equals the ground truth".into()))?;
    let (x, y) = largest.anchor;
    Ok(Click::new(x as u32, y as u32, largest.polarity.click_sign(), 0))
}
