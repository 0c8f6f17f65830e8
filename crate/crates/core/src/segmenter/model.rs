//! Network definition.
//!
//! Backbone (frozen at test time): per-pixel `[r, g, b, x/W, y/H]` through a
//! 16-unit tanh layer, concatenated with a 3x3 box-blurred copy of that layer,
//! then a second 16-unit tanh layer. Head (adaptable): per-pixel
//! `[features; prompt channels]` through two 24-unit tanh layers to one logit.

use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{bce_with_logit, check_shape, sigmoid};
use super::prompt::{encode_prompts, PROMPT_CHANNELS};
use super::{Click, Image, LogitMap, Mask, PromptState};
use crate::error::{Error, Result};
use crate::numerics::{Layout, ParamVector, Part};

pub const PIXEL_INPUTS: usize = 5;
pub const BACKBONE_HIDDEN: usize = 16;
pub const FEATURES: usize = 16;
pub const HEAD_INPUTS: usize = FEATURES + PROMPT_CHANNELS;
pub const HEAD_HIDDEN: usize = 24;

const CAT: usize = 2 * BACKBONE_HIDDEN;

// Backbone offsets.
const B_W1: usize = 0;
const B_B1: usize = B_W1 + BACKBONE_HIDDEN * PIXEL_INPUTS;
const B_W2: usize = B_B1 + BACKBONE_HIDDEN;
const B_B2: usize = B_W2 + FEATURES * CAT;
const BACKBONE_LEN: usize = B_B2 + FEATURES;

// Head offsets.
const H_W1: usize = 0;
const H_B1: usize = H_W1 + HEAD_HIDDEN * HEAD_INPUTS;
const H_W2: usize = H_B1 + HEAD_HIDDEN;
const H_B2: usize = H_W2 + HEAD_HIDDEN * HEAD_HIDDEN;
const H_W3: usize = H_B2 + HEAD_HIDDEN;
const H_B3: usize = H_W3 + HEAD_HIDDEN;
const HEAD_LEN: usize = H_B3 + 1;

pub const DEFAULT_SIGMA_FRACTION: f64 = 0.05;

/// The fixed parameter layout of this architecture.
pub fn architecture_layout() -> Arc<Layout> {
    static LAYOUT: OnceLock<Arc<Layout>> = OnceLock::new();
    Arc::clone(LAYOUT.get_or_init(|| {
        let layout = Arc::new(Layout::new([
            ("backbone.l1.weight", Part::Backbone, vec![BACKBONE_HIDDEN, PIXEL_INPUTS]),
            ("backbone.l1.bias", Part::Backbone, vec![BACKBONE_HIDDEN]),
            ("backbone.l2.weight", Part::Backbone, vec![FEATURES, CAT]),
            ("backbone.l2.bias", Part::Backbone, vec![FEATURES]),
            ("head.l1.weight", Part::Head, vec![HEAD_HIDDEN, HEAD_INPUTS]),
            ("head.l1.bias", Part::Head, vec![HEAD_HIDDEN]),
            ("head.l2.weight", Part::Head, vec![HEAD_HIDDEN, HEAD_HIDDEN]),
            ("head.l2.bias", Part::Head, vec![HEAD_HIDDEN]),
            ("head.out.weight", Part::Head, vec![1, HEAD_HIDDEN]),
            ("head.out.bias", Part::Head, vec![1]),
        ]));
        debug_assert_eq!(layout.backbone_len(), BACKBONE_LEN);
        debug_assert_eq!(layout.head_len(), HEAD_LEN);
        layout
    }))
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(seed: u64) -> ParamVector {
    let layout = architecture_layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backbone = vec![0.0; layout.backbone_len()];
    let mut head = vec![0.0; layout.head_len()];
    for seg in layout.segments() {
        if seg.shape.len() != 2 {
            continue;
        }
        let (fan_out, fan_in) = (seg.shape[0], seg.shape[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let part = match seg.part {
            Part::Backbone => &mut backbone,
            Part::Head => &mut head,
        };
        for v in &mut part[seg.range()] {
            *v = rng.random_range(-bound..bound);
        }
    }
    ParamVector::new(layout, backbone, head).expect("fresh parameters are finite")
}

fn ensure_architecture(params: &ParamVector) -> Result<()> {
    let layout = params.layout();
    if **layout != *architecture_layout() {
        return Err(Error::Structural("parameters do not match the segmenter architecture".into()));
    }
    Ok(())
}

fn pixel_inputs(image: &Image, x: usize, y: usize) -> [f64; PIXEL_INPUTS] {
    let [r, g, b] = image.rgb(x, y);
    [r, g, b, x as f64 / image.width() as f64, y as f64 / image.height() as f64]
}

#[inline]
fn dot<const N: usize>(w: &[f64], x: &[f64; N]) -> f64 {
    let w: &[f64; N] = w.try_into().expect("row length");
    let mut acc = 0.0;
    for i in 0..N {
        acc += w[i] * x[i];
    }
    acc
}

/// Intermediate backbone activations, kept for the pretraining backward pass.
struct BackboneActs {
    hidden: Vec<f64>,
    blurred: Vec<f64>,
    features: Vec<f64>,
}

fn neighbourhood(x: usize, y: usize, width: usize, height: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    (x.saturating_sub(1)..(x + 2).min(width), y.saturating_sub(1)..(y + 2).min(height))
}

fn backbone_forward(image: &Image, backbone: &[f64]) -> BackboneActs {
    let (w, h) = (image.width(), image.height());
    let n = w * h;
    let w1 = &backbone[B_W1..B_B1];
    let b1 = &backbone[B_B1..B_W2];
    let w2 = &backbone[B_W2..B_B2];
    let b2 = &backbone[B_B2..BACKBONE_LEN];

    let mut hidden = vec![0.0; n * BACKBONE_HIDDEN];
    for y in 0..h {
        for x in 0..w {
            let input = pixel_inputs(image, x, y);
            let out = &mut hidden[(y * w + x) * BACKBONE_HIDDEN..][..BACKBONE_HIDDEN];
            for j in 0..BACKBONE_HIDDEN {
                out[j] = (b1[j] + dot(&w1[j * PIXEL_INPUTS..][..PIXEL_INPUTS], &input)).tanh();
            }
        }
    }

    let mut blurred = vec![0.0; n * BACKBONE_HIDDEN];
    for y in 0..h {
        for x in 0..w {
            let (xs, ys) = neighbourhood(x, y, w, h);
            let count = (xs.len() * ys.len()) as f64;
            let out = &mut blurred[(y * w + x) * BACKBONE_HIDDEN..][..BACKBONE_HIDDEN];
            for qy in ys {
                for qx in xs.clone() {
                    let src = &hidden[(qy * w + qx) * BACKBONE_HIDDEN..][..BACKBONE_HIDDEN];
                    for j in 0..BACKBONE_HIDDEN {
                        out[j] += src[j];
                    }
                }
            }
            for v in out.iter_mut() {
                *v /= count;
            }
        }
    }

    let mut features = vec![0.0; n * FEATURES];
    let mut cat = [0.0; CAT];
    for p in 0..n {
        cat[..BACKBONE_HIDDEN].copy_from_slice(&hidden[p * BACKBONE_HIDDEN..][..BACKBONE_HIDDEN]);
        cat[BACKBONE_HIDDEN..].copy_from_slice(&blurred[p * BACKBONE_HIDDEN..][..BACKBONE_HIDDEN]);
        let out = &mut features[p * FEATURES..][..FEATURES];
        for j in 0..FEATURES {
            out[j] = (b2[j] + dot(&w2[j * CAT..][..CAT], &cat)).tanh();
        }
    }

    BackboneActs { hidden, blurred, features }
}

/// Head activations needed for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    prompt: Vec<f64>,
    hidden1: Vec<f64>,
    hidden2: Vec<f64>,
}

fn head_input(features: &[f64], prompt: &[f64], p: usize) -> [f64; HEAD_INPUTS] {
    let mut x = [0.0; HEAD_INPUTS];
    x[..FEATURES].copy_from_slice(&features[p * FEATURES..][..FEATURES]);
    x[FEATURES..].copy_from_slice(&prompt[p * PROMPT_CHANNELS..][..PROMPT_CHANNELS]);
    x
}

fn head_forward(features: &[f64], prompt: Vec<f64>, head: &[f64], keep: bool) -> (Vec<f64>, Option<HeadCache>) {
    let n = features.len() / FEATURES;
    let w1 = &head[H_W1..H_B1];
    let b1 = &head[H_B1..H_W2];
    let w2 = &head[H_W2..H_B2];
    let b2 = &head[H_B2..H_W3];
    let w3: &[f64; HEAD_HIDDEN] = head[H_W3..H_B3].try_into().expect("output row");
    let b3 = head[H_B3];

    let mut logits = vec![0.0; n];
    let (mut hidden1, mut hidden2) = if keep {
        (vec![0.0; n * HEAD_HIDDEN], vec![0.0; n * HEAD_HIDDEN])
    } else {
        (Vec::new(), Vec::new())
    };
    let mut a1 = [0.0; HEAD_HIDDEN];
    let mut a2 = [0.0; HEAD_HIDDEN];
    for p in 0..n {
        let x = head_input(features, &prompt, p);
        for j in 0..HEAD_HIDDEN {
            a1[j] = (b1[j] + dot(&w1[j * HEAD_INPUTS..][..HEAD_INPUTS], &x)).tanh();
        }
        for j in 0..HEAD_HIDDEN {
            a2[j] = (b2[j] + dot(&w2[j * HEAD_HIDDEN..][..HEAD_HIDDEN], &a1)).tanh();
        }
        logits[p] = b3 + dot(w3, &a2);
        if keep {
            hidden1[p * HEAD_HIDDEN..][..HEAD_HIDDEN].copy_from_slice(&a1);
            hidden2[p * HEAD_HIDDEN..][..HEAD_HIDDEN].copy_from_slice(&a2);
        }
    }
    let cache = keep.then_some(HeadCache { prompt, hidden1, hidden2 });
    (logits, cache)
}

/// Backpropagates `d_logits` through the head. Returns the head gradient and,
/// when requested, the gradient with respect to the backbone features.
fn head_backward(
    features: &[f64],
    cache: &HeadCache,
    head: &[f64],
    d_logits: &[f64],
    want_features: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let n = d_logits.len();
    let w1 = &head[H_W1..H_B1];
    let w2 = &head[H_W2..H_B2];
    let w3 = &head[H_W3..H_B3];

    let mut grad = vec![0.0; HEAD_LEN];
    let mut d_features = want_features.then(|| vec![0.0; n * FEATURES]);
    let mut dz2 = [0.0; HEAD_HIDDEN];
    let mut dz1 = [0.0; HEAD_HIDDEN];
    for p in 0..n {
        let d = d_logits[p];
        if d == 0.0 {
            continue;
        }
        let a1 = &cache.hidden1[p * HEAD_HIDDEN..][..HEAD_HIDDEN];
        let a2 = &cache.hidden2[p * HEAD_HIDDEN..][..HEAD_HIDDEN];
        let x = head_input(features, &cache.prompt, p);

        for j in 0..HEAD_HIDDEN {
            grad[H_W3 + j] += d * a2[j];
            dz2[j] = d * w3[j] * (1.0 - a2[j] * a2[j]);
        }
        grad[H_B3] += d;

        for j in 0..HEAD_HIDDEN {
            let g = &mut grad[H_W2 + j * HEAD_HIDDEN..][..HEAD_HIDDEN];
            for k in 0..HEAD_HIDDEN {
                g[k] += dz2[j] * a1[k];
            }
            grad[H_B2 + j] += dz2[j];
        }

        for k in 0..HEAD_HIDDEN {
            let mut acc = 0.0;
            for j in 0..HEAD_HIDDEN {
                acc += w2[j * HEAD_HIDDEN + k] * dz2[j];
            }
            dz1[k] = acc * (1.0 - a1[k] * a1[k]);
        }

        for k in 0..HEAD_HIDDEN {
            let g = &mut grad[H_W1 + k * HEAD_INPUTS..][..HEAD_INPUTS];
            for i in 0..HEAD_INPUTS {
                g[i] += dz1[k] * x[i];
            }
            grad[H_B1 + k] += dz1[k];
        }

        if let Some(df) = d_features.as_mut() {
            let out = &mut df[p * FEATURES..][..FEATURES];
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for k in 0..HEAD_HIDDEN {
                    acc += w1[k * HEAD_INPUTS + i] * dz1[k];
                }
                *o = acc;
            }
        }
    }
    (grad, d_features)
}

fn backbone_backward(image: &Image, backbone: &[f64], acts: &BackboneActs, d_features: &[f64]) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let n = w * h;
    let w2 = &backbone[B_W2..B_B2];

    let mut grad = vec![0.0; BACKBONE_LEN];
    let mut d_hidden = vec![0.0; n * BACKBONE_HIDDEN];
    let mut d_blurred = vec![0.0; n * BACKBONE_HIDDEN];
    let mut cat = [0.0; CAT];
    let mut dz2 = [0.0; FEATURES];
    for p in 0..n {
        let f = &acts.features[p * FEATURES..][..FEATURES];
        let df = &d_features[p * FEATURES..][..FEATURES];
        for j in 0..FEATURES {
            dz2[j] = df[j] * (1.0 - f[j] * f[j]);
        }
        cat[..BACKBONE_HIDDEN].copy_from_slice(&acts.hidden[p * BACKBONE_HIDDEN..][..BACKBONE_HIDDEN]);
        cat[BACKBONE_HIDDEN..].copy_from_slice(&acts.blurred[p * BACKBONE_HIDDEN..][..BACKBONE_HIDDEN]);
        for j in 0..FEATURES {
            let g = &mut grad[B_W2 + j * CAT..][..CAT];
            for k in 0..CAT {
                g[k] += dz2[j] * cat[k];
            }
            grad[B_B2 + j] += dz2[j];
        }
        for k in 0..CAT {
            let mut acc = 0.0;
            for j in 0..FEATURES {
                acc += w2[j * CAT + k] * dz2[j];
            }
            if k < BACKBONE_HIDDEN {
                d_hidden[p * BACKBONE_HIDDEN + k] += acc;
            } else {
                d_blurred[p * BACKBONE_HIDDEN + k - BACKBONE_HIDDEN] = acc;
            }
        }
    }

    // Transpose of the normalised box blur.
    for y in 0..h {
        for x in 0..w {
            let (xs, ys) = neighbourhood(x, y, w, h);
            let count = (xs.len() * ys.len()) as f64;
            let src = p_slice(&d_blurred, y * w + x).map(|v| v / count);
            for qy in ys {
                for qx in xs.clone() {
                    let dst = &mut d_hidden[(qy * w + qx) * BACKBONE_HIDDEN..][..BACKBONE_HIDDEN];
                    for j in 0..BACKBONE_HIDDEN {
                        dst[j] += src[j];
                    }
                }
            }
        }
    }

    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let input = pixel_inputs(image, x, y);
            let a = &acts.hidden[p * BACKBONE_HIDDEN..][..BACKBONE_HIDDEN];
            for j in 0..BACKBONE_HIDDEN {
                let dz = d_hidden[p * BACKBONE_HIDDEN + j] * (1.0 - a[j] * a[j]);
                let g = &mut grad[B_W1 + j * PIXEL_INPUTS..][..PIXEL_INPUTS];
                for i in 0..PIXEL_INPUTS {
                    g[i] += dz * input[i];
                }
                grad[B_B1 + j] += dz;
            }
        }
    }
    grad
}

fn p_slice(v: &[f64], p: usize) -> [f64; BACKBONE_HIDDEN] {
    v[p * BACKBONE_HIDDEN..][..BACKBONE_HIDDEN].try_into().expect("hidden width")
}

/// d(tta_loss)/d(logit) per pixel.
fn tta_logit_grad(logits: &LogitMap, target: &Mask, clicks: &[Click]) -> Result<(f64, Vec<f64>)> {
    check_shape(logits, target)?;
    let n = logits.values.len() as f64;
    let mut loss = 0.0;
    let mut grad: Vec<f64> = logits
        .values
        .iter()
        .zip(target.bits())
        .map(|(&l, &t)| {
            let y = if t { 1.0 } else { 0.0 };
            loss += bce_with_logit(l, y);
            (sigmoid(l) - y) / n
        })
        .collect();
    loss /= n;
    for c in clicks {
        if !c.in_bounds(logits.width, logits.height) {
            return Err(Error::Input(format!("click ({}, {}) out of bounds", c.x, c.y)));
        }
        let i = c.index(logits.width);
        let y = c.sign.label();
        loss += bce_with_logit(logits.values[i], y);
        grad[i] += sigmoid(logits.values[i]) - y;
    }
    Ok((loss, grad))
}

fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::AdaptationStep(format!("non-finite {what}")))
    }
}

/// An image with its frozen backbone features precomputed. All forward and
/// backward passes of one interactive session go through this.
#[derive(Debug, Clone)]
pub struct FrozenScene {
    image: Arc<Image>,
    backbone: Vec<f64>,
    features: Vec<f64>,
    sigma_fraction: f64,
}

impl FrozenScene {
    pub fn new(image: Arc<Image>, params: &ParamVector, sigma_fraction: f64) -> Result<Self> {
        ensure_architecture(params)?;
        let acts = backbone_forward(&image, params.backbone());
        Ok(Self { image, backbone: params.backbone().to_vec(), features: acts.features, sigma_fraction })
    }

    pub fn image(&self) -> &Arc<Image> {
        &self.image
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn sigma_fraction(&self) -> f64 {
        self.sigma_fraction
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    fn check(&self, prompts: &PromptState<'_>, params: &ParamVector) -> Result<()> {
        ensure_architecture(params)?;
        if params.backbone() != self.backbone.as_slice() {
            return Err(Error::Structural("backbone differs from the one the scene was built with".into()));
        }
        let (w, h) = (self.width(), self.height());
        if let Some(c) = prompts.clicks.iter().find(|c| !c.in_bounds(w, h)) {
            return Err(Error::Input(format!("click ({}, {}) outside {w}x{h}", c.x, c.y)));
        }
        if let Some(m) = prompts.prev_mask {
            if m.width() != w || m.height() != h {
                return Err(Error::Structural("previous mask has the wrong shape".into()));
            }
        }
        Ok(())
    }

    fn run(&self, prompts: &PromptState<'_>, params: &ParamVector, keep: bool) -> Result<(LogitMap, Option<HeadCache>)> {
        self.check(prompts, params)?;
        let prompt = encode_prompts(prompts, self.width(), self.height(), self.sigma_fraction);
        let (values, cache) = head_forward(&self.features, prompt, params.head(), keep);
        let logits = LogitMap { width: self.width(), height: self.height(), values };
        ensure_finite(&logits.values, "logits")?;
        Ok((logits, cache))
    }

    pub fn logits(&self, prompts: &PromptState<'_>, params: &ParamVector) -> Result<LogitMap> {
        Ok(self.run(prompts, params, false)?.0)
    }

    pub fn logits_with_cache(&self, prompts: &PromptState<'_>, params: &ParamVector) -> Result<(LogitMap, HeadCache)> {
        let (logits, cache) = self.run(prompts, params, true)?;
        Ok((logits, cache.expect("cache requested")))
    }

    pub fn predict(&self, prompts: &PromptState<'_>, params: &ParamVector) -> Result<Mask> {
        Ok(self.logits(prompts, params)?.threshold())
    }

    /// Loss and head gradient of `tta_loss(logits, target, clicks)` for a
    /// forward pass previously run with [`Self::logits_with_cache`].
    pub fn tta_gradient(
        &self,
        logits: &LogitMap,
        cache: &HeadCache,
        params: &ParamVector,
        target: &Mask,
        clicks: &[Click],
    ) -> Result<(f64, Vec<f64>)> {
        let (loss, d_logits) = tta_logit_grad(logits, target, clicks)?;
        let (grad, _) = head_backward(&self.features, cache, params.head(), &d_logits, false);
        ensure_finite(&grad, "gradient")?;
        Ok((loss, grad))
    }

    /// Convenience: forward with cache, then [`Self::tta_gradient`].
    pub fn tta_loss_and_gradient(
        &self,
        prompts: &PromptState<'_>,
        params: &ParamVector,
        target: &Mask,
        clicks: &[Click],
    ) -> Result<(f64, Vec<f64>)> {
        let (logits, cache) = self.logits_with_cache(prompts, params)?;
        self.tta_gradient(&logits, &cache, params, target, clicks)
    }
}

/// Full forward pass with the default click spread.
pub fn forward(image: &Image, prompts: &PromptState<'_>, params: &ParamVector) -> Result<LogitMap> {
    FrozenScene::new(Arc::new(image.clone()), params, DEFAULT_SIGMA_FRACTION)?.logits(prompts, params)
}

pub fn predict_mask(image: &Image, prompts: &PromptState<'_>, params: &ParamVector) -> Result<Mask> {
    Ok(forward(image, prompts, params)?.threshold())
}

/// Head gradient of the adaptation loss. The backbone receives no gradient.
pub fn backward(
    image: &Image,
    prompts: &PromptState<'_>,
    params: &ParamVector,
    target: &Mask,
    clicks: &[Click],
) -> Result<Vec<f64>> {
    let scene = FrozenScene::new(Arc::new(image.clone()), params, DEFAULT_SIGMA_FRACTION)?;
    Ok(scene.tta_loss_and_gradient(prompts, params, target, clicks)?.1)
}

/// Loss and gradient of `mask_bce_loss(forward(...), target)` with respect to
/// both backbone and head. Used for pretraining only.
pub fn backward_full(
    image: &Image,
    prompts: &PromptState<'_>,
    params: &ParamVector,
    target: &Mask,
    sigma_fraction: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    ensure_architecture(params)?;
    let acts = backbone_forward(image, params.backbone());
    let prompt = encode_prompts(prompts, image.width(), image.height(), sigma_fraction);
    let (values, cache) = head_forward(&acts.features, prompt, params.head(), true);
    let cache = cache.expect("cache requested");
    let logits = LogitMap { width: image.width(), height: image.height(), values };
    let (loss, d_logits) = tta_logit_grad(&logits, target, &[])?;
    let (head_grad, d_features) = head_backward(&acts.features, &cache, params.head(), &d_logits, true);
    let backbone_grad = backbone_backward(image, params.backbone(), &acts, &d_features.expect("requested"));
    if !loss.is_finite() {
        return Err(Error::AdaptationStep("non-finite loss".into()));
    }
    Ok((loss, backbone_grad, head_grad))
}
