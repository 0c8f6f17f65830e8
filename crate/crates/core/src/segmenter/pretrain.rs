//! Offline full-batch training of backbone and head on generated scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward_full, init_params, predict_mask, Click, Image, Mask, PromptState, DEFAULT_SIGMA_FRACTION};
use crate::clicksim::next_click;
use crate::dataio::{generate_scene, SynthConfig};
use crate::engine::iou;
use crate::error::{Error, Result};
use crate::numerics::{adamw_update, OptimizerHyper, ParamVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Training scenes. `synth.n_samples` is the training set size.
    pub synth: SynthConfig,
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Held-out single-part scenes scored by 1-click IoU after training.
    pub validation_samples: usize,
    pub sigma_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig {
                n_samples: 64,
                width: 32,
                height: 32,
                parts_per_object: [1, 3],
                camouflage_level: 0.3,
                noise_sigma: 0.03,
                seed: 1000,
            },
            epochs: 300,
            seed: 0,
            learning_rate: 1e-2,
            validation_samples: 100,
            sigma_fraction: DEFAULT_SIGMA_FRACTION,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.synth.n_samples == 0 {
            return Err(Error::Config("pretraining needs at least one training scene".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.sigma_fraction.is_finite() && self.sigma_fraction > 0.0) {
            return Err(Error::Config(format!("sigma_fraction {} must be positive", self.sigma_fraction)));
        }
        Ok(())
    }

    fn validation_synth(&self) -> SynthConfig {
        SynthConfig { parts_per_object: [1, 1], seed: self.synth.seed ^ 0x5eed_0f_7e57, ..self.synth.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
    pub validation_iou: f64,
    /// Mean 1-click IoU of the untrained initialisation on the same scenes.
    pub initial_validation_iou: f64,
    pub loss_history: Vec<f64>,
}

/// One supervised tuple: image, clicks, optional previous mask, target.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub image: Image,
    pub clicks: Vec<Click>,
    pub prev_mask: Option<Mask>,
    pub target: Mask,
}

/// Grows (`grow`) or shrinks the mask by one 4-neighbour step.
fn morph(mask: &Mask, grow: bool) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    Mask::from_fn(w, h, |x, y| {
        let mut n = vec![(x, y)];
        if x > 0 {
            n.push((x - 1, y));
        }
        if y > 0 {
            n.push((x, y - 1));
        }
        if x + 1 < w {
            n.push((x + 1, y));
        }
        if y + 1 < h {
            n.push((x, y + 1));
        }
        if grow {
            n.iter().any(|&(a, b)| mask.get(a, b))
        } else {
            n.iter().all(|&(a, b)| mask.get(a, b))
        }
    })
}

/// A plausible imperfect earlier prediction: some parts dropped, the rest
/// eroded or dilated, sometimes with a spurious square.
fn corrupt(rng: &mut ChaCha8Rng, parts: &[Mask]) -> Mask {
    let (w, h) = (parts[0].width(), parts[0].height());
    let mut out = Mask::empty(w, h);
    let keep_first = rng.random_range(0..parts.len());
    for (k, p) in parts.iter().enumerate() {
        if k == keep_first || rng.random_bool(0.4) {
            out.union_with(p).expect("same shape");
        }
    }
    out = match rng.random_range(0..3) {
        0 => morph(&out, true),
        1 => morph(&out, false),
        _ => out,
    };
    if rng.random_bool(0.4) {
        let s = (w.min(h) / 8).max(2);
        let (x0, y0) = (rng.random_range(0..w - s), rng.random_range(0..h - s));
        for y in y0..y0 + s {
            for x in x0..x0 + s {
                out.set(x, y, true);
            }
        }
    }
    out
}

fn with_serials(clicks: Vec<Click>) -> Vec<Click> {
    clicks.into_iter().enumerate().map(|(i, c)| Click { serial: i as u32 + 1, ..c }).collect()
}

/// The training tuples for scene `index`: a first-click example with no
/// previous mask, and a refinement example on a corrupted earlier mask.
pub fn training_examples(cfg: &SynthConfig, index: u64, seed: u64) -> Result<Vec<TrainingExample>> {
    let scene = generate_scene(cfg, index)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let empty = Mask::empty(cfg.width, cfg.height);
    let first = next_click(&empty, &scene.gt)?;
    let mut out = vec![TrainingExample {
        image: scene.image.clone(),
        clicks: with_serials(vec![first]),
        prev_mask: None,
        target: scene.gt.clone(),
    }];
    let prev = corrupt(&mut rng, &scene.parts);
    let mut clicks = vec![first];
    if let Ok(c) = next_click(&prev, &scene.gt) {
        clicks.push(c);
    }
    out.push(TrainingExample { image: scene.image, clicks: with_serials(clicks), prev_mask: Some(prev), target: scene.gt });
    Ok(out)
}

/// Mean 1-click IoU over held-out single-part scenes.
pub fn one_click_iou(params: &ParamVector, cfg: &SynthConfig, n: usize) -> Result<f64> {
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..n {
        let scene = generate_scene(cfg, i as u64)?;
        let click = next_click(&Mask::empty(cfg.width, cfg.height), &scene.gt)?;
        let pred = predict_mask(&scene.image, &PromptState::clicks_only(vec![click]), params)?;
        total += iou(&pred, &scene.gt)?;
    }
    Ok(total / n as f64)
}

/// Trains from `init_params(cfg.seed)`. Deterministic given the config.
pub fn pretrain(cfg: &PretrainConfig) -> Result<(ParamVector, PretrainReport)> {
    cfg.validate()?;
    let mut examples = Vec::new();
    for i in 0..cfg.synth.n_samples {
        examples.extend(training_examples(&cfg.synth, i as u64, cfg.seed)?);
    }
    let init = init_params(cfg.seed);
    let layout = init.layout().clone();
    let (nb, nh) = (layout.backbone_len(), layout.head_len());
    let mut values: Vec<f64> = init.backbone().iter().chain(init.head()).copied().collect();
    let mut m = vec![0.0; nb + nh];
    let mut v = vec![0.0; nb + nh];
    let hyper = OptimizerHyper { lr: cfg.learning_rate, weight_decay: 0.0, ..Default::default() };

    let mut params = init.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut grad = vec![0.0; nb + nh];
        let mut loss = 0.0;
        for ex in &examples {
            let prompts = PromptState::new(ex.clicks.clone(), ex.prev_mask.as_ref());
            let (l, gb, gh) = backward_full(&ex.image, &prompts, &params, &ex.target, cfg.sigma_fraction)
                .map_err(|e| Error::Pretrain { epoch, message: e.to_string() })?;
            loss += l;
            for (g, d) in grad.iter_mut().zip(gb.iter().chain(&gh)) {
                *g += d;
            }
        }
        let n = examples.len() as f64;
        loss /= n;
        grad.iter_mut().for_each(|g| *g /= n);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Pretrain { epoch, message: format!("loss diverged ({loss})") });
        }
        log::debug!("pretrain epoch {epoch} loss {loss:.5}");
        history.push(loss);
        adamw_update(&mut values, &grad, &mut m, &mut v, epoch as u64 + 1, &hyper);
        params = ParamVector::new(layout.clone(), values[..nb].to_vec(), values[nb..].to_vec())?;
    }

    let val = cfg.validation_synth();
    let report = PretrainReport {
        seed: cfg.seed,
        epochs: cfg.epochs,
        final_loss: history.last().copied().unwrap_or(f64::NAN),
        validation_iou: one_click_iou(&params, &val, cfg.validation_samples)?,
        initial_validation_iou: one_click_iou(&init, &val, cfg.validation_samples)?,
        loss_history: history,
    };
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::encode_model;

    fn tiny() -> PretrainConfig {
        PretrainConfig {
            synth: SynthConfig { n_samples: 4, width: 16, height: 16, parts_per_object: [1, 2], ..Default::default() },
            epochs: 6,
            validation_samples: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_model_bytes() {
        let (a, ra) = pretrain(&tiny()).unwrap();
        let (b, rb) = pretrain(&tiny()).unwrap();
        assert_eq!(encode_model(&a), encode_model(&b));
        assert_eq!(ra, rb);
        assert_eq!(ra.loss_history.len(), 6);
    }

    #[test]
    fn loss_goes_down() {
        let (_, r) = pretrain(&PretrainConfig { epochs: 30, ..tiny() }).unwrap();
        assert!(r.final_loss < r.loss_history[0], "{:?}", r.loss_history);
    }

    #[test]
    fn examples_cover_first_click_and_refinement() {
        let cfg = SynthConfig { width: 32, height: 32, ..Default::default() };
        let ex = training_examples(&cfg, 0, 0).unwrap();
        assert_eq!(ex.len(), 2);
        assert!(ex[0].prev_mask.is_none() && ex[0].clicks.len() == 1);
        assert!(ex[0].target.get(ex[0].clicks[0].x as usize, ex[0].clicks[0].y as usize));
        assert!(ex[1].prev_mask.is_some());
    }

    #[test]
    fn diverging_rate_reports_epoch() {
        let cfg = PretrainConfig { learning_rate: f64::MAX, epochs: 5, ..tiny() };
        match pretrain(&cfg) {
            Err(Error::Pretrain { epoch, .. }) => assert!((1..5).contains(&epoch)),
            other => panic!("expected a pretraining error, got {:?}", other.map(|r| r.1)),
        }
    }

    #[test]
    fn bad_configs() {
        assert!(pretrain(&PretrainConfig { learning_rate: 0.0, ..tiny() }).is_err());
        let mut c = tiny();
        c.synth.n_samples = 0;
        assert!(matches!(pretrain(&c), Err(Error::Config(_))));
    }
}
