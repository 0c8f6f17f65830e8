//! Divide-and-conquer test-time adaptation: click routing into segmentation
//! units, per-unit adaptation, mask union, task-vector merging and the final
//! fine-tune, plus the simpler comparison modes.

mod config;
mod transcript;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clicksim::ClickEngine;
use crate::error::{Error, Result};
use crate::numerics::{merge_params, task_vector, OptimizerState, ParamVector};
use crate::segmenter::{mask_bce_loss, pixel_loss, Click, FrozenScene, HeadCache, Image, LogitMap, Mask, PromptState, Sign};

pub use config::{EngineConfig, Mode, DEFAULT_ETA, DEFAULT_GAMMA};
pub use transcript::{mask_hash, Transcript, TranscriptEvent, TRANSCRIPT_VERSION};

/// `|a ∩ b| / |a ∪ b|`, with `IoU(∅, ∅) = 0`.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// A positive-click subset with its own model copy and mask.
#[derive(Debug, Clone)]
pub struct SegmentationUnit {
    /// 0 is the global unit.
    pub id: usize,
    pub positives: Vec<Click>,
    pub mask: Option<Mask>,
    pub params: ParamVector,
    pub opt_state: OptimizerState,
    /// Prompt mask for the next re-evaluation of `mask`.
    pub prev_mask_prompt: Option<Mask>,
    /// Number of negatives that were in the prompt when `mask` was computed.
    negatives_seen: usize,
}

impl SegmentationUnit {
    pub fn is_global(&self) -> bool {
        self.id == 0
    }
}

/// Pixel-wise OR over every unit mask.
pub fn aggregate_masks(units: &[SegmentationUnit]) -> Result<Mask> {
    let mut iter = units.iter();
    let first = iter.next().ok_or_else(|| Error::Structural("no units to aggregate".into()))?;
    let missing = |u: &SegmentationUnit| Error::Structural(format!("unit {} has no mask", u.id));
    let mut agg = first.mask.clone().ok_or_else(|| missing(first))?;
    for u in iter {
        agg.union_with(u.mask.as_ref().ok_or_else(|| missing(u))?)?;
    }
    Ok(agg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Negative,
    Assign,
    Spawn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitIou {
    pub unit: usize,
    pub iou: f64,
}

/// How one click was routed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Routing {
    pub decision: Decision,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_unit: Option<usize>,
    /// IoU of the probe mask against every non-global unit's previous mask.
    pub probe_iou_table: Vec<UnitIou>,
    #[serde(skip)]
    pub probe: Option<Mask>,
}

/// Unit with the largest IoU strictly above `threshold`; ties go to the lowest id.
pub fn choose_unit(table: &[UnitIou], threshold: f64) -> Option<usize> {
    let mut best: Option<UnitIou> = None;
    for entry in table {
        if entry.iou > threshold && best.is_none_or(|b| entry.iou > b.iou || (entry.iou == b.iou && entry.unit < b.unit)) {
            best = Some(*entry);
        }
    }
    best.map(|b| b.unit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "unit", rename_all = "snake_case")]
pub enum EventKind {
    Unit(usize),
    Spawn(usize),
    FineTune,
    Naive,
}

/// One adaptation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationEvent {
    pub t: usize,
    pub kind: EventKind,
    /// Negatives in the supervision click set.
    pub negatives: usize,
    pub loss_before: Option<f64>,
    /// Filled only when auditing is on.
    pub loss_after: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub t: usize,
    pub click: Click,
    /// `None` in modes without units.
    pub routing: Option<Routing>,
    pub mask: Mask,
}

/// One interactive session.
#[derive(Debug, Clone)]
pub struct Engine {
    scene: Arc<FrozenScene>,
    pretrained: Arc<ParamVector>,
    mode: Mode,
    config: EngineConfig,
    units: Vec<SegmentationUnit>,
    negatives: Vec<Click>,
    clicks: Vec<Click>,
    merged_params: ParamVector,
    naive_opt: OptimizerState,
    final_mask: Option<Mask>,
    prev_final_mask: Option<Mask>,
    events: Vec<AdaptationEvent>,
    audit: bool,
}

fn joined(a: &[Click], b: &[Click]) -> Vec<Click> {
    a.iter().chain(b).copied().collect()
}

impl Engine {
    pub fn new(image: Arc<Image>, pretrained: Arc<ParamVector>, mode: Mode, config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let scene = Arc::new(FrozenScene::new(image, &pretrained, config.sigma_fraction)?);
        Self::with_scene(scene, pretrained, mode, config)
    }

    /// Reuses precomputed backbone features. The scene must have been built
    /// from `pretrained` with `config.sigma_fraction`.
    pub fn with_scene(
        scene: Arc<FrozenScene>,
        pretrained: Arc<ParamVector>,
        mode: Mode,
        config: EngineConfig,
    ) -> Result<Self> {
        config.validate()?;
        if scene.sigma_fraction() != config.sigma_fraction {
            return Err(Error::Config("scene was built with a different sigma_fraction".into()));
        }
        let head_len = pretrained.head().len();
        let global = SegmentationUnit {
            id: 0,
            positives: Vec::new(),
            mask: None,
            params: (*pretrained).clone(),
            opt_state: OptimizerState::new(config.optimizer, config.hyper(), head_len),
            prev_mask_prompt: None,
            negatives_seen: 0,
        };
        Ok(Self {
            naive_opt: OptimizerState::new(config.optimizer, config.hyper(), head_len),
            merged_params: (*pretrained).clone(),
            scene,
            pretrained,
            mode,
            config,
            units: vec![global],
            negatives: Vec::new(),
            clicks: Vec::new(),
            final_mask: None,
            prev_final_mask: None,
            events: Vec::new(),
            audit: false,
        })
    }

    /// Record the post-step loss of every adaptation event.
    pub fn set_audit(&mut self, on: bool) {
        self.audit = on;
    }

    /// Back to zero clicks with the pretrained model, same image.
    pub fn reset(&mut self) {
        let mut fresh = Self::with_scene(Arc::clone(&self.scene), Arc::clone(&self.pretrained), self.mode, self.config.clone())
            .expect("configuration was validated at construction");
        fresh.audit = self.audit;
        *self = fresh;
    }

    pub fn scene(&self) -> &Arc<FrozenScene> {
        &self.scene
    }

    pub fn image(&self) -> &Arc<Image> {
        self.scene.image()
    }

    pub fn pretrained(&self) -> &Arc<ParamVector> {
        &self.pretrained
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn units(&self) -> &[SegmentationUnit] {
        &self.units
    }

    pub fn negatives(&self) -> &[Click] {
        &self.negatives
    }

    pub fn clicks(&self) -> &[Click] {
        &self.clicks
    }

    pub fn iteration(&self) -> usize {
        self.clicks.len()
    }

    pub fn merged_params(&self) -> &ParamVector {
        &self.merged_params
    }

    pub fn final_mask(&self) -> Option<&Mask> {
        self.final_mask.as_ref()
    }

    pub fn events(&self) -> &[AdaptationEvent] {
        &self.events
    }

    /// The pretrained model's mask for a lone positive click plus the current
    /// negatives, without a mask prompt.
    pub fn probe_mask(&self, click: &Click) -> Result<Mask> {
        let prompts = PromptState::clicks_only(joined(&[*click], &self.negatives));
        self.scene.predict(&prompts, &self.pretrained)
    }

    /// Current mask of unit `k` under the current negatives.
    pub fn unit_mask(&self, k: usize) -> Result<Mask> {
        let unit = self.units.get(k).ok_or_else(|| Error::Input(format!("no unit {k}")))?;
        if let Some(m) = &unit.mask {
            if unit.negatives_seen == self.negatives.len() {
                return Ok(m.clone());
            }
        }
        let prompts = PromptState::new(joined(&unit.positives, &self.negatives), unit.prev_mask_prompt.as_ref());
        self.scene.predict(&prompts, &unit.params)
    }

    /// Processes one click. On error the session is left unchanged.
    pub fn step(&mut self, click: Click) -> Result<StepOutcome> {
        let (w, h) = (self.scene.width(), self.scene.height());
        if !click.in_bounds(w, h) {
            return Err(Error::Input(format!("click ({}, {}) outside {w}x{h}", click.x, click.y)));
        }
        let mut next = self.clone();
        let outcome = next.apply(click)?;
        *self = next;
        Ok(outcome)
    }

    fn apply(&mut self, mut click: Click) -> Result<StepOutcome> {
        let t = self.clicks.len() + 1;
        click.serial = t as u32;
        let (routing, mask) = match self.mode {
            Mode::Baseline => (None, self.baseline_step(click)?),
            Mode::NaiveTta => (None, self.naive_step(click)?),
            _ => {
                let (r, m) = self.dc_step(click)?;
                (Some(r), m)
            }
        };
        self.prev_final_mask = self.final_mask.replace(mask.clone());
        Ok(StepOutcome { t, click, routing, mask })
    }

    fn record(&mut self, click: Click) {
        self.clicks.push(click);
        match click.sign {
            Sign::Positive => self.units[0].positives.push(click),
            Sign::Negative => self.negatives.push(click),
        }
    }

    fn baseline_step(&mut self, click: Click) -> Result<Mask> {
        self.record(click);
        let prompts = PromptState::new(self.clicks.clone(), self.final_mask.as_ref());
        let mask = self.scene.predict(&prompts, &self.pretrained)?;
        self.units[0].mask = Some(mask.clone());
        Ok(mask)
    }

    fn naive_step(&mut self, click: Click) -> Result<Mask> {
        let old_clicks = self.clicks.clone();
        self.record(click);
        let all = self.clicks.clone();
        if let Some(prev) = self.final_mask.clone() {
            let params = self.merged_params.clone();
            let old_prompt = PromptState::new(old_clicks, self.prev_final_mask.as_ref());
            let target = self.scene.predict(&PromptState::new(all.clone(), Some(&prev)), &params)?;
            let (p, o, ev) = self.adapt(EventKind::Naive, &params, &self.naive_opt, &old_prompt, &target, &all)?;
            self.events.push(ev);
            self.merged_params = p;
            self.naive_opt = o;
        }
        let mask = self.scene.predict(&PromptState::new(all, self.final_mask.as_ref()), &self.merged_params)?;
        self.units[0].mask = Some(mask.clone());
        Ok(mask)
    }

    fn dc_step(&mut self, click: Click) -> Result<(Routing, Mask)> {
        let adapt = self.mode.adapts();
        let routing = match click.sign {
            Sign::Negative => {
                self.record(click);
                for k in 0..self.units.len() {
                    if self.units[k].mask.is_some() {
                        self.tta_unit(k, None, adapt)?;
                    }
                }
                Routing { decision: Decision::Negative, target_unit: None, probe_iou_table: Vec::new(), probe: None }
            }
            Sign::Positive => {
                let probe = self.probe_mask(&click)?;
                let mut table = Vec::with_capacity(self.units.len() - 1);
                for k in 1..self.units.len() {
                    table.push(UnitIou { unit: k, iou: iou(&probe, &self.unit_mask(k)?)? });
                }
                let target = choose_unit(&table, self.config.assign_iou_threshold);
                self.clicks.push(click);
                let decision = match target {
                    Some(k) => {
                        self.tta_unit(k, Some(click), adapt)?;
                        Decision::Assign
                    }
                    None => {
                        self.spawn_unit(click, &probe, adapt)?;
                        Decision::Spawn
                    }
                };
                self.tta_unit(0, Some(click), adapt)?;
                Routing {
                    decision,
                    target_unit: Some(target.unwrap_or(self.units.len() - 1)),
                    probe_iou_table: table,
                    probe: Some(probe),
                }
            }
        };
        if self.units[0].mask.is_none() {
            // no positive click yet
            return Ok((routing, Mask::empty(self.scene.width(), self.scene.height())));
        }
        let agg = aggregate_masks(&self.units)?;
        let mask = match self.mode {
            Mode::DcTta => self.merge_and_finetune(&agg)?,
            _ => agg,
        };
        Ok((routing, mask))
    }

    /// Adds `new_click` (if any) to unit `k`, adapts the unit toward its
    /// intermediate mask and re-infers it.
    fn tta_unit(&mut self, k: usize, new_click: Option<Click>, adapt: bool) -> Result<()> {
        let unit = &self.units[k];
        let mut positives = unit.positives.clone();
        positives.extend(new_click);
        let new_clicks = joined(&positives, &self.negatives);
        let mut params = unit.params.clone();
        let mut opt = unit.opt_state.clone();
        let prev = unit.mask.clone();
        if let (Some(prev), true) = (&prev, adapt) {
            // exactly the prompt that produced `prev`
            let old_clicks = joined(&unit.positives, &self.negatives[..unit.negatives_seen]);
            let old_prompt = PromptState::new(old_clicks, unit.prev_mask_prompt.as_ref());
            let target = self.scene.predict(&PromptState::new(new_clicks.clone(), Some(prev)), &params)?;
            let (p, o, ev) = self.adapt(EventKind::Unit(k), &params, &opt, &old_prompt, &target, &new_clicks)?;
            self.events.push(ev);
            params = p;
            opt = o;
        }
        let mask = self.scene.predict(&PromptState::new(new_clicks, prev.as_ref()), &params)?;
        let negatives_seen = self.negatives.len();
        let unit = &mut self.units[k];
        unit.positives = positives;
        unit.params = params;
        unit.opt_state = opt;
        unit.mask = Some(mask);
        unit.prev_mask_prompt = prev;
        unit.negatives_seen = negatives_seen;
        Ok(())
    }

    fn spawn_unit(&mut self, click: Click, probe: &Mask, adapt: bool) -> Result<()> {
        let id = self.units.len();
        let mut params = (*self.pretrained).clone();
        let mut opt = OptimizerState::new(self.config.optimizer, self.config.hyper(), params.head().len());
        let supervision = joined(&[click], &self.negatives);
        if adapt {
            let init_prompt = PromptState::clicks_only(vec![click]);
            let (p, o, ev) = self.adapt(EventKind::Spawn(id), &params, &opt, &init_prompt, probe, &supervision)?;
            self.events.push(ev);
            params = p;
            opt = o;
        }
        let mask = self.scene.predict(&PromptState::clicks_only(supervision), &params)?;
        self.units.push(SegmentationUnit {
            id,
            positives: vec![click],
            mask: Some(mask),
            params,
            opt_state: opt,
            prev_mask_prompt: None,
            negatives_seen: self.negatives.len(),
        });
        Ok(())
    }

    fn merge_and_finetune(&mut self, agg: &Mask) -> Result<Mask> {
        let taus = self
            .units
            .iter()
            .map(|u| task_vector(&u.params, &self.pretrained))
            .collect::<Result<Vec<_>>>()?;
        let merged = merge_params(&self.pretrained, &taus[0], &taus[1..], self.config.gamma)?;
        let prompt = PromptState::new(self.clicks.clone(), self.final_mask.as_ref());
        let fresh = OptimizerState::new(self.config.optimizer, self.config.hyper(), merged.head().len());
        let (theta, _, ev) = self.adapt(EventKind::FineTune, &merged, &fresh, &prompt, agg, &self.clicks)?;
        self.events.push(ev);
        let mask = self.scene.predict(&prompt, &theta)?;
        self.merged_params = theta;
        Ok(mask)
    }

    /// `steps_per_event` optimizer steps on `tta_loss(forward(prompt), target, clicks)`.
    /// A failed step leaves the parameters where they started.
    fn adapt(
        &self,
        kind: EventKind,
        params: &ParamVector,
        opt: &OptimizerState,
        prompt: &PromptState<'_>,
        target: &Mask,
        clicks: &[Click],
    ) -> Result<(ParamVector, OptimizerState, AdaptationEvent)> {
        let mut event = AdaptationEvent {
            t: self.clicks.len(),
            kind,
            negatives: clicks.iter().filter(|c| c.sign == Sign::Negative).count(),
            loss_before: None,
            loss_after: None,
            error: None,
        };
        let run = |event: &mut AdaptationEvent| -> Result<(ParamVector, OptimizerState)> {
            let mut p = params.clone();
            let mut o = opt.clone();
            for _ in 0..self.config.steps_per_event {
                let (logits, cache): (LogitMap, HeadCache) = self.scene.logits_with_cache(prompt, &p)?;
                let (loss, grad) = self.scene.tta_gradient(&logits, &cache, &p, target, clicks)?;
                event.loss_before.get_or_insert(loss);
                (p, o) = o.step(&p, &grad)?;
            }
            Ok((p, o))
        };
        match run(&mut event) {
            Ok((p, o)) => {
                if self.audit {
                    let logits = self.scene.logits(prompt, &p)?;
                    event.loss_after = Some(mask_bce_loss(&logits, target)? + pixel_loss(&logits, clicks));
                }
                Ok((p, o, event))
            }
            Err(Error::AdaptationStep(msg)) => {
                log::warn!("adaptation step skipped at t={}: {msg}", event.t);
                event.error = Some(msg);
                Ok((params.clone(), opt.clone(), event))
            }
            Err(e) => Err(e),
        }
    }
}

impl ClickEngine for Engine {
    fn click(&mut self, click: Click) -> Result<Mask> {
        Ok(self.step(click)?.mask)
    }
}
