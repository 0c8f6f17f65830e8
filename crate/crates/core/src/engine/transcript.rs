use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{iou, EngineConfig, Mode, Routing, StepOutcome};
use crate::error::Result;
use crate::segmenter::{Click, Mask, Sign};

pub const TRANSCRIPT_VERSION: u32 = 1;

/// Hex SHA-256 over width and height (u32 little-endian) followed by one
/// byte (0 or 1) per pixel in row-major order.
pub fn mask_hash(mask: &Mask) -> String {
    let mut h = Sha256::new();
    h.update((mask.width() as u32).to_le_bytes());
    h.update((mask.height() as u32).to_le_bytes());
    let bytes: Vec<u8> = mask.bits().iter().map(|&b| b as u8).collect();
    h.update(&bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub t: usize,
    pub x: u32,
    pub y: u32,
    pub sign: Sign,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<Routing>,
    pub mask_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou_vs_gt: Option<f64>,
}

impl TranscriptEvent {
    pub fn from_outcome(outcome: &StepOutcome, gt: Option<&Mask>) -> Result<Self> {
        Ok(Self {
            t: outcome.t,
            x: outcome.click.x,
            y: outcome.click.y,
            sign: outcome.click.sign,
            routing: outcome.routing.clone(),
            mask_hash: mask_hash(&outcome.mask),
            iou_vs_gt: gt.map(|g| iou(&outcome.mask, g)).transpose()?,
        })
    }

    pub fn click(&self) -> Click {
        Click::new(self.x, self.y, self.sign, self.t as u32)
    }
}

/// Ordered log of one session, enough to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub version: u32,
    pub mode: Mode,
    pub config: EngineConfig,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_hash: Option<String>,
    pub events: Vec<TranscriptEvent>,
}

impl Transcript {
    pub fn new(mode: Mode, config: EngineConfig, width: usize, height: usize, model_hash: Option<String>) -> Self {
        Self { version: TRANSCRIPT_VERSION, mode, config, width, height, model_hash, events: Vec::new() }
    }

    pub fn clicks(&self) -> Vec<Click> {
        self.events.iter().map(TranscriptEvent::click).collect()
    }
}
