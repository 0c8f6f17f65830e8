//! The promptable toy segmentation model: prompt encoding, forward and
//! analytic backward passes, the adaptation loss, and pretraining.

mod loss;
mod model;
mod pretrain;
mod prompt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub use loss::{bce_with_logit, mask_bce_loss, pixel_loss, sigmoid, softplus, tta_loss};
pub use model::{
    architecture_layout, backward, backward_full, forward, init_params, predict_mask, FrozenScene, DEFAULT_SIGMA_FRACTION,
    HeadCache, BACKBONE_HIDDEN, FEATURES, HEAD_HIDDEN, HEAD_INPUTS, PIXEL_INPUTS,
};
pub use pretrain::{one_click_iou, pretrain, training_examples, PretrainConfig, PretrainReport, TrainingExample};
pub use prompt::{encode_prompts, PROMPT_CHANNELS};

pub const MIN_SIDE: usize = 8;
pub const MAX_SIDE: usize = 512;

/// RGB image, row-major, channels interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        if pixels.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "expected {} channel values for {width}x{height}, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input(format!("channel value {} at {i} outside [0, 1]", pixels[i])));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn rgb(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

pub fn check_dims(width: usize, height: usize) -> Result<()> {
    let ok = |s| (MIN_SIDE..=MAX_SIDE).contains(&s);
    if ok(width) && ok(height) {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "image size {width}x{height} outside {MIN_SIDE}..={MAX_SIDE}"
        )))
    }
}

/// Click polarity. Serialized as `"positive"` / `"negative"`; `1` / `0` are
/// also accepted on input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sign {
    Negative,
    Positive,
}

impl Sign {
    pub fn as_str(self) -> &'static str {
        match self {
            Sign::Positive => "positive",
            Sign::Negative => "negative",
        }
    }

    /// Target label for the clicked pixel.
    pub fn label(self) -> f64 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => 0.0,
        }
    }

    pub fn flipped(self) -> Sign {
        match self {
            Sign::Positive => Sign::Negative,
            Sign::Negative => Sign::Positive,
        }
    }
}

impl Serialize for Sign {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Sign {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Number(i64),
            Flag(bool),
        }
        match Raw::deserialize(d)? {
            Raw::Text(t) => match t.as_str() {
                "positive" | "pos" | "+" => Ok(Sign::Positive),
                "negative" | "neg" | "-" => Ok(Sign::Negative),
                other => Err(serde::de::Error::custom(format!("unknown click sign {other:?}"))),
            },
            Raw::Number(1) | Raw::Flag(true) => Ok(Sign::Positive),
            Raw::Number(0) | Raw::Flag(false) => Ok(Sign::Negative),
            Raw::Number(n) => Err(serde::de::Error::custom(format!("click sign must be 0 or 1, got {n}"))),
        }
    }
}

/// One user interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub x: u32,
    pub y: u32,
    pub sign: Sign,
    /// Iteration index at which the click was received (1-based).
    #[serde(default)]
    pub serial: u32,
}

impl Click {
    pub fn new(x: u32, y: u32, sign: Sign, serial: u32) -> Self {
        Self { x, y, sign, serial }
    }

    pub fn positive(x: u32, y: u32) -> Self {
        Self::new(x, y, Sign::Positive, 0)
    }

    pub fn negative(x: u32, y: u32) -> Self {
        Self::new(x, y, Sign::Negative, 0)
    }

    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        (self.x as usize) < width && (self.y as usize) < height
    }

    pub fn index(&self, width: usize) -> usize {
        self.y as usize * width + self.x as usize
    }
}

/// Pre-threshold model output.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl LogitMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// `sigmoid(logit) >= 0.5`, i.e. `logit >= 0`.
    pub fn threshold(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.values.iter().map(|&l| sigmoid(l) >= 0.5).collect(),
        }
    }
}

/// Binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Structural(format!(
                "{} bits do not fill a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_same_shape(&self, other: &Mask) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Structural(format!(
                "mask shapes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Pixel-wise OR in place.
    pub fn union_with(&mut self, other: &Mask) -> Result<()> {
        self.ensure_same_shape(other)?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    /// `true` when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_shape(other) && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Clicks plus optional previous-mask prompt for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct PromptState<'a> {
    pub clicks: Vec<Click>,
    pub prev_mask: Option<&'a Mask>,
}

impl<'a> PromptState<'a> {
    pub fn new(clicks: Vec<Click>, prev_mask: Option<&'a Mask>) -> Self {
        Self { clicks, prev_mask }
    }

    pub fn clicks_only(clicks: Vec<Click>) -> Self {
        Self { clicks, prev_mask: None }
    }
}
