//! Flat parameter containers and the arithmetic used for adaptation and
//! model merging.
//!
//! A [`ParamVector`] splits the model into a frozen `backbone` and an
//! adaptable `head`. Only the head ever changes at test time, so task vectors
//! and optimizer state are head-shaped.

mod gradcheck;
mod optim;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{gradient_check, relative_error};
pub use optim::{adamw_step, plain_gradient_step, OptimizerHyper, OptimizerKind, OptimizerState};
pub(crate) use optim::adamw_update;

/// Which half of the model a segment belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Backbone,
    Head,
}

/// One named tensor inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub part: Part,
    /// Offset inside the part's flat array.
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered segment descriptors. Segment order is also the on-disk order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    backbone_len: usize,
    head_len: usize,
}

impl Layout {
    pub fn new<I, S>(specs: I) -> Self
    where
        I: IntoIterator<Item = (S, Part, Vec<usize>)>,
        S: Into<String>,
    {
        let mut backbone_len = 0;
        let mut head_len = 0;
        let segments = specs
            .into_iter()
            .map(|(name, part, shape)| {
                let cursor = match part {
                    Part::Backbone => &mut backbone_len,
                    Part::Head => &mut head_len,
                };
                let seg = Segment { name: name.into(), part, offset: *cursor, shape };
                *cursor += seg.len();
                seg
            })
            .collect();
        Self { segments, backbone_len, head_len }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn backbone_len(&self) -> usize {
        self.backbone_len
    }

    pub fn head_len(&self) -> usize {
        self.head_len
    }
}

fn same_layout(a: &Arc<Layout>, b: &Arc<Layout>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::AdaptationStep(format!("{what}[{i}] is not finite"))),
    }
}

/// Model parameters: frozen backbone plus adaptable head.
///
/// Immutable after construction; every operation returns a new value.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    backbone: Vec<f64>,
    head: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, backbone: Vec<f64>, head: Vec<f64>) -> Result<Self> {
        if backbone.len() != layout.backbone_len() || head.len() != layout.head_len() {
            return Err(Error::Structural(format!(
                "parameter lengths ({}, {}) do not match layout ({}, {})",
                backbone.len(),
                head.len(),
                layout.backbone_len(),
                layout.head_len()
            )));
        }
        check_finite(&backbone, "backbone")?;
        check_finite(&head, "head")?;
        Ok(Self { layout, backbone, head })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn backbone(&self) -> &[f64] {
        &self.backbone
    }

    pub fn head(&self) -> &[f64] {
        &self.head
    }

    /// Values of one named segment.
    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        let seg = self.layout.segment(name)?;
        let part = match seg.part {
            Part::Backbone => &self.backbone,
            Part::Head => &self.head,
        };
        Some(&part[seg.range()])
    }

    /// Same backbone, new head.
    pub fn with_head(&self, head: Vec<f64>) -> Result<Self> {
        if head.len() != self.head.len() {
            return Err(Error::Structural(format!(
                "head length {} does not match layout {}",
                head.len(),
                self.head.len()
            )));
        }
        check_finite(&head, "head")?;
        Ok(Self { layout: Arc::clone(&self.layout), backbone: self.backbone.clone(), head })
    }

    /// Both halves replaced; used by pretraining where the backbone is trainable.
    pub fn with_values(&self, backbone: Vec<f64>, head: Vec<f64>) -> Result<Self> {
        Self::new(Arc::clone(&self.layout), backbone, head)
    }

    /// Every value in on-disk segment order.
    pub fn values_in_segment_order(&self) -> impl Iterator<Item = f64> + '_ {
        self.layout.segments().iter().flat_map(move |seg| {
            let part = match seg.part {
                Part::Backbone => &self.backbone,
                Part::Head => &self.head,
            };
            part[seg.range()].iter().copied()
        })
    }

    pub fn is_compatible(&self, other: &ParamVector) -> bool {
        same_layout(&self.layout, &other.layout)
    }

    fn ensure_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(Error::Structural("parameter layouts differ".into()))
        }
    }
}

/// Head delta between an adapted model and the pretrained one.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    layout: Arc<Layout>,
    delta: Vec<f64>,
}

impl TaskVector {
    pub fn new(layout: Arc<Layout>, delta: Vec<f64>) -> Result<Self> {
        if delta.len() != layout.head_len() {
            return Err(Error::Structural(format!(
                "task vector length {} does not match head length {}",
                delta.len(),
                layout.head_len()
            )));
        }
        Ok(Self { layout, delta })
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }
}

/// `adapted.head - pretrained.head`, elementwise.
pub fn task_vector(adapted: &ParamVector, pretrained: &ParamVector) -> Result<TaskVector> {
    adapted.ensure_compatible(pretrained)?;
    let delta = adapted.head.iter().zip(&pretrained.head).map(|(a, p)| a - p).collect();
    Ok(TaskVector { layout: Arc::clone(&pretrained.layout), delta })
}

/// `pretrained + gamma * global + gamma^2 * sum(units)` over the head; the
/// backbone is copied from `pretrained`.
pub fn merge_params(
    pretrained: &ParamVector,
    global: &TaskVector,
    units: &[TaskVector],
    gamma: f64,
) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
    }
    for tv in std::iter::once(global).chain(units) {
        if !same_layout(&tv.layout, &pretrained.layout) {
            return Err(Error::Structural("task vector layout differs from pretrained".into()));
        }
    }
    let gamma_sq = gamma * gamma;
    let head = (0..pretrained.head.len())
        .map(|i| {
            let unit_sum: f64 = units.iter().map(|tv| tv.delta[i]).sum();
            pretrained.head[i] + gamma * global.delta[i] + gamma_sq * unit_sum
        })
        .collect();
    pretrained.with_head(head)
}
