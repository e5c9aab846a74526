//! Turning a batch of scene-graph edits into pixels.
//!
//! [`plan`] maps each edit to a fixed step sequence; [`execute`] runs the
//! steps in order, optionally persisting every intermediate into a job
//! directory so an interrupted run can pick up after its last finished step.

mod execute;
mod library;
mod paste;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use execute::{execute, ExecuteOutput, Progress, Resources, StepRecord};
pub use library::{object_crop_source, LibraryEntry, QueryLibrary};
pub use paste::{paste_object, Pasted};

use crate::bbox::BBox;
use crate::image::ImageError;
use crate::inpaint::{InpaintError, InpaintSpec};
use crate::metrics::MetricsError;
use crate::position::PositionError;
use crate::scenegraph::{EditOp, GraphError, SceneGraph};
use crate::segmask::{ExternalBackend, MaskError, SegmentError, SegmentationBackend, SyntheticOracle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Segment,
    RemoveInpaint,
    PredictPosition,
    Paste,
    FinalInpaint,
    Measure,
}

impl StepKind {
    pub fn name(self) -> &'static str {
        match self {
            StepKind::Segment => "segment",
            StepKind::RemoveInpaint => "remove_inpaint",
            StepKind::PredictPosition => "predict_position",
            StepKind::Paste => "paste",
            StepKind::FinalInpaint => "final_inpaint",
            StepKind::Measure => "measure",
        }
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub step: StepKind,
    /// Index of the edit this step realizes; `None` for the closing measurement.
    pub op: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub ops: Vec<EditOp>,
    pub steps: Vec<PlanStep>,
}

impl PipelinePlan {
    pub fn step_dir_name(&self, index: usize) -> String {
        format!("{index:02}_{}", self.steps[index].step)
    }
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Inpaint(#[from] InpaintError),
    #[error(transparent)]
    Position(#[from] PositionError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no source image for category `{category}`; available categories: {available:?}")]
    NoSource { category: String, available: Vec<String> },
    #[error("target box {0:?} rasterizes to zero pixels")]
    DegenerateTarget([f64; 4]),
    #[error("no position model configured; cannot place `{0}`")]
    NoPositionModel(String),
    #[error("step state missing: {0}")]
    MissingState(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("ops {first} and {second} both modify node `{target}`")]
    Conflict { target: String, first: usize, second: usize },
    #[error("op {index} ({kind}) is invalid: {source}")]
    InvalidOp {
        index: usize,
        kind: &'static str,
        source: GraphError,
    },
    #[error("step {index} ({step}) failed: {source}")]
    Step {
        index: usize,
        step: StepKind,
        source: Box<StepError>,
    },
    #[error("job directory already holds a different plan")]
    PlanMismatch,
    #[error("job directory: {0}")]
    Persist(#[source] StepError),
}

impl PipelineError {
    /// Index and kind of the failing step, if a step failed.
    pub fn failed_step(&self) -> Option<(usize, StepKind)> {
        match self {
            PipelineError::Step { index, step, .. } => Some((*index, *step)),
            _ => None,
        }
    }
}

/// Maps each edit to its steps and appends one closing measurement.
///
/// Edits are checked by folding them over `graph` in order. Two edits that
/// target the same node conflict. An empty batch gives an empty plan.
pub fn plan(graph: &SceneGraph, ops: &[EditOp]) -> Result<PipelinePlan, PipelineError> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, op) in ops.iter().enumerate() {
        if let Some(&first) = seen.get(op.target_id()) {
            return Err(PipelineError::Conflict {
                target: op.target_id().to_string(),
                first,
                second: i,
            });
        }
        seen.insert(op.target_id(), i);
    }
    let mut g = graph.clone();
    for (i, op) in ops.iter().enumerate() {
        g = g.apply_edit(op).map_err(|source| PipelineError::InvalidOp {
            index: i,
            kind: op.kind_name(),
            source,
        })?;
    }
    let mut steps = Vec::new();
    for (i, op) in ops.iter().enumerate() {
        use StepKind::*;
        let kinds: &[StepKind] = match op {
            EditOp::Remove { .. } => &[Segment, RemoveInpaint],
            EditOp::Replace { .. } => &[Segment, RemoveInpaint, Paste, FinalInpaint],
            EditOp::RelationshipChange { .. } => &[Segment, RemoveInpaint, PredictPosition, Paste, FinalInpaint],
            EditOp::Add { .. } => &[PredictPosition, Paste, FinalInpaint],
        };
        steps.extend(kinds.iter().map(|&step| PlanStep { step, op: Some(i) }));
    }
    if !steps.is_empty() {
        steps.push(PlanStep {
            step: StepKind::Measure,
            op: None,
        });
    }
    Ok(PipelinePlan {
        ops: ops.to_vec(),
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SegmentationConfig {
    Synthetic,
    External { url: String },
}

impl SegmentationConfig {
    pub fn backend(&self) -> Box<dyn SegmentationBackend> {
        match self {
            SegmentationConfig::Synthetic => Box::new(SyntheticOracle::default()),
            SegmentationConfig::External { url } => Box::new(ExternalBackend::new(url.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Spec for filling the hole left by a removed object.
    pub inpaint: InpaintSpec,
    /// Spec for blending the seam around a pasted object. `None` reuses
    /// `inpaint` with no dilation and no background guide.
    pub final_inpaint: Option<InpaintSpec>,
    pub erosion_radius: usize,
    pub max_triplets: usize,
    /// Path of a trained position model checkpoint.
    pub position_model: Option<String>,
    /// Directory of query images with scene-graph sidecars; `None` uses the
    /// built-in synthetic library.
    pub query_library: Option<String>,
    pub library_seed: u64,
    pub segmentation: SegmentationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            inpaint: InpaintSpec::default(),
            final_inpaint: None,
            erosion_radius: 1,
            max_triplets: crate::scenegraph::DEFAULT_MAX_TRIPLETS,
            position_model: None,
            query_library: None,
            library_seed: 0,
            segmentation: SegmentationConfig::Synthetic,
        }
    }
}

impl PipelineConfig {
    pub fn final_spec(&self) -> InpaintSpec {
        self.final_inpaint.clone().unwrap_or_else(|| InpaintSpec {
            dilation_radius: Some(0),
            guide_mode: crate::inpaint::GuideMode::None,
            ..self.inpaint.clone()
        })
    }
}

/// Union of the boxes an edit touched, if any.
pub(crate) fn union_roi(roi: Option<BBox>, b: BBox) -> Option<BBox> {
    Some(match roi {
        Some(r) => r.union(&b),
        None => b,
    })
}

#[cfg(test)]
mod tests;
