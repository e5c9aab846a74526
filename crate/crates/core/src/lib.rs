//! Scene-graph driven image editing.
//!
//! A user edits the scene graph of an image; this crate realizes the edit on
//! pixels: the target object is segmented and removed, its new position is
//! regressed from the modified relationships, the object crop is pasted, and
//! holes are filled by a per-image optimized encoder-decoder whose hole
//! average is pulled toward the surrounding background.

pub mod bbox;
pub mod image;
pub mod inpaint;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod position;
pub mod scenegraph;
pub mod segmask;
pub mod synth;

pub use bbox::{BBox, PixelRect};
pub use image::Image;
pub use scenegraph::{EditOp, ObjectNode, RelationshipEdge, SceneGraph, Triplet};
