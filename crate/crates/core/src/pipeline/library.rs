use std::collections::BTreeSet;
use std::path::Path;

use super::StepError;
use crate::bbox::BBox;
use crate::image::Image;
use crate::scenegraph::{EditOp, ObjectNode, SceneGraph};
use crate::segmask::{mask_from_bbox, segment, InstanceCandidate, Mask, SegmentError, SegmentationBackend};

#[derive(Debug, Clone)]
pub struct LibraryEntry {
    /// The graph's `image` field; also the lookup key for explicit sources.
    pub name: String,
    pub image: Image,
    pub graph: SceneGraph,
}

/// Images with scene graphs to take object pixels from.
#[derive(Debug, Clone, Default)]
pub struct QueryLibrary {
    pub entries: Vec<LibraryEntry>,
}

impl QueryLibrary {
    /// One single-object image per shape and color.
    pub fn synthetic(size: usize, seed: u64) -> Self {
        let entries = crate::synth::query_library(size, seed)
            .into_iter()
            .map(|(image, graph)| LibraryEntry {
                name: graph.image_ref.clone(),
                image: image.quantized(),
                graph,
            })
            .collect();
        QueryLibrary { entries }
    }

    /// Reads every `*.json` scene graph in `dir` together with the image it names.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, StepError> {
        let dir = dir.as_ref();
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let mut entries = Vec::with_capacity(files.len());
        for f in files {
            let graph = SceneGraph::parse(&std::fs::read_to_string(&f)?)?;
            let image = Image::load(dir.join(&graph.image_ref))?;
            entries.push(LibraryEntry {
                name: graph.image_ref.clone(),
                image,
                graph,
            });
        }
        Ok(QueryLibrary { entries })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), StepError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for e in &self.entries {
            e.image.save_png(dir.join(&e.name))?;
            let stem = Path::new(&e.name).with_extension("json");
            std::fs::write(dir.join(stem), e.graph.to_json())?;
        }
        Ok(())
    }

    pub fn categories(&self) -> BTreeSet<String> {
        self.entries
            .iter()
            .flat_map(|e| e.graph.nodes.iter().map(|n| n.category.clone()))
            .collect()
    }

    pub fn entry(&self, name: &str) -> Option<&LibraryEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Crop of the instance's bounding rectangle, with the instance as the mask's hole.
pub(crate) fn crop_instance(image: &Image, instance: &Mask) -> Option<(Image, Mask)> {
    let rect = instance.hole_rect()?;
    Some((image.crop(rect).quantized(), instance.crop(rect)))
}

/// Segments `category` near `hint`; when nothing matching is found the hint
/// box itself becomes the mask. Returns the mask and whether it is the fallback.
pub(crate) fn segment_or_box(
    image: &Image,
    category: &str,
    hint: BBox,
    backend: &dyn SegmentationBackend,
) -> Result<(InstanceCandidate, bool), StepError> {
    match segment(image, category, hint, backend) {
        Ok(c) => Ok((c, false)),
        Err(SegmentError::NotFound { .. }) => {
            let mask = mask_from_bbox(hint, image.width, image.height)?;
            Ok((
                InstanceCandidate {
                    category: category.to_string(),
                    score: 0.0,
                    bbox: hint,
                    mask,
                },
                true,
            ))
        }
        Err(e) => Err(e.into()),
    }
}

fn attributes_match(node: &ObjectNode, wanted: &ObjectNode) -> bool {
    wanted.attributes.iter().all(|(k, v)| node.attributes.get(k) == Some(v))
}

/// Pixels and foreground mask for the object an edit places.
///
/// A relationship change moves the target itself, so its pixels come from
/// `image`. Additions and replacements use the explicit source when given,
/// otherwise the highest-scoring segmentation among instances of the new
/// node's category in the current image (other than the target) and then the
/// library, preferring instances whose attributes match; ties go to the
/// earlier instance.
pub fn object_crop_source(
    edit: &EditOp,
    graph: &SceneGraph,
    image: &Image,
    library: &QueryLibrary,
    backend: &dyn SegmentationBackend,
) -> Result<(Image, Mask), StepError> {
    let wanted = match edit {
        EditOp::Remove { target_id } | EditOp::RelationshipChange { target_id, .. } => {
            let node = graph
                .node(target_id)
                .ok_or_else(|| crate::scenegraph::GraphError::NodeNotFound(target_id.clone()))?;
            let (c, _) = segment_or_box(image, &node.category, node.bbox, backend)?;
            return crop_instance(image, &c.mask).ok_or(StepError::DegenerateTarget(node.bbox.to_array()));
        }
        EditOp::Add { new_node, .. } | EditOp::Replace { new_node, .. } => new_node,
    };
    if let Some(src) = edit.object_source() {
        let owned;
        let source_image = match library.entry(&src.image) {
            Some(e) => &e.image,
            None => {
                owned = Image::load(&src.image)?;
                &owned
            }
        };
        let (c, _) = segment_or_box(source_image, &wanted.category, src.bbox, backend)?;
        return crop_instance(source_image, &c.mask).ok_or(StepError::DegenerateTarget(src.bbox.to_array()));
    }

    let mut pool: Vec<(&Image, &ObjectNode)> = graph
        .nodes
        .iter()
        .filter(|n| n.category == wanted.category && n.id != wanted.id)
        .map(|n| (image, n))
        .collect();
    for e in &library.entries {
        pool.extend(
            e.graph
                .nodes
                .iter()
                .filter(|n| n.category == wanted.category)
                .map(|n| (&e.image, n)),
        );
    }
    if pool.is_empty() {
        let mut available = library.categories();
        available.extend(graph.nodes.iter().map(|n| n.category.clone()));
        return Err(StepError::NoSource {
            category: wanted.category.clone(),
            available: available.into_iter().collect(),
        });
    }
    if pool.iter().any(|(_, n)| attributes_match(n, wanted)) {
        pool.retain(|(_, n)| attributes_match(n, wanted));
    } else {
        log::warn!(
            "no `{}` instance with attributes {:?}; using category match only",
            wanted.category,
            wanted.attributes
        );
    }
    let mut best: Option<(f64, &Image, InstanceCandidate)> = None;
    for (img, node) in pool {
        let (c, _) = segment_or_box(img, &wanted.category, node.bbox, backend)?;
        if best.as_ref().is_none_or(|(s, _, _)| c.score > *s) {
            best = Some((c.score, img, c));
        }
    }
    let (_, img, c) = best.expect("pool is non-empty");
    crop_instance(img, &c.mask).ok_or(StepError::DegenerateTarget(c.bbox.to_array()))
}
