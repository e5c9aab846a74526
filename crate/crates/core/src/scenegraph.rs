//! Scene graphs, the four edit operations, and triplet extraction.
//!
//! Graphs are immutable values: every edit returns a new graph and leaves its
//! input untouched.

use std::collections::{BTreeMap, BTreeSet};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;

pub const SCHEMA_VERSION: u32 = 1;

/// Default truncation length for modified triplets.
pub const DEFAULT_MAX_TRIPLETS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("validation error at `{path}`: {message}")]
    Validation { path: String, message: String },
    #[error("node `{0}` not found")]
    NodeNotFound(String),
    #[error("node id `{0}` already exists")]
    DuplicateId(String),
    #[error("edge ({0}) not present in graph")]
    EdgeNotFound(String),
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
    #[error("target `{0}` has no incident edges; position prediction is undefined")]
    NoIncidentEdges(String),
    #[error("graphs reference different images (`{0}` vs `{1}`)")]
    DifferentImages(String, String),
}

fn validation(path: impl Into<String>, message: impl Into<String>) -> GraphError {
    GraphError::Validation {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectNode {
    pub id: String,
    pub category: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    pub bbox: BBox,
}

impl ObjectNode {
    pub fn new(id: impl Into<String>, category: impl Into<String>, bbox: BBox) -> Self {
        ObjectNode {
            id: id.into(),
            category: category.into(),
            attributes: BTreeMap::new(),
            bbox,
        }
    }

    pub fn with_attr(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.insert(key.into(), value.into());
        self
    }

    /// Human-readable label such as `blue cylinder`.
    pub fn label(&self) -> String {
        match self.attributes.get("color") {
            Some(color) => format!("{color} {}", self.category),
            None => self.category.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationshipEdge {
    #[serde(rename = "subject")]
    pub subject_id: String,
    pub predicate: String,
    #[serde(rename = "object")]
    pub object_id: String,
}

impl RelationshipEdge {
    pub fn new(subject: impl Into<String>, predicate: impl Into<String>, object: impl Into<String>) -> Self {
        RelationshipEdge {
            subject_id: subject.into(),
            predicate: predicate.into(),
            object_id: object.into(),
        }
    }

    pub fn touches(&self, id: &str) -> bool {
        self.subject_id == id || self.object_id == id
    }

    fn describe(&self) -> String {
        format!("{} -{}-> {}", self.subject_id, self.predicate, self.object_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGraph {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(rename = "image")]
    pub image_ref: String,
    pub width: u32,
    pub height: u32,
    #[serde(rename = "objects", default)]
    pub nodes: Vec<ObjectNode>,
    #[serde(rename = "relationships", default)]
    pub edges: Vec<RelationshipEdge>,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// Where the pixels for an added or replacing object come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSource {
    /// Path or library-relative name of the query image.
    pub image: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeChange {
    pub old: RelationshipEdge,
    pub new: RelationshipEdge,
}

impl EdgeChange {
    pub fn inverse(&self) -> EdgeChange {
        EdgeChange {
            old: self.new.clone(),
            new: self.old.clone(),
        }
    }

    fn is_well_formed(&self) -> bool {
        let (o, n) = (&self.old, &self.new);
        let predicate_only = o.subject_id == n.subject_id && o.object_id == n.object_id && o.predicate != n.predicate;
        let orientation_only = o.subject_id == n.object_id && o.object_id == n.subject_id && o.predicate == n.predicate;
        predicate_only || orientation_only
    }
}

/// One user edit on a scene graph. Serialized with a `kind` discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EditOp {
    Remove {
        target_id: String,
    },
    Add {
        new_node: ObjectNode,
        #[serde(default)]
        new_edges: Vec<RelationshipEdge>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        object_source: Option<ObjectSource>,
    },
    Replace {
        target_id: String,
        new_node: ObjectNode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        object_source: Option<ObjectSource>,
    },
    RelationshipChange {
        target_id: String,
        edge_change: EdgeChange,
    },
}

impl EditOp {
    pub fn target_id(&self) -> &str {
        match self {
            EditOp::Remove { target_id }
            | EditOp::Replace { target_id, .. }
            | EditOp::RelationshipChange { target_id, .. } => target_id,
            EditOp::Add { new_node, .. } => &new_node.id,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            EditOp::Remove { .. } => "remove",
            EditOp::Add { .. } => "add",
            EditOp::Replace { .. } => "replace",
            EditOp::RelationshipChange { .. } => "relationship_change",
        }
    }

    pub fn object_source(&self) -> Option<&ObjectSource> {
        match self {
            EditOp::Add { object_source, .. } | EditOp::Replace { object_source, .. } => object_source.as_ref(),
            _ => None,
        }
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("edit op serializes");
        if let serde_json::Value::Object(map) = &mut v {
            map.insert("schema_version".into(), SCHEMA_VERSION.into());
        }
        v
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("edit op serializes")
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<EditOp, GraphError> {
        let mut value = value;
        if let serde_json::Value::Object(map) = &mut value {
            check_version(map.remove("schema_version"))?;
        }
        from_value_with_path(value)
    }

    pub fn from_json(text: &str) -> Result<EditOp, GraphError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| GraphError::Parse {
            path: ".".into(),
            message: e.to_string(),
        })?;
        EditOp::from_json_value(value)
    }

    /// Parses either a single op or an array of ops.
    pub fn list_from_json(text: &str) -> Result<Vec<EditOp>, GraphError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| GraphError::Parse {
            path: ".".into(),
            message: e.to_string(),
        })?;
        match value {
            serde_json::Value::Array(items) => items
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    EditOp::from_json_value(v).map_err(|e| match e {
                        GraphError::Parse { path, message } => GraphError::Parse {
                            path: format!("[{i}].{path}"),
                            message,
                        },
                        other => other,
                    })
                })
                .collect(),
            other => Ok(vec![EditOp::from_json_value(other)?]),
        }
    }
}

fn check_version(v: Option<serde_json::Value>) -> Result<(), GraphError> {
    match v {
        None => Ok(()),
        Some(serde_json::Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION as u64) => Ok(()),
        Some(other) => Err(GraphError::Parse {
            path: "schema_version".into(),
            message: format!("unsupported schema version {other}"),
        }),
    }
}

fn from_value_with_path<T: DeserializeOwned>(value: serde_json::Value) -> Result<T, GraphError> {
    serde_path_to_error::deserialize(value).map_err(|e| GraphError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// One incident edge of the target, seen from the target's side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub subject_category: String,
    pub predicate: String,
    pub object_category: String,
    pub target_is_subject: bool,
    pub reference_bbox: BBox,
}

impl SceneGraph {
    pub fn new(image_ref: impl Into<String>, width: u32, height: u32) -> Self {
        SceneGraph {
            schema_version: SCHEMA_VERSION,
            image_ref: image_ref.into(),
            width,
            height,
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    /// Parses and validates a scene-graph JSON document.
    pub fn parse(document: &str) -> Result<SceneGraph, GraphError> {
        let value: serde_json::Value = serde_json::from_str(document).map_err(|e| GraphError::Parse {
            path: ".".into(),
            message: e.to_string(),
        })?;
        SceneGraph::from_json_value(value)
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<SceneGraph, GraphError> {
        let graph: SceneGraph = from_value_with_path(value)?;
        if graph.schema_version != SCHEMA_VERSION {
            return Err(GraphError::Parse {
                path: "schema_version".into(),
                message: format!("unsupported schema version {}", graph.schema_version),
            });
        }
        graph.validate()?;
        Ok(graph)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene graph serializes")
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let mut ids = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id.is_empty() {
                return Err(validation(format!("objects[{i}].id"), "empty id"));
            }
            if !ids.insert(n.id.as_str()) {
                return Err(validation(format!("objects[{i}].id"), format!("duplicate id `{}`", n.id)));
            }
            if !n.bbox.is_valid() {
                return Err(validation(
                    format!("objects[{i}].bbox"),
                    format!("bbox {:?} outside [0,1] or unordered", n.bbox.to_array()),
                ));
            }
        }
        let mut seen = BTreeSet::new();
        for (i, e) in self.edges.iter().enumerate() {
            for (field, id) in [("subject", &e.subject_id), ("object", &e.object_id)] {
                if !ids.contains(id.as_str()) {
                    return Err(validation(
                        format!("relationships[{i}].{field}"),
                        format!("dangling reference `{id}`"),
                    ));
                }
            }
            if e.subject_id == e.object_id {
                return Err(validation(format!("relationships[{i}]"), "self-loop edge"));
            }
            if !seen.insert(e) {
                return Err(validation(
                    format!("relationships[{i}]"),
                    format!("duplicate edge {}", e.describe()),
                ));
            }
        }
        Ok(())
    }

    pub fn node(&self, id: &str) -> Option<&ObjectNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.node(id).is_some()
    }

    pub fn incident_edges<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a RelationshipEdge> + 'a {
        self.edges.iter().filter(move |e| e.touches(id))
    }

    /// Distinct predicates used in this graph, sorted.
    pub fn predicates(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.edges.iter().map(|e| e.predicate.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Order-insensitive equality on nodes and edges.
    pub fn structurally_eq(&self, other: &SceneGraph) -> bool {
        if self.image_ref != other.image_ref || self.width != other.width || self.height != other.height {
            return false;
        }
        let nodes = |g: &SceneGraph| {
            let mut v: Vec<_> = g.nodes.iter().map(|n| (n.id.clone(), n.clone())).collect();
            v.sort_by(|a, b| a.0.cmp(&b.0));
            v
        };
        let edges = |g: &SceneGraph| g.edges.iter().cloned().collect::<BTreeSet<_>>();
        nodes(self) == nodes(other) && edges(self) == edges(other)
    }

    /// Applies one edit, returning a new graph.
    pub fn apply_edit(&self, op: &EditOp) -> Result<SceneGraph, GraphError> {
        let mut g = self.clone();
        match op {
            EditOp::Remove { target_id } => {
                let before = g.nodes.len();
                g.nodes.retain(|n| &n.id != target_id);
                if g.nodes.len() == before {
                    return Err(GraphError::NodeNotFound(target_id.clone()));
                }
                g.edges.retain(|e| !e.touches(target_id));
            }
            EditOp::Replace {
                target_id, new_node, ..
            } => {
                if new_node.id != *target_id {
                    return Err(GraphError::InvalidEdit(format!(
                        "replace must keep the node id (`{}` != `{target_id}`)",
                        new_node.id
                    )));
                }
                let node = g
                    .nodes
                    .iter_mut()
                    .find(|n| &n.id == target_id)
                    .ok_or_else(|| GraphError::NodeNotFound(target_id.clone()))?;
                node.category = new_node.category.clone();
                node.attributes = new_node.attributes.clone();
                node.bbox = new_node.bbox;
            }
            EditOp::Add { new_node, new_edges, .. } => {
                if g.contains(&new_node.id) {
                    return Err(GraphError::DuplicateId(new_node.id.clone()));
                }
                if let Some(e) = new_edges.iter().find(|e| !e.touches(&new_node.id)) {
                    return Err(GraphError::InvalidEdit(format!(
                        "added edge {} does not touch the new node",
                        e.describe()
                    )));
                }
                g.nodes.push(new_node.clone());
                g.edges.extend(new_edges.iter().cloned());
            }
            EditOp::RelationshipChange { target_id, edge_change } => {
                if !g.contains(target_id) {
                    return Err(GraphError::NodeNotFound(target_id.clone()));
                }
                if !edge_change.is_well_formed() {
                    return Err(GraphError::InvalidEdit(
                        "edge change must differ only in predicate or only in orientation".into(),
                    ));
                }
                if !edge_change.old.touches(target_id) {
                    return Err(GraphError::InvalidEdit(format!(
                        "edge {} does not touch target `{target_id}`",
                        edge_change.old.describe()
                    )));
                }
                let slot = g
                    .edges
                    .iter()
                    .position(|e| *e == edge_change.old)
                    .ok_or_else(|| GraphError::EdgeNotFound(edge_change.old.describe()))?;
                g.edges[slot] = edge_change.new.clone();
            }
        }
        g.validate()?;
        Ok(g)
    }

    pub fn apply_all(&self, ops: &[EditOp]) -> Result<SceneGraph, GraphError> {
        ops.iter().try_fold(self.clone(), |g, op| g.apply_edit(op))
    }
}

/// Incident edges of `target_id` in `modified`, as triplets ordered by
/// `(predicate, reference id)` and truncated to `max_triplets`.
pub fn extract_modified_triplets(
    original: &SceneGraph,
    modified: &SceneGraph,
    target_id: &str,
    max_triplets: usize,
) -> Result<Vec<Triplet>, GraphError> {
    if original.image_ref != modified.image_ref {
        return Err(GraphError::DifferentImages(
            original.image_ref.clone(),
            modified.image_ref.clone(),
        ));
    }
    if max_triplets == 0 {
        return Err(GraphError::InvalidEdit("max_triplets must be at least 1".into()));
    }
    let target = modified
        .node(target_id)
        .ok_or_else(|| GraphError::NodeNotFound(target_id.to_string()))?;
    let mut incident: Vec<(&str, &str, &RelationshipEdge)> = modified
        .incident_edges(target_id)
        .map(|e| {
            let reference = if e.subject_id == target_id { &e.object_id } else { &e.subject_id };
            (e.predicate.as_str(), reference.as_str(), e)
        })
        .collect();
    if incident.is_empty() {
        return Err(GraphError::NoIncidentEdges(target_id.to_string()));
    }
    incident.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    incident.truncate(max_triplets);
    incident
        .into_iter()
        .map(|(_, reference_id, e)| {
            let reference = modified
                .node(reference_id)
                .ok_or_else(|| GraphError::NodeNotFound(reference_id.to_string()))?;
            let target_is_subject = e.subject_id == target_id;
            let (s, o) = if target_is_subject { (target, reference) } else { (reference, target) };
            Ok(Triplet {
                subject_category: s.category.clone(),
                predicate: e.predicate.clone(),
                object_category: o.category.clone(),
                target_is_subject,
                reference_bbox: reference.bbox,
            })
        })
        .collect()
}

/// Edit ops that turn `original` into `modified`, keyed by node id.
///
/// Edge changes that are not a single predicate swap or orientation flip are
/// expressed by removing and re-adding the subject node with its new edges.
pub fn graph_diff(original: &SceneGraph, modified: &SceneGraph) -> Result<Vec<EditOp>, GraphError> {
    if original.image_ref != modified.image_ref {
        return Err(GraphError::DifferentImages(
            original.image_ref.clone(),
            modified.image_ref.clone(),
        ));
    }
    let orig_ids: BTreeSet<&str> = original.nodes.iter().map(|n| n.id.as_str()).collect();
    let mod_ids: BTreeSet<&str> = modified.nodes.iter().map(|n| n.id.as_str()).collect();
    let kept: BTreeSet<&str> = orig_ids.intersection(&mod_ids).copied().collect();

    let edges_within = |g: &SceneGraph| -> BTreeSet<RelationshipEdge> {
        g.edges
            .iter()
            .filter(|e| kept.contains(e.subject_id.as_str()) && kept.contains(e.object_id.as_str()))
            .cloned()
            .collect()
    };
    let orig_edges = edges_within(original);
    let mod_edges = edges_within(modified);

    let mut rebuilt: BTreeSet<String> = BTreeSet::new();
    let changes = loop {
        let live = |e: &&RelationshipEdge| !rebuilt.contains(&e.subject_id) && !rebuilt.contains(&e.object_id);
        let minus: Vec<&RelationshipEdge> = orig_edges.difference(&mod_edges).filter(live).collect();
        let plus: Vec<&RelationshipEdge> = mod_edges.difference(&orig_edges).filter(live).collect();
        let mut used = vec![false; plus.len()];
        let mut pairs = Vec::new();
        let mut unpaired = BTreeSet::new();
        for old in &minus {
            let candidate = (0..plus.len())
                .filter(|&j| !used[j])
                .find(|&j| {
                    let n = plus[j];
                    n.subject_id == old.subject_id && n.object_id == old.object_id
                })
                .or_else(|| {
                    (0..plus.len()).filter(|&j| !used[j]).find(|&j| {
                        let n = plus[j];
                        n.subject_id == old.object_id && n.object_id == old.subject_id && n.predicate == old.predicate
                    })
                });
            match candidate {
                Some(j) => {
                    used[j] = true;
                    pairs.push(EdgeChange {
                        old: (*old).clone(),
                        new: plus[j].clone(),
                    });
                }
                None => {
                    unpaired.insert(old.subject_id.clone());
                }
            }
        }
        for (j, e) in plus.iter().enumerate() {
            if !used[j] {
                unpaired.insert(e.subject_id.clone());
            }
        }
        if unpaired.is_empty() {
            break pairs;
        }
        rebuilt.extend(unpaired);
    };

    let mut ops = Vec::new();
    for n in &original.nodes {
        if !mod_ids.contains(n.id.as_str()) {
            ops.push(EditOp::Remove {
                target_id: n.id.clone(),
            });
        }
    }
    for n in &original.nodes {
        if rebuilt.contains(&n.id) {
            continue;
        }
        if let Some(m) = modified.node(&n.id) {
            if m != n {
                ops.push(EditOp::Replace {
                    target_id: n.id.clone(),
                    new_node: m.clone(),
                    object_source: None,
                });
            }
        }
    }
    for id in &rebuilt {
        ops.push(EditOp::Remove { target_id: id.clone() });
    }
    let mut present: BTreeSet<&str> = kept.iter().copied().filter(|id| !rebuilt.contains(*id)).collect();
    for n in &modified.nodes {
        let is_new = !orig_ids.contains(n.id.as_str());
        if !is_new && !rebuilt.contains(&n.id) {
            continue;
        }
        present.insert(n.id.as_str());
        let new_edges = modified
            .incident_edges(&n.id)
            .filter(|e| present.contains(e.subject_id.as_str()) && present.contains(e.object_id.as_str()))
            .cloned()
            .collect();
        ops.push(EditOp::Add {
            new_node: n.clone(),
            new_edges,
            object_source: None,
        });
    }
    for change in changes {
        ops.push(EditOp::RelationshipChange {
            target_id: change.old.subject_id.clone(),
            edge_change: change,
        });
    }
    Ok(ops)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn clevr_graph() -> SceneGraph {
        let mut g = SceneGraph::new("scene.png", 64, 64);
        g.nodes = vec![
            ObjectNode::new("red_cube", "cube", BBox::new(0.1, 0.1, 0.3, 0.3)).with_attr("color", "red"),
            ObjectNode::new("blue_cyl", "cylinder", BBox::new(0.5, 0.6, 0.6, 0.8)).with_attr("color", "blue"),
            ObjectNode::new("green_sph", "sphere", BBox::new(0.7, 0.2, 0.9, 0.4)).with_attr("color", "green"),
        ];
        g.edges = vec![
            RelationshipEdge::new("blue_cyl", "front of", "red_cube"),
            RelationshipEdge::new("blue_cyl", "left of", "green_sph"),
            RelationshipEdge::new("red_cube", "left of", "green_sph"),
        ];
        g
    }

    #[test]
    fn parses_empty_document() {
        let g = SceneGraph::parse(r#"{"image":"a.png","width":4,"height":4,"objects":[],"relationships":[]}"#).unwrap();
        assert!(g.nodes.is_empty() && g.edges.is_empty());
    }

    #[test]
    fn parses_clevr_document() {
        let doc = r#"{"schema_version":1,"image":"x.png","width":64,"height":64,
            "objects":[{"id":"a","category":"cube","attributes":{"color":"red"},"bbox":[0.1,0.1,0.3,0.3]},
                       {"id":"b","category":"cylinder","attributes":{"color":"blue"},"bbox":[0.5,0.5,0.7,0.9]}],
            "relationships":[{"subject":"b","predicate":"front of","object":"a"}]}"#;
        let g = SceneGraph::parse(doc).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.edges, vec![RelationshipEdge::new("b", "front of", "a")]);
        assert_eq!(g.node("b").unwrap().label(), "blue cylinder");
    }

    #[test]
    fn dangling_edge_is_validation_error() {
        let doc = r#"{"image":"x","width":1,"height":1,
            "objects":[{"id":"a","category":"cube","bbox":[0,0,1,1]}],
            "relationships":[{"subject":"a","predicate":"left of","object":"zzz"}]}"#;
        match SceneGraph::parse(doc) {
            Err(GraphError::Validation { path, .. }) => assert_eq!(path, "relationships[0].object"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_violation_names_path() {
        let doc = r#"{"image":"x","width":1,"height":1,"objects":[{"id":"a","category":"cube","bbox":[0,0,1]}]}"#;
        match SceneGraph::parse(doc) {
            Err(GraphError::Parse { path, .. }) => assert!(path.starts_with("objects[0].bbox"), "{path}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_edges_rejected() {
        let mut g = clevr_graph();
        g.edges.push(g.edges[0].clone());
        assert!(matches!(g.validate(), Err(GraphError::Validation { .. })));
    }

    #[test]
    fn remove_drops_incident_edges_only() {
        let g = clevr_graph();
        let out = g
            .apply_edit(&EditOp::Remove {
                target_id: "blue_cyl".into(),
            })
            .unwrap();
        assert_eq!(out.nodes.len(), 2);
        assert_eq!(out.edges, vec![RelationshipEdge::new("red_cube", "left of", "green_sph")]);
        assert_eq!(g, clevr_graph(), "input must not be mutated");
    }

    #[test]
    fn relationship_change_swaps_predicate() {
        let g = clevr_graph();
        let op = EditOp::RelationshipChange {
            target_id: "blue_cyl".into(),
            edge_change: EdgeChange {
                old: RelationshipEdge::new("blue_cyl", "front of", "red_cube"),
                new: RelationshipEdge::new("blue_cyl", "behind", "red_cube"),
            },
        };
        let out = g.apply_edit(&op).unwrap();
        assert_eq!(out.edges.len(), g.edges.len());
        assert_eq!(out.edges[0].predicate, "behind");
        assert_eq!(&out.edges[1..], &g.edges[1..]);
    }

    #[test]
    fn replace_relabels_in_place() {
        let g = clevr_graph();
        let mut sphere = g.node("red_cube").unwrap().clone();
        sphere.category = "sphere".into();
        let out = g
            .apply_edit(&EditOp::Replace {
                target_id: "red_cube".into(),
                new_node: sphere,
                object_source: None,
            })
            .unwrap();
        assert_eq!(out.node("red_cube").unwrap().category, "sphere");
        assert_eq!(out.edges, g.edges);
        let ids = |g: &SceneGraph| g.nodes.iter().map(|n| n.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&out), ids(&g));
    }

    #[test]
    fn edit_errors() {
        let g = clevr_graph();
        assert_eq!(
            g.apply_edit(&EditOp::Remove { target_id: "nope".into() }),
            Err(GraphError::NodeNotFound("nope".into()))
        );
        let add = EditOp::Add {
            new_node: ObjectNode::new("red_cube", "cube", BBox::FULL),
            new_edges: vec![],
            object_source: None,
        };
        assert!(matches!(g.apply_edit(&add), Err(GraphError::DuplicateId(_))));
        let change = EditOp::RelationshipChange {
            target_id: "blue_cyl".into(),
            edge_change: EdgeChange {
                old: RelationshipEdge::new("blue_cyl", "behind", "red_cube"),
                new: RelationshipEdge::new("blue_cyl", "front of", "red_cube"),
            },
        };
        assert!(matches!(g.apply_edit(&change), Err(GraphError::EdgeNotFound(_))));
    }

    #[test]
    fn triplet_for_single_edge() {
        let g = clevr_graph();
        let t = extract_modified_triplets(&g, &g, "red_cube", 5).unwrap();
        assert_eq!(t.len(), 2);
        // sorted by predicate: "front of" < "left of"
        assert_eq!(t[0].predicate, "front of");
        assert!(!t[0].target_is_subject);
        assert_eq!(t[0].reference_bbox, g.node("blue_cyl").unwrap().bbox);
        assert!(t[1].target_is_subject);
    }

    #[test]
    fn clevr_behind_triplet() {
        let g = clevr_graph();
        let op = EditOp::RelationshipChange {
            target_id: "blue_cyl".into(),
            edge_change: EdgeChange {
                old: RelationshipEdge::new("blue_cyl", "front of", "red_cube"),
                new: RelationshipEdge::new("blue_cyl", "behind", "red_cube"),
            },
        };
        let m = g.apply_edit(&op).unwrap();
        let t = extract_modified_triplets(&g, &m, "blue_cyl", 5).unwrap();
        assert_eq!(
            t[0],
            Triplet {
                subject_category: "cylinder".into(),
                predicate: "behind".into(),
                object_category: "cube".into(),
                target_is_subject: true,
                reference_bbox: g.node("red_cube").unwrap().bbox,
            }
        );
    }

    #[test]
    fn seven_edges_truncate_to_five_in_canonical_order() {
        let mut g = SceneGraph::new("s", 8, 8);
        g.nodes.push(ObjectNode::new("t", "cube", BBox::new(0.4, 0.4, 0.6, 0.6)));
        for r in ["r1", "r2", "r3", "r4"] {
            g.nodes.push(ObjectNode::new(r, "sphere", BBox::new(0.0, 0.0, 0.1, 0.1)));
        }
        g.edges = vec![
            RelationshipEdge::new("t", "left of", "r3"),
            RelationshipEdge::new("r1", "left of", "t"),
            RelationshipEdge::new("t", "behind", "r4"),
            RelationshipEdge::new("t", "behind", "r2"),
            RelationshipEdge::new("r3", "front of", "t"),
            RelationshipEdge::new("t", "right of", "r1"),
            RelationshipEdge::new("r2", "front of", "t"),
        ];
        // by hand: (behind,r2) (behind,r4) (front of,r2) (front of,r3) (left of,r1) | (left of,r3) (right of,r1)
        let t = extract_modified_triplets(&g, &g, "t", 5).unwrap();
        let got: Vec<(String, bool)> = t.iter().map(|t| (t.predicate.clone(), t.target_is_subject)).collect();
        let want = [
            ("behind", true),
            ("behind", true),
            ("front of", false),
            ("front of", false),
            ("left of", false),
        ];
        assert_eq!(got, want.map(|(p, s)| (p.to_string(), s)));
    }

    #[test]
    fn isolated_target_is_error() {
        let mut g = SceneGraph::new("s", 8, 8);
        g.nodes.push(ObjectNode::new("t", "cube", BBox::FULL));
        assert!(matches!(
            extract_modified_triplets(&g, &g, "t", 5),
            Err(GraphError::NoIncidentEdges(_))
        ));
    }

    #[test]
    fn diff_identity_and_single_deltas() {
        let g = clevr_graph();
        assert!(graph_diff(&g, &g).unwrap().is_empty());

        let mut m = g.clone();
        m.edges[0].predicate = "behind".into();
        let ops = graph_diff(&g, &m).unwrap();
        assert_eq!(ops.len(), 1);
        assert_eq!(ops[0].kind_name(), "relationship_change");

        let m = g.apply_edit(&EditOp::Remove { target_id: "green_sph".into() }).unwrap();
        let ops = graph_diff(&g, &m).unwrap();
        assert_eq!(ops, vec![EditOp::Remove { target_id: "green_sph".into() }]);
    }

    #[test]
    fn diff_rejects_other_image() {
        let g = clevr_graph();
        let mut m = g.clone();
        m.image_ref = "other.png".into();
        assert!(matches!(graph_diff(&g, &m), Err(GraphError::DifferentImages(..))));
    }

    #[test]
    fn edit_op_json_shape() {
        let op = EditOp::Remove { target_id: "a".into() };
        let v = op.to_json_value();
        assert_eq!(v["kind"], "remove");
        assert_eq!(v["schema_version"], 1);
        assert_eq!(EditOp::from_json_value(v).unwrap(), op);
        let bad = serde_json::json!({"kind": "remove", "target_id": "a", "new_node": null});
        assert!(matches!(EditOp::from_json_value(bad), Err(GraphError::Parse { .. })));
    }
}
