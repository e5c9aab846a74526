//! CLEVR-like synthetic scenes: flat gray background, colored cubes, spheres
//! and cylinders, with exact ground truth (background, coverage, scene graph).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::image::Image;
use crate::scenegraph::{ObjectNode, RelationshipEdge, SceneGraph};
use crate::segmask::Mask;

/// CLEVR palette without gray, which would be too close to the background.
pub const PALETTE: [(&str, [u8; 3]); 7] = [
    ("red", [173, 35, 35]),
    ("blue", [42, 75, 215]),
    ("green", [29, 105, 20]),
    ("brown", [129, 74, 25]),
    ("purple", [129, 38, 192]),
    ("cyan", [41, 208, 208]),
    ("yellow", [255, 238, 51]),
];

pub const SHAPES: [&str; 3] = ["cube", "sphere", "cylinder"];

/// Cylinders are drawn as upright rectangles this much narrower than tall.
pub const CYLINDER_ASPECT: f64 = 0.6;

pub const HORIZONTAL_PREDICATES: [&str; 2] = ["left of", "right of"];
pub const DEPTH_PREDICATES: [&str; 2] = ["front of", "behind"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneOptions {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object height range as a fraction of the image side.
    pub min_extent: f64,
    pub max_extent: f64,
    /// Minimum center separation on each axis, as a fraction of the side.
    pub margin: f64,
    /// Minimum pixel gap between object boxes.
    pub gap: f64,
    pub supersample: usize,
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions {
            size: 64,
            min_objects: 2,
            max_objects: 4,
            min_extent: 0.16,
            max_extent: 0.26,
            margin: 0.05,
            gap: 3.0,
            supersample: 4,
        }
    }
}

/// One placed object, in pixel units of a `size x size` canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: String,
    pub shape: String,
    pub color_name: String,
    pub color: [f32; 3],
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
}

impl SceneObject {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = ((x - self.cx) / self.half_w, (y - self.cy) / self.half_h);
        match self.shape.as_str() {
            "sphere" => dx * dx + dy * dy <= 1.0,
            _ => dx.abs() <= 1.0 && dy.abs() <= 1.0,
        }
    }

    pub fn bbox(&self, size: usize) -> BBox {
        let s = size as f64;
        BBox::new(
            (self.cx - self.half_w) / s,
            (self.cy - self.half_h) / s,
            (self.cx + self.half_w) / s,
            (self.cy + self.half_h) / s,
        )
    }

    /// Fraction of each pixel covered, from `n x n` supersampling.
    pub fn coverage(&self, size: usize, n: usize) -> Vec<f32> {
        let mut cov = vec![0.0f32; size * size];
        let x0 = (self.cx - self.half_w).floor().max(0.0) as usize;
        let x1 = ((self.cx + self.half_w).ceil() as usize).min(size);
        let y0 = (self.cy - self.half_h).floor().max(0.0) as usize;
        let y1 = ((self.cy + self.half_h).ceil() as usize).min(size);
        let step = 1.0 / n as f64;
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for sy in 0..n {
                    for sx in 0..n {
                        let px = x as f64 + (sx as f64 + 0.5) * step;
                        let py = y as f64 + (sy as f64 + 0.5) * step;
                        hits += usize::from(self.contains(px, py));
                    }
                }
                cov[y * size + x] = hits as f32 / (n * n) as f32;
            }
        }
        cov
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image: Image,
    /// The same scene with no objects.
    pub background: Image,
    pub graph: SceneGraph,
    pub objects: Vec<SceneObject>,
    pub options: SceneOptions,
}

impl SyntheticScene {
    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Pixels with any coverage by `id`, as a hole.
    pub fn footprint(&self, id: &str) -> Option<Mask> {
        let o = self.object(id)?;
        let cov = o.coverage(self.options.size, self.options.supersample);
        Some(
            Mask::from_known(self.options.size, self.options.size, cov.iter().map(|&c| c == 0.0).collect())
                .expect("sized"),
        )
    }

    /// Ground truth after removing `id`: the scene re-rendered without it.
    pub fn without(&self, id: &str) -> Image {
        let rest: Vec<SceneObject> = self.objects.iter().filter(|o| o.id != id).cloned().collect();
        render(&rest, &self.background, self.options.supersample)
    }
}

fn to_unit(c: [u8; 3]) -> [f32; 3] {
    c.map(|v| v as f32 / 255.0)
}

/// Composites objects over `background` with coverage-weighted blending.
pub fn render(objects: &[SceneObject], background: &Image, supersample: usize) -> Image {
    let size = background.width;
    let mut img = background.clone();
    for o in objects {
        let cov = o.coverage(size, supersample);
        for (i, &a) in cov.iter().enumerate() {
            if a > 0.0 {
                for c in 0..3 {
                    let p = c * size * size + i;
                    img.data[p] = a * o.color[c] + (1.0 - a) * img.data[p];
                }
            }
        }
    }
    img.quantized()
}

fn separated(a: &SceneObject, b: &SceneObject, opts: &SceneOptions) -> bool {
    let s = opts.size as f64;
    let apart_x = (a.cx - b.cx).abs() >= a.half_w + b.half_w + opts.gap;
    let apart_y = (a.cy - b.cy).abs() >= a.half_h + b.half_h + opts.gap;
    (apart_x || apart_y) && (a.cx - b.cx).abs() >= opts.margin * s && (a.cy - b.cy).abs() >= opts.margin * s
}

/// Samples non-overlapping objects with pairwise-distinct colors.
pub fn sample_layout(rng: &mut impl Rng, opts: &SceneOptions) -> Vec<SceneObject> {
    let s = opts.size as f64;
    let n = rng.gen_range(opts.min_objects..=opts.max_objects);
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    colors.shuffle(rng);
    let mut objects: Vec<SceneObject> = Vec::new();
    'outer: for i in 0..n {
        for _ in 0..500 {
            let shape = SHAPES[rng.gen_range(0..SHAPES.len())];
            let half_h = 0.5 * s * rng.gen_range(opts.min_extent..opts.max_extent);
            let half_w = if shape == "cylinder" { CYLINDER_ASPECT * half_h } else { half_h };
            let border = 2.0;
            let cx = rng.gen_range(half_w + border..s - half_w - border);
            let cy = rng.gen_range(half_h + border..s - half_h - border);
            let (name, rgb) = PALETTE[colors[i % colors.len()]];
            let cand = SceneObject {
                id: format!("obj{i}"),
                shape: shape.to_string(),
                color_name: name.to_string(),
                color: to_unit(rgb),
                cx,
                cy,
                half_w,
                half_h,
            };
            if objects.iter().all(|o| separated(o, &cand, opts)) {
                objects.push(cand);
                continue 'outer;
            }
        }
        break;
    }
    objects
}

/// One horizontal and one depth edge per unordered pair, subject = lower index.
/// Larger `y` is nearer the viewer, so "front of" means a larger center `y`.
pub fn layout_graph(objects: &[SceneObject], size: usize, image_ref: &str) -> SceneGraph {
    let mut g = SceneGraph::new(image_ref, size as u32, size as u32);
    for o in objects {
        g.nodes.push(
            ObjectNode::new(o.id.clone(), o.shape.clone(), o.bbox(size))
                .with_attr("color", o.color_name.clone())
                .with_attr("shape", o.shape.clone())
                .with_attr("material", "rubber"),
        );
    }
    for (i, a) in objects.iter().enumerate() {
        for b in &objects[i + 1..] {
            let h = if a.cx < b.cx { "left of" } else { "right of" };
            let d = if a.cy > b.cy { "front of" } else { "behind" };
            g.edges.push(RelationshipEdge::new(a.id.clone(), h, b.id.clone()));
            g.edges.push(RelationshipEdge::new(a.id.clone(), d, b.id.clone()));
        }
    }
    g
}

/// Whether a box center satisfies `predicate` relative to a reference box,
/// with the target on the subject side when `target_is_subject`.
pub fn relation_holds(predicate: &str, target: BBox, reference: BBox, target_is_subject: bool) -> Option<bool> {
    let (tx, ty) = target.center();
    let (rx, ry) = reference.center();
    let (sx, sy, ox, oy) = if target_is_subject { (tx, ty, rx, ry) } else { (rx, ry, tx, ty) };
    match predicate {
        "left of" => Some(sx < ox),
        "right of" => Some(sx > ox),
        "front of" => Some(sy > oy),
        "behind" => Some(sy < oy),
        _ => None,
    }
}

pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Scene `index` of the sequence determined by `seed`.
pub fn generate_scene(seed: u64, index: usize, opts: &SceneOptions) -> SyntheticScene {
    let mut rng = scene_rng(seed, index as u64);
    let gray = rng.gen_range(0.45f32..0.6);
    let background = Image::filled(opts.size, opts.size, &[gray, gray, gray]).quantized();
    let objects = sample_layout(&mut rng, opts);
    let image = render(&objects, &background, opts.supersample);
    let graph = layout_graph(&objects, opts.size, &format!("{}.png", scene_name(index)));
    SyntheticScene {
        image,
        background,
        graph,
        objects,
        options: opts.clone(),
    }
}

/// `(original, modified, target_id)` pairs for position training: the
/// modified graph contains the target, the original is the graph without it.
pub fn position_pairs(n: usize, seed: u64, opts: &SceneOptions) -> Vec<(SceneGraph, SceneGraph, String)> {
    let mut out = Vec::with_capacity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while out.len() < n {
        let objects = sample_layout(&mut rng, opts);
        if objects.len() < 2 {
            continue;
        }
        let modified = layout_graph(&objects, opts.size, "layout");
        let target = objects[rng.gen_range(0..objects.len())].id.clone();
        let original = modified
            .apply_edit(&crate::scenegraph::EditOp::Remove {
                target_id: target.clone(),
            })
            .expect("target exists");
        out.push((original, modified, target));
    }
    out
}

/// A small library of single-object images per shape and color, used as the
/// source of pixels for additions and replacements.
pub fn query_library(size: usize, seed: u64) -> Vec<(Image, SceneGraph)> {
    let opts = SceneOptions {
        size,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (si, shape) in SHAPES.iter().enumerate() {
        for (ci, (name, rgb)) in PALETTE.iter().enumerate() {
            let s = size as f64;
            let half_h = 0.5 * s * rng.gen_range(opts.min_extent..opts.max_extent);
            let half_w = if *shape == "cylinder" { CYLINDER_ASPECT * half_h } else { half_h };
            let obj = SceneObject {
                id: "obj0".into(),
                shape: shape.to_string(),
                color_name: name.to_string(),
                color: to_unit(*rgb),
                cx: s / 2.0,
                cy: s / 2.0,
                half_w,
                half_h,
            };
            let bg = Image::filled(size, size, &[0.5, 0.5, 0.5]).quantized();
            let image = render(std::slice::from_ref(&obj), &bg, opts.supersample);
            let graph = layout_graph(&[obj], size, &format!("query_{si}_{ci}.png"));
            out.push((image, graph));
        }
    }
    out
}

/// Category histogram of a set of graphs.
pub fn category_counts<'a>(graphs: impl IntoIterator<Item = &'a SceneGraph>) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for g in graphs {
        for n in &g.nodes {
            *m.entry(n.category.clone()).or_insert(0) += 1;
        }
    }
    m
}
