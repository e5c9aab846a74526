use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::library::{crop_instance, object_crop_source, segment_or_box, QueryLibrary};
use super::paste::paste_object;
use super::{union_roi, PipelineConfig, PipelineError, PipelinePlan, StepError, StepKind};
use crate::bbox::BBox;
use crate::image::{to_u8, Image};
use crate::inpaint::{inpaint_with_progress, write_trace_csv, InpaintOutput, InpaintSpec};
use crate::metrics::{report, MetricsReport};
use crate::position::PositionModel;
use crate::scenegraph::{extract_modified_triplets, EditOp, GraphError, SceneGraph, Triplet};
use crate::segmask::{dilate_hole, Mask, SegmentationBackend};

/// Everything a run needs besides the image, graph and plan.
pub struct Resources<'a> {
    pub config: &'a PipelineConfig,
    pub backend: &'a dyn SegmentationBackend,
    pub position_model: Option<&'a PositionModel>,
    pub library: &'a QueryLibrary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub step_index: usize,
    pub step: StepKind,
    pub total_steps: usize,
    pub iteration: Option<usize>,
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub step: StepKind,
    pub op: Option<usize>,
    /// Relative to the job directory.
    pub dir: Option<String>,
    /// Loaded from a previous run instead of recomputed.
    pub resumed: bool,
}

#[derive(Debug, Clone)]
pub struct ExecuteOutput {
    pub image: Image,
    pub graph: SceneGraph,
    pub roi: Option<BBox>,
    /// Holes are every pixel a step was allowed to change.
    pub changed: Mask,
    pub metrics: Option<MetricsReport>,
    pub steps: Vec<StepRecord>,
}

/// Working state between steps. Images in it hold 8-bit-exact values in
/// every pixel a step wrote, so persisting and reloading is lossless.
#[derive(Debug, Clone)]
struct State {
    canvas: Image,
    graph: SceneGraph,
    roi: Option<BBox>,
    changed: Mask,
    instance: Option<Mask>,
    crop: Option<(Image, Mask)>,
    target: Option<BBox>,
    footprint: Option<Mask>,
    pasted: Option<Mask>,
    metrics: Option<MetricsReport>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    graph: SceneGraph,
    roi: Option<BBox>,
    target: Option<BBox>,
    has_instance: bool,
    has_crop: bool,
    has_footprint: bool,
    has_pasted: bool,
    metrics: Option<MetricsReport>,
}

const STATE_FILE: &str = "state.json";

impl State {
    fn save(&self, dir: &Path) -> Result<(), StepError> {
        self.canvas.save_png(dir.join("canvas.png"))?;
        self.changed.save_png(dir.join("changed_mask.png"))?;
        if let Some(m) = &self.instance {
            m.save_png(dir.join("instance_mask.png"))?;
        }
        if let Some((img, m)) = &self.crop {
            img.save_png(dir.join("crop.png"))?;
            m.save_png(dir.join("crop_mask.png"))?;
        }
        if let Some(m) = &self.footprint {
            m.save_png(dir.join("footprint_mask.png"))?;
        }
        if let Some(m) = &self.pasted {
            m.save_png(dir.join("pasted_mask.png"))?;
        }
        let meta = StateMeta {
            graph: self.graph.clone(),
            roi: self.roi,
            target: self.target,
            has_instance: self.instance.is_some(),
            has_crop: self.crop.is_some(),
            has_footprint: self.footprint.is_some(),
            has_pasted: self.pasted.is_some(),
            metrics: self.metrics.clone(),
        };
        // written last: its presence marks the step complete
        fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    fn load(dir: &Path) -> Result<State, StepError> {
        let meta: StateMeta = serde_json::from_str(&fs::read_to_string(dir.join(STATE_FILE))?)?;
        let mask = |name: &str| Mask::load(dir.join(name));
        Ok(State {
            canvas: Image::load(dir.join("canvas.png"))?,
            graph: meta.graph,
            roi: meta.roi,
            changed: mask("changed_mask.png")?,
            instance: meta.has_instance.then(|| mask("instance_mask.png")).transpose()?,
            crop: if meta.has_crop {
                Some((Image::load(dir.join("crop.png"))?, mask("crop_mask.png")?))
            } else {
                None
            },
            target: meta.target,
            footprint: meta.has_footprint.then(|| mask("footprint_mask.png")).transpose()?,
            pasted: meta.has_pasted.then(|| mask("pasted_mask.png")).transpose()?,
            metrics: meta.metrics,
        })
    }
}

/// Snaps the pixels under the mask's holes to 8-bit values.
fn snap_holes(image: &mut Image, mask: &Mask) {
    for c in 0..image.channels {
        for y in 0..image.height {
            for x in 0..image.width {
                if mask.is_hole(x, y) {
                    image.set(c, x, y, to_u8(image.get(c, x, y)) as f32 / 255.0);
                }
            }
        }
    }
}

struct JobLog(Option<File>);

impl JobLog {
    fn line(&mut self, msg: &str) {
        log::info!("{msg}");
        if let Some(f) = &mut self.0 {
            let _ = writeln!(f, "{msg}");
        }
    }
}

fn write_once(path: &Path, contents: &str) -> Result<(), StepError> {
    if !path.exists() {
        fs::write(path, contents)?;
    }
    Ok(())
}

/// Prepares the job directory; returns how many leading steps are already complete.
fn prepare_job_dir(
    dir: &Path,
    plan: &PipelinePlan,
    image: &Image,
    graph: &SceneGraph,
    config: &PipelineConfig,
) -> Result<usize, PipelineError> {
    let persist = PipelineError::Persist;
    fs::create_dir_all(dir.join("steps")).map_err(|e| persist(e.into()))?;
    let plan_path = dir.join("plan.json");
    let plan_json = serde_json::to_string_pretty(plan).map_err(|e| persist(e.into()))?;
    if plan_path.exists() {
        let old: PipelinePlan = fs::read_to_string(&plan_path)
            .map_err(StepError::from)
            .and_then(|s| serde_json::from_str(&s).map_err(StepError::from))
            .map_err(persist)?;
        if old != *plan {
            return Err(PipelineError::PlanMismatch);
        }
    }
    (|| -> Result<(), StepError> {
        write_once(&plan_path, &plan_json)?;
        write_once(&dir.join("config.json"), &serde_json::to_string_pretty(config)?)?;
        write_once(&dir.join("graph_before.json"), &graph.to_json())?;
        let ops: Vec<serde_json::Value> = plan.ops.iter().map(EditOp::to_json_value).collect();
        write_once(&dir.join("ops.json"), &serde_json::to_string_pretty(&ops)?)?;
        if !dir.join("input.png").exists() {
            image.save_png(dir.join("input.png"))?;
        }
        Ok(())
    })()
    .map_err(persist)?;
    let mut done = 0;
    for i in 0..plan.steps.len() {
        let step_dir = dir.join("steps").join(plan.step_dir_name(i));
        if step_dir.join(STATE_FILE).exists() {
            done = i + 1;
        } else {
            break;
        }
    }
    // a step interrupted midway leaves a partial directory; start it afresh
    for i in done..plan.steps.len() {
        let step_dir = dir.join("steps").join(plan.step_dir_name(i));
        if step_dir.exists() {
            fs::remove_dir_all(&step_dir).map_err(|e| persist(e.into()))?;
        }
    }
    Ok(done)
}

/// Runs `plan` on `image`. With a job directory every step's state is
/// persisted and completed steps from an earlier run are reused.
pub fn execute(
    plan: &PipelinePlan,
    image: &Image,
    graph: &SceneGraph,
    res: &Resources,
    job_dir: Option<&Path>,
    progress: &mut dyn FnMut(&Progress),
) -> Result<ExecuteOutput, PipelineError> {
    let mut done = 0;
    let mut log = JobLog(None);
    if let Some(dir) = job_dir {
        done = prepare_job_dir(dir, plan, image, graph, res.config)?;
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("log.txt"))
            .map_err(|e| PipelineError::Persist(e.into()))?;
        log = JobLog(Some(f));
    }
    let mut state = State {
        canvas: image.clone(),
        graph: graph.clone(),
        roi: None,
        changed: Mask::all_known(image.width, image.height),
        instance: None,
        crop: None,
        target: None,
        footprint: None,
        pasted: None,
        metrics: None,
    };
    let step_dir = |i: usize| -> Option<PathBuf> { job_dir.map(|d| d.join("steps").join(plan.step_dir_name(i))) };
    let rel_dir = |i: usize| job_dir.map(|_| format!("steps/{}", plan.step_dir_name(i)));
    let mut records = Vec::with_capacity(plan.steps.len());
    if done > 0 {
        let dir = step_dir(done - 1).expect("resume needs a job directory");
        state = State::load(&dir).map_err(PipelineError::Persist)?;
        log.line(&format!("resuming after step {} ({})", done - 1, plan.steps[done - 1].step));
        for (i, s) in plan.steps.iter().enumerate().take(done) {
            records.push(StepRecord {
                index: i,
                step: s.step,
                op: s.op,
                dir: rel_dir(i),
                resumed: true,
            });
        }
    }
    for i in done..plan.steps.len() {
        let s = &plan.steps[i];
        let dir = step_dir(i);
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|e| PipelineError::Persist(e.into()))?;
        }
        let mut ctx = StepCtx {
            index: i,
            total: plan.steps.len(),
            kind: s.step,
            dir: dir.as_deref(),
            progress: &mut *progress,
            log: &mut log,
        };
        (ctx.progress)(&Progress {
            step_index: i,
            step: s.step,
            total_steps: plan.steps.len(),
            iteration: None,
            loss: None,
        });
        ctx.log.line(&format!("step {i}: {}", s.step));
        let op = s.op.map(|k| &plan.ops[k]);
        run_step(&mut ctx, op, image, &mut state, res)
            .and_then(|()| match &dir {
                Some(d) => state.save(d),
                None => Ok(()),
            })
            .map_err(|e| {
                log.line(&format!("step {i} ({}) failed: {e}", s.step));
                PipelineError::Step {
                    index: i,
                    step: s.step,
                    source: Box::new(e),
                }
            })?;
        records.push(StepRecord {
            index: i,
            step: s.step,
            op: s.op,
            dir: rel_dir(i),
            resumed: false,
        });
    }
    if let Some(d) = job_dir {
        (|| -> Result<(), StepError> {
            state.canvas.save_png(d.join("result.png"))?;
            fs::write(d.join("graph_after.json"), state.graph.to_json())?;
            if let Some(m) = &state.metrics {
                fs::write(d.join("metrics.json"), serde_json::to_string_pretty(m)?)?;
            }
            Ok(())
        })()
        .map_err(PipelineError::Persist)?;
        log.line("done");
    }
    Ok(ExecuteOutput {
        image: state.canvas,
        graph: state.graph,
        roi: state.roi,
        changed: state.changed,
        metrics: state.metrics,
        steps: records,
    })
}

struct StepCtx<'a, 'p> {
    index: usize,
    total: usize,
    kind: StepKind,
    dir: Option<&'a Path>,
    progress: &'a mut (dyn FnMut(&Progress) + 'p),
    log: &'a mut JobLog,
}

impl StepCtx<'_, '_> {
    fn inpaint(&mut self, image: &Image, mask: &Mask, spec: &InpaintSpec) -> Result<InpaintOutput, StepError> {
        let (index, total, kind) = (self.index, self.total, self.kind);
        let progress = &mut *self.progress;
        let out = inpaint_with_progress(image, mask, spec, &mut |row| {
            progress(&Progress {
                step_index: index,
                step: kind,
                total_steps: total,
                iteration: Some(row.iteration),
                loss: Some(row.total),
            })
        })?;
        if let Some(d) = self.dir {
            out.mask.save_png(d.join("hole_mask.png"))?;
            write_trace_csv(&out.trace, File::create(d.join("trace.csv"))?).map_err(|e| std::io::Error::other(e))?;
            if let Some(g) = &out.guide {
                fs::write(d.join("guide.json"), serde_json::to_string_pretty(g)?)?;
            }
        }
        Ok(out)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), StepError> {
        if let Some(d) = self.dir {
            fs::write(d.join(name), serde_json::to_string_pretty(value)?)?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct SegmentInfo<'a> {
    category: &'a str,
    score: f64,
    bbox: BBox,
    bbox_fallback: bool,
}

#[derive(Serialize)]
struct PositionInfo<'a> {
    source: &'a str,
    triplets: &'a [Triplet],
    unknown_tokens: Vec<String>,
    bbox: BBox,
}

fn target_node<'g>(graph: &'g SceneGraph, id: &str) -> Result<&'g crate::scenegraph::ObjectNode, StepError> {
    graph
        .node(id)
        .ok_or_else(|| GraphError::NodeNotFound(id.to_string()).into())
}

/// Applies the edit to the graph, recording where the object actually ended up.
fn fold_edit(graph: &SceneGraph, op: &EditOp, placed: Option<BBox>) -> Result<SceneGraph, StepError> {
    let mut g = graph.apply_edit(op)?;
    if let Some(b) = placed {
        if let Some(n) = g.nodes.iter_mut().find(|n| n.id == op.target_id()) {
            n.bbox = b;
        }
    }
    Ok(g)
}

fn run_step(
    ctx: &mut StepCtx,
    op: Option<&EditOp>,
    input: &Image,
    st: &mut State,
    res: &Resources,
) -> Result<(), StepError> {
    let config = res.config;
    match ctx.kind {
        StepKind::Segment => {
            let op = op.ok_or(StepError::MissingState("edit"))?;
            let node = target_node(&st.graph, op.target_id())?.clone();
            let (cand, fallback) = segment_or_box(&st.canvas, &node.category, node.bbox, res.backend)?;
            if fallback {
                ctx.log.line(&format!(
                    "segment: no `{}` instance found near {:?}; using the box as mask",
                    node.category,
                    node.bbox.to_array()
                ));
            }
            ctx.write_json(
                "segment.json",
                &SegmentInfo {
                    category: &cand.category,
                    score: cand.score,
                    bbox: cand.bbox,
                    bbox_fallback: fallback,
                },
            )?;
            if matches!(op, EditOp::RelationshipChange { .. }) {
                st.crop = crop_instance(&st.canvas, &cand.mask);
            }
            st.roi = union_roi(st.roi, node.bbox);
            st.instance = Some(cand.mask);
        }
        StepKind::RemoveInpaint => {
            let op = op.ok_or(StepError::MissingState("edit"))?;
            let hole = st.instance.take().ok_or(StepError::MissingState("instance mask"))?;
            let out = ctx.inpaint(&st.canvas, &hole, &config.inpaint)?;
            let mut canvas = out.image;
            snap_holes(&mut canvas, &out.mask);
            st.canvas = canvas;
            st.changed = st.changed.union_holes(&out.mask);
            if let EditOp::Remove { .. } = op {
                st.graph = fold_edit(&st.graph, op, None)?;
            }
        }
        StepKind::PredictPosition => {
            let op = op.ok_or(StepError::MissingState("edit"))?;
            let target = op.target_id();
            let modified = st.graph.apply_edit(op)?;
            let user_bbox = match op {
                EditOp::Add { new_node, .. } => Some(new_node.bbox),
                _ => None,
            };
            let triplets = match extract_modified_triplets(&st.graph, &modified, target, config.max_triplets) {
                Ok(t) => t,
                Err(GraphError::NoIncidentEdges(_)) if user_bbox.is_some() => Vec::new(),
                Err(e) => return Err(e.into()),
            };
            let (source, bbox, unknown) = match res.position_model {
                Some(model) if !triplets.is_empty() => {
                    let truncated = &triplets[..triplets.len().min(model.config.max_triplets)];
                    let bbox = model.predict(truncated)?;
                    ("model", bbox, model.unknown_tokens(truncated))
                }
                _ => match user_bbox {
                    Some(b) => ("user", b, Vec::new()),
                    None => return Err(StepError::NoPositionModel(target.to_string())),
                },
            };
            if !unknown.is_empty() {
                ctx.log.line(&format!("position: unknown tokens {unknown:?}"));
            }
            ctx.log.line(&format!("position ({source}): {:?}", bbox.to_array()));
            ctx.write_json(
                "position.json",
                &PositionInfo {
                    source,
                    triplets: &triplets,
                    unknown_tokens: unknown,
                    bbox,
                },
            )?;
            st.target = Some(bbox);
        }
        StepKind::Paste => {
            let op = op.ok_or(StepError::MissingState("edit"))?;
            let target = match op {
                EditOp::Replace { target_id, .. } => target_node(&st.graph, target_id)?.bbox,
                _ => st.target.ok_or(StepError::MissingState("paste target"))?,
            };
            let (crop, crop_mask) = match st.crop.take() {
                Some(c) => c,
                None => object_crop_source(op, &st.graph, &st.canvas, res.library, res.backend)?,
            };
            let pasted = paste_object(&st.canvas, &crop, &crop_mask, target, config.erosion_radius)?;
            if !pasted.pasted.has_hole() {
                ctx.log.line("paste: erosion removed the whole object; canvas unchanged");
            }
            if let Some(d) = ctx.dir {
                crop.save_png(d.join("source_crop.png"))?;
                crop_mask.save_png(d.join("source_crop_mask.png"))?;
            }
            ctx.write_json("paste.json", &target)?;
            let mut canvas = pasted.image;
            snap_holes(&mut canvas, &pasted.pasted);
            st.canvas = canvas;
            st.changed = st.changed.union_holes(&pasted.pasted);
            st.roi = union_roi(st.roi, target);
            st.graph = fold_edit(&st.graph, op, Some(target))?;
            st.target = Some(target);
            st.footprint = Some(pasted.footprint);
            st.pasted = Some(pasted.pasted);
        }
        StepKind::FinalInpaint => {
            let target = st.target.take().ok_or(StepError::MissingState("paste target"))?;
            let footprint = st.footprint.take().ok_or(StepError::MissingState("footprint"))?;
            let pasted = st.pasted.take().ok_or(StepError::MissingState("pasted mask"))?;
            let rect = target.to_pixel_rect(st.canvas.width, st.canvas.height);
            let grown = dilate_hole(&footprint, config.erosion_radius as i64)?;
            let mut seam = Mask::all_known(st.canvas.width, st.canvas.height);
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    if grown.is_hole(x, y) && pasted.is_known(x, y) {
                        seam.set_known(x, y, false);
                    }
                }
            }
            if !seam.has_hole() {
                ctx.log.line("final_inpaint: empty seam; skipped");
                if let Some(d) = ctx.dir {
                    seam.save_png(d.join("hole_mask.png"))?;
                }
            } else {
                let out = ctx.inpaint(&st.canvas, &seam, &config.final_spec())?;
                let mut canvas = out.image;
                snap_holes(&mut canvas, &out.mask);
                st.canvas = canvas;
                st.changed = st.changed.union_holes(&out.mask);
            }
        }
        StepKind::Measure => {
            let m = report(input, &st.canvas, st.roi, None)?;
            ctx.write_json("metrics.json", &m)?;
            st.metrics = Some(m);
        }
    }
    Ok(())
}
