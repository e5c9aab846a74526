use std::sync::OnceLock;

use super::*;
use crate::image::Image;
use crate::nn::NetworkConfig;
use crate::position::{build_dataset, train, PositionConfig, PositionModel, TrainOptions, Vocabulary};
use crate::scenegraph::{EdgeChange, ObjectNode, ObjectSource, RelationshipEdge};
use crate::segmask::{InstanceCandidate, Mask, SegmentationBackend};
use crate::synth::{generate_scene, position_pairs, relation_holds, SceneOptions, SyntheticScene};

fn small_spec(iterations: usize) -> InpaintSpec {
    InpaintSpec {
        iterations,
        network: NetworkConfig {
            depth: 4,
            channels: 16,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn small_config(iterations: usize) -> PipelineConfig {
    PipelineConfig {
        inpaint: small_spec(iterations),
        ..Default::default()
    }
}

fn scene_with(n_objects: usize) -> SyntheticScene {
    (0..)
        .map(|i| generate_scene(5, i, &SceneOptions::default()))
        .find(|s| s.objects.len() == n_objects)
        .expect("generator yields every object count")
}

fn run(
    scene: &SyntheticScene,
    ops: &[EditOp],
    config: &PipelineConfig,
    model: Option<&PositionModel>,
    dir: Option<&std::path::Path>,
) -> Result<ExecuteOutput, PipelineError> {
    let library = QueryLibrary::synthetic(64, 0);
    let backend = config.segmentation.backend();
    let res = Resources {
        config,
        backend: backend.as_ref(),
        position_model: model,
        library: &library,
    };
    let p = plan(&scene.graph, ops)?;
    execute(&p, &scene.image.clone().quantized(), &scene.graph, &res, dir, &mut |_| {})
}

/// Pixels that differ between two images, counted once per pixel.
fn differing_outside(a: &Image, b: &Image, allowed: &Mask, roi: Option<BBox>) -> usize {
    let rect = roi.map(|r| r.to_pixel_rect(a.width, a.height));
    let mut n = 0;
    for y in 0..a.height {
        for x in 0..a.width {
            if allowed.is_hole(x, y) || rect.is_some_and(|r| r.contains(x, y)) {
                continue;
            }
            if (0..a.channels).any(|c| a.get(c, x, y).to_bits() != b.get(c, x, y).to_bits()) {
                n += 1;
            }
        }
    }
    n
}

fn clevr_model() -> &'static PositionModel {
    static MODEL: OnceLock<PositionModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let pairs = position_pairs(1000, 17, &SceneOptions::default());
        let (data, _) = build_dataset(&pairs, 5).unwrap();
        let vocab = Vocabulary::from_examples(&data);
        let config = PositionConfig {
            d_h: 32,
            hidden: vec![32],
            ..PositionConfig::clevr()
        };
        let mut m = PositionModel::new(config, vocab, 3);
        let opts = TrainOptions {
            epochs: 30,
            batch: 32,
            learning_rate: 3e-3,
            ..Default::default()
        };
        train(&mut m, &data, &opts).unwrap();
        m
    })
}

#[test]
fn plan_follows_the_mapping_table() {
    let scene = scene_with(3);
    let g = &scene.graph;
    let kinds = |ops: &[EditOp]| plan(g, ops).unwrap().steps.iter().map(|s| s.step).collect::<Vec<_>>();
    use StepKind::*;
    assert_eq!(
        kinds(&[EditOp::Remove {
            target_id: "obj0".into()
        }]),
        [Segment, RemoveInpaint, Measure]
    );
    let e = g.edges.iter().find(|e| e.touches("obj1")).unwrap().clone();
    let flipped = RelationshipEdge::new(e.object_id.clone(), e.predicate.clone(), e.subject_id.clone());
    let change = EditOp::RelationshipChange {
        target_id: "obj1".into(),
        edge_change: EdgeChange { old: e, new: flipped },
    };
    assert_eq!(
        kinds(std::slice::from_ref(&change)),
        [Segment, RemoveInpaint, PredictPosition, Paste, FinalInpaint, Measure]
    );
    let replace = EditOp::Replace {
        target_id: "obj2".into(),
        new_node: ObjectNode::new("obj2", "sphere", g.node("obj2").unwrap().bbox),
        object_source: None,
    };
    assert_eq!(
        kinds(std::slice::from_ref(&replace)),
        [Segment, RemoveInpaint, Paste, FinalInpaint, Measure]
    );
    let add = EditOp::Add {
        new_node: ObjectNode::new("new", "cube", BBox::new(0.1, 0.1, 0.3, 0.3)),
        new_edges: vec![RelationshipEdge::new("new", "left of", "obj0")],
        object_source: None,
    };
    assert_eq!(kinds(std::slice::from_ref(&add)), [PredictPosition, Paste, FinalInpaint, Measure]);

    let p = plan(g, &[change.clone(), add.clone()]).unwrap();
    assert_eq!(p.steps.len(), 9);
    assert_eq!(p.steps[0].op, Some(0));
    assert_eq!(p.steps[5].op, Some(1));
    assert_eq!(p.steps[8].op, None);
    assert_eq!(p, plan(g, &[change, add]).unwrap());
    assert!(plan(g, &[]).unwrap().steps.is_empty());
}

#[test]
fn conflicting_and_invalid_ops_are_rejected() {
    let scene = scene_with(2);
    let g = &scene.graph;
    let rm = EditOp::Remove {
        target_id: "obj0".into(),
    };
    let replace = EditOp::Replace {
        target_id: "obj0".into(),
        new_node: ObjectNode::new("obj0", "sphere", BBox::new(0.1, 0.1, 0.2, 0.2)),
        object_source: None,
    };
    assert!(matches!(
        plan(g, &[rm.clone(), replace]),
        Err(PipelineError::Conflict { first: 0, second: 1, .. })
    ));
    let missing = EditOp::Remove {
        target_id: "ghost".into(),
    };
    assert!(matches!(
        plan(g, &[rm, missing]),
        Err(PipelineError::InvalidOp { index: 1, kind: "remove", .. })
    ));
}

fn checker(w: usize, h: usize) -> Image {
    let mut img = Image::new(w, h, 3);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                img.set(c, x, y, ((x * 7 + y * 3 + c * 5) % 11) as f32 / 10.0);
            }
        }
    }
    img
}

#[test]
fn paste_with_full_foreground_replaces_the_box() {
    let canvas = Image::filled(16, 16, &[0.2, 0.3, 0.4]);
    let crop = checker(5, 3);
    let mask = Mask::all_hole(5, 3);
    let target = BBox::new(0.25, 0.25, 0.75, 0.5);
    let out = paste_object(&canvas, &crop, &mask, target, 0).unwrap();
    let rect = target.to_pixel_rect(16, 16);
    let resized = crop.resize_bilinear(rect.width(), rect.height());
    for c in 0..3 {
        for y in 0..16 {
            for x in 0..16 {
                let want = if rect.contains(x, y) {
                    resized.get(c, x - rect.x0, y - rect.y0)
                } else {
                    canvas.get(c, x, y)
                };
                assert_eq!(out.image.get(c, x, y), want);
            }
        }
    }
    assert_eq!(out.pasted.hole_count(), rect.width() * rect.height());
}

#[test]
fn oversized_erosion_leaves_canvas_unchanged() {
    let canvas = checker(16, 16);
    let out = paste_object(&canvas, &checker(6, 6), &Mask::all_hole(6, 6), BBox::new(0.0, 0.0, 0.375, 0.375), 3).unwrap();
    assert_eq!(out.image, canvas);
    assert!(!out.pasted.has_hole());
    assert_eq!(out.footprint.hole_count(), 36);
}

#[test]
fn erosion_also_trims_edges_touching_the_crop_border() {
    let canvas = Image::filled(10, 10, &[0.0, 0.0, 0.0]);
    let crop = Image::filled(4, 4, &[1.0, 1.0, 1.0]);
    let out = paste_object(&canvas, &crop, &Mask::all_hole(4, 4), BBox::new(0.3, 0.3, 0.7, 0.7), 1).unwrap();
    // a 4x4 block eroded by one pixel on every side leaves the central 2x2
    assert_eq!(out.pasted.hole_count(), 4);
    for y in 4..6 {
        for x in 4..6 {
            assert!(out.pasted.is_hole(x, y));
        }
    }
}

#[test]
fn pasting_a_crop_back_at_its_own_box_is_the_identity_on_foreground() {
    let scene = scene_with(2);
    let image = scene.image.clone().quantized();
    let node = scene.graph.node("obj0").unwrap();
    let footprint = scene.footprint("obj0").unwrap();
    let rect = footprint.hole_rect().unwrap();
    let crop = image.crop(rect);
    let crop_mask = footprint.crop(rect);
    let out = paste_object(&image, &crop, &crop_mask, rect.to_bbox(64, 64), 0).unwrap();
    assert!(node.bbox.iou(&rect.to_bbox(64, 64)) > 0.5);
    for c in 0..3 {
        for y in 0..64 {
            for x in 0..64 {
                assert!((out.image.get(c, x, y) - image.get(c, x, y)).abs() <= 1.0 / 255.0);
            }
        }
    }
}

#[test]
fn degenerate_paste_target_is_an_error() {
    let canvas = checker(8, 8);
    let err = paste_object(&canvas, &checker(2, 2), &Mask::all_hole(2, 2), BBox::new(0.5, 0.5, 0.52, 0.9), 0);
    assert!(matches!(err, Err(StepError::DegenerateTarget(_))));
}

#[test]
fn crop_sources_explicit_library_and_missing() {
    let scene = scene_with(2);
    let library = QueryLibrary::synthetic(64, 0);
    let backend = crate::segmask::SyntheticOracle::default();
    let entry = &library.entries[3];
    let src_node = &entry.graph.nodes[0];
    let explicit = EditOp::Add {
        new_node: ObjectNode::new("n", src_node.category.clone(), BBox::new(0.1, 0.1, 0.3, 0.3)),
        new_edges: vec![],
        object_source: Some(ObjectSource {
            image: entry.name.clone(),
            bbox: src_node.bbox,
        }),
    };
    let (crop, mask) = object_crop_source(&explicit, &scene.graph, &scene.image, &library, &backend).unwrap();
    let rect = src_node.bbox.to_pixel_rect(64, 64);
    assert!(crop.width.abs_diff(rect.width()) <= 1 && crop.height.abs_diff(rect.height()) <= 1);
    assert!(mask.hole_count() > 0);

    let wanted = ObjectNode::new("n", "cylinder", BBox::new(0.1, 0.1, 0.3, 0.3)).with_attr("color", "purple");
    let from_library = EditOp::Add {
        new_node: wanted,
        new_edges: vec![],
        object_source: None,
    };
    let (crop, _) = object_crop_source(&from_library, &scene.graph, &scene.image, &library, &backend).unwrap();
    let purple = crate::synth::PALETTE.iter().find(|(n, _)| *n == "purple").unwrap().1;
    let center = crop.pixel(crop.width / 2, crop.height / 2);
    for c in 0..3 {
        assert!((center[c] - purple[c] as f32 / 255.0).abs() < 0.02);
    }

    let missing = EditOp::Add {
        new_node: ObjectNode::new("n", "teapot", BBox::new(0.1, 0.1, 0.3, 0.3)),
        new_edges: vec![],
        object_source: None,
    };
    match object_crop_source(&missing, &scene.graph, &scene.image, &library, &backend) {
        Err(StepError::NoSource { category, available }) => {
            assert_eq!(category, "teapot");
            assert_eq!(available, vec!["cube", "cylinder", "sphere"]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn empty_plan_returns_the_input() {
    let scene = scene_with(2);
    let out = run(&scene, &[], &small_config(10), None, None).unwrap();
    assert_eq!(out.image, scene.image.clone().quantized());
    assert!(out.roi.is_none() && out.metrics.is_none());
}

#[test]
fn remove_fills_the_hole_with_background_and_preserves_the_rest() {
    let scene = scene_with(2);
    let target = "obj1";
    let ops = [EditOp::Remove {
        target_id: target.into(),
    }];
    let mut config = small_config(1000);
    // Without input jitter the fill drifts dark on some scenes at this budget.
    config.inpaint.input_noise_std = 1.0 / 30.0;
    let out = run(&scene, &ops, &config, None, None).unwrap();
    let input = scene.image.clone().quantized();
    assert_eq!(differing_outside(&input, &out.image, &out.changed, out.roi), 0);
    assert!(!out.graph.contains(target));

    let footprint = scene.footprint(target).unwrap();
    let bg = scene.background.get(0, 0, 0) as f64;
    let (mut sum, mut n) = (0.0, 0.0);
    for c in 0..3 {
        for y in 0..64 {
            for x in 0..64 {
                if footprint.is_hole(x, y) {
                    sum += out.image.get(c, x, y) as f64;
                    n += 1.0;
                }
            }
        }
    }
    let mean = sum / n;
    assert!((mean - bg).abs() <= 2.0 / 255.0, "hole mean {mean} vs background {bg}");
    let m = out.metrics.unwrap();
    assert!(m.mae_roi.is_some() && m.roi == out.roi);
}

#[test]
fn relationship_change_moves_the_object_to_the_requested_side() {
    let scene = scene_with(2);
    let depth = scene
        .graph
        .edges
        .iter()
        .find(|e| e.predicate == "front of" || e.predicate == "behind")
        .unwrap()
        .clone();
    let new_predicate = if depth.predicate == "front of" { "behind" } else { "front of" };
    let target = depth.subject_id.clone();
    let reference = depth.object_id.clone();
    let op = EditOp::RelationshipChange {
        target_id: target.clone(),
        edge_change: EdgeChange {
            old: depth.clone(),
            new: RelationshipEdge::new(&target, new_predicate, &reference),
        },
    };
    let model = clevr_model();
    let out = run(&scene, &[op], &small_config(300), Some(model), None).unwrap();
    let placed = out.graph.node(&target).unwrap().bbox;
    let reference_bbox = out.graph.node(&reference).unwrap().bbox;
    assert_eq!(relation_holds(new_predicate, placed, reference_bbox, true), Some(true));
    assert_eq!(
        differing_outside(&scene.image.clone().quantized(), &out.image, &out.changed, out.roi),
        0
    );
    let rect = placed.to_pixel_rect(64, 64);
    let (cx, cy) = ((rect.x0 + rect.x1) / 2, (rect.y0 + rect.y1) / 2);
    let color = scene.object(&target).unwrap().color;
    let px = out.image.pixel(cx, cy);
    for c in 0..3 {
        assert!((px[c] - color[c]).abs() < 0.05, "pasted center {px:?} vs {color:?}");
    }
}

#[test]
fn relationship_change_without_a_model_fails_at_prediction() {
    let scene = scene_with(2);
    let e = scene.graph.edges[0].clone();
    let flipped = RelationshipEdge::new(e.object_id.clone(), e.predicate.clone(), e.subject_id.clone());
    let op = EditOp::RelationshipChange {
        target_id: e.subject_id.clone(),
        edge_change: EdgeChange { old: e, new: flipped },
    };
    let err = run(&scene, &[op], &small_config(5), None, None).unwrap_err();
    assert_eq!(err.failed_step(), Some((2, StepKind::PredictPosition)));
}

#[test]
fn add_and_replace_touch_only_their_boxes() {
    let scene = scene_with(2);
    let add = EditOp::Add {
        new_node: ObjectNode::new("extra", "sphere", BBox::new(0.05, 0.05, 0.25, 0.25)).with_attr("color", "yellow"),
        new_edges: vec![],
        object_source: None,
    };
    let old = scene.graph.node("obj0").unwrap().clone();
    let replace = EditOp::Replace {
        target_id: "obj0".into(),
        new_node: ObjectNode::new("obj0", "cylinder", BBox::new(0.0, 0.0, 0.1, 0.1)).with_attr("color", "green"),
        object_source: None,
    };
    let out = run(&scene, &[add, replace], &small_config(50), None, None).unwrap();
    let input = scene.image.clone().quantized();
    assert_eq!(differing_outside(&input, &out.image, &out.changed, out.roi), 0);
    assert_eq!(out.graph.node("extra").unwrap().bbox, BBox::new(0.05, 0.05, 0.25, 0.25));
    // replacement stays in place
    assert_eq!(out.graph.node("obj0").unwrap().bbox, old.bbox);
    assert_eq!(out.graph.node("obj0").unwrap().category, "cylinder");
    let roi = out.roi.unwrap();
    assert_eq!(roi, old.bbox.union(&BBox::new(0.05, 0.05, 0.25, 0.25)));
}

#[test]
fn job_directory_layout_and_resume_match_an_uninterrupted_run() {
    let scene = scene_with(2);
    let ops = [EditOp::Remove {
        target_id: "obj0".into(),
    }];
    let config = small_config(30);
    let a = tempfile::tempdir().unwrap();
    let full = run(&scene, &ops, &config, None, Some(a.path())).unwrap();
    for f in [
        "config.json",
        "graph_before.json",
        "graph_after.json",
        "ops.json",
        "result.png",
        "metrics.json",
        "log.txt",
        "steps/00_segment/instance_mask.png",
        "steps/01_remove_inpaint/canvas.png",
        "steps/01_remove_inpaint/hole_mask.png",
        "steps/01_remove_inpaint/trace.csv",
        "steps/02_measure/metrics.json",
    ] {
        assert!(a.path().join(f).exists(), "missing {f}");
    }
    assert_eq!(Image::load(a.path().join("result.png")).unwrap(), full.image);

    // simulate a crash during the inpainting step
    std::fs::remove_dir_all(a.path().join("steps/02_measure")).unwrap();
    std::fs::remove_file(a.path().join("steps/01_remove_inpaint/state.json")).unwrap();
    let resumed = run(&scene, &ops, &config, None, Some(a.path())).unwrap();
    assert!(resumed.steps[0].resumed && !resumed.steps[1].resumed);
    assert_eq!(resumed.image, full.image);
    assert_eq!(resumed.metrics, full.metrics);

    let b = tempfile::tempdir().unwrap();
    run(&scene, &ops, &config, None, Some(b.path())).unwrap();
    for f in ["result.png", "metrics.json", "graph_after.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }

    let other = [EditOp::Remove {
        target_id: "obj1".into(),
    }];
    assert!(matches!(
        run(&scene, &other, &config, None, Some(a.path())),
        Err(PipelineError::PlanMismatch)
    ));
}

struct Broken;

impl SegmentationBackend for Broken {
    fn candidates(&self, _: &Image, _: &str, _: BBox) -> Result<Vec<InstanceCandidate>, crate::segmask::SegmentError> {
        Err(crate::segmask::SegmentError::Unreachable("connection refused".into()))
    }

    fn name(&self) -> &str {
        "broken"
    }
}

#[test]
fn failing_backend_names_the_step_and_keeps_prior_artifacts() {
    let scene = scene_with(2);
    let config = small_config(5);
    let library = QueryLibrary::default();
    let res = Resources {
        config: &config,
        backend: &Broken,
        position_model: None,
        library: &library,
    };
    let ops = [EditOp::Remove {
        target_id: "obj0".into(),
    }];
    let p = plan(&scene.graph, &ops).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = execute(&p, &scene.image, &scene.graph, &res, Some(dir.path()), &mut |_| {}).unwrap_err();
    assert_eq!(err.failed_step(), Some((0, StepKind::Segment)));
    assert!(err.to_string().contains("segment"));
    assert!(dir.path().join("graph_before.json").exists());
    let log = std::fs::read_to_string(dir.path().join("log.txt")).unwrap();
    assert!(log.contains("failed"));
}

#[test]
fn segmentation_miss_falls_back_to_the_box() {
    let mut scene = scene_with(2);
    // a node whose box covers only background
    scene.graph.nodes[0].bbox = BBox::new(0.0, 0.0, 0.06, 0.06);
    let overlapping = scene.objects[0].bbox(64).intersection(&scene.graph.nodes[0].bbox).is_some();
    if overlapping {
        return;
    }
    let ops = [EditOp::Remove {
        target_id: "obj0".into(),
    }];
    let dir = tempfile::tempdir().unwrap();
    run(&scene, &ops, &small_config(5), None, Some(dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join("log.txt")).unwrap();
    assert!(log.contains("using the box as mask"));
    let info: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("steps/00_segment/segment.json")).unwrap())
            .unwrap();
    assert_eq!(info["bbox_fallback"], true);
}
