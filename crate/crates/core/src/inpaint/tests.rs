use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::bbox::BBox;

fn grid(w: usize, h: usize, c: usize, values: &[f64]) -> PixelGrid {
    PixelGrid::new(w, h, c, values.to_vec())
}

fn random_grid(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> PixelGrid {
    PixelGrid::new(w, h, c, (0..w * h * c).map(|_| rng.gen_range(0.0..1.0)).collect())
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, hole_p: f64) -> Mask {
    Mask::from_known(w, h, (0..w * h).map(|_| !rng.gen_bool(hole_p)).collect()).unwrap()
}

fn global_guide(b: &[f64]) -> GuideSpec {
    GuideSpec {
        region: BBox::FULL,
        mode: GuideMode::Global,
        global: b.to_vec(),
        rows: Vec::new(),
    }
}

#[test]
fn background_mean_of_fully_known_region() {
    let img = grid(2, 2, 1, &[0.2, 0.4, 0.6, 0.8]);
    let g = compute_background_average(&img, &Mask::all_known(2, 2), BBox::FULL, GuideMode::Global).unwrap();
    assert!((g.global[0] - 0.5).abs() < 1e-15);
}

#[test]
fn background_mean_skips_hole_pixels() {
    let img = grid(2, 2, 1, &[0.2, 0.4, 0.6, 0.8]);
    let mut m = Mask::all_known(2, 2);
    m.set_known(1, 0, false);
    let g = compute_background_average(&img, &m, BBox::FULL, GuideMode::RowWise).unwrap();
    assert!((g.global[0] - (0.2 + 0.6 + 0.8) / 3.0).abs() < 1e-15);
    assert_eq!(g.rows.len(), 1);
    assert_eq!(g.rows[0].y, 0);
    assert!((g.rows[0].mean[0] - 0.2).abs() < 1e-15);
}

#[test]
fn background_of_constant_image_is_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = PixelGrid::new(9, 7, 3, vec![0.37; 9 * 7 * 3]);
    let m = random_mask(&mut rng, 9, 7, 0.3);
    for mode in [GuideMode::Global, GuideMode::RowWise] {
        let g = compute_background_average(&img, &m, BBox::FULL, mode).unwrap();
        assert!(g.global.iter().all(|&b| (b - 0.37).abs() < 1e-12));
        assert!(g.rows.iter().flat_map(|r| &r.mean).all(|&b| (b - 0.37).abs() < 1e-12));
    }
}

#[test]
fn all_hole_region_is_an_error() {
    let img = grid(2, 2, 1, &[0.0; 4]);
    let err = compute_background_average(&img, &Mask::all_hole(2, 2), BBox::FULL, GuideMode::Global);
    assert!(matches!(err, Err(InpaintError::NoBackground { .. })));
}

/// Literal enumeration: a pixel belongs to the region iff its center lies in
/// the half-open scaled box.
fn oracle_background(img: &PixelGrid, m: &Mask, region: BBox, mode: GuideMode) -> (Vec<f64>, Vec<(usize, Vec<f64>, bool)>) {
    let inside = |x: usize, y: usize| {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        cx >= region.x_min * img.width as f64
            && cx < region.x_max * img.width as f64
            && cy >= region.y_min * img.height as f64
            && cy < region.y_max * img.height as f64
    };
    let mean_over = |pred: &dyn Fn(usize, usize) -> bool| -> Option<Vec<f64>> {
        let mut acc = vec![0.0; img.channels];
        let mut n = 0.0;
        for y in 0..img.height {
            for x in 0..img.width {
                if pred(x, y) {
                    n += 1.0;
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += img.get(c, x, y);
                    }
                }
            }
        }
        (n > 0.0).then(|| acc.iter().map(|a| a / n).collect())
    };
    let global = mean_over(&|x, y| inside(x, y) && m.is_known(x, y)).expect("background");
    let mut rows = Vec::new();
    if mode == GuideMode::RowWise {
        for y in 0..img.height {
            if !(0..img.width).any(|x| m.is_hole(x, y)) {
                continue;
            }
            match mean_over(&|x, yy| yy == y && inside(x, yy) && m.is_known(x, yy)) {
                Some(b) => rows.push((y, b, false)),
                None => rows.push((y, global.clone(), true)),
            }
        }
    }
    (global, rows)
}

#[test]
fn background_matches_enumeration_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut fallbacks = 0;
    for case in 0..50 {
        let (w, h) = (rng.gen_range(3..12), rng.gen_range(3..12));
        let img = random_grid(&mut rng, w, h, 3);
        let mut m = random_mask(&mut rng, w, h, 0.3);
        if case % 5 == 0 {
            // a fully-hole row forces the fallback path
            let y = rng.gen_range(0..h);
            (0..w).for_each(|x| m.set_known(x, y, false));
        }
        let xs = [rng.gen_range(0.0..0.5), rng.gen_range(0.5..1.0)];
        let ys = [rng.gen_range(0.0..0.5), rng.gen_range(0.5..1.0)];
        let region = BBox::new(xs[0], ys[0], xs[1], ys[1]);
        for mode in [GuideMode::Global, GuideMode::RowWise] {
            let got = compute_background_average(&img, &m, region, mode);
            let has_bg = (0..h).any(|y| {
                (0..w).any(|x| {
                    let r = region.to_pixel_rect(w, h);
                    r.contains(x, y) && m.is_known(x, y)
                })
            });
            if !has_bg {
                assert!(matches!(got, Err(InpaintError::NoBackground { .. })));
                continue;
            }
            let got = got.unwrap();
            let (global, rows) = oracle_background(&img, &m, region, mode);
            for (a, b) in got.global.iter().zip(&global) {
                assert!((a - b).abs() <= 1e-12);
            }
            assert_eq!(got.rows.len(), rows.len());
            for (r, (y, b, fb)) in got.rows.iter().zip(&rows) {
                assert_eq!((r.y, r.fallback), (*y, *fb));
                fallbacks += usize::from(*fb);
                for (a, bb) in r.mean.iter().zip(b) {
                    assert!((a - bb).abs() <= 1e-12);
                }
            }
        }
    }
    assert!(fallbacks > 0, "fallback path not exercised");
}

#[test]
fn dip_loss_examples() {
    let x0 = grid(2, 2, 1, &[0.1, 0.2, 0.3, 0.4]);
    assert_eq!(dip_loss(&x0, &x0, &Mask::all_known(2, 2)).unwrap(), 0.0);
    let x = grid(2, 2, 1, &[0.9, 0.9, 0.9, 0.9]);
    assert_eq!(dip_loss(&x, &x0, &Mask::all_hole(2, 2)).unwrap(), 0.0);
    let mut m = Mask::all_hole(2, 2);
    m.set_known(0, 0, true);
    let x = grid(2, 2, 1, &[0.6, 0.0, 0.0, 0.0]);
    let x0 = grid(2, 2, 1, &[0.1, 0.7, 0.7, 0.7]);
    assert!((dip_loss(&x, &x0, &m).unwrap() - 0.25).abs() < 1e-15);
}

#[test]
fn shape_mismatch_is_reported() {
    let a = grid(2, 2, 1, &[0.0; 4]);
    let b = grid(2, 1, 2, &[0.0; 4]);
    assert!(matches!(dip_loss(&a, &b, &Mask::all_known(2, 2)), Err(InpaintError::Shape(_))));
}

#[test]
fn guided_hand_example() {
    let b = 0.35;
    let x0 = grid(2, 2, 1, &[0.1, 0.2, 0.3, 0.0]);
    let mut m = Mask::all_known(2, 2);
    m.set_known(1, 1, false);
    let x = grid(2, 2, 1, &[0.1, 0.2, 0.3, b + 0.2]);
    let guide = global_guide(&[b]);
    assert!((guided_loss(&x, &x0, &m, &guide, 0.1).unwrap() - 0.004).abs() < 1e-12);
    let filled = grid(2, 2, 1, &[0.1, 0.2, 0.3, b]);
    assert_eq!(guided_loss(&filled, &x0, &m, &guide, 0.1).unwrap(), 0.0);
    let rows = GuideSpec {
        mode: GuideMode::RowWise,
        rows: vec![RowTarget {
            y: 1,
            mean: vec![b],
            fallback: false,
        }],
        ..guide
    };
    assert!((guided_loss(&x, &x0, &m, &rows, 0.1).unwrap() - 0.004).abs() < 1e-12);
}

#[test]
fn row_guide_must_cover_hole_rows() {
    let x = grid(2, 2, 1, &[0.0; 4]);
    let mut m = Mask::all_known(2, 2);
    m.set_known(0, 0, false);
    m.set_known(0, 1, false);
    let guide = GuideSpec {
        region: BBox::FULL,
        mode: GuideMode::RowWise,
        global: vec![0.0],
        rows: vec![RowTarget {
            y: 0,
            mean: vec![0.0],
            fallback: false,
        }],
    };
    assert!(matches!(guided_loss(&x, &x, &m, &guide, 0.1), Err(InpaintError::GuideMismatch(_))));
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for size in [4, 8] {
        let x = random_grid(&mut rng, size, size, 3);
        let x0 = random_grid(&mut rng, size, size, 3);
        let mut m = random_mask(&mut rng, size, size, 0.35);
        m.set_known(1, 1, false);
        let region = BBox::FULL;
        let g = compute_background_average(&x0, &m, region, GuideMode::Global).unwrap();
        let r = compute_background_average(&x0, &m, region, GuideMode::RowWise).unwrap();
        assert!(gradcheck(LossKind::Dip, &x, &x0, &m, &g, 0.1).unwrap() <= 1e-6);
        assert!(gradcheck(LossKind::Guided, &x, &x0, &m, &g, 0.1).unwrap() <= 1e-6);
        assert!(gradcheck(LossKind::Guided, &x, &x0, &m, &r, 0.1).unwrap() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn guided_bounds_dip(seed in any::<u64>(), lambda in 0.0f64..5.0, rows in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_grid(&mut rng, 6, 5, 3);
        let x0 = random_grid(&mut rng, 6, 5, 3);
        let m = random_mask(&mut rng, 6, 5, 0.3);
        let mode = if rows { GuideMode::RowWise } else { GuideMode::Global };
        if let Ok(g) = compute_background_average(&x0, &m, BBox::FULL, mode) {
            let dip = dip_loss(&x, &x0, &m).unwrap();
            let guided = guided_loss(&x, &x0, &m, &g, lambda).unwrap();
            prop_assert!(dip >= 0.0);
            prop_assert!(guided >= dip);
            prop_assert_eq!(guided_loss(&x, &x0, &m, &g, 0.0).unwrap(), dip);
        }
    }
}

fn small_spec(iterations: usize) -> InpaintSpec {
    InpaintSpec {
        iterations,
        network: NetworkConfig {
            depth: 3,
            channels: 8,
            skip_channels: 2,
            batch_norm: true,
            input_channels: 1,
        },
        ..Default::default()
    }
}

fn centered_hole(w: usize, h: usize, half: usize) -> Mask {
    let mut m = Mask::all_known(w, h);
    for y in h / 2 - half..h / 2 + half {
        for x in w / 2 - half..w / 2 + half {
            m.set_known(x, y, false);
        }
    }
    m
}

#[test]
fn all_known_mask_returns_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Image::from_planes(16, 16, 3, (0..768).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let out = inpaint(&img, &Mask::all_known(16, 16), &small_spec(5)).unwrap();
    assert_eq!(out.image, img);
}

#[test]
fn known_pixels_pass_through_and_runs_repeat() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = Image::from_planes(20, 12, 3, (0..720).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let m = centered_hole(20, 12, 3);
    let spec = InpaintSpec {
        dilation_radius: Some(1),
        ..small_spec(15)
    };
    let a = inpaint(&img, &m, &spec).unwrap();
    let b = inpaint(&img, &m, &spec).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.trace.len(), 15);
    assert_eq!(a.mask, dilate_hole(&m, 1).unwrap());
    for c in 0..3 {
        for y in 0..12 {
            for x in 0..20 {
                if a.mask.is_known(x, y) {
                    assert_eq!(a.image.get(c, x, y).to_bits(), img.get(c, x, y).to_bits());
                }
            }
        }
    }
    assert_ne!(a.image, img);
}

#[test]
fn zero_weight_guide_matches_plain() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Image::from_planes(16, 16, 3, (0..768).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let m = centered_hole(16, 16, 3);
    let plain = InpaintSpec {
        guide_mode: GuideMode::None,
        ..small_spec(10)
    };
    for mode in [GuideMode::Global, GuideMode::RowWise] {
        let guided = InpaintSpec {
            guide_mode: mode,
            lambda: 0.0,
            ..plain.clone()
        };
        assert_eq!(inpaint(&img, &m, &plain).unwrap().image, inpaint(&img, &m, &guided).unwrap().image);
    }
}

#[test]
fn constant_image_hole_is_filled_with_the_constant() {
    let v = 0.42f32;
    let img = Image::filled(32, 32, &[v, v, v]);
    let m = centered_hole(32, 32, 6);
    let spec = InpaintSpec {
        network: NetworkConfig {
            depth: 4,
            channels: 16,
            batch_norm: false,
            ..Default::default()
        },
        iterations: 500,
        ..Default::default()
    };
    let out = inpaint(&img, &m, &spec).unwrap();
    let mut sum = 0.0;
    let mut n = 0.0;
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                if out.mask.is_hole(x, y) {
                    sum += out.image.get(c, x, y) as f64;
                    n += 1.0;
                }
            }
        }
    }
    let mean = sum / n;
    assert!((mean - v as f64).abs() <= 2.0 / 255.0, "hole mean {mean}");
    assert!(out.trace.last().unwrap().total < out.trace[0].total);
}

#[test]
fn network_depth_limited_by_image_size() {
    let cfg = |depth| NetworkConfig {
        depth,
        ..Default::default()
    };
    assert!(build_network(&cfg(6), 64, 64, 3, 0).is_ok());
    assert!(matches!(
        build_network(&cfg(7), 64, 64, 3, 0),
        Err(NetworkError::DepthTooLarge { max_depth: 6, .. })
    ));
    // non-multiples are padded
    assert!(build_network(&cfg(3), 20, 12, 3, 0).is_ok());
    assert!(build_network(&cfg(4), 20, 12, 3, 0).is_err());
}

#[test]
fn invalid_specs_rejected() {
    let img = Image::filled(8, 8, &[0.0]);
    let m = centered_hole(8, 8, 1);
    for spec in [
        InpaintSpec { iterations: 0, ..small_spec(1) },
        InpaintSpec { lambda: -1.0, ..small_spec(1) },
        InpaintSpec { learning_rate: 0.0, ..small_spec(1) },
    ] {
        assert!(matches!(inpaint(&img, &m, &spec), Err(InpaintError::InvalidSpec(_))));
    }
}

#[test]
fn spec_and_trace_round_trip() {
    let spec = InpaintSpec {
        guide_mode: GuideMode::RowWise,
        dilation_radius: Some(2),
        ..Default::default()
    };
    let text = serde_json::to_string(&spec).unwrap();
    assert!(text.contains("\"row_wise\""));
    assert_eq!(serde_json::from_str::<InpaintSpec>(&text).unwrap(), spec);
    assert_eq!(serde_json::from_str::<InpaintSpec>("{}").unwrap(), InpaintSpec::default());
    assert!(serde_json::from_str::<InpaintSpec>("{\"iters\": 3}").is_err());

    let rows = vec![
        TraceRow { iteration: 0, data_term: 1.5, guide_term: 0.25, total: 1.525 },
        TraceRow { iteration: 1, data_term: 1.0, guide_term: 0.0, total: 1.0 },
    ];
    let mut buf = Vec::new();
    write_trace_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("iteration,data_term,guide_term,total\n"));
    assert_eq!(read_trace_csv(buf.as_slice()).unwrap(), rows);
}

#[test]
fn input_jitter_changes_result_deterministically() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = Image::from_planes(16, 16, 3, (0..768).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let m = centered_hole(16, 16, 3);
    let jittered = InpaintSpec {
        input_noise_std: 1.0 / 30.0,
        ..small_spec(5)
    };
    let a = inpaint(&img, &m, &jittered).unwrap().image;
    assert_eq!(a, inpaint(&img, &m, &jittered).unwrap().image);
    assert_ne!(a, inpaint(&img, &m, &small_spec(5)).unwrap().image);
}
