//! Square (Chebyshev ball) morphology on the hole set.
//!
//! The structuring element is separable, so both operations run as a
//! horizontal pass followed by a vertical pass with running counts.

use super::{Mask, MaskError};

/// Default hole dilation radius for an image of side `size`: `round(3 * size / 64)`.
pub fn default_dilation_radius(size: usize) -> usize {
    (3.0 * size as f64 / 64.0).round() as usize
}

/// Grows the hole by a square of half-width `radius`.
pub fn dilate_hole(mask: &Mask, radius: i64) -> Result<Mask, MaskError> {
    let r = check_radius(radius)?;
    if r == 0 {
        return Ok(mask.clone());
    }
    // hole present anywhere in the window; pixels outside the image never count as hole
    Ok(window_pass(mask, r, |holes, _window| holes > 0))
}

/// Shrinks the hole by a square of half-width `radius`; the exact dual of
/// [`dilate_hole`]. Only in-image positions of the window are inspected.
pub fn erode_foreground(mask: &Mask, radius: i64) -> Result<Mask, MaskError> {
    let r = check_radius(radius)?;
    if r == 0 {
        return Ok(mask.clone());
    }
    Ok(window_pass(mask, r, |holes, in_image| holes == in_image))
}

fn check_radius(radius: i64) -> Result<usize, MaskError> {
    usize::try_from(radius).map_err(|_| MaskError::NegativeRadius(radius))
}

/// One separable pass per axis. `is_hole(holes_in_window, window_len_in_image)`
/// decides the output.
fn window_pass(mask: &Mask, r: usize, is_hole: impl Fn(usize, usize) -> bool) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let mut horiz = vec![false; w * h];
    for y in 0..h {
        let row: Vec<usize> = (0..w).map(|x| usize::from(mask.is_hole(x, y))).collect();
        let prefix = prefix_sums(&row);
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r + 1).min(w);
            horiz[y * w + x] = is_hole(prefix[hi] - prefix[lo], hi - lo);
        }
    }
    let mut out = Mask::all_known(w, h);
    for x in 0..w {
        let col: Vec<usize> = (0..h).map(|y| usize::from(horiz[y * w + x])).collect();
        let prefix = prefix_sums(&col);
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r + 1).min(h);
            out.set_known(x, y, !is_hole(prefix[hi] - prefix[lo], hi - lo));
        }
    }
    out
}

fn prefix_sums(v: &[usize]) -> Vec<usize> {
    let mut p = Vec::with_capacity(v.len() + 1);
    p.push(0);
    let mut acc = 0;
    for &x in v {
        acc += x;
        p.push(acc);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct neighbourhood scan: hole if any hole within Chebyshev distance r.
    fn dilate_oracle(m: &Mask, r: usize) -> Mask {
        let mut out = Mask::all_known(m.width, m.height);
        for y in 0..m.height {
            for x in 0..m.width {
                let mut hole = false;
                for yy in y.saturating_sub(r)..=(y + r).min(m.height - 1) {
                    for xx in x.saturating_sub(r)..=(x + r).min(m.width - 1) {
                        hole |= m.is_hole(xx, yy);
                    }
                }
                out.set_known(x, y, !hole);
            }
        }
        out
    }

    /// Hole survives only if every in-image position of the window is hole.
    fn erode_oracle(m: &Mask, r: usize) -> Mask {
        let mut out = Mask::all_known(m.width, m.height);
        for y in 0..m.height {
            for x in 0..m.width {
                let mut all = true;
                for yy in y.saturating_sub(r)..=(y + r).min(m.height - 1) {
                    for xx in x.saturating_sub(r)..=(x + r).min(m.width - 1) {
                        all &= m.is_hole(xx, yy);
                    }
                }
                out.set_known(x, y, !all);
            }
        }
        out
    }

    fn single_hole(w: usize, h: usize, x: usize, y: usize) -> Mask {
        let mut m = Mask::all_known(w, h);
        m.set_known(x, y, false);
        m
    }

    #[test]
    fn radius_zero_is_identity() {
        let m = single_hole(5, 5, 2, 2);
        assert_eq!(dilate_hole(&m, 0).unwrap(), m);
        assert_eq!(erode_foreground(&m, 0).unwrap(), m);
    }

    #[test]
    fn center_hole_grows_to_3x3() {
        let d = dilate_hole(&single_hole(5, 5, 2, 2), 1).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let expect_hole = (1..=3).contains(&x) && (1..=3).contains(&y);
                assert_eq!(d.is_hole(x, y), expect_hole, "({x},{y})");
            }
        }
        assert_eq!(d, dilate_oracle(&single_hole(5, 5, 2, 2), 1));
    }

    #[test]
    fn block_erodes_to_center() {
        let d = dilate_hole(&single_hole(5, 5, 2, 2), 1).unwrap();
        let e = erode_foreground(&d, 1).unwrap();
        assert_eq!(e, single_hole(5, 5, 2, 2));
    }

    #[test]
    fn thin_hole_vanishes() {
        let mut m = Mask::all_known(9, 9);
        for x in 1..8 {
            m.set_known(x, 4, false);
            m.set_known(x, 5, false);
        }
        let e = erode_foreground(&m, 1).unwrap();
        assert!(!e.has_hole());
    }

    #[test]
    fn all_known_unchanged() {
        let m = Mask::all_known(6, 4);
        assert_eq!(dilate_hole(&m, 3).unwrap(), m);
    }

    #[test]
    fn negative_radius_rejected() {
        assert!(matches!(
            dilate_hole(&Mask::all_known(2, 2), -1),
            Err(MaskError::NegativeRadius(-1))
        ));
        assert!(erode_foreground(&Mask::all_known(2, 2), -2).is_err());
    }

    #[test]
    fn default_radius_scales() {
        assert_eq!(default_dilation_radius(64), 3);
        assert_eq!(default_dilation_radius(256), 12);
        assert_eq!(default_dilation_radius(32), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_mask() -> impl Strategy<Value = Mask> {
            (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
                proptest::collection::vec(proptest::bool::weighted(0.8), w * h)
                    .prop_map(move |v| Mask::from_known(w, h, v).unwrap())
            })
        }

        fn holes_superset(big: &Mask, small: &Mask) -> bool {
            (0..small.height).all(|y| (0..small.width).all(|x| !small.is_hole(x, y) || big.is_hole(x, y)))
        }

        proptest! {
            #[test]
            fn dilation_matches_oracle(m in arb_mask(), r in 0usize..4) {
                prop_assert_eq!(dilate_hole(&m, r as i64).unwrap(), dilate_oracle(&m, r));
            }

            #[test]
            fn erosion_matches_oracle(m in arb_mask(), r in 0usize..4) {
                prop_assert_eq!(erode_foreground(&m, r as i64).unwrap(), erode_oracle(&m, r));
            }

            #[test]
            fn dilation_is_extensive_and_composes(m in arb_mask(), a in 0usize..3, b in 0usize..3) {
                let da = dilate_hole(&m, a as i64).unwrap();
                prop_assert!(holes_superset(&da, &m));
                let dab = dilate_hole(&da, b as i64).unwrap();
                let dmax = dilate_hole(&m, a.max(b) as i64).unwrap();
                prop_assert!(holes_superset(&dab, &dmax));
            }

            #[test]
            fn close_contains_opening(m in arb_mask(), r in 0usize..3) {
                let r = r as i64;
                let closed = erode_foreground(&dilate_hole(&m, r).unwrap(), r).unwrap();
                let opening = dilate_hole(&erode_foreground(&m, r).unwrap(), r).unwrap();
                prop_assert!(holes_superset(&closed, &m));
                prop_assert!(holes_superset(&m, &opening));
                prop_assert!(holes_superset(&closed, &opening));
            }
        }
    }
}
