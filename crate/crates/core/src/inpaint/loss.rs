//! Reconstruction objective: masked squared error plus the background guide.

use super::guide::{GuideMode, GuideSpec};
use super::{InpaintError, PixelGrid};
use crate::segmask::Mask;

fn check_shapes(x: &PixelGrid, x0: &PixelGrid, m: &Mask) -> Result<(), InpaintError> {
    if x.shape() != x0.shape() || (x.width, x.height) != (m.width, m.height) {
        return Err(InpaintError::Shape(format!(
            "x {:?}, x0 {:?}, mask {}x{}",
            x.shape(),
            x0.shape(),
            m.width,
            m.height
        )));
    }
    Ok(())
}

/// Sum of squared differences over known pixels.
pub fn dip_loss(x: &PixelGrid, x0: &PixelGrid, m: &Mask) -> Result<f64, InpaintError> {
    Ok(dip_loss_grad(x, x0, m)?.0)
}

/// Data term and its gradient with respect to `x`.
pub fn dip_loss_grad(x: &PixelGrid, x0: &PixelGrid, m: &Mask) -> Result<(f64, Vec<f64>), InpaintError> {
    check_shapes(x, x0, m)?;
    let plane = x.width * x.height;
    let known = m.known_slice();
    let mut grad = vec![0.0; x.data.len()];
    let mut loss = 0.0;
    for (i, g) in grad.iter_mut().enumerate() {
        if known[i % plane] {
            let d = x.data[i] - x0.data[i];
            loss += d * d;
            *g = 2.0 * d;
        }
    }
    Ok((loss, grad))
}

/// Groups of hole pixel indices (within a plane) whose average is constrained,
/// paired with the target mean. Global mode has one group.
fn hole_groups<'a>(m: &Mask, guide: &'a GuideSpec) -> Result<Vec<(Vec<usize>, &'a [f64])>, InpaintError> {
    let w = m.width;
    match guide.mode {
        GuideMode::None => Ok(Vec::new()),
        GuideMode::Global => {
            let idx: Vec<usize> = (0..m.width * m.height).filter(|&i| !m.known_slice()[i]).collect();
            if idx.is_empty() {
                return Ok(Vec::new());
            }
            Ok(vec![(idx, guide.global.as_slice())])
        }
        GuideMode::RowWise => {
            let mut groups = Vec::with_capacity(guide.rows.len());
            let mut covered = 0usize;
            for row in &guide.rows {
                if row.y >= m.height {
                    return Err(InpaintError::GuideMismatch(format!("row {} outside mask", row.y)));
                }
                let idx: Vec<usize> = (0..w).map(|x| row.y * w + x).filter(|&i| !m.known_slice()[i]).collect();
                if idx.is_empty() {
                    return Err(InpaintError::GuideMismatch(format!("row {} has no hole pixels", row.y)));
                }
                covered += idx.len();
                groups.push((idx, row.mean.as_slice()));
            }
            if covered != m.hole_count() {
                return Err(InpaintError::GuideMismatch(
                    "hole rows missing from the row-wise guide".into(),
                ));
            }
            Ok(groups)
        }
    }
}

/// Guide term (without the weight) and its gradient with respect to `x`.
///
/// Each group contributes `(1/C) * sum_c (mean_c - target_c)^2`; groups are averaged.
pub fn guide_term_grad(x: &PixelGrid, m: &Mask, guide: &GuideSpec) -> Result<(f64, Vec<f64>), InpaintError> {
    if (x.width, x.height) != (m.width, m.height) {
        return Err(InpaintError::Shape("guide term: x vs mask".into()));
    }
    if guide.mode != GuideMode::None && guide.global.len() != x.channels {
        return Err(InpaintError::GuideMismatch(format!(
            "guide has {} channels, image {}",
            guide.global.len(),
            x.channels
        )));
    }
    let groups = hole_groups(m, guide)?;
    let mut grad = vec![0.0; x.data.len()];
    if groups.is_empty() {
        return Ok((0.0, grad));
    }
    let plane = x.width * x.height;
    let c_n = x.channels as f64;
    let g_n = groups.len() as f64;
    let mut term = 0.0;
    for (idx, target) in &groups {
        let n = idx.len() as f64;
        for c in 0..x.channels {
            let base = c * plane;
            let mean = idx.iter().map(|&i| x.data[base + i]).sum::<f64>() / n;
            let d = mean - target[c];
            term += d * d / (c_n * g_n);
            let gi = 2.0 * d / (c_n * g_n * n);
            for &i in idx {
                grad[base + i] += gi;
            }
        }
    }
    Ok((term, grad))
}

/// `dip_loss + lambda * guide term`.
pub fn guided_loss(x: &PixelGrid, x0: &PixelGrid, m: &Mask, guide: &GuideSpec, lambda: f64) -> Result<f64, InpaintError> {
    Ok(guided_loss_grad(x, x0, m, guide, lambda)?.total)
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub data_term: f64,
    pub guide_term: f64,
    pub total: f64,
    pub grad: Vec<f64>,
}

pub fn guided_loss_grad(
    x: &PixelGrid,
    x0: &PixelGrid,
    m: &Mask,
    guide: &GuideSpec,
    lambda: f64,
) -> Result<LossParts, InpaintError> {
    let (data_term, mut grad) = dip_loss_grad(x, x0, m)?;
    let (guide_term, g) = guide_term_grad(x, m, guide)?;
    if lambda != 0.0 {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += lambda * b;
        }
    }
    let total = if lambda == 0.0 { data_term } else { data_term + lambda * guide_term };
    Ok(LossParts {
        data_term,
        guide_term,
        total,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Dip,
    Guided,
}

/// Largest relative discrepancy between the analytic gradient and central
/// differences with step `1e-4`. Denominators are floored at `1e-4`.
pub fn gradcheck(
    kind: LossKind,
    x: &PixelGrid,
    x0: &PixelGrid,
    m: &Mask,
    guide: &GuideSpec,
    lambda: f64,
) -> Result<f64, InpaintError> {
    let eval = |x: &PixelGrid| match kind {
        LossKind::Dip => dip_loss(x, x0, m),
        LossKind::Guided => guided_loss(x, x0, m, guide, lambda),
    };
    let analytic = match kind {
        LossKind::Dip => dip_loss_grad(x, x0, m)?.1,
        LossKind::Guided => guided_loss_grad(x, x0, m, guide, lambda)?.grad,
    };
    let h = 1e-4;
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-4);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
