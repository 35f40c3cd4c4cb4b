//! Segmentation quality metrics: Dice similarity and the 95th percentile
//! symmetric surface distance, computed by brute force over boundary
//! voxels. Classes absent from both volumes report no score rather than
//! a fake perfect one.

use crate::error::{Error, Result};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    /// `None` when the class appears in neither volume.
    pub dsc: Option<f64>,
    /// `None` when the class is missing from either volume.
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    /// Mean over classes with a defined score.
    pub mean_dsc: Option<f64>,
    pub mean_hd95: Option<f64>,
}

/// Dice similarity for one class: `2|P∩G| / (|P| + |G|)`.
pub fn dsc(pred: &[u8], gt: &[u8], class: u8) -> Option<f64> {
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (&a, &b) in pred.iter().zip(gt) {
        let (ap, ag) = (a == class, b == class);
        p += ap as usize;
        g += ag as usize;
        inter += (ap && ag) as usize;
    }
    if p + g == 0 {
        None
    } else {
        Some(2.0 * inter as f64 / (p + g) as f64)
    }
}

/// Voxels of the mask with at least one 6-neighbor outside the mask;
/// the volume border counts as outside.
fn surface_voxels(mask: &[bool], extents: [usize; 3]) -> Vec<[i64; 3]> {
    let [ex, ey, ez] = extents.map(|e| e as i64);
    let idx = |x: i64, y: i64, z: i64| ((x * ey + y) * ez + z) as usize;
    let inside = |x: i64, y: i64, z: i64| {
        x >= 0 && y >= 0 && z >= 0 && x < ex && y < ey && z < ez && mask[idx(x, y, z)]
    };
    let mut out = Vec::new();
    for x in 0..ex {
        for y in 0..ey {
            for z in 0..ez {
                if !mask[idx(x, y, z)] {
                    continue;
                }
                let exposed = !inside(x - 1, y, z)
                    || !inside(x + 1, y, z)
                    || !inside(x, y - 1, z)
                    || !inside(x, y + 1, z)
                    || !inside(x, y, z - 1)
                    || !inside(x, y, z + 1);
                if exposed {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn min_distances(from: &[[i64; 3]], to: &[[i64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| {
                    let d0 = (a[0] - b[0]) as f64;
                    let d1 = (a[1] - b[1]) as f64;
                    let d2 = (a[2] - b[2]) as f64;
                    d0 * d0 + d1 * d1 + d2 * d2
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Nearest-rank percentile of an unsorted sample, `p` in (0, 100].
fn percentile_nearest_rank(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let rank = ((p / 100.0) * values.len() as f64).ceil() as usize;
    values[rank.max(1) - 1]
}

/// 95th percentile of the symmetric surface distances between the two
/// masks of `class`. `None` when either volume lacks the class entirely.
pub fn hd95(pred: &[u8], gt: &[u8], class: u8, extents: [usize; 3]) -> Result<Option<f64>> {
    let voxels = extents[0] * extents[1] * extents[2];
    if pred.len() != voxels || gt.len() != voxels {
        return Err(Error::Data {
            what: format!(
                "volumes of {} and {} voxels against extents {extents:?}",
                pred.len(),
                gt.len()
            ),
        });
    }
    let pm: Vec<bool> = pred.iter().map(|&v| v == class).collect();
    let gm: Vec<bool> = gt.iter().map(|&v| v == class).collect();
    if !pm.contains(&true) || !gm.contains(&true) {
        return Ok(None);
    }
    let sp = surface_voxels(&pm, extents);
    let sg = surface_voxels(&gm, extents);
    let mut dists = min_distances(&sp, &sg);
    dists.extend(min_distances(&sg, &sp));
    Ok(Some(percentile_nearest_rank(&mut dists, 95.0)))
}

/// Score every foreground class of a label volume pair.
pub fn evaluate(
    pred: &[u8],
    gt: &[u8],
    num_classes: usize,
    extents: [usize; 3],
) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::Data {
            what: format!("{} predicted vs {} reference voxels", pred.len(), gt.len()),
        });
    }
    let mut per_class = Vec::new();
    for class in 1..num_classes {
        per_class.push(ClassMetrics {
            class,
            dsc: dsc(pred, gt, class as u8),
            hd95: hd95(pred, gt, class as u8, extents)?,
        });
    }
    let mean = |f: &dyn Fn(&ClassMetrics) -> Option<f64>| {
        let defined: Vec<f64> = per_class.iter().filter_map(f).collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    };
    let mean_dsc = mean(&|m| m.dsc);
    let mean_hd95 = mean(&|m| m.hd95);
    Ok(MetricsReport { per_class, mean_dsc, mean_hd95 })
}
