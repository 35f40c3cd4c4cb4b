//! Segmentation losses over per-voxel class logits: mean cross-entropy and
//! soft Dice over foreground classes, combined with unit weights.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Elem, TensorData};

const PROB_FLOOR: f64 = 1e-7;
const DICE_SMOOTH: f64 = 1e-5;

/// Flatten `[classes, ...spatial]` logits to `[classes, V]` and validate
/// the label volume against them.
fn flatten_and_check<T: Elem>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[u8],
) -> Result<(Var, usize, usize)> {
    let sh = g.shape(logits).to_vec();
    if sh.len() < 2 {
        return Err(Error::Shape {
            op: "loss",
            detail: format!("logits must be [classes, ...spatial], got {sh:?}"),
        });
    }
    let classes = sh[0];
    let voxels: usize = sh[1..].iter().product();
    if classes < 2 {
        return Err(Error::Shape {
            op: "loss",
            detail: format!("need at least 2 classes, got {classes}"),
        });
    }
    if labels.len() != voxels {
        return Err(Error::Data {
            what: format!("{} labels for {voxels} voxels", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Data {
            what: format!("label {bad} out of range for {classes} classes"),
        });
    }
    let flat = g.reshape(logits, vec![classes, voxels])?;
    Ok((flat, classes, voxels))
}

fn one_hot<T: Elem>(labels: &[u8], classes: usize) -> TensorData<T> {
    let voxels = labels.len();
    let mut data = vec![T::ZERO; classes * voxels];
    for (v, &l) in labels.iter().enumerate() {
        data[l as usize * voxels + v] = T::ONE;
    }
    TensorData::new(vec![classes, voxels], data).expect("one-hot shape matches buffer")
}

/// Softmax class probabilities, floored so the log in the cross-entropy
/// never sees zero.
fn class_probs<T: Elem>(g: &mut Graph<T>, flat: Var) -> Result<Var> {
    let probs = g.softmax(flat, 0, 1.0)?;
    g.clamp(probs, PROB_FLOOR, 1.0)
}

/// Mean over voxels of the negative log probability of the true class.
pub fn ce_loss<T: Elem>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let (flat, classes, voxels) = flatten_and_check(g, logits, labels)?;
    let probs = class_probs(g, flat)?;
    let logp = g.log(probs)?;
    let hot = g.constant(one_hot::<T>(labels, classes));
    let picked = g.mul(logp, hot)?;
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0 / voxels as f64))
}

/// One minus the mean soft Dice coefficient over foreground classes
/// (class 0 is background and is skipped). A class absent from both the
/// prediction and the labels scores a perfect 1 through the smoothing
/// constant.
pub fn dice_loss<T: Elem>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let (flat, classes, _voxels) = flatten_and_check(g, logits, labels)?;
    // Raw softmax here: the probability floor exists only for the log in
    // the cross-entropy, and flooring would charge absent classes a fee
    // that grows with the voxel count.
    let probs = g.softmax(flat, 0, 1.0)?;
    let hot = one_hot::<f64>(labels, classes);
    let mut acc: Option<Var> = None;
    for c in 1..classes {
        let p = g.gather_rows(probs, &[c])?;
        let row = &hot.data()[c * labels.len()..(c + 1) * labels.len()];
        let target = g.constant(TensorData::new(
            vec![1, labels.len()],
            row.iter().map(|&v| T::from_f64(v)).collect(),
        )?);
        let inter = g.mul(p, target)?;
        let inter = g.sum_all(inter);
        let psum = g.sum_all(p);
        let gsum: f64 = row.iter().sum();
        let num = g.scale(inter, 2.0);
        let num = g.add_scalar(num, DICE_SMOOTH);
        let den = g.add_scalar(psum, gsum + DICE_SMOOTH);
        let dice = g.div(num, den)?;
        acc = Some(match acc {
            Some(a) => g.add(a, dice)?,
            None => dice,
        });
    }
    let sum = acc.expect("classes >= 2 guarantees one foreground class");
    let mean = g.scale(sum, 1.0 / (classes - 1) as f64);
    let neg = g.scale(mean, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Combined objective: cross-entropy plus Dice, both at weight one.
pub fn seg_loss<T: Elem>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let ce = ce_loss(g, logits, labels)?;
    let dice = dice_loss(g, logits, labels)?;
    g.add(ce, dice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_scalar_fn, spread_coords};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Logits that put probability ~1 on the listed class per voxel.
    fn confident_logits(pred: &[u8], classes: usize) -> TensorData<f64> {
        let v = pred.len();
        TensorData::from_fn(vec![classes, v], |i| {
            let (c, vox) = (i / v, i % v);
            if pred[vox] as usize == c {
                30.0
            } else {
                -30.0
            }
        })
    }

    fn eval<F>(f: F) -> f64
    where
        F: FnOnce(&mut Graph<f64>) -> Result<Var>,
    {
        let mut g = Graph::new();
        let var = f(&mut g).unwrap();
        g.value(var).data()[0]
    }

    #[test]
    fn zero_logits_give_log_classes_ce_and_uniform_probs() {
        for classes in [2usize, 3] {
            let labels = vec![0u8, 1, 1, 0];
            let ce = eval(|g| {
                let logits = g.constant(TensorData::zeros(vec![classes, 4]));
                ce_loss(g, logits, &labels)
            });
            assert!((ce - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_prediction_drives_both_losses_to_zero() {
        let labels = vec![0u8, 1, 0, 1, 1, 0, 0, 0];
        let ce = eval(|g| {
            let logits = g.constant(confident_logits(&labels, 2));
            ce_loss(g, logits, &labels)
        });
        let dice = eval(|g| {
            let logits = g.constant(confident_logits(&labels, 2));
            dice_loss(g, logits, &labels)
        });
        assert!(ce < 1e-6, "ce = {ce}");
        assert!(dice < 1e-6, "dice = {dice}");
    }

    #[test]
    fn disjoint_prediction_saturates_dice() {
        let labels = vec![1u8, 1, 0, 0];
        let pred = vec![0u8, 0, 1, 1];
        let dice = eval(|g| {
            let logits = g.constant(confident_logits(&pred, 2));
            dice_loss(g, logits, &labels)
        });
        assert!(dice > 1.0 - 1e-4, "dice = {dice}");
    }

    #[test]
    fn half_overlap_costs_one_third() {
        // |P| = |G| = 2, intersection 1: dice = 2*1/4, loss = 1 - 1/2... no:
        // 2*1/(2+2) = 0.5 gives loss 0.5; the one-third case needs |P| = 1.
        // G = {0, 1}, P = {0}: dice = 2*1/(1+2) = 2/3, loss = 1/3.
        let labels = vec![1u8, 1, 0, 0];
        let pred = vec![1u8, 0, 0, 0];
        let dice = eval(|g| {
            let logits = g.constant(confident_logits(&pred, 2));
            dice_loss(g, logits, &labels)
        });
        assert!((dice - 1.0 / 3.0).abs() < 1e-4, "dice = {dice}");
    }

    #[test]
    fn class_absent_everywhere_scores_perfect() {
        // Three classes, class 2 never appears in labels or prediction.
        let labels = vec![1u8, 0, 1, 0];
        let dice = eval(|g| {
            let logits = g.constant(confident_logits(&labels, 3));
            dice_loss(g, logits, &labels)
        });
        assert!(dice < 1e-6, "dice = {dice}");
    }

    #[test]
    fn label_validation_rejects_bad_volumes() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(TensorData::zeros(vec![2, 4]));
        assert!(matches!(ce_loss(&mut g, logits, &[0, 1, 2, 0]), Err(Error::Data { .. })));
        assert!(matches!(ce_loss(&mut g, logits, &[0, 1]), Err(Error::Data { .. })));
        let flat = g.constant(TensorData::zeros(vec![8]));
        assert!(ce_loss(&mut g, flat, &[0; 8]).is_err());
    }

    #[test]
    fn dice_is_invariant_under_voxel_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = 64;
        let labels: Vec<u8> = (0..v).map(|_| rng.gen_range(0..2)).collect();
        let raw: Vec<f64> = (0..2 * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..v).collect();
            for i in (1..v).rev() {
                p.swap(i, rng.gen_range(0..=i));
            }
            p
        };
        let base = eval(|g| {
            let logits = g.constant(TensorData::new(vec![2, v], raw.clone()).unwrap());
            dice_loss(g, logits, &labels)
        });
        let shuffled_labels: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
        let shuffled_raw: Vec<f64> = (0..2)
            .flat_map(|c| perm.iter().map(move |&i| c * v + i))
            .map(|i| raw[i])
            .collect();
        let permuted = eval(|g| {
            let logits = g.constant(TensorData::new(vec![2, v], shuffled_raw).unwrap());
            dice_loss(g, logits, &shuffled_labels)
        });
        assert!((base - permuted).abs() < 1e-10, "{base} vs {permuted}");
    }

    #[test]
    fn combined_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let side = 4usize;
        let v = side * side * side;
        let labels: Vec<u8> = (0..v).map(|_| rng.gen_range(0..2)).collect();
        let logits = TensorData::from_fn(vec![2, side, side, side], |_| rng.gen_range(-1.0..1.0));
        let leaves = [logits];
        let coords = spread_coords(&leaves, 24);
        let labels_ref = &labels;
        let report = check_scalar_fn(&leaves, Some(&coords), |g, vars| {
            seg_loss(g, vars[0], labels_ref)
        })
        .unwrap();
        assert!(
            report.passes(1e-4),
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
