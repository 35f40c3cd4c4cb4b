//! Soft top-K token pruning.
//!
//! Each pruning module scores every non-CLS token with a small network,
//! perturbs the log-scores with Gumbel noise during training, keeps the K
//! highest, and multiplies the kept tokens by a factor that is exactly 1 in
//! the forward pass but differentiates as the tempered softmax of the
//! perturbed log-scores. Pruned tokens leave the block stack immediately and
//! reappear later during assembly.

use rand::distributions::Open01;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::encoder::TokenSeq;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Elem, TensorData};

#[derive(Clone, Copy, Debug)]
pub struct StpConfig {
    /// Fraction of tokens discarded.
    pub ratio: f64,
    /// Soft-mask softmax temperature.
    pub tau: f64,
    /// Lower clamp on scores before the log.
    pub score_clamp: f64,
    /// Gumbel perturbation during training.
    pub perturb: bool,
}

/// Everything later stages need to know about one pruning event.
pub struct PruneRecord<T: Elem> {
    pub stp_index: usize,
    pub k: usize,
    /// Grid positions of the kept non-CLS tokens, input order.
    pub kept_positions: Vec<i64>,
    /// Grid positions of the pruned tokens, input order.
    pub pruned_positions: Vec<i64>,
    /// Raw pruned token values, same graph as the forward pass.
    /// None when nothing was pruned.
    pub pruned: Option<Var>,
    pub scores: Vec<T>,
    pub hard_mask: Vec<T>,
    pub soft_mask: Vec<T>,
    pub gumbel: Option<Vec<T>>,
}

/// Kept-token count for ratio `r` over `n` tokens: nearest integer of
/// `(1-r)*n`, never below 1.
pub fn kept_count(r: f64, n: usize) -> usize {
    let k = ((1.0 - r) * n as f64).round();
    (k as usize).clamp(1, n.max(1))
}

/// Standard Gumbel from a uniform draw on (0, 1).
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// `n` i.i.d. standard Gumbel draws.
pub fn sample_gumbel<T: Elem>(n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            T::from_f64(gumbel_from_uniform(u))
        })
        .collect()
}

/// Indices of the `k` largest values, ties broken toward the lower index.
/// Returned sorted ascending so downstream gathers preserve input order.
pub fn topk_indices<T: Elem>(values: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b].partial_cmp(&values[a]).expect("scores are finite").then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// Hard and soft masks over perturbed log-scores.
///
/// The hard mask marks the K largest entries of `log(s) + g`; the soft mask
/// is the temperature-`tau` softmax of the same vector and carries the
/// gradient. Returns the kept indices alongside both masks.
pub fn soft_topk_mask<T: Elem>(
    g: &mut Graph<T>,
    scores: Var,
    k: usize,
    tau: f64,
    gumbel: &[T],
) -> Result<(Var, Var, Vec<usize>)> {
    let n = g.value(scores).numel();
    if g.shape(scores).len() != 1 {
        return Err(Error::Shape {
            op: "soft_topk_mask",
            detail: format!("scores must be rank-1, got {:?}", g.shape(scores)),
        });
    }
    if k < 1 || k > n {
        return Err(Error::Param { what: format!("K = {k} outside [1, {n}]") });
    }
    if gumbel.len() != n {
        return Err(Error::Shape {
            op: "soft_topk_mask",
            detail: format!("noise length {} does not match {n} scores", gumbel.len()),
        });
    }
    let log_s = g.log(scores)?;
    let noise = g.constant(TensorData::new(vec![n], gumbel.to_vec())?);
    let perturbed = g.add(log_s, noise)?;
    let soft = g.softmax(perturbed, 0, tau)?;
    let kept = topk_indices(g.value(perturbed).data(), k);
    let mut hard_data = vec![T::ZERO; n];
    for &i in &kept {
        hard_data[i] = T::ONE;
    }
    let hard = g.constant(TensorData::new(vec![n], hard_data)?);
    Ok((hard, soft, kept))
}

/// Gather the kept rows of `z` and attach the straight-through multiplier.
///
/// Forward output is bitwise equal to the plain gather; the extra term is
/// `z * (soft - stop_grad(soft))`, exactly zero in value, which routes the
/// gradient of each kept token through its soft-mask entry and from there
/// into every score via the softmax coupling.
pub fn straight_through_keep<T: Elem>(
    g: &mut Graph<T>,
    z: Var,
    soft: Var,
    kept: &[usize],
) -> Result<Var> {
    let zk = g.gather_rows(z, kept)?;
    let soft_k = g.gather_rows(soft, kept)?;
    let frozen = g.stop_grad(soft_k);
    let delta = g.sub(soft_k, frozen)?;
    let correction = g.scale_rows(zk, delta)?;
    g.add(zk, correction)
}

/// Parameter names of one score network, all under `prefix`.
pub fn register_score_net<T: Elem>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c: usize,
    seed: u64,
) -> Result<()> {
    store.add_normal(&format!("{prefix}.mlp1.w"), vec![c, c], 0.02, seed)?;
    store.add_zeros(&format!("{prefix}.mlp1.b"), vec![c])?;
    store.add_normal(&format!("{prefix}.mlp2.hidden.w"), vec![2 * c, c / 4], 0.02, seed)?;
    store.add_zeros(&format!("{prefix}.mlp2.hidden.b"), vec![c / 4])?;
    store.add_normal(&format!("{prefix}.mlp2.out.w"), vec![c / 4, 1], 0.02, seed)?;
    store.add_zeros(&format!("{prefix}.mlp2.out.b"), vec![1])?;
    Ok(())
}

pub struct ScoreNetVars {
    mlp1_w: Var,
    mlp1_b: Var,
    hidden_w: Var,
    hidden_b: Var,
    out_w: Var,
    out_b: Var,
}

impl ScoreNetVars {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            mlp1_w: bound.var(&format!("{prefix}.mlp1.w"))?,
            mlp1_b: bound.var(&format!("{prefix}.mlp1.b"))?,
            hidden_w: bound.var(&format!("{prefix}.mlp2.hidden.w"))?,
            hidden_b: bound.var(&format!("{prefix}.mlp2.hidden.b"))?,
            out_w: bound.var(&format!("{prefix}.mlp2.out.w"))?,
            out_b: bound.var(&format!("{prefix}.mlp2.out.b"))?,
        })
    }
}

/// Per-token relevance in (0, 1): sigmoid of a two-layer head over each
/// token concatenated with the mean-pooled features of all tokens.
pub fn estimate_scores<T: Elem>(
    g: &mut Graph<T>,
    tokens: Var,
    net: &ScoreNetVars,
) -> Result<Var> {
    let n = g.shape(tokens)[0];
    if n == 0 {
        return Err(Error::Contract { what: "scoring zero tokens".into() });
    }
    let local = g.matmul(tokens, net.mlp1_w)?;
    let local = g.add_row(local, net.mlp1_b)?;
    let local = g.gelu(local);
    let pooled = g.mean_axis(local, 0)?;
    let global = g.broadcast_row(pooled, n)?;
    let both = g.concat(&[tokens, global], 1)?;
    let hidden = g.matmul(both, net.hidden_w)?;
    let hidden = g.add_row(hidden, net.hidden_b)?;
    let hidden = g.gelu(hidden);
    let logit = g.matmul(hidden, net.out_w)?;
    let logit = g.add_row(logit, net.out_b)?;
    let flat = g.reshape(logit, vec![n])?;
    Ok(g.sigmoid(flat))
}

/// One full pruning step over a token sequence.
///
/// The CLS row, when present, is excluded from scoring and always kept.
/// When K equals the token count the sequence passes through untouched,
/// score network included, so a ratio of 0 is exactly the no-pruning model.
#[allow(clippy::too_many_arguments)]
pub fn apply_stp<T: Elem>(
    g: &mut Graph<T>,
    z: &TokenSeq,
    cfg: &StpConfig,
    net: &ScoreNetVars,
    rng: &mut ChaCha8Rng,
    training: bool,
    stp_index: usize,
) -> Result<(TokenSeq, PruneRecord<T>)> {
    let count = z.positions.len();
    let body_rows: Vec<usize> = if z.has_cls { (1..count).collect() } else { (0..count).collect() };
    let n = body_rows.len();
    if n == 0 {
        return Err(Error::Contract { what: "pruning a sequence with no non-CLS tokens".into() });
    }
    let k = kept_count(cfg.ratio, n);
    let body_positions: Vec<i64> =
        if z.has_cls { z.positions[1..].to_vec() } else { z.positions.clone() };

    if k == n {
        // Nothing to prune; skip scoring so the pass is identical to a
        // model without this module.
        let record = PruneRecord {
            stp_index,
            k,
            kept_positions: body_positions,
            pruned_positions: Vec::new(),
            pruned: None,
            scores: Vec::new(),
            hard_mask: vec![T::ONE; n],
            soft_mask: Vec::new(),
            gumbel: None,
        };
        return Ok((z.clone(), record));
    }

    let body = g.gather_rows(z.tokens, &body_rows)?;
    let scores = estimate_scores(g, body, net)?;
    let scores = g.clamp(scores, cfg.score_clamp, 1.0)?;
    let noise: Vec<T> = if training && cfg.perturb {
        sample_gumbel(n, rng)
    } else {
        vec![T::ZERO; n]
    };
    let (hard, soft, kept) = soft_topk_mask(g, scores, k, cfg.tau, &noise)?;
    let kept_body = straight_through_keep(g, body, soft, &kept)?;

    let kept_set: Vec<bool> = {
        let mut s = vec![false; n];
        for &i in &kept {
            s[i] = true;
        }
        s
    };
    let pruned_rows: Vec<usize> = (0..n).filter(|&i| !kept_set[i]).collect();
    let pruned = g.gather_rows(body, &pruned_rows)?;

    let (tokens, positions) = if z.has_cls {
        let cls = g.gather_rows(z.tokens, &[0])?;
        let tokens = g.concat(&[cls, kept_body], 0)?;
        let mut positions = Vec::with_capacity(1 + k);
        positions.push(-1);
        positions.extend(kept.iter().map(|&i| body_positions[i]));
        (tokens, positions)
    } else {
        (kept_body, kept.iter().map(|&i| body_positions[i]).collect())
    };

    let record = PruneRecord {
        stp_index,
        k,
        kept_positions: kept.iter().map(|&i| body_positions[i]).collect(),
        pruned_positions: pruned_rows.iter().map(|&i| body_positions[i]).collect(),
        pruned: Some(pruned),
        scores: g.value(scores).data().to_vec(),
        hard_mask: g.value(hard).data().to_vec(),
        soft_mask: g.value(soft).data().to_vec(),
        gumbel: (training && cfg.perturb).then(|| noise.clone()),
    };
    Ok((TokenSeq { tokens, positions, has_cls: z.has_cls }, record))
}

/// Monte-Carlo estimate of per-token inclusion probability under
/// training-mode top-K sampling. Pure f64; used by the sampler oracle.
pub fn inclusion_frequencies(
    scores: &[f64],
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = scores.len();
    if k < 1 || k > n {
        return Err(Error::Param { what: format!("K = {k} outside [1, {n}]") });
    }
    if let Some(bad) = scores.iter().find(|s| **s <= 0.0) {
        return Err(Error::Domain { what: format!("non-positive score {bad}") });
    }
    let mut rng = crate::params::derived_rng(seed, "inclusion-frequencies");
    let log_s: Vec<f64> = scores.iter().map(|s| s.ln()).collect();
    let mut counts = vec![0usize; n];
    let mut perturbed = vec![0.0f64; n];
    for _ in 0..trials {
        for i in 0..n {
            let u: f64 = rng.sample(Open01);
            perturbed[i] = log_s[i] + gumbel_from_uniform(u);
        }
        for &i in &topk_indices(&perturbed, k) {
            counts[i] += 1;
        }
    }
    Ok(counts.into_iter().map(|c| c as f64 / trials as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::FD_STEP;
    use rand::SeedableRng;

    fn cfg(ratio: f64) -> StpConfig {
        StpConfig { ratio, tau: 1.0, score_clamp: 1e-6, perturb: true }
    }

    #[test]
    fn kept_count_chains() {
        // r=0.5 over 64 tokens, three rounds.
        let mut n = 64;
        let mut chain = Vec::new();
        for _ in 0..3 {
            n = kept_count(0.5, n);
            chain.push(n);
        }
        assert_eq!(chain, vec![32, 16, 8]);
        // r=0.9 over 1728 tokens.
        let mut n = 1728;
        let mut chain = Vec::new();
        for _ in 0..3 {
            n = kept_count(0.9, n);
            chain.push(n);
        }
        assert_eq!(chain, vec![173, 17, 2]);
        assert_eq!(kept_count(0.75, 64), 16);
        assert_eq!(kept_count(0.0, 64), 64);
        // Nearest-integer rounding would hit zero; the floor is 1.
        assert_eq!(kept_count(0.9, 2), 1);
        assert_eq!(kept_count(0.99, 10), 1);
    }

    #[test]
    fn gumbel_of_one_over_e_is_zero() {
        assert_eq!(gumbel_from_uniform((-1.0f64).exp()), 0.0);
    }

    #[test]
    fn gumbel_mean_matches_euler_mascheroni() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<f64> = sample_gumbel(1_000_000, &mut rng);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5772).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn gumbel_is_deterministic_per_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let da: Vec<f64> = sample_gumbel(64, &mut a);
        let db: Vec<f64> = sample_gumbel(64, &mut b);
        assert_eq!(da, db);
    }

    #[test]
    fn topk_selects_by_value_then_index() {
        assert_eq!(topk_indices(&[0.9f64, 0.1, 0.5, 0.7], 2), vec![0, 3]);
        assert_eq!(topk_indices(&[1.0f64, 1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(topk_indices(&[0.2f64, 0.8, 0.8], 2), vec![1, 2]);
    }

    #[test]
    fn mask_contract_holds() {
        let mut g: Graph<f64> = Graph::new();
        let s = g.constant(TensorData::new(vec![4], vec![0.9, 0.1, 0.5, 0.7]).unwrap());
        let (hard, soft, kept) = soft_topk_mask(&mut g, s, 2, 1.0, &[0.0; 4]).unwrap();
        assert_eq!(g.value(hard).data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(kept, vec![0, 3]);
        let soft_sum: f64 = g.value(soft).data().iter().sum();
        assert!((soft_sum - 1.0).abs() < 1e-6);
        // K = n keeps everything regardless of scores.
        let (hard, _, kept) = soft_topk_mask(&mut g, s, 4, 1.0, &[0.0; 4]).unwrap();
        assert_eq!(g.value(hard).data(), &[1.0; 4]);
        assert_eq!(kept, vec![0, 1, 2, 3]);
        assert!(soft_topk_mask(&mut g, s, 0, 1.0, &[0.0; 4]).is_err());
        assert!(soft_topk_mask(&mut g, s, 5, 1.0, &[0.0; 4]).is_err());
    }

    #[test]
    fn soft_mask_flattens_at_high_temperature() {
        let mut g: Graph<f64> = Graph::new();
        let s = g.constant(TensorData::new(vec![5], vec![0.9, 0.2, 0.4, 0.6, 0.05]).unwrap());
        let (hard_cold, soft, _) = soft_topk_mask(&mut g, s, 2, 1e6, &[0.0; 5]).unwrap();
        for &v in g.value(soft).data() {
            assert!((v - 0.2).abs() < 1e-4, "soft entry {v}");
        }
        // The hard mask ignores temperature.
        let (hard_hot, _, _) = soft_topk_mask(&mut g, s, 2, 1.0, &[0.0; 5]).unwrap();
        assert_eq!(g.value(hard_cold).data(), g.value(hard_hot).data());
    }

    #[test]
    fn hard_mask_invariant_to_logscore_shift() {
        let mut g: Graph<f64> = Graph::new();
        let s = g.constant(TensorData::new(vec![5], vec![0.31, 0.9, 0.11, 0.55, 0.42]).unwrap());
        let (_, _, kept0) = soft_topk_mask(&mut g, s, 3, 1.0, &[0.0; 5]).unwrap();
        let (_, _, kept_shift) = soft_topk_mask(&mut g, s, 3, 1.0, &[7.5; 5]).unwrap();
        assert_eq!(kept0, kept_shift);
    }

    #[test]
    fn straight_through_forward_is_bitwise_gather() {
        let mut g: Graph<f64> = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zdata =
            TensorData::from_fn(vec![6, 4], |_| rng.gen_range(-2.0..2.0));
        let z = g.leaf(zdata.clone(), true);
        let s = g.constant(TensorData::new(vec![6], vec![0.9, 0.1, 0.5, 0.7, 0.3, 0.8]).unwrap());
        let (_, soft, kept) = soft_topk_mask(&mut g, s, 3, 1.0, &[0.0; 6]).unwrap();
        let out = straight_through_keep(&mut g, z, soft, &kept).unwrap();
        let direct = g.gather_rows(z, &kept).unwrap();
        let a = g.value(out).data();
        let b = g.value(direct).data();
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn straight_through_matches_soft_surrogate_gradient() {
        // Autodiff gradient of the straight-through composite w.r.t. the
        // scores must equal finite differences of the soft surrogate
        // sum(w * z * soft_mask(scores)) with frozen noise.
        let n = 6;
        let c = 3;
        let k = 2;
        let tau = 0.7;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let zdata = TensorData::from_fn(vec![n, c], |_| rng.gen_range(-1.0..1.0));
        let wdata = TensorData::from_fn(vec![k, c], |_| rng.gen_range(-1.0..1.0));
        let noise: Vec<f64> = sample_gumbel(n, &mut rng);
        let scores = vec![0.83, 0.12, 0.45, 0.66, 0.29, 0.91];

        let run = |s: &[f64]| -> (f64, Vec<f64>, Vec<usize>) {
            let mut g: Graph<f64> = Graph::new();
            let sv = g.leaf(TensorData::new(vec![n], s.to_vec()).unwrap(), true);
            let z = g.constant(zdata.clone());
            let w = g.constant(wdata.clone());
            let (_, soft, kept) = soft_topk_mask(&mut g, sv, k, tau, &noise).unwrap();
            let zk = straight_through_keep(&mut g, z, soft, &kept).unwrap();
            let weighted = g.mul(zk, w).unwrap();
            let loss = g.sum_all(weighted);
            g.backward(loss).unwrap();
            (g.value(loss).data()[0], g.grad(sv).unwrap().to_vec(), kept)
        };
        let (_, analytic, kept) = run(&scores);

        // Soft surrogate evaluated without any graph.
        let surrogate = |s: &[f64]| -> f64 {
            let perturbed: Vec<f64> =
                s.iter().zip(&noise).map(|(si, gi)| si.ln() + gi).collect();
            let mx = perturbed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = perturbed.iter().map(|p| ((p - mx) / tau).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let mut total = 0.0;
            for (row, &i) in kept.iter().enumerate() {
                let m = exps[i] / sum;
                for j in 0..c {
                    total += wdata.data()[row * c + j] * zdata.data()[i * c + j] * m;
                }
            }
            total
        };
        for i in 0..n {
            let mut plus = scores.clone();
            plus[i] += FD_STEP;
            let mut minus = scores.clone();
            minus[i] -= FD_STEP;
            let numeric = (surrogate(&plus) - surrogate(&minus)) / (2.0 * FD_STEP);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-3);
            assert!(rel < 1e-4, "score {i}: analytic {} vs numeric {numeric}", analytic[i]);
        }
        // Pruned tokens still influence the loss through the coupling.
        let pruned: Vec<usize> = (0..n).filter(|i| !kept.contains(i)).collect();
        for i in pruned {
            assert!(analytic[i].abs() > 1e-12, "score {i} received no gradient");
        }
    }

    #[test]
    fn score_net_outputs_open_unit_interval_and_equivariant() {
        let c = 8;
        let n = 5;
        let mut store: ParamStore<f64> = ParamStore::new();
        register_score_net(&mut store, "stp0.score", c, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tokens = TensorData::from_fn(vec![n, c], |_| rng.gen_range(-1.0..1.0));

        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let net = ScoreNetVars::from_bound(&bound, "stp0.score").unwrap();
        let t = g.constant(tokens.clone());
        let s = estimate_scores(&mut g, t, &net).unwrap();
        let base: Vec<f64> = g.value(s).data().to_vec();
        assert!(base.iter().all(|&v| v > 0.0 && v < 1.0));

        // Permuting tokens permutes scores identically.
        let perm = [3usize, 0, 4, 1, 2];
        let tp = g.gather_rows(t, &perm).unwrap();
        let sp = estimate_scores(&mut g, tp, &net).unwrap();
        let permuted: Vec<f64> = g.value(sp).data().to_vec();
        for (out_row, &src) in perm.iter().enumerate() {
            assert!((permuted[out_row] - base[src]).abs() < 1e-12);
        }

        // Singleton sequence still scores.
        let one = g.gather_rows(t, &[2]).unwrap();
        let s1 = estimate_scores(&mut g, one, &net).unwrap();
        assert_eq!(g.value(s1).numel(), 1);
    }

    #[test]
    fn apply_stp_zero_ratio_is_identity() {
        let c = 8;
        let mut store: ParamStore<f64> = ParamStore::new();
        register_score_net(&mut store, "stp0.score", c, 1).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let net = ScoreNetVars::from_bound(&bound, "stp0.score").unwrap();
        let tokens = g.constant(TensorData::from_fn(vec![5, c], |i| i as f64 * 0.1));
        let z = TokenSeq { tokens, positions: vec![-1, 0, 1, 2, 3], has_cls: true };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = g.len();
        let (out, rec) = apply_stp(&mut g, &z, &cfg(0.0), &net, &mut rng, true, 0).unwrap();
        assert_eq!(g.len(), before, "zero-ratio pass must add no graph nodes");
        assert_eq!(out.tokens, z.tokens);
        assert_eq!(out.positions, z.positions);
        assert!(rec.pruned.is_none());
        assert!(rec.pruned_positions.is_empty());
        assert_eq!(rec.hard_mask, vec![1.0; 4]);
    }

    #[test]
    fn apply_stp_partitions_positions_and_keeps_cls() {
        let c = 8;
        let n = 64;
        let mut store: ParamStore<f64> = ParamStore::new();
        register_score_net(&mut store, "stp0.score", c, 1).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let net = ScoreNetVars::from_bound(&bound, "stp0.score").unwrap();
        let mut rng_init = ChaCha8Rng::seed_from_u64(21);
        let tokens =
            g.constant(TensorData::from_fn(vec![1 + n, c], |_| rng_init.gen_range(-1.0..1.0)));
        let mut positions = vec![-1i64];
        positions.extend(0..n as i64);
        let z = TokenSeq { tokens, positions, has_cls: true };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (out, rec) = apply_stp(&mut g, &z, &cfg(0.75), &net, &mut rng, true, 0).unwrap();
        assert_eq!(rec.k, 16);
        assert_eq!(out.positions.len(), 17);
        assert_eq!(out.positions[0], -1);
        assert!(out.has_cls);
        let mut all: Vec<i64> = rec.kept_positions.iter().chain(&rec.pruned_positions).copied().collect();
        all.sort_unstable();
        let want: Vec<i64> = (0..n as i64).collect();
        assert_eq!(all, want);
        let hard_sum: f64 = rec.hard_mask.iter().sum();
        assert_eq!(hard_sum, 16.0);
        let soft_sum: f64 = rec.soft_mask.iter().sum();
        assert!((soft_sum - 1.0).abs() < 1e-6);
        // Kept tokens preserve their relative input order.
        let mut sorted = rec.kept_positions.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, rec.kept_positions);
    }

    #[test]
    fn inference_mode_is_deterministic_and_noise_free() {
        let c = 8;
        let mut store: ParamStore<f64> = ParamStore::new();
        register_score_net(&mut store, "stp0.score", c, 1).unwrap();
        let run = || {
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let net = ScoreNetVars::from_bound(&bound, "stp0.score").unwrap();
            let tokens = g.constant(TensorData::from_fn(vec![8, c], |i| (i as f64 * 0.37).sin()));
            let z = TokenSeq { tokens, positions: (0..8).collect(), has_cls: false };
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let (_, rec) = apply_stp(&mut g, &z, &cfg(0.5), &net, &mut rng, false, 0).unwrap();
            (rec.kept_positions.clone(), rec.gumbel.clone())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a, b);
        assert!(ga.is_none() && gb.is_none());
    }

    #[test]
    fn equal_score_marginals_are_symmetric() {
        let freqs = inclusion_frequencies(&[0.5; 6], 2, 20_000, 7).unwrap();
        for &f in &freqs {
            assert!((f - 1.0 / 3.0).abs() < 0.02, "marginal {f}");
        }
    }

    #[test]
    fn inclusion_frequency_tracks_score_order() {
        let scores = [0.05, 0.2, 0.5, 0.9];
        let freqs = inclusion_frequencies(&scores, 2, 20_000, 13).unwrap();
        for w in freqs.windows(2) {
            assert!(w[0] <= w[1] + 0.02, "frequencies {freqs:?} not monotone");
        }
    }
}
