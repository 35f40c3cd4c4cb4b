//! End-to-end model: sparse transformer encoding, token assembly and
//! completion, dense decoding, and the training objective, driven by one
//! [`Config`].

use crate::assemble::{assemble, complete, register_mta};
use crate::config::Config;
use crate::decoder::{decode, register_decoder};
use crate::encoder::{drop_cls, encode, register_encoder};
use crate::error::Result;
use crate::gradcheck::{check_scalar_fn, spread_coords, CheckReport};
use crate::graph::{Graph, Var};
use crate::loss::seg_loss;
use crate::params::{derived_rng, Bound, ParamStore};
use crate::prune::PruneRecord;
use crate::synth::make_sample;
use crate::tensor::Elem;
use rand_chacha::ChaCha8Rng;

/// Register every parameter the pipeline uses. Initialization is derived
/// per parameter name, so two models built with the same seed agree on
/// every parameter they share even when one registers more than the other.
pub fn register_model<T: Elem>(store: &mut ParamStore<T>, cfg: &Config) -> Result<()> {
    register_encoder(store, &cfg.encoder, cfg.seed)?;
    register_mta(store, cfg.encoder.stp_after.len(), cfg.mta.depth, cfg.encoder.embed, cfg.seed)?;
    register_decoder(store, &cfg.encoder, &cfg.decoder, cfg.seed)?;
    Ok(())
}

pub struct ModelOutput<T: Elem> {
    /// Per-voxel class logits `[classes, H, W, D]`.
    pub logits: Var,
    /// Combined loss, present when labels were supplied.
    pub loss: Option<Var>,
    /// One record per pruning module, in encoder order.
    pub records: Vec<PruneRecord<T>>,
}

/// Run the full pipeline on one volume `[in_chans, H, W, D]`.
pub fn forward<T: Elem>(
    g: &mut Graph<T>,
    volume: Var,
    labels: Option<&[u8]>,
    cfg: &Config,
    bound: &Bound,
    rng: &mut ChaCha8Rng,
    training: bool,
    ratio_override: Option<f64>,
) -> Result<ModelOutput<T>> {
    let (seq, records) = encode(g, volume, &cfg.encoder, bound, rng, training, ratio_override)?;
    let z = drop_cls(g, &seq)?;
    let assembled = assemble(g, &records, &z, cfg.encoder.token_count(), bound)?;
    let completed = complete(g, &assembled, cfg.mta.depth, cfg.encoder.heads, bound)?;
    let logits = decode(g, &completed, volume, &cfg.encoder, &cfg.decoder, bound)?;
    let loss = match labels {
        Some(l) => Some(seg_loss(g, logits, l)?),
        None => None,
    };
    Ok(ModelOutput { logits, loss, records })
}

/// The reduced configuration used for whole-pipeline gradient audits:
/// 16-cube volume, 16-wide embeddings, four blocks, one pruning module.
pub fn fd_check_config() -> Config {
    let mut cfg = Config::default();
    cfg.seed = 7;
    cfg.encoder.extents = [16, 16, 16];
    cfg.encoder.patch = 4;
    cfg.encoder.embed = 16;
    cfg.encoder.heads = 2;
    cfg.encoder.layers = 4;
    cfg.encoder.stp_after = vec![2];
    cfg.encoder.r = 0.5;
    cfg.decoder.channels = vec![4, 3];
    cfg.decoder.skip_channels = 2;
    cfg.validate().expect("audit config is valid");
    cfg
}

/// Compare analytic gradients of the whole pipeline loss against central
/// finite differences in f64, probing `probes` coordinates spread over
/// every parameter and the input volume. The Gumbel noise is re-derived
/// from a fixed label on every rebuild, so each probe differentiates the
/// same frozen draw.
pub fn pipeline_fd_check(probes: usize) -> Result<CheckReport> {
    let cfg = fd_check_config();
    let mut store: ParamStore<f64> = ParamStore::new();
    register_model(&mut store, &cfg)?;
    // A zero head zeroes every upstream derivative, turning those probes
    // into vacuous 0 = 0 checks; give it a deterministic nonzero fill.
    for (i, v) in store.get_mut("dec.head.w")?.data_mut().iter_mut().enumerate() {
        *v = 0.08 * ((i % 7) as f64 - 3.0);
    }

    let names = store.names();
    let mut leaves: Vec<_> = Vec::with_capacity(names.len() + 1);
    for name in &names {
        leaves.push(store.get(name)?.clone());
    }
    let sample = make_sample::<f64>(&cfg, 0);
    leaves.push(sample.image.clone());
    let labels = sample.labels;

    let coords = spread_coords(&leaves, probes);
    check_scalar_fn(&leaves, Some(&coords), |g, vars| {
        let bound = Bound::from_pairs(
            names.iter().cloned().zip(vars[..names.len()].iter().copied()),
        );
        let vol = vars[names.len()];
        let mut rng = derived_rng(cfg.seed, "fd.noise");
        let out = forward(g, vol, Some(&labels), &cfg, &bound, &mut rng, true, None)?;
        Ok(out.loss.expect("labels were supplied"))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorData;
    use rand::SeedableRng;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.encoder.extents = [16, 16, 16];
        cfg.encoder.patch = 4;
        cfg.encoder.embed = 16;
        cfg.encoder.heads = 2;
        cfg.encoder.layers = 4;
        cfg.encoder.stp_after = vec![2];
        cfg.encoder.r = 0.5;
        cfg.decoder.channels = vec![4, 3];
        cfg.decoder.skip_channels = 2;
        cfg.validate().unwrap();
        cfg
    }

    fn demo_volume(cfg: &Config) -> TensorData<f32> {
        let e = cfg.encoder.extents;
        TensorData::from_fn(vec![cfg.encoder.in_chans, e[0], e[1], e[2]], |i| {
            ((i as f32) * 0.011).sin() * 0.5
        })
    }

    fn demo_labels(cfg: &Config) -> Vec<u8> {
        let e = cfg.encoder.extents;
        (0..e[0] * e[1] * e[2]).map(|i| ((i / 7) % 2) as u8).collect()
    }

    #[test]
    fn forward_produces_logits_loss_and_prune_records() {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f32> = ParamStore::new();
        register_model(&mut store, &cfg).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let vol = g.constant(demo_volume(&cfg));
        let labels = demo_labels(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let out = forward(&mut g, vol, Some(&labels), &cfg, &bound, &mut rng, true, None).unwrap();
        let e = cfg.encoder.extents;
        assert_eq!(g.shape(out.logits), &[2, e[0], e[1], e[2]]);
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].k, 32);
        let loss = g.value(out.loss.unwrap()).data()[0];
        assert!(loss.is_finite() && loss > 0.0, "loss = {loss}");
    }

    #[test]
    fn loss_gradients_reach_every_parameter_group() {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f32> = ParamStore::new();
        register_model(&mut store, &cfg).unwrap();
        // The zero-initialized head blocks upstream gradients until its
        // first update; nudge it so every other group can be checked.
        for (i, v) in store.get_mut("dec.head.w").unwrap().data_mut().iter_mut().enumerate() {
            *v = 0.1 * (i as f32 + 1.0);
        }
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let vol = g.constant(demo_volume(&cfg));
        let labels = demo_labels(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = forward(&mut g, vol, Some(&labels), &cfg, &bound, &mut rng, true, None).unwrap();
        g.backward(out.loss.unwrap()).unwrap();
        let grads: std::collections::BTreeMap<String, Vec<f32>> =
            bound.grads(&g).into_iter().collect();
        // One representative name per group; the score net only sees
        // gradient through the straight-through estimator.
        for name in [
            "embed.w",
            "embed.cls",
            "enc.block00.attn.wq",
            "enc.block03.mlp.w2",
            "stp0.score.mlp1.w",
            "stp0.score.mlp2.out.w",
            "mta.blk0",
            "mta.block00.attn.wv",
            "dec.tap0.w",
            "dec.stage2.w",
            "dec.skip.w",
            "dec.head.w",
        ] {
            let grad = grads.get(name).unwrap_or_else(|| panic!("{name} missing"));
            let nonzero = grad.iter().any(|&v| v != 0.0);
            assert!(nonzero, "{name} received no gradient");
        }
    }

    #[test]
    fn inference_is_deterministic_and_ignores_perturbation() {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f32> = ParamStore::new();
        register_model(&mut store, &cfg).unwrap();
        let run = |seed: u64| -> Vec<u32> {
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let vol = g.constant(demo_volume(&cfg));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = forward(&mut g, vol, None, &cfg, &bound, &mut rng, false, None).unwrap();
            g.value(out.logits).data().iter().map(|v| v.to_bits()).collect()
        };
        // Different noise seeds cannot matter when training is off.
        assert_eq!(run(1), run(999));
    }

    #[test]
    fn pipeline_finite_difference_spot_check() {
        // A light probe count; the full audit runs in the acceptance
        // suite with a much denser spread.
        let report = pipeline_fd_check(12).unwrap();
        assert!(report.checked >= 10);
        assert!(
            report.passes(1e-4),
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn zero_ratio_matches_model_without_pruning_modules() {
        let cfg = tiny_cfg();
        let mut plain_cfg = tiny_cfg();
        plain_cfg.encoder.stp_after = vec![];
        plain_cfg.encoder.r = 0.0;
        plain_cfg.validate().unwrap();

        let logits_of = |cfg: &Config, ratio: Option<f64>| -> Vec<u32> {
            let mut store: ParamStore<f32> = ParamStore::new();
            register_model(&mut store, cfg).unwrap();
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let vol = g.constant(demo_volume(cfg));
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let out = forward(&mut g, vol, None, cfg, &bound, &mut rng, true, ratio).unwrap();
            g.value(out.logits).data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(logits_of(&cfg, Some(0.0)), logits_of(&plain_cfg, None));
    }
}
