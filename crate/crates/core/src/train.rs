//! Training loop: AdamW with decoupled weight decay and optional
//! layer-wise learning-rate decay over the encoder depth, synthetic
//! batches streamed by step index, JSONL step logs, and a hard abort on
//! non-finite losses.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::forward;
use crate::params::{derived_rng, ParamStore};
use crate::synth::make_sample;
use crate::tensor::Elem;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-parameter learning-rate multiplier. With decay `d` and `L` encoder
/// blocks, block `i` trains at `d^(L-1-i)` and the patch embedding at
/// `d^L`; everything outside the encoder trunk trains at full rate.
fn lr_multiplier(name: &str, layers: usize, decay: f64) -> f64 {
    if decay == 1.0 {
        return 1.0;
    }
    if let Some(rest) = name.strip_prefix("enc.block") {
        let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
        if let Ok(i) = digits.parse::<usize>() {
            return decay.powi((layers.saturating_sub(1 + i)) as i32);
        }
    }
    if name.starts_with("embed.") {
        return decay.powi(layers as i32);
    }
    1.0
}

/// AdamW over a parameter store. Moments are kept in f64 regardless of
/// the parameter element type so update order is the only source of
/// rounding.
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    layers: usize,
    layer_decay: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &Config) -> Self {
        AdamW {
            lr: cfg.train.lr,
            weight_decay: cfg.train.weight_decay,
            layers: cfg.encoder.layers,
            layer_decay: cfg.train.layer_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update from named gradients. Parameters without a
    /// gradient entry are left untouched.
    pub fn step<T: Elem>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(String, Vec<T>)],
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, grad) in grads {
            let param = store.get_mut(name)?;
            if param.numel() != grad.len() {
                return Err(Error::Training {
                    what: format!(
                        "gradient for {name} has {} values, parameter has {}",
                        grad.len(),
                        param.numel()
                    ),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let lr = self.lr * lr_multiplier(name, self.layers, self.layer_decay);
            for (i, slot) in param.data_mut().iter_mut().enumerate() {
                let g = grad[i].to_f64();
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let theta = slot.to_f64();
                let update = mhat / (vhat.sqrt() + ADAM_EPS) + self.weight_decay * theta;
                *slot = T::from_f64(theta - lr * update);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub ratio: f64,
    pub kept: Vec<usize>,
}

pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    pub final_loss: f64,
}

/// Run the configured number of steps on the synthetic stream, updating
/// the store in place. `sink`, when given, receives one JSON object per
/// line per step.
pub fn train<T: Elem>(
    store: &mut ParamStore<T>,
    cfg: &Config,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let mut opt = AdamW::new(cfg);
    let mut gumbel_rng = derived_rng(cfg.seed, "train.gumbel");
    let mut log = Vec::with_capacity(cfg.train.steps);
    let mut final_loss = f64::NAN;
    for step in 0..cfg.train.steps {
        // Early steps can run dense to let the score nets see full
        // sequences before pruning starts.
        let ratio_override =
            if step < cfg.train.warmup_steps_r0 { Some(0.0) } else { None };
        let mut g: Graph<T> = Graph::new();
        let bound = store.bind(&mut g);
        let mut batch_loss = None;
        let mut kept = Vec::new();
        for j in 0..cfg.train.batch {
            let sample = make_sample::<T>(cfg, (step * cfg.train.batch + j) as u64);
            let vol = g.constant(sample.image);
            let out = forward(
                &mut g,
                vol,
                Some(&sample.labels),
                cfg,
                &bound,
                &mut gumbel_rng,
                true,
                ratio_override,
            )?;
            if j == 0 {
                kept = out.records.iter().map(|r| r.k).collect();
            }
            let l = out.loss.expect("labels were supplied");
            batch_loss = Some(match batch_loss {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        let total = batch_loss.expect("batch size is at least 1");
        let loss = g.scale(total, 1.0 / cfg.train.batch as f64);
        let loss_val = g.value(loss).data()[0].to_f64();
        if !loss_val.is_finite() {
            return Err(Error::Training {
                what: format!("loss became {loss_val} at step {step}"),
            });
        }
        g.backward(loss)?;
        let grads = bound.grads(&g);
        opt.step(store, &grads)?;

        let entry = StepLog {
            step,
            loss: loss_val,
            ratio: ratio_override.unwrap_or(cfg.encoder.r),
            kept,
        };
        if let Some(w) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &entry)
                .map_err(|e| Error::Training { what: format!("log serialization: {e}") })?;
            writeln!(w)?;
        }
        final_loss = loss_val;
        log.push(entry);
    }
    Ok(TrainOutcome { log, final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::register_model;

    fn train_cfg(steps: usize) -> Config {
        let mut cfg = Config::default();
        cfg.encoder.extents = [8, 8, 8];
        cfg.encoder.patch = 4;
        cfg.encoder.embed = 8;
        cfg.encoder.heads = 2;
        cfg.encoder.layers = 2;
        cfg.encoder.stp_after = vec![1];
        cfg.decoder.channels = vec![3, 2];
        cfg.decoder.skip_channels = 1;
        cfg.train.steps = steps;
        cfg.train.batch = 1;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn layer_decay_orders_learning_rates_by_depth() {
        assert_eq!(lr_multiplier("enc.block00.attn.wq", 4, 0.5), 0.125);
        assert_eq!(lr_multiplier("enc.block03.mlp.w1", 4, 0.5), 1.0);
        assert_eq!(lr_multiplier("embed.w", 4, 0.5), 0.0625);
        assert_eq!(lr_multiplier("dec.head.w", 4, 0.5), 1.0);
        assert_eq!(lr_multiplier("embed.w", 4, 1.0), 1.0);
    }

    #[test]
    fn adamw_first_step_moves_by_lr_against_the_gradient() {
        let mut cfg = train_cfg(1);
        cfg.train.lr = 0.01;
        cfg.train.weight_decay = 0.0;
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add_ones("w", vec![2]).unwrap();
        let mut opt = AdamW::new(&cfg);
        opt.step(&mut store, &[("w".into(), vec![0.3, -0.7])]).unwrap();
        let w = store.get("w").unwrap().data();
        // First Adam step is lr * sign(g) up to the epsilon fuzz.
        assert!((w[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((w[1] - (1.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_parameters_without_gradient_signal() {
        let mut cfg = train_cfg(1);
        cfg.train.lr = 0.1;
        cfg.train.weight_decay = 0.5;
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add_ones("w", vec![1]).unwrap();
        let mut opt = AdamW::new(&cfg);
        opt.step(&mut store, &[("w".into(), vec![0.0])]).unwrap();
        let w = store.get("w").unwrap().data()[0];
        assert!((w - (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn short_run_logs_every_step_and_lowers_loss() {
        let cfg = train_cfg(12);
        let mut store: ParamStore<f32> = ParamStore::new();
        register_model(&mut store, &cfg).unwrap();
        let mut buf = Vec::new();
        let out = {
            let mut sink: &mut dyn Write = &mut buf;
            train(&mut store, &cfg, Some(&mut sink)).unwrap()
        };
        assert_eq!(out.log.len(), 12);
        assert!(out.final_loss.is_finite());
        assert!(
            out.final_loss < out.log[0].loss,
            "loss went {} -> {}",
            out.log[0].loss,
            out.final_loss
        );
        let lines: Vec<&str> = std::str::from_utf8(&buf).unwrap().trim().lines().collect();
        assert_eq!(lines.len(), 12);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["step"], 0);
        assert!(first["loss"].as_f64().unwrap().is_finite());
        // 8 tokens at ratio 0.5 keeps 4.
        assert_eq!(first["kept"][0], 4);
    }

    #[test]
    fn training_is_bitwise_reproducible_per_seed() {
        let cfg = train_cfg(4);
        let run = || -> Vec<u32> {
            let mut store: ParamStore<f32> = ParamStore::new();
            register_model(&mut store, &cfg).unwrap();
            train(&mut store, &cfg, None).unwrap();
            store
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn warmup_steps_run_dense_before_pruning_starts() {
        let mut cfg = train_cfg(3);
        cfg.train.warmup_steps_r0 = 2;
        let mut store: ParamStore<f32> = ParamStore::new();
        register_model(&mut store, &cfg).unwrap();
        let out = train(&mut store, &cfg, None).unwrap();
        assert_eq!(out.log[0].ratio, 0.0);
        assert_eq!(out.log[0].kept, vec![8]);
        assert_eq!(out.log[1].ratio, 0.0);
        assert_eq!(out.log[2].ratio, cfg.encoder.r);
        assert_eq!(out.log[2].kept, vec![4]);
    }

    #[test]
    fn non_finite_loss_aborts_with_a_training_error() {
        let cfg = train_cfg(2);
        let mut store: ParamStore<f32> = ParamStore::new();
        register_model(&mut store, &cfg).unwrap();
        // Poison one weight; the forward pass propagates the NaN into
        // the loss on the first step.
        store.get_mut("embed.w").unwrap().data_mut()[0] = f32::NAN;
        match train(&mut store, &cfg, None) {
            Err(Error::Training { what }) => assert!(what.contains("step 0"), "{what}"),
            other => panic!("expected a training error, got {:?}", other.map(|o| o.final_loss)),
        }
    }

    #[test]
    fn moment_state_keeps_parameter_types_stable() {
        // f32 store driven by f64 moments must not drift between runs.
        let cfg = train_cfg(1);
        let mut a: ParamStore<f32> = ParamStore::new();
        a.add_normal("w", vec![4], 0.1, 9).unwrap();
        let mut b = ParamStore::new();
        b.add_normal("w", vec![4], 0.1, 9).unwrap();
        let g = vec![0.25f32, -0.5, 0.125, 1.0];
        let mut oa = AdamW::new(&cfg);
        let mut ob = AdamW::new(&cfg);
        for _ in 0..5 {
            oa.step(&mut a, &[("w".into(), g.clone())]).unwrap();
            ob.step(&mut b, &[("w".into(), g.clone())]).unwrap();
        }
        let ta = a.get("w").unwrap().data();
        let tb = b.get("w").unwrap().data();
        assert!(ta.iter().zip(tb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

}
