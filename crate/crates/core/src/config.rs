//! Run configuration: JSON schema, defaults, validation, and dotted-path
//! overrides.
//!
//! An empty config file yields the full desk-scale default; every field can
//! be overridden from JSON or from `--set a.b.c=value` style assignments.
//! Unknown keys are rejected rather than ignored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prune::kept_count;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub mta: MtaConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub embed: usize,
    pub heads: usize,
    pub patch: usize,
    pub extents: [usize; 3],
    pub in_chans: usize,
    /// Block indices (1-based) after which a pruning module runs.
    pub stp_after: Vec<usize>,
    /// Fraction of tokens discarded per pruning module.
    pub r: f64,
    /// Softmax temperature of the soft mask.
    pub tau: f64,
    /// Lower clamp applied to scores before the log.
    pub score_clamp: f64,
    /// Gumbel perturbation during training.
    pub perturb: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MtaConfig {
    /// Completion transformer depth after reassembly.
    pub depth: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Channel width per doubling stage, coarse to fine; length log2(patch).
    pub channels: Vec<usize>,
    /// Channels of the raw-voxel convolution skip at full resolution.
    pub skip_channels: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: String,
    pub weight_decay: f64,
    /// Per-block learning-rate multiplier: block i of L gets
    /// `layer_decay^(L-1-i)`. 1.0 disables the schedule.
    pub layer_decay: f64,
    /// Steps at the start of training with pruning forced off.
    pub warmup_steps_r0: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Sliding-window tile extents; stride is fixed at half the window.
    pub window: [usize; 3],
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 42,
            encoder: EncoderConfig::default(),
            mta: MtaConfig::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
        }
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            embed: 64,
            heads: 4,
            patch: 8,
            extents: [32, 32, 32],
            in_chans: 1,
            stp_after: vec![3, 6, 9],
            r: 0.5,
            tau: 1.0,
            score_clamp: 1e-6,
            perturb: true,
        }
    }
}

impl Default for MtaConfig {
    fn default() -> Self {
        Self { depth: 1 }
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { channels: vec![8, 4, 3], skip_channels: 2, num_classes: 2 }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 2,
            lr: 1e-3,
            optimizer: "adamw".into(),
            weight_decay: 0.0,
            layer_decay: 1.0,
            warmup_steps_r0: 0,
        }
    }
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { window: [32, 32, 32] }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> [usize; 3] {
        [self.extents[0] / self.patch, self.extents[1] / self.patch, self.extents[2] / self.patch]
    }

    /// Non-CLS token count N.
    pub fn token_count(&self) -> usize {
        let g = self.grid();
        g[0] * g[1] * g[2]
    }

    /// Non-CLS token count entering each block (1-based block index 1..=L),
    /// following the kept-count chain through the pruning modules.
    pub fn tokens_per_block(&self) -> Vec<usize> {
        let mut n = self.token_count();
        let mut out = Vec::with_capacity(self.layers);
        for block in 1..=self.layers {
            out.push(n);
            if self.stp_after.contains(&block) {
                n = kept_count(self.r, n);
            }
        }
        out
    }

    /// Kept-count after each pruning module, in insertion order.
    pub fn kept_chain(&self) -> Vec<usize> {
        self.kept_chain_for(self.r)
    }

    pub fn kept_chain_for(&self, r: f64) -> Vec<usize> {
        let mut n = self.token_count();
        self.stp_after
            .iter()
            .map(|_| {
                n = kept_count(r, n);
                n
            })
            .collect()
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let fail = |key: &str, why: String| Err(Error::Config { what: format!("{key}: {why}") });
        if e.layers == 0 {
            return fail("encoder.layers", "must be at least 1".into());
        }
        if e.embed == 0 || e.embed % 4 != 0 {
            return fail("encoder.embed", format!("must be a positive multiple of 4, got {}", e.embed));
        }
        if e.heads == 0 || e.embed % e.heads != 0 {
            return fail("encoder.heads", format!("{} must divide embed dim {}", e.heads, e.embed));
        }
        if e.patch < 2 || !e.patch.is_power_of_two() {
            return fail("encoder.patch", format!("must be a power of two >= 2, got {}", e.patch));
        }
        for (i, &ext) in e.extents.iter().enumerate() {
            if ext == 0 || ext % e.patch != 0 {
                return fail(
                    "encoder.extents",
                    format!("extent {i} = {ext} is not a positive multiple of patch {}", e.patch),
                );
            }
        }
        if e.in_chans == 0 {
            return fail("encoder.in_chans", "must be at least 1".into());
        }
        let mut prev = 0usize;
        for &b in &e.stp_after {
            if b < 1 || b >= e.layers {
                return fail("encoder.stp_after", format!("index {b} outside [1, {}]", e.layers - 1));
            }
            if b <= prev {
                return fail("encoder.stp_after", format!("indices must be strictly increasing at {b}"));
            }
            prev = b;
        }
        if !(0.0..1.0).contains(&e.r) {
            return fail("encoder.r", format!("must lie in [0, 1), got {}", e.r));
        }
        if e.tau <= 0.0 {
            return fail("encoder.tau", format!("must be positive, got {}", e.tau));
        }
        if !(e.score_clamp > 0.0 && e.score_clamp <= 0.5) {
            return fail("encoder.score_clamp", format!("must lie in (0, 0.5], got {}", e.score_clamp));
        }
        let d = &self.decoder;
        let stages = e.patch.trailing_zeros() as usize;
        if d.channels.len() != stages {
            return fail(
                "decoder.channels",
                format!("patch {} needs {stages} doubling stages, got {} widths", e.patch, d.channels.len()),
            );
        }
        if d.channels.iter().any(|&c| c == 0) {
            return fail("decoder.channels", "all stage widths must be positive".into());
        }
        if d.skip_channels == 0 {
            return fail("decoder.skip_channels", "must be at least 1".into());
        }
        if d.num_classes < 2 {
            return fail("decoder.num_classes", format!("must be at least 2, got {}", d.num_classes));
        }
        let t = &self.train;
        if t.lr <= 0.0 {
            return fail("train.lr", format!("must be positive, got {}", t.lr));
        }
        if !(t.layer_decay > 0.0 && t.layer_decay <= 1.0) {
            return fail("train.layer_decay", format!("must lie in (0, 1], got {}", t.layer_decay));
        }
        if t.batch == 0 {
            return fail("train.batch", "must be at least 1".into());
        }
        if t.steps == 0 {
            return fail("train.steps", "must be at least 1".into());
        }
        if t.weight_decay < 0.0 {
            return fail("train.weight_decay", format!("must be non-negative, got {}", t.weight_decay));
        }
        if t.optimizer != "adamw" {
            return fail("train.optimizer", format!("unknown optimizer {:?}", t.optimizer));
        }
        for (i, &w) in self.infer.window.iter().enumerate() {
            if w == 0 || w % e.patch != 0 {
                return fail(
                    "infer.window",
                    format!("extent {i} = {w} is not a positive multiple of patch {}", e.patch),
                );
            }
        }
        Ok(())
    }
}

/// Parse raw JSON text into a validated config.
pub fn parse_config_str(text: &str) -> Result<Config> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::Config { what: format!("config is not valid JSON: {e}") })?;
    config_from_value(value)
}

/// Parse a config file, applying `--set` style dotted overrides afterwards.
pub fn parse_config(path: Option<&std::path::Path>, sets: &[String]) -> Result<Config> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config { what: format!("cannot read {}: {e}", p.display()) })?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config { what: format!("config is not valid JSON: {e}") })?
        }
        None => serde_json::Value::Object(serde_json::Map::new()),
    };
    for s in sets {
        apply_set(&mut value, s)?;
    }
    config_from_value(value)
}

fn config_from_value(value: serde_json::Value) -> Result<Config> {
    let cfg: Config = serde_json::from_value(value)
        .map_err(|e| Error::Config { what: format!("invalid config: {e}") })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Apply one `a.b.c=value` assignment to a JSON tree, creating intermediate
/// objects as needed. The value text is itself parsed as JSON when possible
/// (numbers, booleans, arrays), otherwise taken as a string.
pub fn apply_set(root: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config { what: format!("override {assignment:?} is not key=value") })?;
    if path.is_empty() {
        return Err(Error::Config { what: format!("override {assignment:?} has an empty key") });
    }
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(Error::Config { what: format!("override path {path} crosses a non-object") });
        }
        let map = node.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(serde_json::Map::new()));
    }
    unreachable!("loop returns on the last segment")
}
