//! Command-line entry points for the token-sparse segmentation pipeline.
//!
//! Every subcommand writes a JSON report (see `--report`) and exits 0 only
//! when all of its checks pass, so runs can be scripted and diffed. Given
//! the same config and seed, every output except wall-clock timings is
//! reproducible bit for bit.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use tokseg_core::bench::{
    compute_depth_map, count_macs, depth_histogram, measure_encoder_throughput,
    write_depth_pgm, write_depth_text,
};
use tokseg_core::checkpoint;
use tokseg_core::config::{parse_config, Config};
use tokseg_core::graph::Graph;
use tokseg_core::infer::sliding_window_infer;
use tokseg_core::metrics::evaluate;
use tokseg_core::model::{forward, pipeline_fd_check, register_model};
use tokseg_core::params::{derived_rng, ParamStore};
use tokseg_core::prune::inclusion_frequencies;
use tokseg_core::synth::{make_sample, VolumeSample};
use tokseg_core::train::train;

/// Gradient audits fail above this relative error.
const GRADCHECK_TOL: f64 = 1e-4;
/// Allowed gap between a sampled marginal and its exact value.
const MARGINAL_TOL: f64 = 0.01;
/// Allowed disagreement between the closed-form MAC count and a walk
/// over the executed graph.
const MAC_PARITY_TOL: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "tokseg", version, about = "Token-sparse volumetric segmentation workflows")]
struct Cli {
    /// JSON config file; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Dotted-path override, e.g. `--set encoder.r=0.75`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Where the JSON run report is written (always, pass or fail).
    #[arg(long, global = true, value_name = "PATH", default_value = "tokseg-report.json")]
    report: PathBuf,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Optimize on the synthetic stream, optionally saving weights and a JSONL log.
    Train {
        /// Write the final weights here.
        #[arg(long, value_name = "PATH")]
        checkpoint_out: Option<PathBuf>,
        /// Append one JSON object per step here.
        #[arg(long, value_name = "PATH")]
        log: Option<PathBuf>,
    },
    /// Sliding-window inference on a synthetic volume, scored against its labels.
    Infer {
        /// Weights produced by `train --checkpoint-out`.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Index into the synthetic stream.
        #[arg(long, default_value_t = 0)]
        sample: u64,
        /// Volume extents as `X,Y,Z`; defaults to the encoder extents.
        #[arg(long, value_name = "X,Y,Z")]
        volume: Option<String>,
        /// Write the predicted label volume as text.
        #[arg(long, value_name = "PATH")]
        mask_out: Option<PathBuf>,
    },
    /// Closed-form MAC counts per keep ratio, checked against the executed graph.
    Bench {
        /// Comma-separated keep ratios, e.g. `0,0.5,0.9`; defaults to the config ratio.
        #[arg(long, value_name = "RATIOS")]
        compare: Option<String>,
        /// Also measure median encoder wall time per ratio.
        #[arg(long)]
        throughput: bool,
        /// Timed iterations per ratio when --throughput is set.
        #[arg(long, default_value_t = 5)]
        iters: usize,
    },
    /// Compare analytic gradients against central differences end to end.
    Gradcheck {
        /// Coordinates probed across parameters and input.
        #[arg(long, default_value_t = 128)]
        probes: usize,
    },
    /// Estimate per-token inclusion frequencies of the stochastic top-K.
    SampleCheck {
        /// Number of candidate tokens.
        #[arg(long, default_value_t = 6)]
        n: usize,
        /// Tokens kept per draw.
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Monte-Carlo draws per experiment.
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
    },
    /// Render the pruning stage at which each token was discarded.
    DepthMap {
        /// Text output path.
        #[arg(long, value_name = "PATH", default_value = "depth-map.txt")]
        out: PathBuf,
        /// Optional grayscale PGM rendering.
        #[arg(long, value_name = "PATH")]
        pgm: Option<PathBuf>,
        /// Index into the synthetic stream.
        #[arg(long, default_value_t = 0)]
        sample: u64,
        /// Score with trained weights instead of the seeded initialization.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Train { .. } => "train",
            Cmd::Infer { .. } => "infer",
            Cmd::Bench { .. } => "bench",
            Cmd::Gradcheck { .. } => "gradcheck",
            Cmd::SampleCheck { .. } => "sample-check",
            Cmd::DepthMap { .. } => "depth-map",
        }
    }
}

#[derive(Debug)]
enum CliError {
    /// Bad invocation: exit code 2, like a flag parse failure.
    Usage(String),
    Core(tokseg_core::Error),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(msg) => write!(f, "{msg}"),
            Self::Core(e) => write!(f, "{e}"),
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl From<tokseg_core::Error> for CliError {
    fn from(e: tokseg_core::Error) -> Self {
        Self::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Json(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = cli.command.name();
    match run(&cli) {
        Ok((pass, report)) => {
            if let Err(e) = write_report(&cli.report, &report) {
                eprintln!("error: cannot write report {}: {e}", cli.report.display());
                return ExitCode::FAILURE;
            }
            if pass {
                ExitCode::SUCCESS
            } else {
                eprintln!("{command}: checks failed, see {}", cli.report.display());
                ExitCode::FAILURE
            }
        }
        Err(err) => {
            let report = json!({
                "command": command,
                "pass": false,
                "error": err.to_string(),
            });
            // Best effort: the error itself is the primary signal here.
            let _ = write_report(&cli.report, &report);
            eprintln!("error: {err}");
            match err {
                CliError::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: &Cli) -> Result<(bool, serde_json::Value), CliError> {
    let mut cfg = parse_config(cli.config.as_deref(), &cli.set)?;
    if let Ok(text) = std::env::var("TOKSEG_SEED") {
        cfg.seed = text.trim().parse().map_err(|_| {
            CliError::Usage(format!("TOKSEG_SEED must be an unsigned integer, got {text:?}"))
        })?;
    }

    let (pass, mut report) = match &cli.command {
        Cmd::Train { checkpoint_out, log } => {
            cmd_train(&cfg, checkpoint_out.as_deref(), log.as_deref())?
        }
        Cmd::Infer { checkpoint, sample, volume, mask_out } => {
            cmd_infer(&cfg, checkpoint, *sample, volume.as_deref(), mask_out.as_deref())?
        }
        Cmd::Bench { compare, throughput, iters } => {
            cmd_bench(&cfg, compare.as_deref(), *throughput, *iters)?
        }
        Cmd::Gradcheck { probes } => cmd_gradcheck(*probes)?,
        Cmd::SampleCheck { n, k, trials } => cmd_sample_check(&cfg, *n, *k, *trials)?,
        Cmd::DepthMap { out, pgm, sample, checkpoint } => {
            cmd_depth_map(&cfg, out, pgm.as_deref(), *sample, checkpoint.as_deref())?
        }
    };

    let obj = report.as_object_mut().expect("subcommand payloads are objects");
    obj.insert("command".into(), json!(cli.command.name()));
    obj.insert("seed".into(), json!(cfg.seed));
    obj.insert("pass".into(), json!(pass));
    Ok((pass, report))
}

fn write_report(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

/// Build a freshly initialized parameter store for this config.
fn init_store(cfg: &Config) -> Result<ParamStore<f32>, CliError> {
    let mut store = ParamStore::new();
    register_model(&mut store, cfg)?;
    Ok(store)
}

/// Load weights from `path`, insisting they match this config's shapes.
fn load_store(cfg: &Config, path: &Path) -> Result<ParamStore<f32>, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    let template = init_store(cfg)?;
    Ok(checkpoint::load_matching(path, &template)?)
}

fn cmd_train(
    cfg: &Config,
    checkpoint_out: Option<&Path>,
    log_path: Option<&Path>,
) -> Result<(bool, serde_json::Value), CliError> {
    let mut store = init_store(cfg)?;
    let mut log_file = match log_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let sink = log_file.as_mut().map(|f| f as &mut dyn Write);
    let outcome = train(&mut store, cfg, sink)?;
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    if let Some(p) = checkpoint_out {
        checkpoint::save(&store, p)?;
    }

    let first_loss = outcome.log.first().map(|l| l.loss);
    println!(
        "trained {} steps: loss {} -> {}",
        outcome.log.len(),
        first_loss.map_or("n/a".into(), |l| format!("{l:.4}")),
        outcome.final_loss,
    );
    let pass = outcome.final_loss.is_finite();
    let payload = json!({
        "steps": outcome.log.len(),
        "first_loss": first_loss,
        "final_loss": outcome.final_loss,
        "kept_per_stage": cfg.encoder.kept_chain(),
        "checkpoint": checkpoint_out.map(|p| p.display().to_string()),
        "log": log_path.map(|p| p.display().to_string()),
    });
    Ok((pass, payload))
}

fn parse_extents(text: &str) -> Result<[usize; 3], CliError> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::Usage(format!("--volume wants X,Y,Z, got {text:?}")));
    }
    let mut out = [0usize; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad extent {part:?} in --volume")))?;
        if *slot == 0 {
            return Err(CliError::Usage("--volume extents must be positive".into()));
        }
    }
    Ok(out)
}

fn cmd_infer(
    cfg: &Config,
    checkpoint: &Path,
    sample_index: u64,
    volume: Option<&str>,
    mask_out: Option<&Path>,
) -> Result<(bool, serde_json::Value), CliError> {
    let store = load_store(cfg, checkpoint)?;

    // The sample may be larger than the encoder window; only the tiles the
    // sliding window cuts out must match the window extents.
    let extents = match volume {
        Some(text) => parse_extents(text)?,
        None => cfg.encoder.extents,
    };
    let mut sample_cfg = cfg.clone();
    sample_cfg.encoder.extents = extents;
    let sample: VolumeSample<f32> = make_sample(&sample_cfg, sample_index);

    let mask = sliding_window_infer(&store, &sample.image, cfg)?;
    let metrics = evaluate(&mask, &sample.labels, cfg.decoder.num_classes, extents)?;

    for c in &metrics.per_class {
        let dsc = c.dsc.map_or("n/a".into(), |v| format!("{v:.4}"));
        let hd = c.hd95.map_or("n/a".into(), |v| format!("{v:.2}"));
        println!("class {}: dsc {dsc} hd95 {hd}", c.class);
    }
    println!(
        "mean dsc {}",
        metrics.mean_dsc.map_or("n/a".into(), |v| format!("{v:.4}"))
    );

    if let Some(p) = mask_out {
        write_mask_text(p, &mask, extents)?;
    }

    let payload = json!({
        "checkpoint": checkpoint.display().to_string(),
        "sample": sample_index,
        "volume": extents,
        "metrics": serde_json::to_value(&metrics)?,
        "mask": mask_out.map(|p| p.display().to_string()),
    });
    Ok((true, payload))
}

/// Label volume as text: an `X Y Z` header, then one line of Z class ids
/// per (x, y) row.
fn write_mask_text(path: &Path, mask: &[u8], extents: [usize; 3]) -> Result<(), CliError> {
    let [ex, ey, ez] = extents;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{ex} {ey} {ez}")?;
    for x in 0..ex {
        for y in 0..ey {
            let row = &mask[(x * ey + y) * ez..(x * ey + y + 1) * ez];
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_ratios(text: &str) -> Result<Vec<f64>, CliError> {
    let body = text.strip_prefix("r=").unwrap_or(text);
    let mut out = Vec::new();
    for part in body.split(',') {
        let r: f64 = part
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad ratio {part:?} in --compare")))?;
        if !(0.0..1.0).contains(&r) {
            return Err(CliError::Usage(format!("ratio {r} outside [0, 1)")));
        }
        out.push(r);
    }
    out.sort_by(|a, b| a.partial_cmp(b).expect("ratios are finite"));
    out.dedup();
    if out.is_empty() {
        return Err(CliError::Usage("--compare lists no ratios".into()));
    }
    Ok(out)
}

/// MACs of one full forward pass, tallied by walking the executed graph.
fn executed_macs(
    store: &ParamStore<f32>,
    cfg: &Config,
    ratio: f64,
) -> Result<u64, CliError> {
    let sample: VolumeSample<f32> = make_sample(cfg, 0);
    let mut g: Graph<f32> = Graph::new();
    let bound = store.bind(&mut g);
    let vol = g.constant(sample.image);
    let mut rng = derived_rng(cfg.seed, "bench");
    forward(&mut g, vol, None, cfg, &bound, &mut rng, false, Some(ratio))?;
    Ok(g.mac_count())
}

fn cmd_bench(
    cfg: &Config,
    compare: Option<&str>,
    throughput: bool,
    iters: usize,
) -> Result<(bool, serde_json::Value), CliError> {
    let ratios = match compare {
        Some(text) => parse_ratios(text)?,
        None => vec![cfg.encoder.r],
    };
    let store = init_store(cfg)?;

    let mut rows = Vec::new();
    let mut encoder_totals = Vec::new();
    let mut parity_ok = true;
    for &r in &ratios {
        let mac = count_macs(cfg, r);
        let walked = executed_macs(&store, cfg, r)?;
        let closed = mac.grand_total;
        let rel = (walked as f64 - closed as f64).abs() / closed as f64;
        if rel > MAC_PARITY_TOL {
            parity_ok = false;
        }
        println!(
            "r={r}: encoder {} MMACs, total {} MMACs, graph walk off by {:.3e}",
            mac.encoder_total / 1_000_000,
            closed / 1_000_000,
            rel,
        );
        let thr = if throughput {
            let t = measure_encoder_throughput(&store, cfg, r, iters)?;
            println!("r={r}: encoder median {:.1} ms, {:.2} volumes/s", t.median_ms, t.volumes_per_s);
            Some(serde_json::to_value(&t)?)
        } else {
            None
        };
        encoder_totals.push(mac.encoder_total);
        rows.push(json!({
            "macs": serde_json::to_value(&mac)?,
            "graph_walk_macs": walked,
            "parity_rel_err": rel,
            "throughput": thr,
        }));
    }

    // Ratios are sorted ascending, so encoder cost must fall strictly.
    let monotone = encoder_totals.windows(2).all(|w| w[1] < w[0]);
    if ratios.len() > 1 && !monotone {
        println!("encoder MACs do not decrease strictly with the ratio");
    }
    let pass = parity_ok && (ratios.len() < 2 || monotone);
    let payload = json!({
        "ratios": ratios,
        "results": rows,
        "parity_tolerance": MAC_PARITY_TOL,
        "parity_ok": parity_ok,
        "strictly_decreasing": monotone,
    });
    Ok((pass, payload))
}

fn cmd_gradcheck(probes: usize) -> Result<(bool, serde_json::Value), CliError> {
    if probes == 0 {
        return Err(CliError::Usage("--probes must be positive".into()));
    }
    let report = pipeline_fd_check(probes)?;
    let pass = report.passes(GRADCHECK_TOL);
    println!(
        "checked {} coordinates: max relative error {:.3e} (tolerance {GRADCHECK_TOL:.0e})",
        report.checked, report.max_rel_err,
    );
    let worst = report.worst.as_ref().map(|w| {
        json!({
            "leaf": w.leaf,
            "coord": w.coord,
            "analytic": w.analytic,
            "numeric": w.numeric,
            "rel_err": w.rel_err,
        })
    });
    let payload = json!({
        "probes": probes,
        "checked": report.checked,
        "max_rel_err": report.max_rel_err,
        "tolerance": GRADCHECK_TOL,
        "worst": worst,
    });
    Ok((pass, payload))
}

fn cmd_sample_check(
    cfg: &Config,
    n: usize,
    k: usize,
    trials: usize,
) -> Result<(bool, serde_json::Value), CliError> {
    if trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }

    // Equal scores: every token must be kept with probability K/n.
    let uniform = inclusion_frequencies(&vec![1.0; n], k, trials, cfg.seed)?;
    let expected = k as f64 / n as f64;
    let max_dev = uniform
        .iter()
        .map(|f| (f - expected).abs())
        .fold(0.0f64, f64::max);
    let uniform_ok = max_dev <= MARGINAL_TOL;
    println!(
        "equal scores: max |freq - {k}/{n}| = {max_dev:.4} over {trials} draws (tolerance {MARGINAL_TOL})"
    );

    // Distinct descending scores: inclusion must not reorder them.
    let graded: Vec<f64> = (0..n).map(|i| 1.0 / (i + 1) as f64).collect();
    let freqs = inclusion_frequencies(&graded, k, trials, cfg.seed)?;
    let monotone = freqs.windows(2).all(|w| w[0] + 1e-9 >= w[1]);
    println!(
        "graded scores: frequencies {:?} {}",
        freqs.iter().map(|f| (f * 1e4).round() / 1e4).collect::<Vec<_>>(),
        if monotone { "are ordered with the scores" } else { "violate the score order" },
    );

    let pass = uniform_ok && monotone;
    let payload = json!({
        "n": n,
        "k": k,
        "trials": trials,
        "uniform_frequencies": uniform,
        "expected_marginal": expected,
        "max_deviation": max_dev,
        "marginal_tolerance": MARGINAL_TOL,
        "graded_scores": graded,
        "graded_frequencies": freqs,
        "monotone": monotone,
    });
    Ok((pass, payload))
}

fn cmd_depth_map(
    cfg: &Config,
    out: &Path,
    pgm: Option<&Path>,
    sample_index: u64,
    ckpt: Option<&Path>,
) -> Result<(bool, serde_json::Value), CliError> {
    let store = match ckpt {
        Some(p) => load_store(cfg, p)?,
        None => init_store(cfg)?,
    };
    let sample: VolumeSample<f32> = make_sample(cfg, sample_index);

    let mut g: Graph<f32> = Graph::new();
    let bound = store.bind(&mut g);
    let vol = g.constant(sample.image);
    let mut rng = derived_rng(cfg.seed, "depth-map");
    let output = forward(&mut g, vol, None, cfg, &bound, &mut rng, false, None)?;

    let n = cfg.encoder.token_count();
    let num_stps = cfg.encoder.stp_after.len();
    let depth = compute_depth_map(&output.records, n)?;
    let hist = depth_histogram(&depth, num_stps);

    // Each stage must discard exactly the difference between consecutive
    // kept counts, with the survivors landing in the last bucket.
    let mut expected = Vec::with_capacity(num_stps + 1);
    let mut prev = n;
    for &kept in &cfg.encoder.kept_chain() {
        expected.push(prev - kept);
        prev = kept;
    }
    expected.push(prev);
    let pass = hist == expected;

    let grid = cfg.encoder.grid();
    let mut text = BufWriter::new(File::create(out)?);
    write_depth_text(&mut text, &depth, grid, num_stps)?;
    text.flush()?;
    if let Some(p) = pgm {
        let mut img = BufWriter::new(File::create(p)?);
        write_depth_pgm(&mut img, &depth, grid, num_stps)?;
        img.flush()?;
    }

    println!(
        "grid {grid:?}: {} tokens, pruned per stage {:?}, survivors {}",
        n,
        &hist[..num_stps],
        hist[num_stps],
    );
    let payload = json!({
        "sample": sample_index,
        "grid": grid,
        "stages": num_stps,
        "histogram": hist,
        "expected_histogram": expected,
        "out": out.display().to_string(),
        "pgm": pgm.map(|p| p.display().to_string()),
        "checkpoint": ckpt.map(|p| p.display().to_string()),
    });
    Ok((pass, payload))
}
