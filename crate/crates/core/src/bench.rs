//! Cost accounting and profiling: closed-form multiply-accumulate counts
//! per pipeline section, wall-clock throughput medians, and a per-patch
//! depth map showing where each token left the encoder.

use crate::config::Config;
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::forward;
use crate::params::{derived_rng, ParamStore};
use crate::prune::{kept_count, PruneRecord};
use crate::synth::make_sample;
use crate::tensor::Elem;
use serde::Serialize;
use std::io::Write;
use std::time::Instant;

#[derive(Debug, Clone, Serialize)]
pub struct BlockMacs {
    pub block: usize,
    /// Sequence length this block ran at, CLS included.
    pub tokens: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MacReport {
    pub ratio: f64,
    pub patch_embed: u64,
    pub blocks: Vec<BlockMacs>,
    pub score_nets: u64,
    pub encoder_total: u64,
    pub completion: u64,
    pub decoder: u64,
    pub grand_total: u64,
}

/// One transformer block over `n` tokens of width `c`: four attention
/// projections, the two attention matmuls, and the two MLP matmuls.
fn block_macs(n: u64, c: u64) -> u64 {
    12 * n * c * c + 2 * n * n * c
}

/// Score net over `n` tokens: a C->C layer, then a 2C -> C/4 -> 1 head.
fn score_net_macs(n: u64, c: u64) -> u64 {
    n * (c * c + c * c / 2 + c / 4)
}

/// Closed-form forward-pass MAC count at a given keep ratio. Mirrors the
/// executed graph exactly, including the shortcut that skips scoring when
/// a pruning module would keep every token.
pub fn count_macs(cfg: &Config, ratio: f64) -> MacReport {
    let e = &cfg.encoder;
    let c = e.embed as u64;
    let n_full = e.token_count() as u64;
    let patch_dim = (e.patch * e.patch * e.patch * e.in_chans) as u64;
    let patch_embed = n_full * patch_dim * c;

    let mut blocks = Vec::with_capacity(e.layers);
    let mut score_nets = 0u64;
    let mut n = e.token_count();
    for block in 1..=e.layers {
        let tokens = n + 1;
        blocks.push(BlockMacs {
            block,
            tokens,
            macs: block_macs(tokens as u64, c),
        });
        if e.stp_after.contains(&block) {
            let k = kept_count(ratio, n);
            if k < n {
                score_nets += score_net_macs(n as u64, c);
                n = k;
            }
        }
    }
    let encoder_total =
        patch_embed + blocks.iter().map(|b| b.macs).sum::<u64>() + score_nets;

    let completion = cfg.mta.depth as u64 * block_macs(n_full, c);

    let ch = &cfg.decoder.channels;
    let stages = ch.len();
    let mut decoder = 0u64;
    for s in 0..=stages {
        let width = if s == 0 { ch[0] } else { ch[s - 1] } as u64;
        decoder += n_full * c * width;
    }
    for s in 1..=stages {
        let prev = if s == 1 { ch[0] } else { ch[s - 2] } as u64;
        let mut cin = prev + ch[s - 1] as u64;
        if s == stages {
            cin += cfg.decoder.skip_channels as u64;
        }
        let voxels = n_full * 8u64.pow(s as u32);
        decoder += 27 * cin * ch[s - 1] as u64 * voxels;
    }
    let full_voxels = n_full * 8u64.pow(stages as u32);
    decoder += 27 * (e.in_chans * cfg.decoder.skip_channels) as u64 * full_voxels;
    decoder += (cfg.decoder.num_classes * ch[stages - 1]) as u64 * full_voxels;

    MacReport {
        ratio,
        patch_embed,
        blocks,
        score_nets,
        encoder_total,
        completion,
        decoder,
        grand_total: encoder_total + completion + decoder,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ThroughputReport {
    pub ratio: f64,
    pub iters: usize,
    pub median_ms: f64,
    pub volumes_per_s: f64,
}

fn median_ms(mut times: Vec<f64>) -> f64 {
    times.sort_by(|a, b| a.partial_cmp(b).expect("durations are finite"));
    let mid = times.len() / 2;
    if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    }
}

/// Median wall time of the encoder alone at a keep ratio, after one
/// untimed warmup pass.
pub fn measure_encoder_throughput<T: Elem>(
    store: &ParamStore<T>,
    cfg: &Config,
    ratio: f64,
    iters: usize,
) -> Result<ThroughputReport> {
    if iters == 0 {
        return Err(Error::Contract { what: "throughput needs at least one iteration".into() });
    }
    let sample = make_sample::<T>(cfg, 0);
    let run = || -> Result<f64> {
        let mut g: Graph<T> = Graph::new();
        let bound = store.bind(&mut g);
        let vol = g.constant(sample.image.clone());
        let mut rng = derived_rng(cfg.seed, "bench");
        let start = Instant::now();
        encode(&mut g, vol, &cfg.encoder, &bound, &mut rng, false, Some(ratio))?;
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    run()?;
    let times: Vec<f64> = (0..iters).map(|_| run()).collect::<Result<_>>()?;
    let med = median_ms(times);
    Ok(ThroughputReport {
        ratio,
        iters,
        median_ms: med,
        volumes_per_s: 1e3 / med,
    })
}

/// Median wall time of the whole pipeline at a keep ratio.
pub fn measure_full_throughput<T: Elem>(
    store: &ParamStore<T>,
    cfg: &Config,
    ratio: f64,
    iters: usize,
) -> Result<ThroughputReport> {
    if iters == 0 {
        return Err(Error::Contract { what: "throughput needs at least one iteration".into() });
    }
    let sample = make_sample::<T>(cfg, 0);
    let run = || -> Result<f64> {
        let mut g: Graph<T> = Graph::new();
        let bound = store.bind(&mut g);
        let vol = g.constant(sample.image.clone());
        let mut rng = derived_rng(cfg.seed, "bench");
        let start = Instant::now();
        forward(&mut g, vol, None, cfg, &bound, &mut rng, false, Some(ratio))?;
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    run()?;
    let times: Vec<f64> = (0..iters).map(|_| run()).collect::<Result<_>>()?;
    let med = median_ms(times);
    Ok(ThroughputReport {
        ratio,
        iters,
        median_ms: med,
        volumes_per_s: 1e3 / med,
    })
}

/// Per-patch pruning depth: the ordinal of the module that pruned the
/// patch's token, or the module count for tokens that survived to the
/// end.
pub fn compute_depth_map<T: Elem>(records: &[PruneRecord<T>], n: usize) -> Result<Vec<u8>> {
    let sentinel = records.len() as u8;
    let mut depth = vec![sentinel; n];
    let mut seen = vec![false; n];
    for r in records {
        for &p in &r.pruned_positions {
            if p < 0 || p as usize >= n {
                return Err(Error::Index { what: format!("pruned position {p} outside [0, {n})") });
            }
            if seen[p as usize] {
                return Err(Error::Contract {
                    what: format!("position {p} pruned by two modules"),
                });
            }
            seen[p as usize] = true;
            depth[p as usize] = r.stp_index as u8;
        }
    }
    Ok(depth)
}

pub fn depth_histogram(depth: &[u8], num_stps: usize) -> Vec<usize> {
    let mut hist = vec![0usize; num_stps + 1];
    for &d in depth {
        hist[d as usize] += 1;
    }
    hist
}

/// Text form: a header of grid extents and module count, then one line
/// of depth values per (x, y) row.
pub fn write_depth_text(
    w: &mut dyn Write,
    depth: &[u8],
    grid: [usize; 3],
    num_stps: usize,
) -> Result<()> {
    let [gx, gy, gz] = grid;
    if depth.len() != gx * gy * gz {
        return Err(Error::Data {
            what: format!("{} depth values for grid {grid:?}", depth.len()),
        });
    }
    writeln!(w, "{gx} {gy} {gz} {num_stps}")?;
    for x in 0..gx {
        for y in 0..gy {
            let row = &depth[(x * gy + y) * gz..(x * gy + y + 1) * gz];
            let line: Vec<String> = row.iter().map(|d| d.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

/// Plain PGM rendering, x-slices laid out left to right; tokens pruned
/// later (or never) are darker.
pub fn write_depth_pgm(
    w: &mut dyn Write,
    depth: &[u8],
    grid: [usize; 3],
    num_stps: usize,
) -> Result<()> {
    let [gx, gy, gz] = grid;
    if depth.len() != gx * gy * gz {
        return Err(Error::Data {
            what: format!("{} depth values for grid {grid:?}", depth.len()),
        });
    }
    let gray = |d: u8| -> u32 {
        if num_stps == 0 {
            0
        } else {
            255 - (255 * d as u32) / num_stps as u32
        }
    };
    writeln!(w, "P2")?;
    writeln!(w, "{} {}", gx * gz, gy)?;
    writeln!(w, "255")?;
    for y in 0..gy {
        let mut line = Vec::with_capacity(gx * gz);
        for x in 0..gx {
            for z in 0..gz {
                line.push(gray(depth[(x * gy + y) * gz + z]).to_string());
            }
        }
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}
