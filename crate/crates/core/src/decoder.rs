//! Dense decoder: lift completed tokens onto the coarse voxel grid, then
//! upsample back to full resolution through conv stages that mix three
//! streams per stage: the running trunk, a fresh projection of the token
//! grid, and (at full resolution only) a shallow conv of the raw input.

use crate::config::{DecoderConfig, EncoderConfig};
use crate::encoder::TokenSeq;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Elem;

/// Reinterpret a row-major token sequence `[N, C]` as a channel-first
/// volume `[C, gx, gy, gz]` with `N = gx*gy*gz`. Token `t` covers voxel
/// `(t / (gy*gz), (t / gz) % gy, t % gz)`.
pub fn tokens_to_volume<T: Elem>(
    g: &mut Graph<T>,
    tokens: Var,
    grid: [usize; 3],
) -> Result<Var> {
    let sh = g.shape(tokens).to_vec();
    if sh.len() != 2 {
        return Err(Error::Shape {
            op: "tokens_to_volume",
            detail: format!("expected rank-2 tokens, got {sh:?}"),
        });
    }
    let n = grid[0] * grid[1] * grid[2];
    if sh[0] != n {
        return Err(Error::Shape {
            op: "tokens_to_volume",
            detail: format!("{} tokens cannot fill grid {grid:?} ({n} cells)", sh[0]),
        });
    }
    let c = sh[1];
    let cube = g.reshape(tokens, vec![grid[0], grid[1], grid[2], c])?;
    g.permute(cube, &[3, 0, 1, 2])
}

/// Inverse of [`tokens_to_volume`].
pub fn volume_to_tokens<T: Elem>(g: &mut Graph<T>, volume: Var) -> Result<Var> {
    let sh = g.shape(volume).to_vec();
    if sh.len() != 4 {
        return Err(Error::Shape {
            op: "volume_to_tokens",
            detail: format!("expected rank-4 volume, got {sh:?}"),
        });
    }
    let n = sh[1] * sh[2] * sh[3];
    let cube = g.permute(volume, &[1, 2, 3, 0])?;
    g.reshape(cube, vec![n, sh[0]])
}

/// Stage input width: previous stage output (or the trunk), plus the tap
/// projection for this stage, plus the raw-input skip at the last stage.
fn stage_in_width(channels: &[usize], skip_channels: usize, s: usize) -> usize {
    let stages = channels.len();
    let prev = if s == 1 { channels[0] } else { channels[s - 2] };
    let mut w = prev + channels[s - 1];
    if s == stages {
        w += skip_channels;
    }
    w
}

pub fn register_decoder<T: Elem>(
    store: &mut ParamStore<T>,
    ecfg: &EncoderConfig,
    dcfg: &DecoderConfig,
    seed: u64,
) -> Result<()> {
    let c = ecfg.embed;
    let ch = &dcfg.channels;
    let stages = ch.len();
    // Token taps: stage 0 feeds the trunk, stage s feeds the concat at s.
    for s in 0..=stages {
        let width = if s == 0 { ch[0] } else { ch[s - 1] };
        store.add_normal(&format!("dec.tap{s}.w"), vec![c, width], 0.02, seed)?;
        store.add_zeros(&format!("dec.tap{s}.b"), vec![width])?;
    }
    for s in 1..=stages {
        let cin = stage_in_width(ch, dcfg.skip_channels, s);
        let cout = ch[s - 1];
        store.add_he(&format!("dec.stage{s}.w"), vec![cout, cin, 3, 3, 3], cin * 27, seed)?;
        store.add_zeros(&format!("dec.stage{s}.b"), vec![cout])?;
    }
    store.add_he(
        "dec.skip.w",
        vec![dcfg.skip_channels, ecfg.in_chans, 3, 3, 3],
        ecfg.in_chans * 27,
        seed,
    )?;
    store.add_zeros("dec.skip.b", vec![dcfg.skip_channels])?;
    // Zero-initialized head: the first forward predicts a uniform class
    // distribution everywhere regardless of the rest of the net.
    store.add_zeros("dec.head.w", vec![dcfg.num_classes, ch[stages - 1], 1, 1, 1])?;
    store.add_zeros("dec.head.b", vec![dcfg.num_classes])?;
    Ok(())
}

fn tap<T: Elem>(
    g: &mut Graph<T>,
    tokens: Var,
    grid: [usize; 3],
    bound: &Bound,
    s: usize,
    ups: usize,
) -> Result<Var> {
    let w = bound.var(&format!("dec.tap{s}.w"))?;
    let b = bound.var(&format!("dec.tap{s}.b"))?;
    let proj = g.matmul(tokens, w)?;
    let proj = g.add_row(proj, b)?;
    let mut vol = tokens_to_volume(g, proj, grid)?;
    for _ in 0..ups {
        vol = g.upsample2(vol)?;
    }
    Ok(vol)
}

/// Decode completed tokens to per-voxel class logits `[classes, H, W, D]`
/// where `[H, W, D]` is the raw input resolution.
pub fn decode<T: Elem>(
    g: &mut Graph<T>,
    completed: &TokenSeq,
    raw: Var,
    ecfg: &EncoderConfig,
    dcfg: &DecoderConfig,
    bound: &Bound,
) -> Result<Var> {
    if completed.has_cls {
        return Err(Error::Contract { what: "decode expects the CLS row to be dropped".into() });
    }
    let grid = ecfg.grid();
    let n = grid[0] * grid[1] * grid[2];
    if completed.positions.len() != n
        || completed.positions.iter().enumerate().any(|(i, &p)| p != i as i64)
    {
        return Err(Error::Contract {
            what: "decode expects tokens in row-major grid order".into(),
        });
    }
    let stages = dcfg.channels.len();
    let raw_sh = g.shape(raw).to_vec();
    let scale = 1usize << stages;
    let want = [ecfg.in_chans, grid[0] * scale, grid[1] * scale, grid[2] * scale];
    if raw_sh != want {
        return Err(Error::Shape {
            op: "decode",
            detail: format!("raw volume {raw_sh:?} does not match {want:?}"),
        });
    }

    let mut x = tap(g, completed.tokens, grid, bound, 0, 0)?;
    for s in 1..=stages {
        x = g.upsample2(x)?;
        let t = tap(g, completed.tokens, grid, bound, s, s)?;
        let mut parts = vec![x, t];
        if s == stages {
            let sw = bound.var("dec.skip.w")?;
            let sb = bound.var("dec.skip.b")?;
            let skip = g.conv3d(raw, sw, sb)?;
            parts.push(g.gelu(skip));
        }
        let cat = g.concat(&parts, 0)?;
        let w = bound.var(&format!("dec.stage{s}.w"))?;
        let b = bound.var(&format!("dec.stage{s}.b"))?;
        let conv = g.conv3d(cat, w, b)?;
        x = g.gelu(conv);
    }
    let hw = bound.var("dec.head.w")?;
    let hb = bound.var("dec.head.b")?;
    g.conv3d(x, hw, hb)
}
