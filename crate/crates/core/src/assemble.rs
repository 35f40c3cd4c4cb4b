//! Token assembly: rebuild the full-length sequence from the sparse encoder
//! output plus every batch of pruned tokens, tag reinserted tokens with the
//! block vector of the module that pruned them, add fixed sin-cos position
//! embeddings, and refine with completion blocks.

use crate::encoder::{attention_mlp, BlockVars, TokenSeq};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Bound, ParamStore};
use crate::prune::PruneRecord;
use crate::tensor::{Elem, TensorData};

/// Fixed sinusoidal position table: row `p`, channel pair `(2j, 2j+1)` is
/// `(sin(p*w_j), cos(p*w_j))` with `w_j = 10000^(-2j/C)`.
pub fn sincos_pos_embed<T: Elem>(n: usize, c: usize) -> Result<TensorData<T>> {
    if c % 2 != 0 {
        return Err(Error::Config { what: format!("sin-cos table needs an even dim, got {c}") });
    }
    let mut data = Vec::with_capacity(n * c);
    for p in 0..n {
        for j in 0..c / 2 {
            let omega = 10000f64.powf(-2.0 * j as f64 / c as f64);
            let angle = p as f64 * omega;
            data.push(T::from_f64(angle.sin()));
            data.push(T::from_f64(angle.cos()));
        }
    }
    TensorData::new(vec![n, c], data)
}

pub fn register_mta<T: Elem>(
    store: &mut ParamStore<T>,
    num_stps: usize,
    depth: usize,
    c: usize,
    seed: u64,
) -> Result<()> {
    for k in 0..num_stps {
        store.add_normal(&blk_name(k), vec![c], 0.02, seed)?;
    }
    for d in 0..depth {
        crate::encoder::register_block(store, &mta_block_prefix(d), c, seed)?;
    }
    Ok(())
}

pub fn blk_name(k: usize) -> String {
    format!("mta.blk{k}")
}

pub fn mta_block_prefix(d: usize) -> String {
    format!("mta.block{d:02}")
}

fn positions_as_rows(positions: &[i64], n: usize) -> Result<Vec<usize>> {
    positions
        .iter()
        .map(|&p| {
            if p < 0 || p as usize >= n {
                Err(Error::Index { what: format!("grid position {p} outside [0, {n})") })
            } else {
                Ok(p as usize)
            }
        })
        .collect()
}

/// Scatter the surviving tokens and every pruned batch back into one
/// length-`n` sequence in row-major grid order. A token pruned by module
/// `k` comes back with that module's block vector added; survivors come
/// back unmodified. Every position must be written exactly once.
pub fn assemble<T: Elem>(
    g: &mut Graph<T>,
    records: &[PruneRecord<T>],
    z_l: &TokenSeq,
    n: usize,
    bound: &Bound,
) -> Result<TokenSeq> {
    if z_l.has_cls {
        return Err(Error::Contract { what: "assemble requires the CLS row to be dropped".into() });
    }
    // Coverage check before any graph work.
    let mut written = vec![0usize; n];
    let mut count_positions = |positions: &[i64]| -> Result<()> {
        for &p in positions {
            if p < 0 || p as usize >= n {
                return Err(Error::Index { what: format!("grid position {p} outside [0, {n})") });
            }
            written[p as usize] += 1;
        }
        Ok(())
    };
    count_positions(&z_l.positions)?;
    for r in records {
        count_positions(&r.pruned_positions)?;
    }
    let missing: Vec<usize> = (0..n).filter(|&p| written[p] == 0).collect();
    let duplicate: Vec<usize> = (0..n).filter(|&p| written[p] > 1).collect();
    if !missing.is_empty() || !duplicate.is_empty() {
        return Err(Error::Assembly { missing, duplicate });
    }

    let survivor_rows = positions_as_rows(&z_l.positions, n)?;
    let mut out = g.scatter_rows(z_l.tokens, &survivor_rows, n)?;
    for r in records {
        let pruned = match r.pruned {
            Some(v) => v,
            None => continue,
        };
        let blk = bound.var(&blk_name(r.stp_index))?;
        let tagged = g.add_row(pruned, blk)?;
        let rows = positions_as_rows(&r.pruned_positions, n)?;
        let scattered = g.scatter_rows(tagged, &rows, n)?;
        out = g.add(out, scattered)?;
    }
    Ok(TokenSeq { tokens: out, positions: (0..n as i64).collect(), has_cls: false })
}

/// Add the fixed position table and run the completion blocks.
pub fn complete<T: Elem>(
    g: &mut Graph<T>,
    assembled: &TokenSeq,
    depth: usize,
    heads: usize,
    bound: &Bound,
) -> Result<TokenSeq> {
    let sh = g.shape(assembled.tokens).to_vec();
    let (n, c) = (sh[0], sh[1]);
    let epos = g.constant(sincos_pos_embed::<T>(n, c)?);
    let mut x = g.add(assembled.tokens, epos)?;
    for d in 0..depth {
        let vars = BlockVars::from_bound(bound, &mta_block_prefix(d))?;
        x = attention_mlp(g, x, &vars, heads)?;
    }
    Ok(TokenSeq { tokens: x, positions: assembled.positions.clone(), has_cls: false })
}
