//! Sliding-window inference over volumes larger than the model's native
//! window: tiles at half-window stride (last tile clamped to the far
//! edge), per-voxel class probabilities averaged uniformly across every
//! tile that covers the voxel, then argmax with ties going to the lower
//! class index.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::forward;
use crate::params::{derived_rng, ParamStore};
use crate::tensor::{Elem, TensorData};

/// Tile origins along one axis: stride of `win / 2` from zero, plus a
/// final tile flush with the far edge when the stride pattern falls short.
pub fn tile_origins(vol: usize, win: usize) -> Vec<usize> {
    let stride = (win / 2).max(1);
    let mut out = Vec::new();
    let mut pos = 0;
    while pos + win <= vol {
        out.push(pos);
        pos += stride;
    }
    let last = vol - win;
    if *out.last().expect("win <= vol gives at least origin 0") != last {
        out.push(last);
    }
    out
}

fn argmax_low_wins(probs: &[f64]) -> u8 {
    let mut best = 0usize;
    for (c, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = c;
        }
    }
    best as u8
}

/// Segment a volume `[in_chans, X, Y, Z]` with a trained model. The
/// config's inference window must match the encoder extents the
/// parameters were built for.
pub fn sliding_window_infer<T: Elem>(
    store: &ParamStore<T>,
    image: &TensorData<T>,
    cfg: &Config,
) -> Result<Vec<u8>> {
    let win = cfg.infer.window;
    if win != cfg.encoder.extents {
        return Err(Error::Config {
            what: format!(
                "infer.window {win:?} must equal encoder.extents {:?}",
                cfg.encoder.extents
            ),
        });
    }
    let sh = image.shape();
    if sh.len() != 4 || sh[0] != cfg.encoder.in_chans {
        return Err(Error::Shape {
            op: "sliding_window_infer",
            detail: format!("expected [{}, X, Y, Z], got {sh:?}", cfg.encoder.in_chans),
        });
    }
    let vol = [sh[1], sh[2], sh[3]];
    for a in 0..3 {
        if vol[a] < win[a] {
            return Err(Error::Config {
                what: format!("volume {vol:?} is smaller than the window {win:?} on axis {a}"),
            });
        }
    }

    let classes = cfg.decoder.num_classes;
    let cin = cfg.encoder.in_chans;
    let voxels = vol[0] * vol[1] * vol[2];
    let mut prob_sum = vec![0.0f64; classes * voxels];
    let mut cover = vec![0u32; voxels];

    let vox = |x: usize, y: usize, z: usize| (x * vol[1] + y) * vol[2] + z;
    let origins: [Vec<usize>; 3] = [
        tile_origins(vol[0], win[0]),
        tile_origins(vol[1], win[1]),
        tile_origins(vol[2], win[2]),
    ];
    for &ox in &origins[0] {
        for &oy in &origins[1] {
            for &oz in &origins[2] {
                // Crop the tile out of the full volume.
                let mut tile = Vec::with_capacity(cin * win[0] * win[1] * win[2]);
                for c in 0..cin {
                    let base = c * voxels;
                    for x in 0..win[0] {
                        for y in 0..win[1] {
                            let row = base + vox(ox + x, oy + y, oz);
                            tile.extend_from_slice(&image.data()[row..row + win[2]]);
                        }
                    }
                }
                let tile =
                    TensorData::new(vec![cin, win[0], win[1], win[2]], tile)?;
                let mut g: Graph<T> = Graph::new();
                let bound = store.bind(&mut g);
                let vol_var = g.constant(tile);
                let mut rng = derived_rng(cfg.seed, "infer");
                let out = forward(&mut g, vol_var, None, cfg, &bound, &mut rng, false, None)?;
                let flat = g.reshape(out.logits, vec![classes, win[0] * win[1] * win[2]])?;
                let probs = g.softmax(flat, 0, 1.0)?;
                let pv = g.value(probs).data();
                let tile_voxels = win[0] * win[1] * win[2];
                for x in 0..win[0] {
                    for y in 0..win[1] {
                        for z in 0..win[2] {
                            let t = (x * win[1] + y) * win[2] + z;
                            let v = vox(ox + x, oy + y, oz + z);
                            for c in 0..classes {
                                prob_sum[c * voxels + v] += pv[c * tile_voxels + t].to_f64();
                            }
                            cover[v] += 1;
                        }
                    }
                }
            }
        }
    }

    let mut mask = vec![0u8; voxels];
    let mut scratch = vec![0.0f64; classes];
    for v in 0..voxels {
        debug_assert!(cover[v] > 0, "tiling must cover every voxel");
        for c in 0..classes {
            scratch[c] = prob_sum[c * voxels + v] / cover[v] as f64;
        }
        mask[v] = argmax_low_wins(&scratch);
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::register_model;

    #[test]
    fn origins_cover_the_axis_with_a_clamped_tail() {
        assert_eq!(tile_origins(32, 32), vec![0]);
        assert_eq!(tile_origins(48, 32), vec![0, 16]);
        assert_eq!(tile_origins(50, 32), vec![0, 16, 18]);
        assert_eq!(tile_origins(33, 32), vec![0, 1]);
        assert_eq!(tile_origins(64, 16), vec![0, 8, 16, 24, 32, 40, 48]);
    }

    #[test]
    fn ties_go_to_the_lower_class() {
        assert_eq!(argmax_low_wins(&[0.5, 0.5]), 0);
        assert_eq!(argmax_low_wins(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax_low_wins(&[0.2, 0.3, 0.5]), 2);
    }

    fn infer_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.encoder.extents = [8, 8, 8];
        cfg.encoder.patch = 4;
        cfg.encoder.embed = 8;
        cfg.encoder.heads = 2;
        cfg.encoder.layers = 2;
        cfg.encoder.stp_after = vec![1];
        cfg.decoder.channels = vec![3, 2];
        cfg.decoder.skip_channels = 1;
        cfg.infer.window = [8, 8, 8];
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn masks_are_bitwise_reproducible_and_in_range() {
        let cfg = infer_cfg();
        let mut store: ParamStore<f32> = ParamStore::new();
        register_model(&mut store, &cfg).unwrap();
        // A zero head would tie every class; make logits informative.
        for (i, v) in store.get_mut("dec.head.w").unwrap().data_mut().iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f32 - 5.0) * 0.3;
        }
        let image = TensorData::from_fn(vec![1, 12, 12, 12], |i| ((i as f32) * 0.17).sin());
        let a = sliding_window_infer(&store, &image, &cfg).unwrap();
        let b = sliding_window_infer(&store, &image, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12 * 12 * 12);
        assert!(a.iter().all(|&c| (c as usize) < cfg.decoder.num_classes));
        assert!(a.iter().any(|&c| c != a[0]), "mask is uniform, logits carry no signal");
    }

    #[test]
    fn undersized_volumes_are_rejected() {
        let cfg = infer_cfg();
        let mut store: ParamStore<f32> = ParamStore::new();
        register_model(&mut store, &cfg).unwrap();
        let image = TensorData::from_fn(vec![1, 8, 8, 4], |_| 0.0f32);
        match sliding_window_infer(&store, &image, &cfg) {
            Err(Error::Config { .. }) => {}
            other => panic!("expected a config error, got {other:?}"),
        }
        let mut mismatched = cfg.clone();
        mismatched.infer.window = [4, 4, 4];
        let ok_image = TensorData::from_fn(vec![1, 8, 8, 8], |_| 0.0f32);
        assert!(sliding_window_infer(&store, &ok_image, &mismatched).is_err());
    }
}
