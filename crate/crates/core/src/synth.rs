//! Synthetic volumes for training and evaluation: each sample paints a
//! handful of ellipsoid blobs per foreground class onto an empty grid,
//! then renders an intensity image as a box-smoothed copy of the label
//! field plus Gaussian noise, rescaled to [-1, 1]. Everything is a pure
//! function of (seed, sample index).

use crate::config::Config;
use crate::params::derived_rng;
use crate::tensor::{Elem, TensorData};
use rand::Rng;
use rand_distr::{Distribution, Normal};

const NOISE_STD: f64 = 0.1;
const MIN_BLOB_FRACTION: f64 = 0.01;
const MAX_BLOB_FRACTION: f64 = 0.10;

pub struct VolumeSample<T: Elem> {
    /// Intensity volume `[in_chans, H, W, D]`, values in [-1, 1].
    pub image: TensorData<T>,
    /// Per-voxel class index, row-major over `[H, W, D]`.
    pub labels: Vec<u8>,
}

fn paint_blobs(
    labels: &mut [u8],
    extents: [usize; 3],
    class: u8,
    rng: &mut impl Rng,
) {
    let [ex, ey, ez] = extents;
    let volume = (ex * ey * ez) as f64;
    let blobs = rng.gen_range(1..=3usize);
    for _ in 0..blobs {
        let fraction = rng.gen_range(MIN_BLOB_FRACTION..=MAX_BLOB_FRACTION);
        let rho1 = rng.gen_range(0.6..1.6);
        let rho2 = rng.gen_range(0.6..1.6);
        // Ellipsoid volume 4/3 pi a b c with a = r*rho1, b = r*rho2, c = r.
        let r = (3.0 * fraction * volume / (4.0 * std::f64::consts::PI * rho1 * rho2)).cbrt();
        let (a, b, c) = (r * rho1, r * rho2, r);
        let cx = rng.gen_range(0.0..ex as f64);
        let cy = rng.gen_range(0.0..ey as f64);
        let cz = rng.gen_range(0.0..ez as f64);
        for x in 0..ex {
            let dx = (x as f64 + 0.5 - cx) / a;
            for y in 0..ey {
                let dy = (y as f64 + 0.5 - cy) / b;
                for z in 0..ez {
                    let dz = (z as f64 + 0.5 - cz) / c;
                    if dx * dx + dy * dy + dz * dz <= 1.0 {
                        labels[(x * ey + y) * ez + z] = class;
                    }
                }
            }
        }
    }
}

/// One pass of a 3x3x3 box filter with zero padding.
fn box_smooth(field: &[f64], extents: [usize; 3]) -> Vec<f64> {
    let [ex, ey, ez] = extents;
    let idx = |x: usize, y: usize, z: usize| (x * ey + y) * ez + z;
    let mut out = vec![0.0; field.len()];
    for x in 0..ex {
        for y in 0..ey {
            for z in 0..ez {
                let mut sum = 0.0;
                for dx in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dz in -1i64..=1 {
                            let (nx, ny, nz) =
                                (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if nx >= 0
                                && ny >= 0
                                && nz >= 0
                                && (nx as usize) < ex
                                && (ny as usize) < ey
                                && (nz as usize) < ez
                            {
                                sum += field[idx(nx as usize, ny as usize, nz as usize)];
                            }
                        }
                    }
                }
                out[idx(x, y, z)] = sum / 27.0;
            }
        }
    }
    out
}

/// Generate sample `index` of the synthetic stream for this config.
pub fn make_sample<T: Elem>(cfg: &Config, index: u64) -> VolumeSample<T> {
    let extents = cfg.encoder.extents;
    let classes = cfg.decoder.num_classes;
    let voxels = extents[0] * extents[1] * extents[2];
    let mut rng = derived_rng(cfg.seed, &format!("synth.sample{index}"));

    let mut labels = vec![0u8; voxels];
    for class in 1..classes {
        paint_blobs(&mut labels, extents, class as u8, &mut rng);
    }

    // Foreground classes get evenly spaced intensities above background.
    let signal: Vec<f64> = labels
        .iter()
        .map(|&l| l as f64 / (classes - 1) as f64)
        .collect();
    let smooth = box_smooth(&signal, extents);

    let noise = Normal::new(0.0, NOISE_STD).expect("constant std is valid");
    let mut image = Vec::with_capacity(cfg.encoder.in_chans * voxels);
    for _chan in 0..cfg.encoder.in_chans {
        let noisy: Vec<f64> = smooth.iter().map(|&v| v + noise.sample(&mut rng)).collect();
        let lo = noisy.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = noisy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        image.extend(noisy.iter().map(|&v| T::from_f64(2.0 * (v - lo) / span - 1.0)));
    }
    let image = TensorData::new(
        vec![cfg.encoder.in_chans, extents[0], extents[1], extents[2]],
        image,
    )
    .expect("image buffer matches its shape");
    VolumeSample { image, labels }
}
