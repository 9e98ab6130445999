//! Seeded random inputs.

use std::collections::BTreeSet;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use sparsecast::sparse::SparseTensor;
use sparsecast::tensor::{ConvSpec, DenseTensor, KernelWeights};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut StdRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_tensor(rng: &mut StdRng, shape: &[usize]) -> DenseTensor<f64> {
    let n = shape.iter().product();
    DenseTensor::new(shape.to_vec(), random_vec(rng, n)).unwrap()
}

pub fn random_weights(rng: &mut StdRng, spec: ConvSpec) -> KernelWeights<f64> {
    let mut w = KernelWeights::<f64>::zeros(spec);
    for v in w.values_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    w
}

/// Every site of `shape` is active with probability `density`.
pub fn random_sparse(r: &mut StdRng, shape: [usize; 4], channels: usize, density: f64) -> SparseTensor<f64> {
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    for b in 0..shape[0] {
        for t in 0..shape[1] {
            for h in 0..shape[2] {
                for w in 0..shape[3] {
                    if r.gen_bool(density) {
                        coords.push([b as u32, t as u32, h as u32, w as u32]);
                        for _ in 0..channels {
                            feats.push(r.gen_range(-1.0..1.0));
                        }
                    }
                }
            }
        }
    }
    SparseTensor::new(coords, feats, channels, shape).unwrap()
}

/// `n` distinct sites (fewer if the grid is smaller), one channel of ones.
pub fn random_pattern(r: &mut StdRng, shape: [usize; 4], n: usize) -> SparseTensor<f64> {
    let mut set = BTreeSet::new();
    let total: usize = shape.iter().product();
    while set.len() < n.min(total) {
        set.insert([
            r.gen_range(0..shape[0]) as u32,
            r.gen_range(0..shape[1]) as u32,
            r.gen_range(0..shape[2]) as u32,
            r.gen_range(0..shape[3]) as u32,
        ]);
    }
    let coords: Vec<_> = set.into_iter().collect();
    let feats = vec![1.0; coords.len()];
    SparseTensor::new(coords, feats, 1, shape).unwrap()
}

/// History `[B, C, T, H, W]` in which whole sites switch on or off, like
/// traffic on a road cell.
pub fn random_history(r: &mut StdRng, shape: [usize; 5], density: f64) -> DenseTensor<f64> {
    let [b, c, t, h, w] = shape;
    let mut x = DenseTensor::zeros(&shape);
    let data = x.data_mut();
    for bi in 0..b {
        for site in 0..h * w {
            if r.gen_bool(density) {
                for ch in 0..c * t {
                    data[(bi * c * t + ch) * h * w + site] = r.gen_range(-1.0..1.0);
                }
            }
        }
    }
    x
}
