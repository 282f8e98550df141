//! Inputs and baselines shared by the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semfuse::{AttentionProjection, FeatureMap, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn feature_map(rng: &mut impl Rng, c: usize, side: usize) -> FeatureMap {
    let data = (0..c * side * side)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    Tensor::new(vec![1, c, side, side], data).unwrap()
}

pub fn projection(rng: &mut impl Rng, c: usize) -> AttentionProjection {
    let mut w = || {
        let data = (0..c * c)
            .map(|_| rng.gen_range(-1.0..1.0) / c as f64)
            .collect();
        Tensor::new(vec![c, c], data).unwrap()
    };
    AttentionProjection {
        wq: w(),
        wk: w(),
        wv: w(),
        bq: None,
        bk: None,
        bv: None,
    }
}

/// Dot-product attention `softmax_rows(Q Kᵀ) V` with its `N × N` score
/// matrix, the quadratic baseline the efficient form avoids.
pub fn dot_product_attention(f: &FeatureMap, p: &AttentionProjection) -> Vec<f64> {
    let (c, n) = (f.shape()[1], f.shape()[2] * f.shape()[3]);
    let x = f.data();
    let project = |w: &Tensor| {
        let w = w.data();
        let mut out = vec![0.0; n * c];
        for t in 0..n {
            for j in 0..c {
                out[t * c + j] = (0..c).map(|i| x[i * n + t] * w[i * c + j]).sum();
            }
        }
        out
    };
    let (q, k, v) = (project(&p.wq), project(&p.wk), project(&p.wv));
    let mut out = vec![0.0; n * c];
    let mut scores = vec![0.0; n];
    for t in 0..n {
        for (s, score) in scores.iter_mut().enumerate() {
            *score = (0..c).map(|j| q[t * c + j] * k[s * c + j]).sum();
        }
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores
            .iter_mut()
            .map(|s| {
                *s = (*s - m).exp();
                *s
            })
            .sum();
        for (s, score) in scores.iter().enumerate() {
            for j in 0..c {
                out[t * c + j] += score / z * v[s * c + j];
            }
        }
    }
    out
}
