//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use recprune::{ModelConfig, Tensor, TokenId, TransformerModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Desk geometry shrunk to `layers` layers, optionally with an untied head.
pub fn desk(layers: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: layers,
        ..ModelConfig::desk(vocab)
    }
}

pub fn tiny(layers: usize, heads: usize, d_k: usize, d_ff: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: layers,
        n_heads: heads,
        d_k,
        d_model: heads * d_k,
        d_ff,
        vocab_size: vocab,
        max_seq_len: 12,
        ..ModelConfig::desk(vocab)
    }
}

/// A model whose every parameter is redrawn: matrices and biases from
/// N(0, scale²), norm weights from 1 + N(0, scale²). Trained-looking
/// magnitudes make the oracles sensitive to mistakes that a near-zero init hides.
pub fn randomized(cfg: &ModelConfig, seed: u64, scale: f64) -> TransformerModel {
    let mut m = TransformerModel::init(cfg, seed).unwrap();
    let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
    let mut r = rng(seed ^ 0x5eed);
    let normal = Normal::new(0.0, scale).unwrap();
    for (name, t) in names.iter().zip(m.params_mut()) {
        let shift = if name.ends_with("norm") { 1.0 } else { 0.0 };
        let data = (0..t.len()).map(|_| shift + normal.sample(&mut r)).collect();
        *t = Tensor::new(t.shape().to_vec(), data).unwrap();
    }
    m
}

pub fn random_seq(r: &mut impl Rng, min_len: usize, max_len: usize, vocab: usize) -> Vec<TokenId> {
    let len = r.random_range(min_len..=max_len);
    (0..len).map(|_| r.random_range(0..vocab) as TokenId).collect()
}

pub fn random_seqs(r: &mut impl Rng, n: usize, min_len: usize, max_len: usize, vocab: usize) -> Vec<Vec<TokenId>> {
    (0..n).map(|_| random_seq(r, min_len, max_len, vocab)).collect()
}

pub fn refs(seqs: &[Vec<TokenId>]) -> Vec<&[TokenId]> {
    seqs.iter().map(Vec::as_slice).collect()
}

pub fn random_tensor(r: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let normal = Normal::new(0.0, scale).unwrap();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(r)).collect()).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with both norms below `floor` counting as agreement.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < floor {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Sets `t[r][c] = 0` for every row in `rows` of a matrix.
pub fn zero_rows(t: &mut Tensor, rows: impl IntoIterator<Item = usize>) {
    let c = t.cols();
    let mut data = t.data().to_vec();
    for r in rows {
        data[r * c..(r + 1) * c].iter_mut().for_each(|v| *v = 0.0);
    }
    *t = Tensor::new(t.shape().to_vec(), data).unwrap();
}

/// Sets column `c` of a matrix (or entry `c` of a vector) to zero for every `c` in `cols`.
pub fn zero_cols(t: &mut Tensor, cols: impl IntoIterator<Item = usize>) {
    let n = t.cols();
    let mut data = t.data().to_vec();
    for c in cols {
        data.iter_mut().skip(c).step_by(n).for_each(|v| *v = 0.0);
    }
    *t = Tensor::new(t.shape().to_vec(), data).unwrap();
}
