//! Random models and sequences for property tests and verification suites.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::Matrix;
use crate::lt::{Activation, HeadParams, Layer, LtParams, MlpParams, TokenSeq};

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sizes agree")
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

/// A dense Gaussian model; `heads[l]` is the head count of layer `l`.
///
/// Square maps get standard deviation `scale / sqrt(d)`, embeddings and
/// phi tables `scale`. MLP width is `d`, output dimension 2.
pub fn random_model<R: Rng + ?Sized>(
    rng: &mut R,
    s_vocab: usize,
    d: usize,
    delta: usize,
    tau: usize,
    heads: &[usize],
    scale: f64,
) -> LtParams {
    let hs = scale / (d as f64).sqrt();
    let layers = heads
        .iter()
        .map(|&h| Layer {
            heads: (0..h)
                .map(|_| HeadParams {
                    kq: gaussian_matrix(rng, d, d, hs),
                    v: gaussian_matrix(rng, d, d, hs),
                    phi: gaussian_vec(rng, tau + 1, scale),
                })
                .collect(),
            mlp: MlpParams {
                a: gaussian_matrix(rng, d, d, hs),
                bias: gaussian_vec(rng, d, scale),
                b: gaussian_matrix(rng, d, d, hs),
                activation: Activation::Relu,
            },
        })
        .collect();
    LtParams {
        s_vocab,
        d,
        delta,
        tau,
        layers,
        embed: gaussian_matrix(rng, s_vocab, d, scale),
        pos: gaussian_matrix(rng, delta, d, scale),
        unembed: gaussian_matrix(rng, 2, d, hs),
    }
}

/// Uniform iid tokens over `{1..s_vocab}`.
pub fn random_seq<R: Rng + ?Sized>(rng: &mut R, s_vocab: usize, len: usize) -> TokenSeq {
    TokenSeq::new((0..len).map(|_| rng.random_range(1..=s_vocab)).collect()).expect("nonempty, ids >= 1")
}

/// One-layer, one-head model with one-hot token and residue features whose
/// key-query entries and phi offsets are `0` or `step`, so every attainable
/// logit is a multiple of `step`. Value and readout maps are Gaussian; the
/// output dimension is 2.
pub fn grid_model<R: Rng + ?Sized>(rng: &mut R, s_vocab: usize, delta: usize, tau: usize, step: f64) -> LtParams {
    let d = s_vocab + delta;
    let mut m = LtParams::zeros(s_vocab, d, delta, tau, &[1], 2);
    for t in 0..s_vocab {
        m.embed.set(t, t, 1.0);
    }
    for r in 0..delta {
        m.pos.set(r, s_vocab + r, 1.0);
    }
    for r in 0..d {
        for c in 0..d {
            m.layers[0].heads[0].kq.set(r, c, step * rng.random_range(0..=1) as f64);
        }
    }
    m.layers[0].heads[0].phi = (0..=tau).map(|_| step * rng.random_range(0..=1) as f64).collect();
    m.layers[0].heads[0].v = gaussian_matrix(rng, d, d, 1.0);
    m.unembed = gaussian_matrix(rng, 2, d, 0.5);
    m
}

/// Two-layer model whose output is the token histogram of the whole input:
/// identity embedding, value and readout maps, zero key-query maps and no
/// positional information.
pub fn histogram_readout(s_vocab: usize) -> LtParams {
    let mut m = LtParams::zeros(s_vocab, s_vocab, 1, 0, &[1, 1], s_vocab);
    m.embed = Matrix::identity(s_vocab);
    m.layers[0].heads[0].v = Matrix::identity(s_vocab);
    m.unembed = Matrix::identity(s_vocab);
    m
}
