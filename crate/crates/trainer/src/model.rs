//! Trainable softmax transformer with a hand-derived backward pass.
//!
//! Each layer: heads with logits `(Q y_i)·(K y_j) / sqrt(d)` plus an optional
//! relative bias, causal softmax, values `V y_j`, residual add, then a relu
//! MLP with residual. Layers below the last run at every position; the last
//! runs at the final position only, followed by a linear readout.

use lglab_core::linalg::{axpy, dot};
use lglab_core::lt::{Activation, HeadParams, Layer, LtParams, MlpParams};
use lglab_core::random::gaussian_matrix;
use lglab_core::{Error, Matrix, Result, TokenSeq};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ArchConfig, PeKind};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHead {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Logit bias for offsets `0..=tau`; empty unless the scheme is relative.
    pub rel: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLayer {
    pub heads: Vec<TrainHead>,
    pub a: Matrix,
    pub bias: Vec<f64>,
    pub b: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainModel {
    pub arch: ArchConfig,
    pub s_vocab: usize,
    pub out_dim: usize,
    pub embed: Matrix,
    /// `delta x d` for the periodic scheme, `0 x d` otherwise.
    pub pos: Matrix,
    pub layers: Vec<TrainLayer>,
    pub unembed: Matrix,
}

/// Optimizer group of a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Hidden,
    Embed,
}

/// Fan-in Gaussian initialization: hidden matrices have variance `1/fan_in`,
/// embeddings and positions unit variance, biases zero.
pub fn init_model<R: Rng + ?Sized>(arch: ArchConfig, s_vocab: usize, out_dim: usize, rng: &mut R) -> Result<TrainModel> {
    arch.validate()?;
    if s_vocab == 0 || out_dim == 0 {
        return Err(Error::Precondition("vocabulary and output sizes must be positive".into()));
    }
    let d = arch.d;
    let hs = 1.0 / (d as f64).sqrt();
    let rel_len = if matches!(arch.pe, PeKind::RelativeLocal { .. }) { arch.pe.tau() + 1 } else { 0 };
    let pos_rows = if matches!(arch.pe, PeKind::Periodic { .. }) { arch.pe.delta() } else { 0 };
    let embed = gaussian_matrix(rng, s_vocab, d, 1.0);
    let pos = gaussian_matrix(rng, pos_rows, d, 1.0);
    let layers = (0..arch.depth)
        .map(|l| {
            let n_heads = if l == 0 { arch.heads_l1 } else { 1 };
            let heads = (0..n_heads)
                .map(|_| TrainHead {
                    q: gaussian_matrix(rng, d, d, hs),
                    k: gaussian_matrix(rng, d, d, hs),
                    v: gaussian_matrix(rng, d, d, hs),
                    rel: vec![0.0; rel_len],
                })
                .collect();
            TrainLayer {
                heads,
                a: gaussian_matrix(rng, arch.mlp_width, d, hs),
                bias: vec![0.0; arch.mlp_width],
                b: gaussian_matrix(rng, d, arch.mlp_width, 1.0 / (arch.mlp_width as f64).sqrt()),
            }
        })
        .collect();
    let unembed = gaussian_matrix(rng, out_dim, d, hs);
    Ok(TrainModel { arch, s_vocab, out_dim, embed, pos, layers, unembed })
}

struct HeadCache {
    q: Vec<f64>,
    u: Vec<f64>,
    w: Vec<f64>,
    c: Vec<f64>,
}

struct LayerCache {
    queries: Vec<usize>,
    /// `heads[h][n]` for query `queries[n]`.
    heads: Vec<Vec<HeadCache>>,
    mid: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

struct Trace {
    /// `inputs[l]` are the inputs of layer `l` at every position.
    inputs: Vec<Vec<Vec<f64>>>,
    caches: Vec<LayerCache>,
    last: Vec<f64>,
    out: Vec<f64>,
}

fn outer_add(m: &mut Matrix, scale: f64, col: &[f64], row: &[f64]) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    for (r, &cv) in col.iter().enumerate() {
        if cv != 0.0 {
            axpy(&mut data[r * cols..(r + 1) * cols], scale * cv, row);
        }
    }
}

impl TrainModel {
    pub fn zeros_like(&self) -> TrainModel {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        TrainModel {
            arch: self.arch,
            s_vocab: self.s_vocab,
            out_dim: self.out_dim,
            embed: z(&self.embed),
            pos: z(&self.pos),
            layers: self
                .layers
                .iter()
                .map(|l| TrainLayer {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| TrainHead { q: z(&h.q), k: z(&h.k), v: z(&h.v), rel: vec![0.0; h.rel.len()] })
                        .collect(),
                    a: z(&l.a),
                    bias: vec![0.0; l.bias.len()],
                    b: z(&l.b),
                })
                .collect(),
            unembed: z(&self.unembed),
        }
    }

    /// Every parameter tensor with its optimizer group, in a fixed order.
    pub fn tensors(&self) -> Vec<(Group, &[f64])> {
        let mut out: Vec<(Group, &[f64])> = vec![(Group::Embed, self.embed.as_slice()), (Group::Embed, self.pos.as_slice())];
        for l in &self.layers {
            for h in &l.heads {
                out.push((Group::Hidden, h.q.as_slice()));
                out.push((Group::Hidden, h.k.as_slice()));
                out.push((Group::Hidden, h.v.as_slice()));
                out.push((Group::Embed, &h.rel));
            }
            out.push((Group::Hidden, l.a.as_slice()));
            out.push((Group::Hidden, &l.bias));
            out.push((Group::Hidden, l.b.as_slice()));
        }
        out.push((Group::Embed, self.unembed.as_slice()));
        out
    }

    /// Mutable counterpart of [`TrainModel::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(Group, &mut [f64])> {
        let mut out: Vec<(Group, &mut [f64])> =
            vec![(Group::Embed, self.embed.as_mut_slice()), (Group::Embed, self.pos.as_mut_slice())];
        for l in &mut self.layers {
            for h in &mut l.heads {
                out.push((Group::Hidden, h.q.as_mut_slice()));
                out.push((Group::Hidden, h.k.as_mut_slice()));
                out.push((Group::Hidden, h.v.as_mut_slice()));
                out.push((Group::Embed, &mut h.rel));
            }
            out.push((Group::Hidden, l.a.as_mut_slice()));
            out.push((Group::Hidden, &mut l.bias));
            out.push((Group::Hidden, l.b.as_mut_slice()));
        }
        out.push((Group::Embed, self.unembed.as_mut_slice()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn input_states(&self, x: &TokenSeq) -> Vec<Vec<f64>> {
        let delta = self.pos.rows();
        (0..x.len())
            .map(|i| {
                let mut y = self.embed.row(x.tokens()[i] - 1).to_vec();
                if delta > 0 {
                    axpy(&mut y, 1.0, self.pos.row(i % delta));
                }
                y
            })
            .collect()
    }

    fn layer_forward(&self, l: usize, inputs: &[Vec<f64>], queries: Vec<usize>) -> (Vec<Vec<f64>>, LayerCache) {
        let layer = &self.layers[l];
        let scale = 1.0 / (self.arch.d as f64).sqrt();
        let mut heads = Vec::with_capacity(layer.heads.len());
        let mut mid: Vec<Vec<f64>> = queries.iter().map(|&i| inputs[i].clone()).collect();
        for head in &layer.heads {
            let mut caches = Vec::with_capacity(queries.len());
            for (n, &i) in queries.iter().enumerate() {
                let q = head.q.matvec(&inputs[i]);
                let mut u = head.k.matvec_t(&q);
                u.iter_mut().for_each(|v| *v *= scale);
                let mut w: Vec<f64> =
                    (0..=i).map(|j| dot(&inputs[j], &u) + head.rel.get(i - j).copied().unwrap_or(0.0)).collect();
                let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in w.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let mut c = vec![0.0; self.arch.d];
                for (j, s) in w.iter_mut().enumerate() {
                    *s /= z;
                    axpy(&mut c, *s, &inputs[j]);
                }
                axpy(&mut mid[n], 1.0, &head.v.matvec(&c));
                caches.push(HeadCache { q, u, w, c });
            }
            heads.push(caches);
        }
        let mut outs = Vec::with_capacity(queries.len());
        let mut pre = Vec::with_capacity(queries.len());
        for m in &mid {
            let h: Vec<f64> = layer.a.matvec(m).iter().zip(&layer.bias).map(|(v, b)| v + b).collect();
            let r: Vec<f64> = h.iter().map(|v| v.max(0.0)).collect();
            let mut o = m.clone();
            axpy(&mut o, 1.0, &layer.b.matvec(&r));
            outs.push(o);
            pre.push(h);
        }
        (outs, LayerCache { queries, heads, mid, pre })
    }

    fn trace(&self, x: &TokenSeq) -> Trace {
        let t = x.len();
        let depth = self.layers.len();
        let mut inputs = vec![self.input_states(x)];
        let mut caches = Vec::with_capacity(depth);
        let mut last = Vec::new();
        for l in 0..depth {
            let queries: Vec<usize> = if l + 1 < depth { (0..t).collect() } else { vec![t - 1] };
            let (outs, cache) = self.layer_forward(l, &inputs[l], queries);
            caches.push(cache);
            if l + 1 < depth {
                inputs.push(outs);
            } else {
                last = outs.into_iter().next().expect("one query");
            }
        }
        let out = self.unembed.matvec(&last);
        Trace { inputs, caches, last, out }
    }

    fn check_input(&self, x: &TokenSeq) -> Result<()> {
        x.check_vocab(self.s_vocab)
    }

    /// Output at the final position.
    pub fn predict(&self, x: &TokenSeq) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).out)
    }

    /// Final-query attention weights of each last-layer head.
    pub fn attention_weights(&self, x: &TokenSeq) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let tr = self.trace(x);
        Ok(tr.caches.last().expect("at least one layer").heads.iter().map(|h| h[0].w.clone()).collect())
    }

    /// Accumulates parameter gradients for layer `l` and returns the
    /// gradient with respect to its inputs at every position.
    fn layer_backward(
        &self,
        l: usize,
        inputs: &[Vec<f64>],
        cache: &LayerCache,
        g_out: &[Vec<f64>],
        grad: &mut TrainLayer,
    ) -> Vec<Vec<f64>> {
        let layer = &self.layers[l];
        let d = self.arch.d;
        let scale = 1.0 / (d as f64).sqrt();
        let mut g_in = vec![vec![0.0; d]; inputs.len()];
        let mut g_mid = Vec::with_capacity(cache.queries.len());
        for (n, &i) in cache.queries.iter().enumerate() {
            let r: Vec<f64> = cache.pre[n].iter().map(|v| v.max(0.0)).collect();
            outer_add(&mut grad.b, 1.0, &g_out[n], &r);
            let mut g_h = layer.b.matvec_t(&g_out[n]);
            for (gh, h) in g_h.iter_mut().zip(&cache.pre[n]) {
                if *h <= 0.0 {
                    *gh = 0.0;
                }
            }
            outer_add(&mut grad.a, 1.0, &g_h, &cache.mid[n]);
            axpy(&mut grad.bias, 1.0, &g_h);
            let mut gm = g_out[n].clone();
            axpy(&mut gm, 1.0, &layer.a.matvec_t(&g_h));
            axpy(&mut g_in[i], 1.0, &gm);
            g_mid.push(gm);
        }
        for (h, head) in layer.heads.iter().enumerate() {
            let gh = &mut grad.heads[h];
            for (n, &i) in cache.queries.iter().enumerate() {
                let hc = &cache.heads[h][n];
                outer_add(&mut gh.v, 1.0, &g_mid[n], &hc.c);
                let g_c = head.v.matvec_t(&g_mid[n]);
                let g_w: Vec<f64> = (0..=i).map(|j| dot(&inputs[j], &g_c)).collect();
                let mean: f64 = hc.w.iter().zip(&g_w).map(|(w, g)| w * g).sum();
                let mut g_u = vec![0.0; d];
                for j in 0..=i {
                    let wj = hc.w[j];
                    let gs = wj * (g_w[j] - mean);
                    axpy(&mut g_in[j], wj, &g_c);
                    axpy(&mut g_in[j], gs, &hc.u);
                    axpy(&mut g_u, gs, &inputs[j]);
                    if let Some(gr) = gh.rel.get_mut(i - j) {
                        *gr += gs;
                    }
                }
                outer_add(&mut gh.k, scale, &hc.q, &g_u);
                let mut g_q = head.k.matvec(&g_u);
                g_q.iter_mut().for_each(|v| *v *= scale);
                outer_add(&mut gh.q, 1.0, &g_q, &inputs[i]);
                axpy(&mut g_in[i], 1.0, &head.q.matvec_t(&g_q));
            }
        }
        g_in
    }

    fn backward(&self, x: &TokenSeq, tr: &Trace, g_out: &[f64], grad: &mut TrainModel) {
        outer_add(&mut grad.unembed, 1.0, g_out, &tr.last);
        let mut g = vec![self.unembed.matvec_t(g_out)];
        for l in (0..self.layers.len()).rev() {
            g = self.layer_backward(l, &tr.inputs[l], &tr.caches[l], &g, &mut grad.layers[l]);
        }
        let delta = self.pos.rows();
        for (i, gi) in g.iter().enumerate() {
            axpy(grad.embed.row_mut(x.tokens()[i] - 1), 1.0, gi);
            if delta > 0 {
                axpy(grad.pos.row_mut(i % delta), 1.0, gi);
            }
        }
    }

    /// Mean over the batch of the mean squared error across output
    /// components, with its gradient.
    pub fn loss_and_grad(&self, batch: &[(TokenSeq, Vec<f64>)]) -> Result<(f64, TrainModel)> {
        let len = batch.first().map(|(x, _)| x.len()).ok_or_else(|| Error::Precondition("empty batch".into()))?;
        let mut grad = self.zeros_like();
        let mut loss = 0.0;
        let norm = 1.0 / (batch.len() * self.out_dim) as f64;
        for (x, target) in batch {
            if x.len() != len {
                return Err(Error::Precondition("batch sequences must share one length".into()));
            }
            if target.len() != self.out_dim {
                return Err(Error::Dimension(format!("target has {} entries, model outputs {}", target.len(), self.out_dim)));
            }
            self.check_input(x)?;
            let tr = self.trace(x);
            let diff: Vec<f64> = tr.out.iter().zip(target).map(|(o, t)| o - t).collect();
            loss += diff.iter().map(|v| v * v).sum::<f64>() * norm;
            let g_out: Vec<f64> = diff.iter().map(|v| 2.0 * v * norm).collect();
            self.backward(x, &tr, &g_out, &mut grad);
        }
        if !loss.is_finite() {
            return Err(Error::Divergence { step: 0, loss });
        }
        Ok((loss, grad))
    }

    /// Mean squared error without gradients.
    pub fn loss(&self, batch: &[(TokenSeq, Vec<f64>)]) -> Result<f64> {
        let mut loss = 0.0;
        for (x, target) in batch {
            let out = self.predict(x)?;
            loss += out.iter().zip(target).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / self.out_dim as f64;
        }
        Ok(loss / batch.len() as f64)
    }

    /// Limit-transformer view: `kq = K^T Q / sqrt(d)`, relative biases as
    /// `phi`, the periodic table as `pos` (one zero row otherwise).
    pub fn to_lt_params(&self) -> LtParams {
        let d = self.arch.d;
        let scale = 1.0 / (d as f64).sqrt();
        let tau = self.arch.pe.tau();
        let pos = if self.pos.rows() > 0 { self.pos.clone() } else { Matrix::zeros(1, d) };
        LtParams {
            s_vocab: self.s_vocab,
            d,
            delta: pos.rows(),
            tau,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| {
                            let mut phi = h.rel.clone();
                            phi.resize(tau + 1, 0.0);
                            HeadParams { kq: h.k.transpose().matmul(&h.q).scaled(scale), v: h.v.clone(), phi }
                        })
                        .collect(),
                    mlp: MlpParams { a: l.a.clone(), bias: l.bias.clone(), b: l.b.clone(), activation: Activation::Relu },
                })
                .collect(),
            embed: self.embed.clone(),
            pos,
            unembed: self.unembed.clone(),
        }
    }

    pub fn to_checkpoint_json(&self) -> String {
        let ck = Checkpoint {
            lt: self.to_lt_params(),
            pe_kind: self.arch.pe,
            factors: self
                .layers
                .iter()
                .map(|l| l.heads.iter().map(|h| QkFactors { q: h.q.clone(), k: h.k.clone() }).collect())
                .collect(),
        };
        serde_json::to_string_pretty(&ck).expect("checkpoint serialization cannot fail")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<TrainModel> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        ck.lt.validate()?;
        let lt = ck.lt;
        if ck.factors.len() != lt.layers.len() || ck.factors.iter().zip(&lt.layers).any(|(f, l)| f.len() != l.heads.len()) {
            return Err(Error::Schema("factors do not match the layer and head layout".into()));
        }
        let relative = matches!(ck.pe_kind, PeKind::RelativeLocal { .. });
        let periodic = matches!(ck.pe_kind, PeKind::Periodic { .. });
        if periodic && lt.delta != ck.pe_kind.delta() {
            return Err(Error::Schema("pe_kind delta disagrees with the positional table".into()));
        }
        let arch = ArchConfig {
            depth: lt.layers.len(),
            heads_l1: lt.layers[0].heads.len(),
            d: lt.d,
            mlp_width: lt.layers[0].mlp.width(),
            pe: ck.pe_kind,
        };
        arch.validate()?;
        let layers = lt
            .layers
            .iter()
            .zip(ck.factors)
            .map(|(l, f)| TrainLayer {
                heads: l
                    .heads
                    .iter()
                    .zip(f)
                    .map(|(h, qk)| TrainHead {
                        q: qk.q,
                        k: qk.k,
                        v: h.v.clone(),
                        rel: if relative { h.phi.clone() } else { Vec::new() },
                    })
                    .collect(),
                a: l.mlp.a.clone(),
                bias: l.mlp.bias.clone(),
                b: l.mlp.b.clone(),
            })
            .collect();
        Ok(TrainModel {
            arch,
            s_vocab: lt.s_vocab,
            out_dim: lt.unembed.rows(),
            embed: lt.embed.clone(),
            pos: if periodic { lt.pos.clone() } else { Matrix::zeros(0, lt.d) },
            layers,
            unembed: lt.unembed.clone(),
        })
    }
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    /// Coordinates compared (those with a gradient of magnitude >= `floor`).
    pub checked: usize,
    pub skipped: usize,
    pub worst_rel: f64,
    /// Tensor index (in [`TrainModel::tensors`] order) and coordinate of the worst case.
    pub worst_at: (usize, usize),
}

/// Compares every analytic gradient coordinate with the central difference
/// `(L(θ + h) - L(θ - h)) / 2h`; coordinates where both are below `floor` in
/// magnitude are skipped.
pub fn gradient_check(model: &TrainModel, data: &[(TokenSeq, Vec<f64>)], h: f64, floor: f64) -> Result<GradCheck> {
    let (_, grad) = model.loss_and_grad(data)?;
    let analytic: Vec<Vec<f64>> = grad.tensors().iter().map(|(_, t)| t.to_vec()).collect();
    let mut out = GradCheck { checked: 0, skipped: 0, worst_rel: 0.0, worst_at: (0, 0) };
    for (ti, a_t) in analytic.iter().enumerate() {
        for (c, &a) in a_t.iter().enumerate() {
            let mut plus = model.clone();
            plus.tensors_mut()[ti].1[c] += h;
            let mut minus = model.clone();
            minus.tensors_mut()[ti].1[c] -= h;
            let numeric = (plus.loss(data)? - minus.loss(data)?) / (2.0 * h);
            let scale = a.abs().max(numeric.abs());
            if scale < floor {
                out.skipped += 1;
                continue;
            }
            out.checked += 1;
            let rel = (a - numeric).abs() / scale;
            if rel > out.worst_rel {
                out.worst_rel = rel;
                out.worst_at = (ti, c);
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct QkFactors {
    q: Matrix,
    k: Matrix,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    #[serde(flatten)]
    lt: LtParams,
    pe_kind: PeKind,
    factors: Vec<Vec<QkFactors>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use lglab_core::lt::{forward_last, PrecisionMode};
    use lglab_core::random::random_seq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_arch(depth: usize, pe: PeKind) -> ArchConfig {
        ArchConfig { depth, heads_l1: 2, d: 4, mlp_width: 5, pe }
    }

    fn batch(rng: &mut ChaCha8Rng, model: &TrainModel, n: usize, len: usize) -> Vec<(TokenSeq, Vec<f64>)> {
        (0..n)
            .map(|_| {
                let x = random_seq(rng, model.s_vocab, len);
                let t = (0..model.out_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                (x, t)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let pes = [PeKind::None, PeKind::Periodic { delta: 3 }, PeKind::RelativeLocal { tau: 2 }];
        for depth in 1..=2 {
            for (s, pe) in pes.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(10 * depth as u64 + s as u64);
                let mut model = init_model(small_arch(depth, *pe), 3, 2, &mut rng).unwrap();
                for (_, t) in model.tensors_mut() {
                    for v in t.iter_mut() {
                        *v += 0.1 * rng.random_range(-1.0..1.0);
                    }
                }
                let data = batch(&mut rng, &model, 3, 7);
                let r = gradient_check(&model, &data, 1e-5, 1e-8).unwrap();
                assert!(r.checked > model.param_count() / 2);
                assert!(r.worst_rel <= 1e-4, "depth {depth}, {pe:?}: {r:?}");
            }
        }
    }

    #[test]
    fn exact_targets_give_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = init_model(small_arch(2, PeKind::RelativeLocal { tau: 1 }), 3, 2, &mut rng).unwrap();
        let data: Vec<_> = (0..4)
            .map(|_| {
                let x = random_seq(&mut rng, 3, 6);
                let t = model.predict(&x).unwrap();
                (x, t)
            })
            .collect();
        let (loss, grad) = model.loss_and_grad(&data).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.tensors().iter().all(|(_, t)| t.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = init_model(small_arch(1, PeKind::Periodic { delta: 2 }), 3, 1, &mut rng).unwrap();
        let data = batch(&mut rng, &model, 6, 5);
        let mut rev = data.clone();
        rev.reverse();
        let (a, _) = model.loss_and_grad(&data).unwrap();
        let (b, _) = model.loss_and_grad(&rev).unwrap();
        assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
    }

    #[test]
    fn batch_preconditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = init_model(small_arch(1, PeKind::None), 3, 1, &mut rng).unwrap();
        assert!(model.loss_and_grad(&[]).is_err());
        let mixed = vec![(random_seq(&mut rng, 3, 4), vec![0.0]), (random_seq(&mut rng, 3, 5), vec![0.0])];
        assert!(model.loss_and_grad(&mixed).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let arch = ArchConfig { depth: 1, heads_l1: 1, d: 16, mlp_width: 64, pe: PeKind::Periodic { delta: 3 } };
        let a = init_model(arch, 2, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = init_model(arch, 2, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let mut ok = 0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = init_model(arch, 2, 1, &mut rng).unwrap();
            let x = random_seq(&mut rng, 2, 64);
            let y = m.predict(&x).unwrap();
            if y.iter().all(|v| v.is_finite()) && lglab_core::linalg::norm(&y) <= 10.0 {
                ok += 1;
            }
        }
        assert!(ok >= 99, "{ok}");
    }

    #[test]
    fn activation_scale_is_stable_in_width() {
        let rms = |d: usize| {
            let arch = ArchConfig { depth: 2, heads_l1: 1, d, mlp_width: 4 * d, pe: PeKind::None };
            let mut total = 0.0;
            let n = 200;
            for seed in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = init_model(arch, 3, 1, &mut rng).unwrap();
                let x = random_seq(&mut rng, 3, 32);
                let tr = m.trace(&x);
                total += tr.last.iter().map(|v| v * v).sum::<f64>() / d as f64;
            }
            (total / n as f64).sqrt()
        };
        let (a, b) = (rms(8), rms(16));
        assert!(b / a <= 2.0 && a / b <= 2.0, "{a} vs {b}");
    }

    #[test]
    fn checkpoint_round_trip_and_lt_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for pe in [PeKind::None, PeKind::Periodic { delta: 3 }, PeKind::RelativeLocal { tau: 2 }] {
            let m = init_model(small_arch(2, pe), 3, 2, &mut rng).unwrap();
            let back = TrainModel::from_checkpoint_json(&m.to_checkpoint_json()).unwrap();
            assert_eq!(back, m);
            let lt = LtParams::from_json_str(&m.to_checkpoint_json()).unwrap();
            assert_eq!(lt, m.to_lt_params());
        }
        // One-layer, no relative bias: the log-length scaling never applies, so
        // the infinite-precision engine reproduces the trained forward pass.
        let m = init_model(small_arch(1, PeKind::Periodic { delta: 2 }), 3, 2, &mut rng).unwrap();
        let x = random_seq(&mut rng, 3, 9);
        let a = m.predict(&x).unwrap();
        let b = forward_last(&m.to_lt_params(), PrecisionMode::Infinite, &x).unwrap();
        assert!(lglab_core::linalg::dist(&a, &b) <= 1e-10);
    }
}
