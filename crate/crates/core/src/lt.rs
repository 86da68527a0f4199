//! Limit-transformer parameters and the reference forward pass.
//!
//! Positions are 1-based everywhere in this module; layer and head indices
//! are 0-based. Position `i` reads positional row `(i - 1) mod delta`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};

/// Relative slack on the `2^-p` cutoff so that a term sitting exactly on the
/// boundary (up to `exp`/`ln` rounding) is treated as rounded away.
const CUTOFF_SLACK: f64 = 1e-9;

/// A token sequence over `{1..S}`; never empty.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TokenSeq(Vec<usize>);

impl TokenSeq {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Precondition("token sequence must be nonempty".into()));
        }
        if let Some(pos) = tokens.iter().position(|&t| t == 0) {
            return Err(Error::Precondition(format!("token ids start at 1; position {} holds 0", pos + 1)));
        }
        Ok(TokenSeq(tokens))
    }

    /// Like [`TokenSeq::new`] but also checks every id is at most `s_vocab`.
    pub fn with_vocab(tokens: Vec<usize>, s_vocab: usize) -> Result<Self> {
        let seq = Self::new(tokens)?;
        seq.check_vocab(s_vocab)?;
        Ok(seq)
    }

    pub fn check_vocab(&self, s_vocab: usize) -> Result<()> {
        match self.0.iter().position(|&t| t > s_vocab) {
            Some(pos) => Err(Error::Precondition(format!(
                "token {} at position {} exceeds vocabulary size {s_vocab}",
                self.0[pos],
                pos + 1
            ))),
            None => Ok(()),
        }
    }

    /// Parses whitespace-separated token ids.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens = text
            .split_whitespace()
            .map(|w| w.parse::<usize>().map_err(|e| Error::Precondition(format!("bad token {w:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(tokens)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Token at 1-based position `i`.
    pub fn at(&self, i: usize) -> usize {
        self.0[i - 1]
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }
}

impl TryFrom<Vec<usize>> for TokenSeq {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        TokenSeq::new(v)
    }
}

impl From<TokenSeq> for Vec<usize> {
    fn from(s: TokenSeq) -> Self {
        s.0
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, t) in self.0.iter().enumerate() {
            if k > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// The combined key-query product `K^T Q`.
    pub kq: Matrix,
    pub v: Matrix,
    /// `phi[t]` is the logit offset for a key `t` positions behind the query.
    pub phi: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(d: usize, tau: usize) -> Self {
        HeadParams { kq: Matrix::zeros(d, d), v: Matrix::zeros(d, d), phi: vec![0.0; tau + 1] }
    }

    /// φ(j, i) for a key at distance `offset = i - j`.
    #[inline]
    pub fn phi_at(&self, offset: usize) -> f64 {
        self.phi.get(offset).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub a: Matrix,
    pub bias: Vec<f64>,
    pub b: Matrix,
    pub activation: Activation,
}

impl MlpParams {
    pub fn zeros(d: usize, width: usize) -> Self {
        MlpParams { a: Matrix::zeros(width, d), bias: vec![0.0; width], b: Matrix::zeros(d, width), activation: Activation::Relu }
    }

    pub fn width(&self) -> usize {
        self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub heads: Vec<HeadParams>,
    pub mlp: MlpParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtParams {
    pub s_vocab: usize,
    pub d: usize,
    pub delta: usize,
    pub tau: usize,
    pub layers: Vec<Layer>,
    pub embed: Matrix,
    pub pos: Matrix,
    pub unembed: Matrix,
}

fn shape_err(path: &str, want: (usize, usize), got: (usize, usize)) -> Error {
    Error::Schema(format!("{path}: expected {}x{}, found {}x{}", want.0, want.1, got.0, got.1))
}

fn check_shape(path: &str, m: &Matrix, want: (usize, usize)) -> Result<()> {
    if m.shape() != want {
        return Err(shape_err(path, want, m.shape()));
    }
    if !m.is_finite() {
        return Err(Error::Schema(format!("{path}: contains a non-finite entry")));
    }
    Ok(())
}

fn check_finite(path: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(k) => Err(Error::Schema(format!("{path}[{k}]: non-finite entry"))),
        None => Ok(()),
    }
}

/// Byte offset of a (1-based) line/column pair reported by serde_json.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut off = 0;
    for (k, l) in text.split_inclusive('\n').enumerate() {
        if k + 1 == line {
            return off + column.saturating_sub(1);
        }
        off += l.len();
    }
    off
}

impl LtParams {
    /// An all-zero model of the given shape (MLP width 1, identity-free).
    pub fn zeros(s_vocab: usize, d: usize, delta: usize, tau: usize, heads: &[usize], out_dim: usize) -> Self {
        LtParams {
            s_vocab,
            d,
            delta,
            tau,
            layers: heads
                .iter()
                .map(|&h| Layer { heads: vec![HeadParams::zeros(d, tau); h], mlp: MlpParams::zeros(d, 1) })
                .collect(),
            embed: Matrix::zeros(s_vocab, d),
            pos: Matrix::zeros(delta, d),
            unembed: Matrix::zeros(out_dim, d),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn out_dim(&self) -> usize {
        self.unembed.rows()
    }

    /// Positional row used at 1-based position `i`.
    #[inline]
    pub fn pos_row(&self, i: usize) -> usize {
        (i - 1) % self.delta
    }

    /// `E_s + p_row` for token `s` and positional row `row`.
    pub fn input_vector(&self, s: usize, row: usize) -> Vec<f64> {
        self.embed.row(s - 1).iter().zip(self.pos.row(row)).map(|(a, b)| a + b).collect()
    }

    /// Checks every dimension and finiteness; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let (s, d) = (self.s_vocab, self.d);
        if s == 0 || d == 0 || self.delta == 0 {
            return Err(Error::Schema("s_vocab, d and delta must all be at least 1".into()));
        }
        check_shape("embed", &self.embed, (s, d))?;
        check_shape("pos", &self.pos, (self.delta, d))?;
        if self.unembed.rows() == 0 {
            return Err(Error::Schema("unembed: needs at least one output row".into()));
        }
        check_shape("unembed", &self.unembed, (self.unembed.rows(), d))?;
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                let p = format!("layers[{l}].heads[{h}]");
                check_shape(&format!("{p}.kq"), &head.kq, (d, d))?;
                check_shape(&format!("{p}.v"), &head.v, (d, d))?;
                if head.phi.len() != self.tau + 1 {
                    return Err(Error::Schema(format!(
                        "{p}.phi: expected tau+1 = {} entries, found {}",
                        self.tau + 1,
                        head.phi.len()
                    )));
                }
                check_finite(&format!("{p}.phi"), &head.phi)?;
            }
            let m = layer.mlp.width();
            let p = format!("layers[{l}].mlp");
            check_shape(&format!("{p}.a"), &layer.mlp.a, (m, d))?;
            check_shape(&format!("{p}.b"), &layer.mlp.b, (d, m))?;
            check_finite(&format!("{p}.bias"), &layer.mlp.bias)?;
        }
        Ok(())
    }

    /// Parses and validates a model document.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut params: LtParams = serde_json::from_str(text).map_err(|e| {
            let off = byte_offset(text, e.line(), e.column());
            Error::Schema(format!("byte offset {off}: {e}"))
        })?;
        params.fix_empty_mlps();
        params.validate()?;
        Ok(params)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization cannot fail")
    }

    // `[]` deserializes to a 0x0 matrix; give zero-width MLPs their real shape.
    fn fix_empty_mlps(&mut self) {
        let d = self.d;
        for layer in &mut self.layers {
            if layer.mlp.bias.is_empty() {
                if layer.mlp.a.rows() == 0 {
                    layer.mlp.a = Matrix::zeros(0, d);
                }
                if layer.mlp.b.rows() == d && layer.mlp.b.cols() == 0 || layer.mlp.b.rows() == 0 {
                    layer.mlp.b = Matrix::zeros(d, 0);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum PrecisionMode {
    Finite { p_bits: u32, strict_rounding: bool },
    Infinite,
}

impl PrecisionMode {
    pub fn finite(p_bits: u32) -> Self {
        assert!(p_bits >= 1, "p_bits must be positive");
        PrecisionMode::Finite { p_bits, strict_rounding: false }
    }

    pub fn finite_strict(p_bits: u32) -> Self {
        assert!(p_bits >= 1, "p_bits must be positive");
        PrecisionMode::Finite { p_bits, strict_rounding: true }
    }

    fn strict_cutoff(self) -> Option<f64> {
        match self {
            PrecisionMode::Finite { p_bits, strict_rounding: true } => Some(2f64.powi(-(p_bits as i32))),
            _ => None,
        }
    }
}

fn round_in_place(v: &mut [f64], cutoff: Option<f64>) {
    if let Some(c) = cutoff {
        for x in v.iter_mut() {
            if x.abs() <= c {
                *x = 0.0;
            }
        }
    }
}

fn round_scalar(x: f64, cutoff: Option<f64>) -> f64 {
    match cutoff {
        Some(c) if x.abs() <= c => 0.0,
        _ => x,
    }
}

fn check_indices(params: &LtParams, layer_inputs: &[Vec<f64>], l: usize, h: usize, i: usize, j: usize) -> Result<()> {
    if l >= params.depth() {
        return Err(Error::Precondition(format!("layer {l} out of range (depth {})", params.depth())));
    }
    if h >= params.layers[l].heads.len() {
        return Err(Error::Precondition(format!("head {h} out of range in layer {l}")));
    }
    if j == 0 || j > i || i > layer_inputs.len() {
        return Err(Error::Precondition(format!("need 1 <= j <= i <= {}; got i = {i}, j = {j}", layer_inputs.len())));
    }
    if layer_inputs.iter().any(|y| y.len() != params.d) {
        return Err(Error::Dimension(format!("layer inputs must have dimension d = {}", params.d)));
    }
    Ok(())
}

/// Attention logit of query `i` on key `j` for head `(l, h)`.
///
/// Finite mode returns `y_j^T KQ y_i + phi(j, i)`; Infinite mode scales the
/// positional term by `ln i`.
pub fn attention_logit(
    params: &LtParams,
    mode: PrecisionMode,
    layer_inputs: &[Vec<f64>],
    l: usize,
    h: usize,
    i: usize,
    j: usize,
) -> Result<f64> {
    check_indices(params, layer_inputs, l, h, i, j)?;
    let head = &params.layers[l].heads[h];
    let u = head.kq.matvec(&layer_inputs[i - 1]);
    Ok(dot(&layer_inputs[j - 1], &u) + positional_term(head, mode, i, j))
}

#[inline]
fn positional_term(head: &HeadParams, mode: PrecisionMode, i: usize, j: usize) -> f64 {
    let phi = head.phi_at(i - j);
    match mode {
        PrecisionMode::Finite { .. } => phi,
        PrecisionMode::Infinite => {
            if phi == 0.0 {
                0.0
            } else {
                (i as f64).ln() * phi
            }
        }
    }
}

/// Turns raw logits into unnormalized weights in place (max term is 1).
///
/// Finite mode scales by `ln(seq_len)` and zeroes terms at or below `2^-p`.
fn exp_weights(logits: &mut [f64], mode: PrecisionMode, seq_len: usize) {
    let scale = match mode {
        PrecisionMode::Finite { .. } => (seq_len as f64).ln(),
        PrecisionMode::Infinite => 1.0,
    };
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &a| m.max(a * scale));
    for a in logits.iter_mut() {
        *a = (*a * scale - max).exp();
    }
    if let PrecisionMode::Finite { p_bits, .. } = mode {
        let cut = 2f64.powi(-(p_bits as i32)) * (1.0 + CUTOFF_SLACK);
        for w in logits.iter_mut() {
            if *w <= cut {
                *w = 0.0;
            }
        }
    }
}

/// Attention weights of query `i` over keys `1..=i` for head `(l, h)`.
pub fn attention_distribution(
    params: &LtParams,
    mode: PrecisionMode,
    layer_inputs: &[Vec<f64>],
    l: usize,
    h: usize,
    i: usize,
    seq_len: usize,
) -> Result<Vec<f64>> {
    check_indices(params, layer_inputs, l, h, i, 1)?;
    if seq_len < i {
        return Err(Error::Precondition(format!("seq_len {seq_len} < query position {i}")));
    }
    let head = &params.layers[l].heads[h];
    let cutoff = mode.strict_cutoff();
    let mut u = head.kq.matvec(&layer_inputs[i - 1]);
    round_in_place(&mut u, cutoff);
    let mut w: Vec<f64> =
        (1..=i).map(|j| round_scalar(dot(&layer_inputs[j - 1], &u) + positional_term(head, mode, i, j), cutoff)).collect();
    exp_weights(&mut w, mode, seq_len);
    let z: f64 = w.iter().sum();
    assert!(z >= 1.0, "the maximal term survives rounding");
    for x in w.iter_mut() {
        *x = round_scalar(*x / z, cutoff);
    }
    Ok(w)
}

/// Residual-stream states `y^(0..=L)` together with the outputs.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `states[l][i-1]` is `y^(l)_i`; `states[0]` holds embeddings plus positions.
    pub states: Vec<Vec<Vec<f64>>>,
    /// `outputs[i-1] = U y^(L)_i`.
    pub outputs: Vec<Vec<f64>>,
}

/// Output `T(x)_i` at every position.
pub fn forward(params: &LtParams, mode: PrecisionMode, x: &TokenSeq) -> Result<Vec<Vec<f64>>> {
    Ok(forward_trace(params, mode, x)?.outputs)
}

/// Full forward pass keeping every intermediate state.
pub fn forward_trace(params: &LtParams, mode: PrecisionMode, x: &TokenSeq) -> Result<ForwardTrace> {
    let states = run(params, mode, x, true, true)?;
    let cutoff = mode.strict_cutoff();
    let outputs = states
        .last()
        .expect("at least the input layer")
        .iter()
        .map(|y| {
            let mut o = params.unembed.matvec(y);
            round_in_place(&mut o, cutoff);
            o
        })
        .collect();
    Ok(ForwardTrace { states, outputs })
}

/// Output at the final position only. The last layer evaluates a single
/// query, so a one-layer model costs `O(|x| d)` after the value maps.
pub fn forward_last(params: &LtParams, mode: PrecisionMode, x: &TokenSeq) -> Result<Vec<f64>> {
    let states = run(params, mode, x, false, true)?;
    let y = states.last().and_then(|s| s.last()).expect("final state");
    let mut o = params.unembed.matvec(y);
    round_in_place(&mut o, mode.strict_cutoff());
    Ok(o)
}

/// Same as [`forward_last`] but never uses the aggregated first-layer path.
#[doc(hidden)]
pub fn forward_last_naive(params: &LtParams, mode: PrecisionMode, x: &TokenSeq) -> Result<Vec<f64>> {
    let states = run(params, mode, x, false, false)?;
    let y = states.last().and_then(|s| s.last()).expect("final state");
    let mut o = params.unembed.matvec(y);
    round_in_place(&mut o, mode.strict_cutoff());
    Ok(o)
}

fn run(params: &LtParams, mode: PrecisionMode, x: &TokenSeq, all_positions: bool, allow_agg: bool) -> Result<Vec<Vec<Vec<f64>>>> {
    x.check_vocab(params.s_vocab)?;
    let cutoff = mode.strict_cutoff();
    let t = x.len();
    let y0: Vec<Vec<f64>> = (1..=t)
        .map(|i| {
            let mut y = params.input_vector(x.at(i), params.pos_row(i));
            round_in_place(&mut y, cutoff);
            y
        })
        .collect();
    let mut states = vec![y0];
    let depth = params.depth();
    for l in 0..depth {
        let queries: Vec<usize> = if l + 1 < depth || all_positions { (1..=t).collect() } else { vec![t] };
        let prev = states.last().expect("previous layer");
        let next = layer_forward(params, mode, l, prev, x, &queries, allow_agg && l == 0 && cutoff.is_none())?;
        states.push(next);
    }
    if depth == 0 && !all_positions {
        let last = states[0][t - 1].clone();
        states[0] = vec![last];
    }
    Ok(states)
}

/// Per-class tables for the first layer, where every state is `E_s + p_r`.
struct ClassTable {
    /// Class index of each position.
    class_of: Vec<usize>,
    vecs: Vec<Vec<f64>>,
}

impl ClassTable {
    fn new(params: &LtParams, x: &TokenSeq) -> Self {
        let delta = params.delta;
        let mut vecs = Vec::with_capacity(params.s_vocab * delta);
        for s in 1..=params.s_vocab {
            for r in 0..delta {
                vecs.push(params.input_vector(s, r));
            }
        }
        let class_of = (1..=x.len()).map(|i| (x.at(i) - 1) * delta + params.pos_row(i)).collect();
        ClassTable { class_of, vecs }
    }
}

fn layer_forward(
    params: &LtParams,
    mode: PrecisionMode,
    l: usize,
    prev: &[Vec<f64>],
    x: &TokenSeq,
    queries: &[usize],
    aggregate: bool,
) -> Result<Vec<Vec<f64>>> {
    let layer = &params.layers[l];
    let cutoff = mode.strict_cutoff();
    let t = prev.len();
    let d = params.d;
    let classes = aggregate.then(|| ClassTable::new(params, x));
    let n_classes = classes.as_ref().map_or(0, |c| c.vecs.len());

    let mut attn: Vec<Vec<f64>> = vec![vec![0.0; d]; queries.len()];
    for head in &layer.heads {
        let values: Vec<Vec<f64>> = prev
            .iter()
            .map(|y| {
                let mut v = head.v.matvec(y);
                round_in_place(&mut v, cutoff);
                v
            })
            .collect();
        let class_values: Vec<Vec<f64>> =
            classes.as_ref().map(|c| c.vecs.iter().map(|y| head.v.matvec(y)).collect()).unwrap_or_default();
        // Running per-class counts of prefix positions, advanced as queries grow.
        let mut counts = vec![0usize; n_classes];
        let mut counted = 0usize;

        for (qk, &i) in queries.iter().enumerate() {
            let mut u = head.kq.matvec(&prev[i - 1]);
            round_in_place(&mut u, cutoff);
            let out = &mut attn[qk];
            let window_start = i.saturating_sub(params.tau).max(1);
            let use_agg = classes.is_some() && window_start > 1 && n_classes + params.tau + 1 < i;
            if use_agg {
                let table = classes.as_ref().expect("class table");
                let prefix_end = window_start - 1;
                while counted < prefix_end {
                    counts[table.class_of[counted]] += 1;
                    counted += 1;
                }
                let present: Vec<usize> = (0..n_classes).filter(|&c| counts[c] > 0).collect();
                let mut logits: Vec<f64> = present.iter().map(|&c| dot(&table.vecs[c], &u)).collect();
                logits.extend((window_start..=i).map(|j| dot(&prev[j - 1], &u) + positional_term(head, mode, i, j)));
                exp_weights(&mut logits, mode, t);
                let (cls_w, win_w) = logits.split_at(present.len());
                let z: f64 =
                    cls_w.iter().zip(&present).map(|(w, &c)| w * counts[c] as f64).sum::<f64>() + win_w.iter().sum::<f64>();
                for (w, &c) in cls_w.iter().zip(&present) {
                    if *w > 0.0 {
                        axpy(out, w * counts[c] as f64 / z, &class_values[c]);
                    }
                }
                for (w, j) in win_w.iter().zip(window_start..=i) {
                    if *w > 0.0 {
                        axpy(out, w / z, &values[j - 1]);
                    }
                }
            } else {
                let mut w: Vec<f64> =
                    (1..=i).map(|j| round_scalar(dot(&prev[j - 1], &u) + positional_term(head, mode, i, j), cutoff)).collect();
                exp_weights(&mut w, mode, t);
                let z: f64 = w.iter().sum();
                let mut head_out = vec![0.0; d];
                for (j, wj) in w.iter().enumerate() {
                    let a = round_scalar(wj / z, cutoff);
                    if a > 0.0 {
                        axpy(&mut head_out, a, &values[j]);
                    }
                }
                round_in_place(&mut head_out, cutoff);
                axpy(out, 1.0, &head_out);
            }
            round_in_place(out, cutoff);
        }
    }

    let mlp = &layer.mlp;
    let mut next = Vec::with_capacity(queries.len());
    for (qk, &i) in queries.iter().enumerate() {
        let mut y = prev[i - 1].clone();
        axpy(&mut y, 1.0, &attn[qk]);
        round_in_place(&mut y, cutoff);
        let mut hidden = mlp.a.matvec(&y);
        round_in_place(&mut hidden, cutoff);
        for (hv, b) in hidden.iter_mut().zip(&mlp.bias) {
            *hv = round_scalar(mlp.activation.apply(round_scalar(*hv + b, cutoff)), cutoff);
        }
        let mut mixed = mlp.b.matvec(&hidden);
        round_in_place(&mut mixed, cutoff);
        axpy(&mut y, 1.0, &mixed);
        round_in_place(&mut y, cutoff);
        if y.iter().any(|v| v.is_nan()) {
            return Err(Error::NumericFault { layer: l, position: i });
        }
        next.push(y);
    }
    Ok(next)
}
