//! Fusion Transformer encoder.
//!
//! Information flow is governed by an [`AttentionMask`]: tokens of one
//! modality (and that modality's class token) only ever read their own
//! modality, while fusion tokens and the global class token read everything.
//! Before the masked layers a Bi-LSTM attention block writes modality content
//! into the fusion tokens, position by position over the patch grid.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{xavier, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::tokenizer::TokenLayout;

/// Binary matrix, `allowed[i * n + j]` true iff token `i` may read token `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Arc<Vec<bool>>,
}

impl AttentionMask {
    /// Block mask of a layout: modality tokens and their class token see their
    /// own modality only; fusion tokens and the global class token see all.
    pub fn build(layout: &TokenLayout) -> Self {
        let n = layout.len();
        let owners: Vec<Option<Modality>> = (0..n).map(|i| layout.owner(i)).collect();
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            let row = &mut allowed[i * n..(i + 1) * n];
            match owners[i] {
                Some(m) => {
                    for (j, slot) in row.iter_mut().enumerate() {
                        *slot = owners[j] == Some(m);
                    }
                }
                None => row.fill(true),
            }
        }
        Self { size: n, allowed: Arc::new(allowed) }
    }

    /// Unrestricted attention.
    pub fn all_ones(size: usize) -> Self {
        Self { size, allowed: Arc::new(vec![true; size * size]) }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::contract("attention mask must be square"));
        }
        let m = Self { size: n, allowed: Arc::new(rows.concat()) };
        m.validate()?;
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.size..(i + 1) * self.size]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn shared(&self) -> &Arc<Vec<bool>> {
        &self.allowed
    }

    /// Every row must permit at least one key.
    pub fn validate(&self) -> Result<()> {
        match (0..self.size).find(|&i| !self.row(i).iter().any(|&b| b)) {
            Some(i) => Err(Error::contract(format!("attention mask row {i} permits no key"))),
            None => Ok(()),
        }
    }

    /// Rows `start..size` as a `(size - start) x size` mask.
    pub fn tail_rows(&self, start: usize) -> Arc<Vec<bool>> {
        Arc::new(self.allowed[start * self.size..].to_vec())
    }
}

/// Attention weights `softmax(q k^T / sqrt(d))` restricted to permitted keys.
pub fn attention_weights<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, mask: Option<&[bool]>) -> Result<Matrix<T>> {
    let scale = T::one() / T::from_usize(q.cols()).unwrap().sqrt();
    let scores = q.matmul_t(false, k, true).scale(scale);
    softmax_rows(&scores, mask).map_err(|r| Error::contract(format!("attention row {r} has no permitted key")))
}

/// Multi-head attention over projected queries `q` (`Tq x D`), keys and
/// values (`Tk x D`). Per head, weights are a softmax over the permitted keys
/// of `q_i . k_j / sqrt(D / heads)`; masked keys get weight exactly zero.
pub fn masked_attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&Arc<Vec<bool>>>,
) -> Result<Var> {
    let (tq, d) = tape.shape(q);
    let (tk, dk) = tape.shape(k);
    if dk != d || tape.shape(v) != (tk, d) {
        return Err(Error::contract("query, key and value widths disagree"));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::contract(format!("{heads} heads do not divide width {d}")));
    }
    if let Some(m) = mask {
        if m.len() != tq * tk {
            return Err(Error::contract(format!("mask has {} entries, expected {tq}x{tk}", m.len())));
        }
        if let Some(r) = (0..tq).find(|&r| !m[r * tk..(r + 1) * tk].iter().any(|&b| b)) {
            return Err(Error::contract(format!("attention mask row {r} permits no key")));
        }
    }
    let hd = d / heads;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, h * hd, hd), tape.slice_cols(k, h * hd, hd), tape.slice_cols(v, h * hd, hd))
        };
        let scores = tape.matmul_t(qh, false, kh, true);
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax(scores, mask);
        outs.push(tape.matmul(weights, vh));
    }
    Ok(if heads == 1 { outs[0] } else { tape.concat_cols(&outs) })
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    /// Queries from `xq`, keys and values from `xkv`, output projected.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, xq: Var, xkv: Var, mask: Option<&Arc<Vec<bool>>>) -> Result<Var> {
        let q = self.q.forward(tape, xq);
        let k = self.k.forward(tape, xkv);
        let v = self.v.forward(tape, xkv);
        let o = masked_attention(tape, q, k, v, self.heads, mask)?;
        Ok(self.o.forward(tape, o))
    }
}

/// Pre-norm Transformer block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: AttentionParams,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: AttentionParams::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, mlp_hidden),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, mask: Option<&Arc<Vec<bool>>>) -> Result<Var> {
        let h = self.ln1.forward(tape, x);
        let a = self.attn.forward(tape, h, h, mask)?;
        let x = tape.add(x, a);
        let h = self.ln2.forward(tape, x);
        let m = self.mlp.forward(tape, h);
        Ok(tape.add(x, m))
    }
}

#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            input: store.add(format!("{name}.wx"), xavier(rng, dim, 4 * hidden)),
            recurrent: store.add(format!("{name}.wh"), xavier(rng, hidden, 4 * hidden)),
            bias: store.add(format!("{name}.b"), Matrix::zeros(1, 4 * hidden)),
            hidden,
        }
    }

    /// Runs the cell over `steps` (each `G x D`, one row per sequence) and
    /// returns the hidden state after every step. Gate order: input, forget,
    /// candidate, output.
    pub fn run<T: Scalar>(&self, tape: &mut Tape<'_, T>, steps: &[Var]) -> Vec<Var> {
        let hsz = self.hidden;
        let wx = tape.param(self.input);
        let wh = tape.param(self.recurrent);
        let b = tape.param(self.bias);
        let mut state: Option<(Var, Var)> = None;
        let mut out = Vec::with_capacity(steps.len());
        for &x in steps {
            let mut gates = tape.matmul(x, wx);
            if let Some((h, _)) = state {
                let r = tape.matmul(h, wh);
                gates = tape.add(gates, r);
            }
            let gates = tape.add_row(gates, b);
            let i = tape.slice_cols(gates, 0, hsz);
            let i = tape.sigmoid(i);
            let g = tape.slice_cols(gates, 2 * hsz, hsz);
            let g = tape.tanh(g);
            let o = tape.slice_cols(gates, 3 * hsz, hsz);
            let o = tape.sigmoid(o);
            let mut c = tape.mul(i, g);
            if let Some((_, c_prev)) = state {
                let f = tape.slice_cols(gates, hsz, hsz);
                let f = tape.sigmoid(f);
                let kept = tape.mul(f, c_prev);
                c = tape.add(c, kept);
            }
            let tc = tape.tanh(c);
            let h = tape.mul(o, tc);
            out.push(h);
            state = Some((h, c));
        }
        out
    }
}

/// Scores `u^T tanh(W [h_f ; h_i] + b)` and their softmax.
#[derive(Clone, Debug)]
pub struct FusionAttention {
    pub mlp: Linear,
    pub score: ParamId,
}

impl FusionAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize) -> Self {
        Self { mlp: Linear::new(store, rng, &format!("{name}.mlp"), 2 * dim, dim), score: store.add(format!("{name}.u"), xavier(rng, dim, 1)) }
    }

    /// Attention of the fusion state `fusion` (`G x D`) over the modality
    /// states `hidden` (each `G x D`). Returns `(a, beta)` with `a = sum_i
    /// beta_i h_i` (`G x D`) and `beta` a `G x n` row-stochastic matrix.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, hidden: &[Var], fusion: Var) -> Result<(Var, Var)> {
        if hidden.is_empty() {
            return Err(Error::contract("fusion attention needs at least one modality state"));
        }
        let u = tape.param(self.score);
        let scores: Vec<Var> = hidden
            .iter()
            .map(|&h| {
                let pair = tape.concat_cols(&[fusion, h]);
                let z = self.mlp.forward(tape, pair);
                let z = tape.tanh(z);
                tape.matmul(z, u)
            })
            .collect();
        let scores = if scores.len() == 1 { scores[0] } else { tape.concat_cols(&scores) };
        let beta = tape.softmax(scores, None);
        let mut a: Option<Var> = None;
        for (i, &h) in hidden.iter().enumerate() {
            let w = if hidden.len() == 1 { beta } else { tape.slice_cols(beta, i, 1) };
            let term = tape.scale_rows(h, w);
            a = Some(match a {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
        Ok((a.unwrap(), beta))
    }
}

/// Bi-LSTM attention block rewriting the fusion tokens.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub forward_cell: LstmCell,
    pub backward_cell: LstmCell,
    pub attention: FusionAttention,
    pub proj: Linear,
}

/// Per grid position, the sequence rows fed to the Bi-LSTM.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionSequences {
    /// For each patch, the rows of its visible modality tokens in canonical order.
    pub modality_rows: Vec<Vec<usize>>,
    pub fusion_rows: Vec<usize>,
}

impl PositionSequences {
    pub fn from_layout(layout: &TokenLayout) -> Self {
        let l = layout.patch_count();
        let mut modality_rows = vec![Vec::new(); l];
        for span in &layout.modalities {
            for (k, &p) in span.patches.iter().enumerate() {
                modality_rows[p].push(span.start + k);
            }
        }
        Self { modality_rows, fusion_rows: (0..l).map(|p| layout.fusion.start + p).collect() }
    }
}

impl FusionBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize) -> Self {
        Self {
            forward_cell: LstmCell::new(store, rng, &format!("{name}.fwd"), dim, dim / 2),
            backward_cell: LstmCell::new(store, rng, &format!("{name}.bwd"), dim, dim / 2),
            attention: FusionAttention::new(store, rng, &format!("{name}.att"), dim),
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim),
        }
    }

    /// Bidirectional states `[h_fwd ; h_bwd]` for each step.
    pub fn bidirectional<T: Scalar>(&self, tape: &mut Tape<'_, T>, steps: &[Var]) -> Vec<Var> {
        let fwd = self.forward_cell.run(tape, steps);
        let reversed: Vec<Var> = steps.iter().rev().copied().collect();
        let mut bwd = self.backward_cell.run(tape, &reversed);
        bwd.reverse();
        fwd.iter().zip(&bwd).map(|(&f, &b)| tape.concat_cols(&[f, b])).collect()
    }

    /// Returns the sequence with every fusion token `f_p` replaced by
    /// `f_p + proj(a_p)`, where `a_p` attends over the modality tokens at
    /// grid position `p`. Positions without visible modality tokens keep
    /// their fusion token unchanged.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<'_, T>, sequence: Var, layout: &TokenLayout) -> Result<Var> {
        let seqs = PositionSequences::from_layout(layout);
        let l = layout.patch_count();
        let d = tape.shape(sequence).1;
        let max_n = seqs.modality_rows.iter().map(Vec::len).max().unwrap_or(0);
        if max_n == 0 {
            return Ok(sequence);
        }
        let mut updates = Vec::new();
        let mut update_row = vec![usize::MAX; l];
        let mut next_row = 0;
        for n in 1..=max_n {
            let group: Vec<usize> = (0..l).filter(|&p| seqs.modality_rows[p].len() == n).collect();
            if group.is_empty() {
                continue;
            }
            let mut steps = Vec::with_capacity(n + 1);
            for s in 0..n {
                let rows: Vec<usize> = group.iter().map(|&p| seqs.modality_rows[p][s]).collect();
                steps.push(tape.gather_rows(sequence, &rows));
            }
            let frows: Vec<usize> = group.iter().map(|&p| seqs.fusion_rows[p]).collect();
            steps.push(tape.gather_rows(sequence, &frows));
            let states = self.bidirectional(tape, &steps);
            let (a, _) = self.attention.forward(tape, &states[..n], states[n])?;
            updates.push(self.proj.forward(tape, a));
            for &p in &group {
                update_row[p] = next_row;
                next_row += 1;
            }
        }
        let zero = tape.constant(Matrix::zeros(1, d));
        for r in update_row.iter_mut().filter(|r| **r == usize::MAX) {
            *r = next_row;
        }
        updates.push(zero);
        let all = tape.concat_rows(&updates);
        let delta = tape.gather_rows(all, &update_row);
        let fusion = tape.slice_rows(sequence, layout.fusion.start, l);
        let fusion = tape.add(fusion, delta);
        let mut parts = Vec::with_capacity(3);
        if layout.fusion.start > 0 {
            parts.push(tape.slice_rows(sequence, 0, layout.fusion.start));
        }
        parts.push(fusion);
        let tail = layout.len() - layout.fusion.end();
        parts.push(tape.slice_rows(sequence, layout.fusion.end(), tail));
        Ok(tape.concat_rows(&parts))
    }
}

/// Class tokens and fusion tokens as queries cross-attending to the final
/// encoder tokens under the same mask.
#[derive(Clone, Debug)]
pub struct Readout {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: AttentionParams,
    pub ln_out: LayerNorm,
}

impl Readout {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), dim),
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), dim),
            attn: AttentionParams::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), dim),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReadoutResult {
    /// One `1 x D` vector per present modality, canonical order.
    pub modality: Vec<(Modality, Var)>,
    /// `1 x D` fusion vector.
    pub global: Var,
    /// `L x D` fusion spatial tokens.
    pub fusion: Var,
}

impl ReadoutResult {
    pub fn vector(&self, m: Modality) -> Option<Var> {
        self.modality.iter().find(|(x, _)| *x == m).map(|&(_, v)| v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderOptions {
    pub use_lstm: bool,
    pub use_mask: bool,
}

impl Default for EncoderOptions {
    fn default() -> Self {
        Self { use_lstm: true, use_mask: true }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub fusion_block: FusionBlock,
    pub layers: Vec<TransformerBlock>,
    pub readout: Readout,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    /// Output of the fusion block followed by every layer's output.
    pub trace: Vec<Var>,
    pub mask: AttentionMask,
}

impl Encoded {
    pub fn output(&self) -> Var {
        *self.trace.last().unwrap()
    }
}

impl EncoderParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        dim: usize,
        layers: usize,
        heads: usize,
        mlp_hidden: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("{heads} heads do not divide width {dim}")));
        }
        if !dim.is_multiple_of(2) {
            return Err(Error::config("embedding width must be even for the Bi-LSTM"));
        }
        Ok(Self {
            fusion_block: FusionBlock::new(store, rng, "enc.lstm", dim),
            layers: (0..layers).map(|i| TransformerBlock::new(store, rng, &format!("enc.l{i}"), dim, heads, mlp_hidden)).collect(),
            readout: Readout::new(store, rng, "enc.readout", dim, heads),
            heads,
        })
    }

    pub fn mask_for(&self, layout: &TokenLayout, options: EncoderOptions) -> AttentionMask {
        if options.use_mask {
            AttentionMask::build(layout)
        } else {
            AttentionMask::all_ones(layout.len())
        }
    }

    pub fn encode<T: Scalar>(&self, tape: &mut Tape<'_, T>, sequence: Var, layout: &TokenLayout, options: EncoderOptions) -> Result<Encoded> {
        if tape.shape(sequence).0 != layout.len() {
            return Err(Error::contract("sequence length does not match layout"));
        }
        let mask = self.mask_for(layout, options);
        mask.validate()?;
        let mut x = if options.use_lstm { self.fusion_block.apply(tape, sequence, layout)? } else { sequence };
        let mut trace = vec![x];
        for layer in &self.layers {
            x = layer.forward(tape, x, Some(mask.shared()))?;
            trace.push(x);
        }
        Ok(Encoded { trace, mask })
    }

    pub fn readout<T: Scalar>(&self, tape: &mut Tape<'_, T>, encoded: &Encoded, layout: &TokenLayout) -> Result<ReadoutResult> {
        let x = encoded.output();
        let start = layout.fusion.start;
        let queries = tape.slice_rows(x, start, layout.len() - start);
        let q = self.readout.ln_q.forward(tape, queries);
        let kv = self.readout.ln_kv.forward(tape, x);
        let rows = encoded.mask.tail_rows(start);
        let a = self.readout.attn.forward(tape, q, kv, Some(&rows))?;
        let out = tape.add(queries, a);
        let out = self.readout.ln_out.forward(tape, out);
        let l = layout.fusion.len;
        let fusion = tape.slice_rows(out, 0, l);
        let modality = layout.class_slots.iter().map(|&(m, slot)| (m, tape.slice_rows(out, slot - start, 1))).collect();
        let global = tape.slice_rows(out, layout.global_class - start, 1);
        Ok(ReadoutResult { modality, global, fusion })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::ModalitySet;

    #[test]
    fn mask_matches_flow_rule_on_toy_layout() {
        let layout = TokenLayout::from_visible(&[(Modality::Optical, vec![0, 1]), (Modality::Sar, vec![1])], (1, 2)).unwrap();
        let m = AttentionMask::build(&layout);
        // rows: A0 A1 B0 F0 F1 clsA clsB glob
        let expect = |i: usize| -> Vec<bool> {
            (0..layout.len())
                .map(|j| match (layout.owner(i), layout.owner(j)) {
                    (Some(a), Some(b)) => a == b,
                    (Some(_), None) => false,
                    (None, _) => true,
                })
                .collect()
        };
        for i in 0..layout.len() {
            assert_eq!(m.row(i), expect(i).as_slice());
        }
        assert_eq!(m.row(0)[..4], [true, true, false, false]);
        assert_eq!(m.row(2)[..4], [false, false, true, false]);
        assert!(m.row(3).iter().all(|&b| b));
    }

    #[test]
    fn full_layout_fusion_rows_see_everything() {
        let layout = TokenLayout::full(ModalitySet::FULL, (4, 4)).unwrap();
        let m = AttentionMask::build(&layout);
        for p in 0..16 {
            assert_eq!(m.row(layout.fusion.start + p).iter().filter(|&&b| b).count(), layout.len());
        }
        let single = TokenLayout::full(ModalitySet::single(Modality::Dem), (4, 4)).unwrap();
        let m = AttentionMask::build(&single);
        assert!(m.row(0)[..16].iter().all(|&b| b));
        assert!(m.row(0)[16..32].iter().all(|&b| !b));
    }

    #[test]
    fn empty_mask_row_is_rejected() {
        let err = AttentionMask::from_rows(&[vec![true, false], vec![false, false]]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn softmax_weight_oracles() {
        let mut tape = Tape::<f64>::new();
        // Equal logits over two permitted keys average the values.
        let q = tape.constant(Matrix::from_vec(1, 2, vec![1.0, 0.0]));
        let k = tape.constant(Matrix::from_vec(2, 2, vec![0.5, 1.0, 0.5, -1.0]));
        let v = tape.constant(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 6.0]));
        let o = masked_attention(&mut tape, q, k, v, 1, None).unwrap();
        assert_eq!(tape.value(o).data(), &[2.0, 4.0]);
        // Logits (0, ln 2) give weights (1/3, 2/3).
        let scale = 2f64.sqrt();
        let qm = Matrix::from_vec(1, 2, vec![2f64.ln() * scale, 0.0]);
        let km = Matrix::from_vec(2, 2, vec![0.0, 0.0, 1.0, 0.0]);
        let w = attention_weights(&qm, &km, None).unwrap();
        assert!((w.get(0, 0) - 1.0 / 3.0).abs() < 1e-12 && (w.get(0, 1) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn fusion_attention_oracles() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = crate::rng::stream(2, crate::rng::Purpose::Init, &[]);
        let att = FusionAttention::new(&mut store, &mut rng, "att", 4);
        let mut tape = Tape::with_params(&store);
        let h = tape.constant(Matrix::from_fn(3, 4, |r, c| (r + c) as f64 * 0.1));
        let f = tape.constant(Matrix::from_fn(3, 4, |r, c| (r * c) as f64 * 0.2));
        let (a, beta) = att.forward(&mut tape, &[h, h, h], f).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((tape.value(beta).get(r, c) - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        assert!(tape.value(a).zip_map(tape.value(h), |x, y| (x - y).abs()).max_abs() < 1e-12);
        let (a1, b1) = att.forward(&mut tape, &[h], f).unwrap();
        assert_eq!(tape.value(b1).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(tape.value(a1), tape.value(h));
        assert!(att.forward(&mut tape, &[], f).is_err());
    }

    fn toy_encoder(store: &mut ParamStore<f64>, dim: usize, layers: usize) -> EncoderParams {
        let mut rng = crate::rng::stream(4, crate::rng::Purpose::Init, &[]);
        EncoderParams::new(store, &mut rng, dim, layers, 2, 2 * dim).unwrap()
    }

    fn toy_sequence(layout: &TokenLayout, dim: usize, salt: f64) -> Matrix<f64> {
        Matrix::from_fn(layout.len(), dim, |r, c| ((r * 7 + c * 3) % 11) as f64 * 0.17 - 0.8 + salt * (r as f64))
    }

    #[test]
    fn lstm_cell_gradients() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = crate::rng::stream(3, crate::rng::Purpose::Init, &[]);
        let cell = LstmCell::new(&mut store, &mut rng, "c", 4, 2);
        let x: Vec<Matrix<f64>> = (0..3).map(|s| Matrix::from_fn(2, 4, |r, c| ((s * 3 + r * 5 + c) % 7) as f64 * 0.3 - 0.9)).collect();
        let err = crate::gradcheck::max_param_relative_error(&store, 1e-5, 64, |_| true, |t| {
            let steps: Vec<Var> = x.iter().map(|m| t.constant(m.clone())).collect();
            let h = cell.run(t, &steps);
            let all = t.concat_rows(&h);
            let w = t.constant(Matrix::from_fn(6, 2, |r, c| (r + 2 * c) as f64 * 0.1 - 0.3));
            t.mul(all, w)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn encoder_input_gradients() {
        let mut store = ParamStore::<f64>::new();
        let enc = toy_encoder(&mut store, 4, 1);
        let layout = TokenLayout::from_visible(&[(Modality::Optical, vec![0, 2]), (Modality::Dem, vec![1, 2])], (1, 3)).unwrap();
        let x = toy_sequence(&layout, 4, 0.0);
        let w = Matrix::from_fn(layout.len() - layout.fusion.start, 4, |r, c| ((r + c) % 3) as f64 - 1.0);
        let err = crate::gradcheck::max_param_relative_error(&store, 1e-5, 16, |_| true, |t| {
            let seq = t.constant(x.clone());
            let e = enc.encode(t, seq, &layout, EncoderOptions::default()).unwrap();
            let r = enc.readout(t, &e, &layout).unwrap();
            let mut rows = vec![r.fusion];
            rows.extend(r.modality.iter().map(|&(_, v)| v));
            rows.push(r.global);
            let out = t.concat_rows(&rows);
            let w = t.constant(w.clone());
            t.mul(out, w)
        });
        assert!(err < 1e-5, "{err}");
    }

    fn rows_of(m: &Matrix<f64>, start: usize, len: usize) -> Vec<f64> {
        m.data()[start * m.cols()..(start + len) * m.cols()].to_vec()
    }

    #[test]
    fn masked_modality_tokens_ignore_other_modalities() {
        let mut store = ParamStore::<f64>::new();
        let enc = toy_encoder(&mut store, 8, 2);
        let layout = TokenLayout::full(ModalitySet::FULL, (2, 2)).unwrap();
        let base = toy_sequence(&layout, 8, 0.0);
        let mut changed = base.clone();
        let sar = layout.span_of(Modality::Sar).unwrap().span();
        for r in sar.start..sar.end() {
            for c in 0..8 {
                changed.set(r, c, changed.get(r, c) + 0.5);
            }
        }
        let run = |x: &Matrix<f64>, options: EncoderOptions| {
            let mut t = Tape::with_params(&store);
            let seq = t.constant(x.clone());
            let e = enc.encode(&mut t, seq, &layout, options).unwrap();
            let r = enc.readout(&mut t, &e, &layout).unwrap();
            (t.value(e.output()).clone(), t.value(r.vector(Modality::Optical).unwrap()).clone(), t.value(r.global).clone())
        };
        let (a, va, ga) = run(&base, EncoderOptions::default());
        let (b, vb, gb) = run(&changed, EncoderOptions::default());
        let opt = layout.span_of(Modality::Optical).unwrap().span();
        assert_eq!(rows_of(&a, opt.start, opt.len), rows_of(&b, opt.start, opt.len));
        assert_eq!(va, vb);
        assert_ne!(ga, gb);
        assert_ne!(rows_of(&a, layout.fusion.start, 4), rows_of(&b, layout.fusion.start, 4));
        let open = EncoderOptions { use_mask: false, ..EncoderOptions::default() };
        let (c, _, _) = run(&base, open);
        let (d, _, _) = run(&changed, open);
        assert_ne!(rows_of(&c, opt.start, opt.len), rows_of(&d, opt.start, opt.len));
    }

    #[test]
    fn modality_tokens_match_single_modality_run() {
        let mut store = ParamStore::<f64>::new();
        let enc = toy_encoder(&mut store, 8, 2);
        let full = TokenLayout::full(ModalitySet::FULL, (2, 2)).unwrap();
        let x = toy_sequence(&full, 8, 0.0);
        let dem = full.span_of(Modality::Dem).unwrap().span();
        let single = TokenLayout::full(ModalitySet::single(Modality::Dem), (2, 2)).unwrap();
        let mut rows: Vec<usize> = (dem.start..dem.end()).collect();
        rows.extend(full.fusion.start..full.fusion.end());
        rows.push(full.class_slot(Modality::Dem).unwrap());
        rows.push(full.global_class);
        let run = |x: &Matrix<f64>, layout: &TokenLayout| {
            let mut t = Tape::with_params(&store);
            let seq = t.constant(x.clone());
            let e = enc.encode(&mut t, seq, layout, EncoderOptions::default()).unwrap();
            let r = enc.readout(&mut t, &e, layout).unwrap();
            (t.value(e.output()).clone(), t.value(r.vector(Modality::Dem).unwrap()).clone())
        };
        let (a, va) = run(&x, &full);
        let sub = Matrix::from_fn(rows.len(), 8, |r, c| x.get(rows[r], c));
        let (b, vb) = run(&sub, &single);
        let diff = rows_of(&a, dem.start, dem.len).iter().zip(rows_of(&b, 0, dem.len)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
        assert!(va.zip_map(&vb, |p, q| (p - q).abs()).max_abs() < 1e-12);
    }

    #[test]
    fn fusion_tokens_without_visible_patches_are_untouched_by_lstm() {
        let mut store = ParamStore::<f64>::new();
        let enc = toy_encoder(&mut store, 4, 0);
        let layout = TokenLayout::from_visible(&[(Modality::Sar, vec![1])], (1, 3)).unwrap();
        let x = toy_sequence(&layout, 4, 0.0);
        let mut t = Tape::with_params(&store);
        let seq = t.constant(x.clone());
        let y = enc.fusion_block.apply(&mut t, seq, &layout).unwrap();
        let y = t.value(y);
        for p in [0, 2] {
            assert_eq!(rows_of(y, layout.fusion.start + p, 1), rows_of(&x, layout.fusion.start + p, 1));
        }
        assert_ne!(rows_of(y, layout.fusion.start + 1, 1), rows_of(&x, layout.fusion.start + 1, 1));
        assert_eq!(rows_of(y, 0, 1), rows_of(&x, 0, 1));
    }
}
