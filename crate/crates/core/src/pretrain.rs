//! Masked multimodal pretraining.
//!
//! Each step draws modality proportions from a symmetric Dirichlet, keeps a
//! fixed budget of modality tokens split by those proportions, encodes the
//! visible tokens with all fusion tokens, and reconstructs every modality
//! from the fusion spatial tokens with a small per-modality decoder. Class
//! token readouts are additionally aligned with the global fusion readout
//! through an InfoNCE objective.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::{ModelConfig, PretrainConfig};
use crate::encoder::{EncoderOptions, TransformerBlock};
use crate::error::{Error, Result};
use crate::model::{load_training_state, save_checkpoint, DataShape, Model};
use crate::modality::{Modality, ModalitySet};
use crate::nn::{LayerNorm, Linear};
use crate::optim::{warmup_cosine, AdamW};
use crate::params::{normal, ParamId, ParamStore};
use crate::rng::{stream, Purpose};
use crate::scalar::Scalar;
use crate::synthdata::largest_remainder;
use crate::tensor::Matrix;
use crate::tokenizer::{select_visible, ModalityInput, SampleInputs, TokenLayout};

/// Visible and masked patch indices per modality for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub alpha: f64,
    pub budget: usize,
    pub lambda: Vec<(Modality, f64)>,
    pub visible: Vec<(Modality, Vec<usize>)>,
    pub masked: Vec<(Modality, Vec<usize>)>,
}

impl MaskPlan {
    /// Plan that keeps every token visible.
    pub fn keep_all(counts: &[(Modality, usize)]) -> Self {
        let total: usize = counts.iter().map(|c| c.1).sum();
        Self {
            alpha: 0.0,
            budget: total,
            lambda: counts.iter().map(|&(m, n)| (m, n as f64 / total.max(1) as f64)).collect(),
            visible: counts.iter().map(|&(m, n)| (m, (0..n).collect())).collect(),
            masked: counts.iter().map(|&(m, _)| (m, Vec::new())).collect(),
        }
    }

    pub fn visible_of(&self, m: Modality) -> &[usize] {
        self.visible.iter().find(|(x, _)| *x == m).map_or(&[], |(_, v)| v)
    }

    pub fn masked_of(&self, m: Modality) -> &[usize] {
        self.masked.iter().find(|(x, _)| *x == m).map_or(&[], |(_, v)| v)
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().map(|(_, v)| v.len()).sum()
    }

    /// Fraction of modality tokens that are masked.
    pub fn masked_fraction(&self) -> f64 {
        let masked: usize = self.masked.iter().map(|(_, v)| v.len()).sum();
        masked as f64 / (masked + self.visible_count()).max(1) as f64
    }
}

/// Default visible budget: a quarter of all modality and fusion tokens.
pub fn default_budget(patches: usize, modalities: usize) -> usize {
    patches * (modalities + 1) / 4
}

/// One draw from a symmetric Dirichlet of dimension `n`.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: f64, n: usize) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::config(format!("Dirichlet concentration must be positive, got {alpha}")));
    }
    if n == 0 {
        return Err(Error::config("Dirichlet needs at least one component"));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config(e.to_string()))?;
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if !(total > 0.0) {
        // Every component underflowed; pick a vertex uniformly.
        let mut v = vec![0.0; n];
        v[rng.gen_range(0..n)] = 1.0;
        return Ok(v);
    }
    Ok(draws.into_iter().map(|d| d / total).collect())
}

/// Splits `budget` by `lambda` with largest-remainder rounding, capping each
/// entry at `caps[i]` and handing overflow to the remaining entries.
pub fn allocate(lambda: &[f64], budget: usize, caps: &[usize]) -> Result<Vec<usize>> {
    assert_eq!(lambda.len(), caps.len());
    let capacity: usize = caps.iter().sum();
    if budget > capacity {
        return Err(Error::config(format!("visible budget {budget} exceeds the {capacity} available modality tokens")));
    }
    let n = lambda.len();
    let mut counts = vec![0; n];
    let mut fixed = vec![false; n];
    let mut remaining = budget;
    loop {
        let open: Vec<usize> = (0..n).filter(|&i| !fixed[i]).collect();
        let mut weights: Vec<f64> = open.iter().map(|&i| lambda[i].max(0.0)).collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            weights = open.iter().map(|&i| caps[i] as f64).collect();
        }
        let wsum: f64 = weights.iter().sum();
        let quotas: Vec<f64> = weights.iter().map(|w| w / wsum * remaining as f64).collect();
        let alloc = largest_remainder(&quotas, remaining);
        let over: Vec<usize> = open.iter().zip(&alloc).filter(|&(&i, &a)| a > caps[i]).map(|(&i, _)| i).collect();
        if over.is_empty() {
            for (&i, a) in open.iter().zip(alloc) {
                counts[i] = a;
            }
            return Ok(counts);
        }
        for i in over {
            fixed[i] = true;
            counts[i] = caps[i];
            remaining -= caps[i];
        }
    }
}

/// Builds a plan from given proportions: visible indices are drawn uniformly
/// without replacement within each modality.
pub fn plan_from_proportions<R: Rng + ?Sized>(
    rng: &mut R,
    alpha: f64,
    lambda: &[f64],
    budget: usize,
    counts: &[(Modality, usize)],
) -> Result<MaskPlan> {
    if lambda.len() != counts.len() {
        return Err(Error::contract("one proportion per modality is required"));
    }
    let caps: Vec<usize> = counts.iter().map(|c| c.1).collect();
    let visible_counts = allocate(lambda, budget, &caps)?;
    let mut visible = Vec::with_capacity(counts.len());
    let mut masked = Vec::with_capacity(counts.len());
    for (&(m, n), &k) in counts.iter().zip(&visible_counts) {
        let mut keep = index::sample(rng, n, k).into_vec();
        keep.sort_unstable();
        let mut flag = vec![false; n];
        for &i in &keep {
            flag[i] = true;
        }
        masked.push((m, (0..n).filter(|&i| !flag[i]).collect()));
        visible.push((m, keep));
    }
    Ok(MaskPlan {
        alpha,
        budget,
        lambda: counts.iter().map(|c| c.0).zip(lambda.iter().copied()).collect(),
        visible,
        masked,
    })
}

/// Draws proportions from `Dir(alpha)` over the listed modalities and a plan
/// keeping exactly `budget` modality tokens visible.
pub fn sample_mask_plan<R: Rng + ?Sized>(rng: &mut R, alpha: f64, budget: usize, counts: &[(Modality, usize)]) -> Result<MaskPlan> {
    let total: usize = counts.iter().map(|c| c.1).sum();
    if budget > total {
        return Err(Error::config(format!("visible budget {budget} exceeds the {total} available modality tokens")));
    }
    let lambda = sample_dirichlet(rng, alpha, counts.len())?;
    plan_from_proportions(rng, alpha, &lambda, budget, counts)
}

/// Token counts per present modality of a layout.
pub fn layout_counts(layout: &TokenLayout) -> Vec<(Modality, usize)> {
    layout.modalities.iter().map(|s| (s.modality, s.patches.len())).collect()
}

/// Removes masked modality tokens from the sequence; fusion and class tokens stay.
pub fn apply_mask_plan<T: Scalar>(tape: &mut Tape<'_, T>, sequence: Var, layout: &TokenLayout, plan: &MaskPlan) -> Result<(Var, TokenLayout)> {
    for (m, idx) in &plan.visible {
        let span = layout.span_of(*m).ok_or_else(|| Error::contract(format!("{m}: planned but not in the sequence")))?;
        if let Some(bad) = idx.iter().find(|&&i| i >= span.patches.len()) {
            return Err(Error::contract(format!("{m}: visible index {bad} outside span of {}", span.patches.len())));
        }
    }
    let visible: Vec<(Modality, Vec<usize>)> = plan
        .visible
        .iter()
        .map(|(m, idx)| {
            let span = layout.span_of(*m).unwrap();
            (*m, idx.iter().map(|&i| span.patches[i]).collect())
        })
        .collect();
    select_visible(tape, sequence, layout, &visible)
}

/// Per-modality decoder from fusion spatial tokens to patch values (or map
/// class logits).
#[derive(Clone, Debug)]
pub struct Decoder {
    pub modality: Modality,
    pub input: Linear,
    pub embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub output: Linear,
    pub out_width: usize,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, modality: Modality, config: &ModelConfig, shape: DataShape) -> Self {
        let name = format!("dec.{}", modality.name());
        let width = if modality.is_categorical() { shape.classes } else { modality.channels() };
        let out_width = shape.patch * shape.patch * width;
        let d = config.dec_dim;
        Self {
            modality,
            input: Linear::new(store, rng, &format!("{name}.in"), config.dim, d),
            embed: store.add(format!("{name}.embed"), normal(rng, 1, d, 0.02)),
            blocks: (0..config.dec_layers)
                .map(|i| TransformerBlock::new(store, rng, &format!("{name}.l{i}"), d, config.dec_heads, d * config.mlp_ratio))
                .collect(),
            norm: LayerNorm::new(store, &format!("{name}.ln"), d),
            output: Linear::new(store, rng, &format!("{name}.out"), d, out_width),
            out_width,
        }
    }

    /// `L x out_width` patch predictions, rows in grid order.
    pub fn decode<T: Scalar>(&self, tape: &mut Tape<'_, T>, fusion: Var) -> Result<Var> {
        let x = self.input.forward(tape, fusion);
        let e = tape.param(self.embed);
        let mut x = tape.add_row(x, e);
        for block in &self.blocks {
            x = block.forward(tape, x, None)?;
        }
        let x = self.norm.forward(tape, x);
        Ok(self.output.forward(tape, x))
    }
}

/// Projections of class-token readouts into the shared contrastive space.
#[derive(Clone, Debug)]
pub struct ContrastiveHeads {
    pub modality: Vec<Linear>,
    pub fusion: Linear,
}

impl ContrastiveHeads {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, dim: usize, proj: usize) -> Self {
        Self {
            modality: Modality::ALL.iter().map(|m| Linear::new(store, rng, &format!("con.{}", m.name()), dim, proj)).collect(),
            fusion: Linear::new(store, rng, "con.fusion", dim, proj),
        }
    }
}

fn gather<T: Scalar>(m: &Matrix<T>, rows: &[usize]) -> Matrix<T> {
    Matrix::from_fn(rows.len(), m.cols(), |r, c| m.get(rows[r], c))
}

/// Reconstruction terms of one sample, `None` where the modality is absent.
#[derive(Clone, Copy, Debug)]
pub struct ReconTerms {
    pub dem: Option<Var>,
    pub sar_rgb: Option<Var>,
    pub map: Option<Var>,
}

fn masked_rows<T: Scalar>(tape: &mut Tape<'_, T>, pred: Var, masked: &[usize]) -> Option<Var> {
    (!masked.is_empty()).then(|| tape.gather_rows(pred, masked))
}

fn float_term<T: Scalar>(
    tape: &mut Tape<'_, T>,
    m: Modality,
    recon: &[(Modality, Var)],
    inputs: &SampleInputs<T>,
    plan: &MaskPlan,
    squared: bool,
) -> Result<Option<Var>> {
    let Some(&(_, pred)) = recon.iter().find(|(x, _)| *x == m) else { return Ok(None) };
    let ModalityInput::Float(grid) = inputs.get(m) else { return Err(Error::contract(format!("{m}: expected a float raster"))) };
    if tape.shape(pred) != grid.patches.shape() {
        return Err(Error::contract(format!("{m}: reconstruction shape {:?} does not match target {:?}", tape.shape(pred), grid.patches.shape())));
    }
    let masked = plan.masked_of(m);
    Ok(Some(match masked_rows(tape, pred, masked) {
        Some(rows) => {
            let target = gather(&grid.patches, masked);
            if squared {
                tape.mse_loss(rows, target)
            } else {
                tape.l1_loss(rows, target)
            }
        }
        None => tape.constant(Matrix::zeros(1, 1)),
    }))
}

/// Absolute error on masked dem patches, squared error on masked sar and
/// optical patches (summed), cross-entropy on masked map pixels. Visible
/// patches never contribute; a modality with no masked patch contributes 0.
pub fn reconstruction_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    recon: &[(Modality, Var)],
    inputs: &SampleInputs<T>,
    plan: &MaskPlan,
) -> Result<ReconTerms> {
    let dem = float_term(tape, Modality::Dem, recon, inputs, plan, false)?;
    let sar = float_term(tape, Modality::Sar, recon, inputs, plan, true)?;
    let rgb = float_term(tape, Modality::Optical, recon, inputs, plan, true)?;
    let sar_rgb = match (sar, rgb) {
        (Some(a), Some(b)) => Some(tape.add(a, b)),
        (a, b) => a.or(b),
    };
    let map = match recon.iter().find(|(x, _)| *x == Modality::Map) {
        None => None,
        Some(&(_, pred)) => {
            let ModalityInput::Classes(ids) = inputs.get(Modality::Map) else { return Err(Error::contract("map: expected class ids")) };
            let (l, w) = tape.shape(pred);
            if ids.len() % l != 0 || w % (ids.len() / l) != 0 {
                return Err(Error::contract("map: reconstruction shape does not match target"));
            }
            let pix = ids.len() / l;
            let k = w / pix;
            let masked = plan.masked_of(Modality::Map);
            Some(match masked_rows(tape, pred, masked) {
                Some(rows) => {
                    let logits = tape.reshape(rows, masked.len() * pix, k);
                    let targets: Vec<usize> = masked.iter().flat_map(|&p| ids[p * pix..(p + 1) * pix].iter().copied()).collect();
                    if let Some(bad) = targets.iter().find(|&&c| c >= k) {
                        return Err(Error::contract(format!("map: class id {bad} outside [0, {k})")));
                    }
                    tape.cross_entropy(logits, &targets)
                }
                None => tape.constant(Matrix::zeros(1, 1)),
            })
        }
    };
    Ok(ReconTerms { dem, sar_rgb, map })
}

/// InfoNCE of anchors against fusion vectors (`N x d` each): row `i` of the
/// cosine-similarity matrix divided by `tau` is a softmax classification
/// whose correct answer is fusion vector `i`.
pub fn info_nce<T: Scalar>(tape: &mut Tape<'_, T>, anchor: Var, fusion: Var, tau: f64) -> Result<Var> {
    let (n, d) = tape.shape(anchor);
    if tape.shape(fusion) != (n, d) {
        return Err(Error::contract("anchor and fusion batches differ in shape"));
    }
    if n < 2 {
        return Err(Error::contract(format!("InfoNCE needs at least two pairs, got {n}")));
    }
    if !(tau > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    for (v, what) in [(anchor, "anchor"), (fusion, "fusion")] {
        let m = tape.value(v);
        if let Some(r) = (0..n).find(|&r| m.row(r).iter().all(|x| x.is_zero())) {
            return Err(Error::contract(format!("{what} vector {r} has zero norm")));
        }
    }
    let a = tape.row_normalize(anchor);
    let f = tape.row_normalize(fusion);
    let sim = tape.matmul_t(a, false, f, true);
    let logits = tape.scale(sim, T::lit(1.0 / tau));
    let targets: Vec<usize> = (0..n).collect();
    Ok(tape.cross_entropy(logits, &targets))
}

/// Combined objective: reconstruction terms plus `lambda2` times the sum of
/// the contrastive terms.
pub fn total_loss(dem: f64, sar_rgb: f64, map: Option<f64>, contrastive: &[f64], lambda2: f64) -> f64 {
    dem + sar_rgb + map.unwrap_or(0.0) + lambda2 * contrastive.iter().sum::<f64>()
}

/// Per-term losses (batch means).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub dem: f64,
    pub sar_rgb: f64,
    pub map: Option<f64>,
    /// One InfoNCE term per present modality; empty when `lambda2` is 0.
    pub contrastive: Vec<(Modality, f64)>,
    pub lambda2: f64,
    pub total: f64,
}

impl LossReport {
    pub fn reconstruction(&self) -> f64 {
        self.dem + self.sar_rgb + self.map.unwrap_or(0.0)
    }

    pub fn recombined(&self) -> f64 {
        let c: Vec<f64> = self.contrastive.iter().map(|c| c.1).collect();
        total_loss(self.dem, self.sar_rgb, self.map, &c, self.lambda2)
    }

    /// `(term, value)` rows in a fixed order.
    pub fn terms(&self) -> Vec<(String, f64)> {
        let mut t = vec![("dem".to_string(), self.dem), ("sar_rgb".to_string(), self.sar_rgb)];
        if let Some(m) = self.map {
            t.push(("map".into(), m));
        }
        for (m, v) in &self.contrastive {
            t.push((format!("contrastive_{}", m.name()), *v));
        }
        t.push(("reconstruction".into(), self.reconstruction()));
        t.push(("total".into(), self.total));
        t
    }

    fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let first = &reports[0];
        LossReport {
            dem: avg(&|r| r.dem),
            sar_rgb: avg(&|r| r.sar_rgb),
            map: first.map.map(|_| avg(&|r| r.map.unwrap_or(0.0))),
            contrastive: first.contrastive.iter().enumerate().map(|(i, &(m, _))| (m, avg(&|r| r.contrastive[i].1))).collect(),
            lambda2: first.lambda2,
            total: avg(&|r| r.total),
        }
    }
}

/// Differentiable batch loss with its report.
pub struct BatchLoss {
    pub total: Var,
    pub report: LossReport,
}

struct SampleForward {
    terms: ReconTerms,
    class: Vec<(Modality, Var)>,
    global: Var,
}

fn forward_sample<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    inputs: &SampleInputs<T>,
    plan: &MaskPlan,
    options: EncoderOptions,
    reconstruct: bool,
) -> Result<SampleForward> {
    let present: ModalitySet = plan.visible.iter().map(|v| v.0).collect();
    let (seq, layout) = model.tokenizer.assemble(tape, inputs, present)?;
    let (seq, layout) = apply_mask_plan(tape, seq, &layout, plan)?;
    let encoded = model.encoder.encode(tape, seq, &layout, options)?;
    let out = model.encoder.readout(tape, &encoded, &layout)?;
    let terms = if reconstruct {
        let mut recon = Vec::with_capacity(present.len());
        for m in present.iter() {
            recon.push((m, model.decoder(m).decode(tape, out.fusion)?));
        }
        reconstruction_loss(tape, &recon, inputs, plan)?
    } else {
        ReconTerms { dem: None, sar_rgb: None, map: None }
    };
    Ok(SampleForward { terms, class: out.modality, global: out.global })
}

fn scalar<T: Scalar>(tape: &Tape<'_, T>, v: Var) -> f64 {
    tape.value(v).get(0, 0).to_f64().unwrap()
}

fn mean_var<T: Scalar>(tape: &mut Tape<'_, T>, vars: &[Var]) -> Var {
    let stacked = tape.concat_rows(vars);
    tape.mean(stacked)
}

fn project_batch<T: Scalar>(model: &Model<T>, tape: &mut Tape<'_, T>, forwards: &[SampleForward], m: Option<Modality>) -> Var {
    let rows: Vec<Var> = forwards
        .iter()
        .map(|f| match m {
            Some(m) => f.class.iter().find(|c| c.0 == m).expect("modality present in every sample").1,
            None => f.global,
        })
        .collect();
    let x = tape.concat_rows(&rows);
    match m {
        Some(m) => model.contrastive.modality[m.index()].forward(tape, x),
        None => model.contrastive.fusion.forward(tape, x),
    }
}

/// Forward pass of one pretraining batch. Every sample must plan the same
/// modality set.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    batch: &[&SampleInputs<T>],
    plans: &[MaskPlan],
    lambda2: f64,
    tau: f64,
    options: EncoderOptions,
) -> Result<BatchLoss> {
    if batch.is_empty() || batch.len() != plans.len() {
        return Err(Error::contract("one mask plan per sample is required"));
    }
    let forwards = batch.iter().zip(plans).map(|(s, p)| forward_sample(model, tape, s, p, options, true)).collect::<Result<Vec<_>>>()?;
    let term = |tape: &mut Tape<'_, T>, pick: &dyn Fn(&ReconTerms) -> Option<Var>| -> Option<Var> {
        let vars: Vec<Var> = forwards.iter().filter_map(|f| pick(&f.terms)).collect();
        (!vars.is_empty()).then(|| mean_var(tape, &vars))
    };
    let dem = term(tape, &|t| t.dem);
    let sar_rgb = term(tape, &|t| t.sar_rgb);
    let map = term(tape, &|t| t.map);
    let mut parts: Vec<Var> = [dem, sar_rgb, map].into_iter().flatten().collect();
    let mut contrastive = Vec::new();
    if lambda2 > 0.0 {
        let zf = project_batch(model, tape, &forwards, None);
        for &(m, _) in &forwards[0].class {
            let zm = project_batch(model, tape, &forwards, Some(m));
            let lc = info_nce(tape, zm, zf, tau)?;
            contrastive.push((m, scalar(tape, lc)));
            parts.push(tape.scale(lc, T::lit(lambda2)));
        }
    }
    let stacked = tape.concat_rows(&parts);
    let total = tape.sum(stacked);
    let report = LossReport {
        dem: dem.map_or(0.0, |v| scalar(tape, v)),
        sar_rgb: sar_rgb.map_or(0.0, |v| scalar(tape, v)),
        map: map.map(|v| scalar(tape, v)),
        contrastive,
        lambda2,
        total: scalar(tape, total),
    };
    Ok(BatchLoss { total, report })
}

/// Mean cosine similarity of matching (modality, fusion) projections and of
/// mismatched pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub positive: f64,
    pub negative: f64,
}

impl Alignment {
    pub fn gap(&self) -> f64 {
        self.positive - self.negative
    }
}

fn cosine_rows<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Vec<Vec<f64>> {
    let norm = |m: &Matrix<T>, r: usize| m.row(r).iter().map(|x| x.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
    (0..a.rows())
        .map(|i| {
            (0..b.rows())
                .map(|j| {
                    let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x.to_f64().unwrap() * y.to_f64().unwrap()).sum();
                    dot / (norm(a, i) * norm(b, j))
                })
                .collect()
        })
        .collect()
}

/// Plan used for a sample outside training: seeded by the sample id only.
pub fn evaluation_plan(seed: u64, id: u64, alpha: f64, budget: usize, counts: &[(Modality, usize)]) -> Result<MaskPlan> {
    sample_mask_plan(&mut stream(seed, Purpose::Eval, &[id]), alpha, budget, counts)
}

/// Alignment of the contrastive projections over `samples` under
/// deterministic mask plans.
pub fn alignment<T: Scalar>(model: &Model<T>, samples: &[SampleInputs<T>], config: &PretrainConfig, seed: u64, options: EncoderOptions) -> Result<Alignment> {
    if samples.len() < 2 {
        return Err(Error::contract("alignment needs at least two samples"));
    }
    let counts: Vec<(Modality, usize)> = Modality::ALL.iter().map(|&m| (m, model.shape.patches())).collect();
    let budget = config.budget.unwrap_or_else(|| default_budget(model.shape.patches(), counts.len()));
    let mut tape = Tape::with_params(&model.store);
    let mut forwards = Vec::with_capacity(samples.len());
    for s in samples {
        let plan = evaluation_plan(seed, s.id, config.alpha, budget, &counts)?;
        forwards.push(forward_sample(model, &mut tape, s, &plan, options, false)?);
    }
    let zf = project_batch(model, &mut tape, &forwards, None);
    let zf = tape.value(zf).clone();
    let (mut pos, mut neg, mut npos, mut nneg) = (0.0, 0.0, 0usize, 0usize);
    for &m in &Modality::ALL {
        let zm = project_batch(model, &mut tape, &forwards, Some(m));
        let sims = cosine_rows(tape.value(zm), &zf);
        for (i, row) in sims.iter().enumerate() {
            for (j, &s) in row.iter().enumerate() {
                if i == j {
                    pos += s;
                    npos += 1;
                } else {
                    neg += s;
                    nneg += 1;
                }
            }
        }
    }
    Ok(Alignment { positive: pos / npos as f64, negative: neg / nneg as f64 })
}

/// Where and how often to checkpoint, and whether to continue from an
/// existing checkpoint.
#[derive(Clone, Debug, Default)]
pub struct RunControl {
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: bool,
    /// Stop after this many completed epochs (the run can be resumed later).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    /// Epoch means, one per completed epoch.
    pub curve: Vec<LossReport>,
    pub alignment: Option<Alignment>,
    pub epochs_completed: usize,
}

fn pretrain_meta(seed: u64, epoch: usize, curve: &[LossReport]) -> serde_json::Value {
    serde_json::json!({"phase": "pretrain", "seed": seed, "epoch": epoch, "curve": curve})
}

/// Masked reconstruction (plus contrastive alignment when `lambda2 > 0`)
/// over `train`, one AdamW step per batch with warmup and cosine decay.
pub fn pretrain<T: Scalar>(
    model: &mut Model<T>,
    train: &[SampleInputs<T>],
    val: &[SampleInputs<T>],
    config: &PretrainConfig,
    seed: u64,
    control: &RunControl,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::contract("pretraining needs at least one sample"));
    }
    let counts: Vec<(Modality, usize)> = Modality::ALL.iter().map(|&m| (m, model.shape.patches())).collect();
    let budget = config.budget.unwrap_or_else(|| default_budget(model.shape.patches(), counts.len()));
    if budget > counts.iter().map(|c| c.1).sum() {
        return Err(Error::config(format!("visible budget {budget} exceeds the modality token count")));
    }
    let options = EncoderOptions::default();
    let mut optimizer = AdamW::new(&model.store, config.weight_decay);
    let mut curve: Vec<LossReport> = Vec::new();
    let mut start = 0;
    if control.resume {
        let dir = control.checkpoint_dir.as_ref().ok_or_else(|| Error::config("resume requested without a checkpoint directory"))?;
        if dir.join(crate::container::MANIFEST).exists() {
            let meta = load_training_state(dir, &mut model.store, &mut optimizer)?;
            start = meta["epoch"].as_u64().unwrap_or(0) as usize;
            curve = serde_json::from_value(meta["curve"].clone()).map_err(|e| Error::contract(format!("checkpoint curve: {e}")))?;
        }
    }
    let batches_per_epoch = train.len().div_ceil(config.batch);
    let total_steps = batches_per_epoch * config.epochs;
    let warmup = (config.warmup_fraction * total_steps as f64).round() as usize;
    let scales = vec![1.0; model.store.len()];
    let end = control.stop_after.map_or(config.epochs, |s| s.min(config.epochs));
    for epoch in start..end {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut stream(seed, Purpose::DataOrder, &[0, epoch as u64]));
        let mut reports = Vec::with_capacity(batches_per_epoch);
        for (b, chunk) in order.chunks(config.batch).enumerate() {
            let batch: Vec<&SampleInputs<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let plans = batch
                .iter()
                .map(|s| sample_mask_plan(&mut stream(seed, Purpose::MaskPlan, &[epoch as u64, s.id]), config.alpha, budget, &counts))
                .collect::<Result<Vec<_>>>()?;
            let lambda2 = if batch.len() < 2 { 0.0 } else { config.lambda2 };
            let grads = {
                let mut tape = Tape::with_params(&model.store);
                let loss = batch_loss(model, &mut tape, &batch, &plans, lambda2, config.tau, options)?;
                if let Some((term, _)) = loss.report.terms().into_iter().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::Diverged { term, epoch });
                }
                let mut report = loss.report;
                report.lambda2 = config.lambda2;
                reports.push(report);
                tape.backward(loss.total).into_param_grads()
            };
            let step = epoch * batches_per_epoch + b;
            let lr = config.lr * warmup_cosine(step, total_steps, warmup);
            optimizer.update(&mut model.store, &grads, lr, &scales);
        }
        let keep_contrastive = reports.iter().all(|r| r.contrastive.len() == reports[0].contrastive.len());
        if !keep_contrastive {
            reports.retain(|r| !r.contrastive.is_empty());
        }
        curve.push(LossReport::mean(&reports));
        let done = epoch + 1;
        if let Some(dir) = &control.checkpoint_dir {
            let every = config.checkpoint_every.max(1);
            if done % every == 0 || done == end {
                save_checkpoint(dir, &model.store, Some(&optimizer), pretrain_meta(seed, done, &curve))?;
            }
        }
    }
    let alignment = if val.len() >= 2 && end == config.epochs { Some(alignment(model, val, config, seed, options)?) } else { None };
    Ok(PretrainOutcome { curve, alignment, epochs_completed: end.max(start) })
}

/// Loss curve as `epoch<TAB>term<TAB>value` lines (epochs counted from 1).
pub fn curve_tsv(curve: &[LossReport]) -> String {
    let mut s = String::from("epoch\tterm\tvalue\n");
    for (e, r) in curve.iter().enumerate() {
        for (term, v) in r.terms() {
            s.push_str(&format!("{}\t{}\t{}\n", e + 1, term, v));
        }
    }
    s
}

/// Writes a checkpoint holding parameters only.
pub fn save_weights<T: Scalar>(dir: impl AsRef<Path>, model: &Model<T>, meta: serde_json::Value) -> Result<PathBuf> {
    save_checkpoint(dir, &model.store, None, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_param_relative_error, max_relative_error};
    use crate::rng::StreamRng;
    use crate::tokenizer::patchify;
    use rand::SeedableRng;

    fn rng(seed: u64) -> StreamRng {
        StreamRng::seed_from_u64(seed)
    }

    #[test]
    fn plan_counts_and_partition() {
        let counts = [(Modality::Optical, 16), (Modality::Sar, 16), (Modality::Dem, 16), (Modality::Map, 16)];
        let mut r = rng(1);
        for _ in 0..200 {
            let p = sample_mask_plan(&mut r, 1.0, 20, &counts).unwrap();
            assert_eq!(p.visible_count(), 20);
            assert!((p.lambda.iter().map(|l| l.1).sum::<f64>() - 1.0).abs() < 1e-12);
            for &(m, n) in &counts {
                let mut all: Vec<usize> = p.visible_of(m).iter().chain(p.masked_of(m)).copied().collect();
                all.sort_unstable();
                assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }
        assert!(matches!(sample_mask_plan(&mut r, 1.0, 65, &counts), Err(Error::Config(_))));
        assert!(matches!(sample_mask_plan(&mut r, 0.0, 4, &counts), Err(Error::Config(_))));
    }

    #[test]
    fn vertex_proportions_use_one_modality() {
        let counts = [(Modality::Optical, 256), (Modality::Sar, 256), (Modality::Dem, 256)];
        let p = plan_from_proportions(&mut rng(2), 1.0, &[1.0, 0.0, 0.0], 256, &counts).unwrap();
        assert_eq!(p.visible_of(Modality::Optical).len(), 256);
        assert!(p.visible_of(Modality::Sar).is_empty() && p.visible_of(Modality::Dem).is_empty());
        assert_eq!(default_budget(256, 3), 256);
    }

    #[test]
    fn allocation_respects_capacity() {
        assert_eq!(allocate(&[1.0, 0.0], 6, &[4, 10]).unwrap(), vec![4, 2]);
        assert_eq!(allocate(&[0.5, 0.5], 5, &[16, 16]).unwrap().iter().sum::<usize>(), 5);
        assert_eq!(allocate(&[0.7, 0.2, 0.1], 10, &[3, 3, 10]).unwrap(), vec![3, 3, 4]);
    }

    #[test]
    fn info_nce_oracles() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Matrix::from_vec(3, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]));
        let f = t.constant(Matrix::from_vec(3, 2, vec![2.0, 0.0, 3.0, 0.0, 1.0, 0.0]));
        let l = info_nce(&mut t, a, f, 0.5).unwrap();
        assert!((t.value(l).get(0, 0) - 3f64.ln()).abs() < 1e-9);
        let a = t.constant(Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let l = info_nce(&mut t, a, a, 1.0).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((t.value(l).get(0, 0) - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);
        let z = t.constant(Matrix::from_vec(2, 2, vec![0.0, 0.0, 0.0, 1.0]));
        assert!(info_nce(&mut t, z, a, 1.0).is_err());
        let one = t.constant(Matrix::from_vec(1, 2, vec![1.0, 0.0]));
        assert!(info_nce(&mut t, one, one, 1.0).is_err());
    }

    #[test]
    fn info_nce_gradients() {
        let a = Matrix::from_fn(3, 4, |r, c| ((r * 4 + c) % 5) as f64 * 0.4 - 0.7);
        let f = Matrix::from_fn(3, 4, |r, c| ((r + 3 * c) % 7) as f64 * 0.3 - 0.8);
        let err = max_relative_error(&[a, f], 1e-5, |t, v| info_nce(t, v[0], v[1], 0.3).unwrap());
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn total_loss_combination() {
        assert_eq!(total_loss(1.0, 1.0, Some(1.0), &[1.0; 4], 1.0), 7.0);
        assert_eq!(total_loss(0.5, 0.25, None, &[9.0], 0.0), 0.75);
        assert_eq!(total_loss(0.0, 0.0, Some(0.0), &[0.0; 4], 1.0), 0.0);
    }

    fn inputs(p: usize, classes: usize) -> SampleInputs<f64> {
        let grid = |c: usize, salt: f64| patchify(&(0..c * 64).map(|i| (i as f64 * 0.37 + salt).sin()).collect::<Vec<f64>>(), c, 8, 8, p).unwrap();
        SampleInputs {
            id: 0,
            inputs: [
                ModalityInput::Float(grid(3, 0.1)),
                ModalityInput::Float(grid(2, 0.2)),
                ModalityInput::Float(grid(1, 0.3)),
                ModalityInput::Classes((0..64).map(|i| i % classes).collect()),
            ],
            label: (0..64).map(|i| (i / 3) % classes).collect(),
        }
    }

    #[test]
    fn reconstruction_ignores_visible_patches() {
        let x = inputs(4, 3);
        let counts: Vec<(Modality, usize)> = Modality::ALL.iter().map(|&m| (m, 4)).collect();
        let plan = plan_from_proportions(&mut rng(3), 1.0, &[0.25; 4], 8, &counts).unwrap();
        let run = |x: &SampleInputs<f64>| {
            let mut t = Tape::<f64>::new();
            let recon: Vec<(Modality, Var)> = Modality::ALL
                .iter()
                .map(|&m| {
                    let w = if m == Modality::Map { 16 * 3 } else { 16 * m.channels() };
                    (m, t.constant(Matrix::from_fn(4, w, |r, c| ((r + c) % 5) as f64 * 0.2)))
                })
                .collect();
            let terms = reconstruction_loss(&mut t, &recon, x, &plan).unwrap();
            [terms.dem, terms.sar_rgb, terms.map].map(|v| t.value(v.unwrap()).get(0, 0))
        };
        let base = run(&x);
        let mut y = x.clone();
        for m in [Modality::Optical, Modality::Sar, Modality::Dem] {
            if let ModalityInput::Float(g) = &mut y.inputs[m.index()] {
                for &p in plan.visible_of(m) {
                    for v in g.patches.row_mut(p) {
                        *v += 10.0;
                    }
                }
            }
        }
        if let ModalityInput::Classes(ids) = &mut y.inputs[3] {
            for &p in plan.visible_of(Modality::Map) {
                for i in p * 16..(p + 1) * 16 {
                    ids[i] = (ids[i] + 1) % 3;
                }
            }
        }
        assert_eq!(base, run(&y));
    }

    #[test]
    fn single_masked_dem_patch_error() {
        let x = inputs(4, 3);
        let ModalityInput::Float(g) = x.get(Modality::Dem) else { unreachable!() };
        let counts = [(Modality::Dem, 4)];
        let mut plan = MaskPlan::keep_all(&counts);
        plan.visible = vec![(Modality::Dem, vec![0, 1, 3])];
        plan.masked = vec![(Modality::Dem, vec![2])];
        let mut t = Tape::<f64>::new();
        let pred = t.constant(g.patches.map(|v| v + 0.5));
        let terms = reconstruction_loss(&mut t, &[(Modality::Dem, pred)], &x, &plan).unwrap();
        assert!((t.value(terms.dem.unwrap()).get(0, 0) - 0.5).abs() < 1e-12);
        assert!(terms.sar_rgb.is_none() && terms.map.is_none());
    }

    fn tiny_model() -> Model<f64> {
        let cfg = ModelConfig { dim: 8, layers: 1, heads: 2, mlp_ratio: 2, class_embed: 2, dec_dim: 4, dec_heads: 2, dec_layers: 1, proj_dim: 4, ..ModelConfig::default() };
        Model::new(&cfg, DataShape { size: 8, patch: 4, classes: 3 }, 5).unwrap()
    }

    #[test]
    fn decoder_shapes_and_zero_path() {
        let mut model = tiny_model();
        let mut t = Tape::with_params(&model.store);
        let f = t.constant(Matrix::from_fn(4, 8, |r, c| (r + c) as f64));
        let o = model.decoder(Modality::Optical).decode(&mut t, f).unwrap();
        let m = model.decoder(Modality::Map).decode(&mut t, f).unwrap();
        assert_eq!((t.shape(o), t.shape(m)), ((4, 48), (4, 48)));
        drop(t);
        let ids: Vec<ParamId> = model.store.ids().filter(|&id| model.store.name(id).starts_with("dec.dem.") && !model.store.name(id).contains("gamma")).collect();
        for id in ids {
            let z = model.store.get(id).map(|_| 0.0);
            *model.store.get_mut(id) = z;
        }
        let mut t = Tape::with_params(&model.store);
        let f = t.constant(Matrix::zeros(4, 8));
        let out = model.decoder(Modality::Dem).decode(&mut t, f).unwrap();
        assert_eq!(t.value(out).max_abs(), 0.0);
    }

    #[test]
    fn batch_loss_decomposes_and_gradients_match() {
        let model = tiny_model();
        let a = inputs(4, 3);
        let mut b = inputs(4, 3);
        b.id = 1;
        if let ModalityInput::Float(g) = &mut b.inputs[0] {
            g.patches = g.patches.map(|v| v * -0.5 + 0.1);
        }
        let counts: Vec<(Modality, usize)> = Modality::ALL.iter().map(|&m| (m, 4)).collect();
        let plans: Vec<MaskPlan> = (0..2).map(|i| sample_mask_plan(&mut rng(10 + i), 1.0, 5, &counts).unwrap()).collect();
        let batch = [&a, &b];
        let mut t = Tape::with_params(&model.store);
        let loss = batch_loss(&model, &mut t, &batch, &plans, 0.7, 0.2, EncoderOptions::default()).unwrap();
        assert_eq!(loss.report.contrastive.len(), 4);
        assert!((loss.report.recombined() - loss.report.total).abs() < 1e-9);
        drop(t);
        let err = max_param_relative_error(&model.store, 1e-5, 3, |n| !n.starts_with("seg."), |t| {
            batch_loss(&model, t, &batch, &plans, 0.7, 0.2, EncoderOptions::default()).unwrap().total
        });
        assert!(err < 1e-4, "{err}");
    }
}
