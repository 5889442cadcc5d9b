//! Supervised segmentation over random modality combinations.

use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::{DownstreamConfig, TrainMode};
use crate::encoder::EncoderOptions;
use crate::error::{Error, Result};
use crate::model::{load_params, Model};
use crate::modality::ModalitySet;
use crate::nn::Linear;
use crate::optim::{step_decay, AdamW};
use crate::params::ParamStore;
use crate::rng::{stream, Purpose};
use crate::scalar::Scalar;
use crate::tokenizer::{unpatchify, PatchGrid, SampleInputs};

/// Draws the modality subset of a training step.
#[derive(Clone, Debug)]
pub struct SubsetSampler {
    subsets: Vec<ModalitySet>,
    universe: ModalitySet,
    random: bool,
}

impl SubsetSampler {
    pub fn new(universe: ModalitySet, random: bool) -> Result<Self> {
        if universe.is_empty() {
            return Err(Error::config("subset sampler needs at least one modality"));
        }
        Ok(Self { subsets: universe.nonempty_subsets(), universe, random })
    }

    /// Uniform over the non-empty subsets, or always the full set when
    /// random combination is off.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ModalitySet {
        if self.random {
            self.subsets[rng.gen_range(0..self.subsets.len())]
        } else {
            self.universe
        }
    }

    pub fn subsets(&self) -> &[ModalitySet] {
        &self.subsets
    }
}

/// Per-token linear classifier producing `P x P x K` logits per patch.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub linear: Linear,
    pub patch: usize,
    pub classes: usize,
}

impl SegHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, dim: usize, patch: usize, classes: usize) -> Self {
        Self { linear: Linear::new(store, rng, "seg.head", dim, patch * patch * classes), patch, classes }
    }

    pub fn owns(name: &str) -> bool {
        name.starts_with("seg.")
    }
}

impl DownstreamConfig {
    pub fn encoder_options(&self) -> EncoderOptions {
        EncoderOptions { use_lstm: !self.no_lstm, use_mask: !self.no_mask }
    }
}

/// Pixel logits `(L * P * P) x K`, rows in patch order then pixel row and column.
pub fn segment_logits<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    inputs: &SampleInputs<T>,
    subset: ModalitySet,
    options: EncoderOptions,
) -> Result<Var> {
    if subset.is_empty() {
        return Err(Error::contract("segmentation needs a non-empty modality subset"));
    }
    let (seq, layout) = model.tokenizer.assemble(tape, inputs, subset)?;
    let encoded = model.encoder.encode(tape, seq, &layout, options)?;
    let out = model.encoder.readout(tape, &encoded, &layout)?;
    let head = &model.seg_head;
    let logits = head.linear.forward(tape, out.fusion);
    let l = layout.patch_count();
    Ok(tape.reshape(logits, l * head.patch * head.patch, head.classes))
}

/// `K x H x W` logit raster.
pub fn segment<T: Scalar>(model: &Model<T>, inputs: &SampleInputs<T>, subset: ModalitySet, options: EncoderOptions) -> Result<Vec<T>> {
    let mut tape = Tape::with_params(&model.store);
    let v = segment_logits(model, &mut tape, inputs, subset, options)?;
    let head = &model.seg_head;
    let l = model.shape.patches();
    let grid = PatchGrid { patches: tape.value(v).clone().reshaped(l, head.patch * head.patch * head.classes), patch: head.patch, channels: head.classes, grid: model.shape.grid() };
    Ok(unpatchify(&grid))
}

/// Weighted cross-entropy plus soft dice.
pub fn segmentation_loss<T: Scalar>(tape: &mut Tape<'_, T>, logits: Var, labels: &[usize], ce_weight: f64, dice_weight: f64) -> Result<Var> {
    let (n, k) = tape.shape(logits);
    if labels.len() != n {
        return Err(Error::contract(format!("{} labels for {n} pixels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&c| c >= k) {
        return Err(Error::contract(format!("label {bad} outside [0, {k})")));
    }
    let ce = tape.cross_entropy(logits, labels);
    let dice = tape.dice_loss(logits, labels);
    let ce = tape.scale(ce, T::lit(ce_weight));
    let dice = tape.scale(dice, T::lit(dice_weight));
    Ok(tape.add(ce, dice))
}

/// Row index = reference class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn add(&mut self, reference: usize, predicted: usize) {
        self.counts[reference * self.classes + predicted] += 1;
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.classes + predicted]
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `TP / (TP + FP + FN)` for classes present in the reference.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let reference: u64 = (0..k).map(|p| self.get(c, p)).sum();
                if reference == 0 {
                    return None;
                }
                let predicted: u64 = (0..k).map(|r| self.get(r, c)).sum();
                Some(tp as f64 / (reference + predicted - tp) as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subset: String,
    pub miou: f64,
    pub iou: Vec<Option<f64>>,
    pub confusion: Confusion,
}

impl EvalReport {
    pub fn from_confusion(subset: ModalitySet, confusion: Confusion) -> Self {
        Self { subset: subset.to_string(), miou: confusion.miou(), iou: confusion.iou(), confusion }
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Confusion matrices over `samples` for each subset, in the given order.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[SampleInputs<T>], subsets: &[ModalitySet], options: EncoderOptions) -> Result<Vec<EvalReport>> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    let k = model.shape.classes;
    subsets
        .iter()
        .map(|&subset| {
            let mut confusion = Confusion::new(k);
            for s in samples {
                let mut tape = Tape::with_params(&model.store);
                let v = segment_logits(model, &mut tape, s, subset, options)?;
                let logits = tape.value(v);
                for (i, &reference) in s.label.iter().enumerate() {
                    confusion.add(reference, argmax(logits.row(i)));
                }
            }
            Ok(EvalReport::from_confusion(subset, confusion))
        })
        .collect()
}

/// Subset-by-metric table: `subset miou iou_0 .. iou_{K-1}`, `NA` for classes
/// absent from the reference.
pub fn reports_tsv(reports: &[EvalReport]) -> String {
    let k = reports.first().map_or(0, |r| r.iou.len());
    let mut s = String::from("subset\tmiou");
    for c in 0..k {
        s.push_str(&format!("\tiou_{c}"));
    }
    s.push('\n');
    for r in reports {
        s.push_str(&format!("{}\t{:.6}", r.subset, r.miou));
        for v in &r.iou {
            match v {
                Some(x) => s.push_str(&format!("\t{x:.6}")),
                None => s.push_str("\tNA"),
            }
        }
        s.push('\n');
    }
    s
}

/// Parses `(subset, miou)` pairs back out of [`reports_tsv`] output.
pub fn parse_reports_tsv(text: &str) -> Result<Vec<(String, f64)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.starts_with("subset\tmiou") => {}
        _ => return Err(Error::contract("evaluation table lacks its header")),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut f = l.split('\t');
            let subset = f.next().unwrap_or_default().to_string();
            let miou = f.next().and_then(|v| v.parse().ok()).ok_or_else(|| Error::contract(format!("bad evaluation row {l:?}")))?;
            Ok((subset, miou))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamOutcome {
    /// Mean training loss per epoch.
    pub curve: Vec<f64>,
    /// Steps drawn per subset, keyed by subset name.
    pub subset_steps: Vec<(String, usize)>,
}

/// Trains the segmentation head (and, unless partial, the backbone).
/// Finetune modes first load every non-head parameter from
/// `config.checkpoint`.
pub fn train_downstream<T: Scalar>(model: &mut Model<T>, train: &[SampleInputs<T>], config: &DownstreamConfig, seed: u64) -> Result<DownstreamOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    if config.mode.needs_checkpoint() {
        let dir: &PathBuf = config
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::config(format!("{} requires a pretrained checkpoint", config.mode.name())))?;
        if !dir.join(crate::container::MANIFEST).exists() {
            return Err(Error::io(dir.clone(), std::io::Error::new(std::io::ErrorKind::NotFound, "pretrained checkpoint not found")));
        }
        load_params(dir, &mut model.store, |n| !SegHead::owns(n))?;
    }
    let options = config.encoder_options();
    let sampler = SubsetSampler::new(ModalitySet::FULL, config.random_combo)?;
    let frozen = match config.mode {
        TrainMode::PartialFinetune => model.head_only(),
        _ => vec![false; model.store.len()],
    };
    let scales = match config.mode {
        TrainMode::Scratch => vec![1.0; model.store.len()],
        _ => model.lr_scales(config.backbone_lr_mult),
    };
    let mut optimizer = AdamW::new(&model.store, config.weight_decay);
    let batches = train.len().div_ceil(config.batch);
    let total = batches * config.epochs;
    let mut curve = Vec::with_capacity(config.epochs);
    let mut counts: Vec<(ModalitySet, usize)> = sampler.subsets().iter().map(|&s| (s, 0)).collect();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(seed, Purpose::DataOrder, &[1, epoch as u64]));
        let mut subset_rng = stream(seed, Purpose::Subset, &[epoch as u64]);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch).enumerate() {
            let subset = sampler.sample(&mut subset_rng);
            if let Some(c) = counts.iter_mut().find(|c| c.0 == subset) {
                c.1 += 1;
            }
            let grads = {
                let mut tape = Tape::with_frozen(&model.store, &frozen);
                let mut losses = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let logits = segment_logits(model, &mut tape, &train[i], subset, options)?;
                    losses.push(segmentation_loss(&mut tape, logits, &train[i].label, config.ce_weight, config.dice_weight)?);
                }
                let stacked = tape.concat_rows(&losses);
                let loss = tape.mean(stacked);
                let value = tape.value(loss).get(0, 0).to_f64().unwrap();
                if !value.is_finite() {
                    return Err(Error::Diverged { term: "segmentation loss".into(), epoch });
                }
                epoch_loss += value;
                tape.backward(loss).into_param_grads()
            };
            let step = epoch * batches + b;
            let lr = config.lr * step_decay(step, total, &config.milestones);
            optimizer.update(&mut model.store, &grads, lr, &scales);
        }
        curve.push(epoch_loss / batches as f64);
    }
    Ok(DownstreamOutcome { curve, subset_steps: counts.into_iter().map(|(s, n)| (s.to_string(), n)).collect() })
}

/// Ablation matrix cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Bi-LSTM, masked attention and random combination, trained from scratch.
    Full,
    NoLstm,
    NoRandom,
    /// Full finetune with unrestricted attention.
    NoMask,
    PartialFinetune,
    FullFinetune,
    /// Unrestricted attention and no random combination, from scratch.
    MultiVit,
}

impl Variant {
    /// Columns of the ablation table.
    pub const ABLATION: [Variant; 6] =
        [Variant::Full, Variant::NoLstm, Variant::NoRandom, Variant::NoMask, Variant::PartialFinetune, Variant::FullFinetune];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLstm => "no-lstm",
            Variant::NoRandom => "no-random",
            Variant::NoMask => "no-mask",
            Variant::PartialFinetune => "partial-finetune",
            Variant::FullFinetune => "full-finetune",
            Variant::MultiVit => "multivit",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        matches!(self, Variant::NoMask | Variant::PartialFinetune | Variant::FullFinetune)
    }

    /// `base` with this cell's mode and ablation flags.
    pub fn configure(self, base: &DownstreamConfig, checkpoint: Option<PathBuf>) -> DownstreamConfig {
        let mut c = base.clone();
        c.mode = TrainMode::Scratch;
        c.random_combo = true;
        c.no_lstm = false;
        c.no_mask = false;
        match self {
            Variant::Full => {}
            Variant::NoLstm => c.no_lstm = true,
            Variant::NoRandom => c.random_combo = false,
            Variant::NoMask => {
                c.mode = TrainMode::FullFinetune;
                c.no_mask = true;
            }
            Variant::PartialFinetune => c.mode = TrainMode::PartialFinetune,
            Variant::FullFinetune => c.mode = TrainMode::FullFinetune,
            Variant::MultiVit => {
                c.no_mask = true;
                c.random_combo = false;
            }
        }
        c.checkpoint = if c.mode.needs_checkpoint() { checkpoint } else { None };
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Variant::MultiVit].iter().chain(Variant::ABLATION.iter()).copied().find(|v| v.name() == s).ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

/// Subset-by-variant mIoU table with one column per variant.
pub fn ablation_tsv(columns: &[(Variant, Vec<EvalReport>)]) -> String {
    let mut s = String::from("subset");
    for (v, _) in columns {
        s.push('\t');
        s.push_str(v.name());
    }
    s.push('\n');
    let Some((_, first)) = columns.first() else { return s };
    for (i, r) in first.iter().enumerate() {
        s.push_str(&r.subset);
        for (_, reports) in columns {
            s.push_str(&format!("\t{:.6}", reports[i].miou));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::Modality;

    #[test]
    fn confusion_oracles() {
        let mut c = Confusion::new(2);
        for (r, p, n) in [(0, 0, 3), (0, 1, 1), (1, 0, 1), (1, 1, 3)] {
            for _ in 0..n {
                c.add(r, p);
            }
        }
        assert_eq!(c.iou(), vec![Some(0.6), Some(0.6)]);
        assert!((c.miou() - 0.6).abs() < 1e-15);
        let mut c = Confusion::new(5);
        for r in 0..5 {
            for _ in 0..10 {
                c.add(r, 0);
            }
        }
        let iou = c.iou();
        assert!((iou[0].unwrap() - 0.2).abs() < 1e-15);
        assert!(iou[1..].iter().all(|v| *v == Some(0.0)));
        assert!((c.miou() - 0.04).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let mut c = Confusion::new(3);
        c.add(0, 0);
        c.add(1, 1);
        c.add(1, 2);
        assert_eq!(c.iou()[2], None);
        assert!((c.miou() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn sampler_modes() {
        let s = SubsetSampler::new(ModalitySet::single(Modality::Sar), true).unwrap();
        let mut r = stream(1, Purpose::Subset, &[]);
        assert!((0..50).all(|_| s.sample(&mut r) == ModalitySet::single(Modality::Sar)));
        let s = SubsetSampler::new(ModalitySet::FULL, false).unwrap();
        assert!((0..50).all(|_| s.sample(&mut r) == ModalitySet::FULL));
        assert!(SubsetSampler::new(ModalitySet::EMPTY, true).is_err());
    }

    #[test]
    fn loss_oracles() {
        let mut t = Tape::<f64>::new();
        let labels: Vec<usize> = (0..10).map(|i| i % 5).collect();
        let uniform = t.constant(crate::tensor::Matrix::zeros(10, 5));
        let l = segmentation_loss(&mut t, uniform, &labels, 1.0, 0.0).unwrap();
        assert!((t.value(l).get(0, 0) - 5f64.ln()).abs() < 1e-12);
        let sharp = t.constant(crate::tensor::Matrix::from_fn(10, 5, |r, c| if c == labels[r] { 60.0 } else { -60.0 }));
        let l = segmentation_loss(&mut t, sharp, &labels, 1.0, 1.0).unwrap();
        assert!(t.value(l).get(0, 0) < 1e-12);
        assert!(segmentation_loss(&mut t, sharp, &[5; 10], 1.0, 1.0).is_err());
    }

    #[test]
    fn variants_configure_flags() {
        let base = DownstreamConfig::default();
        let ck = Some(PathBuf::from("ck"));
        let v = Variant::MultiVit.configure(&base, ck.clone());
        assert!(v.no_mask && !v.random_combo && v.mode == TrainMode::Scratch && v.checkpoint.is_none());
        let v = Variant::NoMask.configure(&base, ck.clone());
        assert!(v.no_mask && v.random_combo && v.mode == TrainMode::FullFinetune && v.checkpoint == ck);
        assert_eq!(Variant::ABLATION.len(), 6);
        assert_eq!("no-random".parse::<Variant>().unwrap(), Variant::NoRandom);
    }

    #[test]
    fn table_round_trip() {
        let mut c = Confusion::new(3);
        c.add(0, 0);
        c.add(1, 0);
        let r = EvalReport::from_confusion(ModalitySet::FULL, c);
        let text = reports_tsv(std::slice::from_ref(&r));
        assert!(text.lines().nth(1).unwrap().ends_with("\tNA"));
        let parsed = parse_reports_tsv(&text).unwrap();
        assert_eq!(parsed[0].0, "optical+sar+dem+map");
        assert!((parsed[0].1 - r.miou).abs() < 1e-6);
    }
}
