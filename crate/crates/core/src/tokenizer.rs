//! Rasters to token sequences.
//!
//! Each modality is cut into non-overlapping `P x P` patches, projected to
//! `D` dimensions by its own affine map, and offset by a 2-D sine-cosine
//! positional encoding shared by every modality. The sequence is laid out as
//!
//! ```text
//! [ optical | sar | dem | map | fusion (L) | class per modality | global class ]
//! ```
//!
//! with absent modalities (and their class slots) simply left out.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::modality::{Modality, ModalitySet};
use crate::params::{normal, xavier, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::synthdata::{ClassRaster, Raster, Sample};
use crate::tensor::Matrix;

pub const DEFAULT_OMEGA: f64 = 10_000.0;

/// Row-major patch matrix: one row per patch, each row ordered
/// `(pixel row, pixel col, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T> {
    pub patches: Matrix<T>,
    pub patch: usize,
    pub channels: usize,
    /// Patch rows and columns.
    pub grid: (usize, usize),
}

impl<T: Scalar> PatchGrid<T> {
    pub fn count(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

fn check_divisible(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::config(format!("{h}x{w} raster is not divisible into {p}x{p} patches")));
    }
    Ok(())
}

/// Cuts a `channels x h x w` row-major raster into patches.
pub fn patchify<T: Scalar>(data: &[T], channels: usize, h: usize, w: usize, p: usize) -> Result<PatchGrid<T>> {
    check_divisible(h, w, p)?;
    assert_eq!(data.len(), channels * h * w, "raster length does not match its shape");
    let (gr, gc) = (h / p, w / p);
    let width = p * p * channels;
    let mut out = Matrix::zeros(gr * gc, width);
    for pr in 0..gr {
        for pc in 0..gc {
            let row = out.row_mut(pr * gc + pc);
            let mut k = 0;
            for y in 0..p {
                for x in 0..p {
                    for c in 0..channels {
                        row[k] = data[(c * h + pr * p + y) * w + pc * p + x];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(PatchGrid { patches: out, patch: p, channels, grid: (gr, gc) })
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(grid: &PatchGrid<T>) -> Vec<T> {
    let p = grid.patch;
    let (gr, gc) = grid.grid;
    let (h, w) = (gr * p, gc * p);
    let ch = grid.channels;
    assert_eq!(grid.patches.cols(), p * p * ch, "patch width does not match grid");
    let mut out = vec![T::zero(); ch * h * w];
    for pr in 0..gr {
        for pc in 0..gc {
            let row = grid.patches.row(pr * gc + pc);
            let mut k = 0;
            for y in 0..p {
                for x in 0..p {
                    for c in 0..ch {
                        out[(c * h + pr * p + y) * w + pc * p + x] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Class ids of a single-channel raster in patch order (`L * P * P` entries).
pub fn patchify_classes(raster: &ClassRaster, p: usize) -> Result<Vec<usize>> {
    check_divisible(raster.height, raster.width, p)?;
    let (h, w) = (raster.height, raster.width);
    let mut out = Vec::with_capacity(h * w);
    for pr in 0..h / p {
        for pc in 0..w / p {
            for y in 0..p {
                for x in 0..p {
                    out.push(raster.data[(pr * p + y) * w + pc * p + x] as usize);
                }
            }
        }
    }
    Ok(out)
}

/// Sinusoidal code of one integer position:
/// `[2i] = sin(k / omega^(2i/d))`, `[2i+1] = cos(k / omega^(2i/d))`.
pub fn position_encoding(k: usize, d_enc: usize, omega: f64) -> Result<Vec<f64>> {
    if d_enc == 0 || !d_enc.is_multiple_of(2) {
        return Err(Error::config(format!("positional encoding width {d_enc} must be even and positive")));
    }
    if !(omega > 0.0) {
        return Err(Error::config(format!("positional encoding base {omega} must be positive")));
    }
    let mut out = Vec::with_capacity(d_enc);
    for i in 0..d_enc / 2 {
        let angle = k as f64 / omega.powf(2.0 * i as f64 / d_enc as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

/// `L x dim` table; patch `(r, c)` gets `[code(c) ; code(r)]`, each half `dim / 2` wide.
pub fn grid_position_encoding<T: Scalar>(grid: (usize, usize), dim: usize, omega: f64) -> Result<Matrix<T>> {
    if !dim.is_multiple_of(4) {
        return Err(Error::config(format!("embedding width {dim} must be divisible by 4 for 2-D sine-cosine codes")));
    }
    let half = dim / 2;
    let mut out = Matrix::zeros(grid.0 * grid.1, dim);
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            let x = position_encoding(c, half, omega)?;
            let y = position_encoding(r, half, omega)?;
            for (dst, v) in out.row_mut(r * grid.1 + c).iter_mut().zip(x.iter().chain(&y)) {
                *dst = T::lit(*v);
            }
        }
    }
    Ok(out)
}

/// Prepared network input of one modality.
#[derive(Clone, Debug, PartialEq)]
pub enum ModalityInput<T> {
    /// `L x P*P*C` patch matrix.
    Float(PatchGrid<T>),
    /// Class ids in patch order.
    Classes(Vec<usize>),
}

/// Patchified inputs of every modality of one sample.
#[derive(Clone, Debug)]
pub struct SampleInputs<T> {
    pub id: u64,
    pub inputs: [ModalityInput<T>; 4],
    /// Label class ids in patch order.
    pub label: Vec<usize>,
}

impl<T: Scalar> SampleInputs<T> {
    pub fn from_sample(sample: &Sample, p: usize) -> Result<Self> {
        let float = |r: &Raster| -> Result<ModalityInput<T>> {
            let data: Vec<T> = r.data.iter().map(|&v| T::from_f32(v).unwrap()).collect();
            Ok(ModalityInput::Float(patchify(&data, r.channels, r.height, r.width, p)?))
        };
        Ok(Self {
            id: sample.id,
            inputs: [
                float(&sample.optical)?,
                float(&sample.sar)?,
                float(&sample.dem)?,
                ModalityInput::Classes(patchify_classes(&sample.map, p)?),
            ],
            label: patchify_classes(&sample.label, p)?,
        })
    }

    pub fn get(&self, m: Modality) -> &ModalityInput<T> {
        &self.inputs[m.index()]
    }
}

#[derive(Clone, Debug)]
pub struct ModalityEmbedder {
    pub modality: Modality,
    pub weight: ParamId,
    pub bias: ParamId,
    /// Class embedding table for categorical modalities.
    pub table: Option<ParamId>,
    pub input_dim: usize,
}

impl ModalityEmbedder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        modality: Modality,
        patch: usize,
        dim: usize,
        classes: usize,
        class_embed: usize,
    ) -> Self {
        let name = modality.name();
        let (table, width) = if modality.is_categorical() {
            (Some(store.add(format!("tok.{name}.table"), normal(rng, classes, class_embed, 1.0))), class_embed)
        } else {
            (None, modality.channels())
        };
        let input_dim = patch * patch * width;
        let weight = store.add(format!("tok.{name}.w"), xavier(rng, input_dim, dim));
        let bias = store.add(format!("tok.{name}.b"), Matrix::zeros(1, dim));
        Self { modality, weight, bias, table, input_dim }
    }

    /// `L x D` tokens; affine in the patches for measurement modalities.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<'_, T>, input: &ModalityInput<T>) -> Result<Var> {
        let x = match (input, self.table) {
            (ModalityInput::Float(grid), None) => {
                if grid.patches.cols() != self.input_dim {
                    return Err(Error::contract(format!(
                        "{}: patch width {} does not match embedder input {}",
                        self.modality,
                        grid.patches.cols(),
                        self.input_dim
                    )));
                }
                tape.constant(grid.patches.clone())
            }
            (ModalityInput::Classes(ids), Some(table)) => {
                let t = tape.param(table);
                let (classes, e) = tape.shape(t);
                if ids.is_empty() || (ids.len() * e) % self.input_dim != 0 {
                    return Err(Error::contract(format!("{}: {} class ids do not form whole patches", self.modality, ids.len())));
                }
                if let Some(bad) = ids.iter().find(|&&c| c >= classes) {
                    return Err(Error::contract(format!("{}: class id {bad} outside [0, {classes})", self.modality)));
                }
                let rows = tape.gather_rows(t, ids);
                tape.reshape(rows, ids.len() * e / self.input_dim, self.input_dim)
            }
            _ => return Err(Error::contract(format!("{}: input kind does not match embedder", self.modality))),
        };
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w);
        Ok(tape.add_row(y, b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, i: usize) -> bool {
        i >= self.start && i < self.end()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalitySpan {
    pub modality: Modality,
    pub start: usize,
    /// Grid patch index of every token in the span, ascending.
    pub patches: Vec<usize>,
}

impl ModalitySpan {
    pub fn span(&self) -> Span {
        Span { start: self.start, len: self.patches.len() }
    }
}

/// Structure of an assembled token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub modalities: Vec<ModalitySpan>,
    pub fusion: Span,
    /// One class slot per present modality, canonical order.
    pub class_slots: Vec<(Modality, usize)>,
    pub global_class: usize,
    pub grid: (usize, usize),
}

impl TokenLayout {
    /// Layout with every patch of every present modality.
    pub fn full(present: ModalitySet, grid: (usize, usize)) -> Result<Self> {
        let l = grid.0 * grid.1;
        let visible: Vec<(Modality, Vec<usize>)> = present.iter().map(|m| (m, (0..l).collect())).collect();
        Self::from_visible(&visible, grid)
    }

    /// Layout holding the listed patches per modality (canonical order is
    /// imposed regardless of the order given).
    pub fn from_visible(visible: &[(Modality, Vec<usize>)], grid: (usize, usize)) -> Result<Self> {
        if visible.is_empty() {
            return Err(Error::contract("token sequence needs at least one modality"));
        }
        let l = grid.0 * grid.1;
        let mut sorted: Vec<(Modality, Vec<usize>)> = visible.to_vec();
        sorted.sort_by_key(|(m, _)| *m);
        if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::contract("modality listed twice"));
        }
        let mut modalities = Vec::with_capacity(sorted.len());
        let mut offset = 0;
        for (m, mut patches) in sorted {
            patches.sort_unstable();
            patches.dedup();
            if patches.iter().any(|&p| p >= l) {
                return Err(Error::contract(format!("{m}: patch index outside grid of {l}")));
            }
            let n = patches.len();
            modalities.push(ModalitySpan { modality: m, start: offset, patches });
            offset += n;
        }
        let fusion = Span { start: offset, len: l };
        offset += l;
        let class_slots = modalities.iter().enumerate().map(|(i, s)| (s.modality, offset + i)).collect();
        let global_class = offset + modalities.len();
        Ok(Self { modalities, fusion, class_slots, global_class, grid })
    }

    pub fn len(&self) -> usize {
        self.global_class + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn patch_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn present(&self) -> ModalitySet {
        self.modalities.iter().map(|s| s.modality).collect()
    }

    pub fn span_of(&self, m: Modality) -> Option<&ModalitySpan> {
        self.modalities.iter().find(|s| s.modality == m)
    }

    pub fn class_slot(&self, m: Modality) -> Option<usize> {
        self.class_slots.iter().find(|(x, _)| *x == m).map(|&(_, i)| i)
    }

    /// Number of modality (non-fusion, non-class) tokens.
    pub fn modality_token_count(&self) -> usize {
        self.fusion.start
    }

    /// Owning modality of token `i`, `None` for fusion and the global class token.
    pub fn owner(&self, i: usize) -> Option<Modality> {
        if let Some(s) = self.modalities.iter().find(|s| s.span().contains(i)) {
            return Some(s.modality);
        }
        self.class_slots.iter().find(|&&(_, slot)| slot == i).map(|&(m, _)| m)
    }

    /// Grid `(row, col)` of a spatial token.
    pub fn position(&self, i: usize) -> Option<(usize, usize)> {
        let patch = if self.fusion.contains(i) {
            i - self.fusion.start
        } else {
            let s = self.modalities.iter().find(|s| s.span().contains(i))?;
            s.patches[i - s.start]
        };
        Some((patch / self.grid.1, patch % self.grid.1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub size: usize,
    pub patch: usize,
    pub dim: usize,
    pub classes: usize,
    pub class_embed: usize,
    pub omega: f64,
}

impl TokenizerConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.size / self.patch, self.size / self.patch)
    }
}

/// Embedders, learned fusion tokens, class tokens and the fixed positional table.
#[derive(Clone, Debug)]
pub struct Tokenizer<T> {
    pub config: TokenizerConfig,
    pub embedders: Vec<ModalityEmbedder>,
    pub fusion: ParamId,
    pub class_tokens: Vec<ParamId>,
    pub global_class: ParamId,
    pub positions: Matrix<T>,
}

impl<T: Scalar> Tokenizer<T> {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, config: TokenizerConfig) -> Result<Self> {
        check_divisible(config.size, config.size, config.patch)?;
        let positions = grid_position_encoding(config.grid(), config.dim, config.omega)?;
        let l = positions.rows();
        let embedders = Modality::ALL
            .iter()
            .map(|&m| ModalityEmbedder::new(store, rng, m, config.patch, config.dim, config.classes, config.class_embed))
            .collect();
        let fusion = store.add("tok.fusion", normal(rng, l, config.dim, 0.02));
        let class_tokens = Modality::ALL
            .iter()
            .map(|m| store.add(format!("tok.cls.{}", m.name()), normal(rng, 1, config.dim, 0.02)))
            .collect();
        let global_class = store.add("tok.cls.global", normal(rng, 1, config.dim, 0.02));
        Ok(Self { config, embedders, fusion, class_tokens, global_class, positions })
    }

    pub fn embedder(&self, m: Modality) -> &ModalityEmbedder {
        &self.embedders[m.index()]
    }

    /// Embeds the present modalities and assembles the full sequence.
    pub fn assemble(&self, tape: &mut Tape<'_, T>, inputs: &SampleInputs<T>, present: ModalitySet) -> Result<(Var, TokenLayout)> {
        let layout = TokenLayout::full(present, self.config.grid())?;
        let pos = tape.constant(self.positions.clone());
        let mut parts = Vec::with_capacity(2 * present.len() + 2);
        for m in present.iter() {
            let tokens = self.embedder(m).embed(tape, inputs.get(m))?;
            parts.push(tape.add(tokens, pos));
        }
        let fusion = tape.param(self.fusion);
        parts.push(tape.add(fusion, pos));
        for m in present.iter() {
            parts.push(tape.param(self.class_tokens[m.index()]));
        }
        parts.push(tape.param(self.global_class));
        Ok((tape.concat_rows(&parts), layout))
    }
}

/// Keeps only the listed patches of each modality span; fusion and class
/// tokens are always retained. Modalities missing from `visible` keep no
/// spatial tokens but retain their class slot.
pub fn select_visible<T: Scalar>(
    tape: &mut Tape<'_, T>,
    sequence: Var,
    layout: &TokenLayout,
    visible: &[(Modality, Vec<usize>)],
) -> Result<(Var, TokenLayout)> {
    let mut keep_rows = Vec::new();
    let mut new_visible = Vec::with_capacity(layout.modalities.len());
    for span in &layout.modalities {
        let wanted: Vec<usize> = visible.iter().find(|(m, _)| *m == span.modality).map(|(_, v)| v.clone()).unwrap_or_default();
        let mut kept = Vec::with_capacity(wanted.len());
        for &p in &wanted {
            let pos = span
                .patches
                .binary_search(&p)
                .map_err(|_| Error::contract(format!("{}: patch {p} is not in the span", span.modality)))?;
            kept.push((p, span.start + pos));
        }
        kept.sort_unstable();
        kept.dedup();
        keep_rows.extend(kept.iter().map(|&(_, row)| row));
        new_visible.push((span.modality, kept.into_iter().map(|(p, _)| p).collect::<Vec<_>>()));
    }
    if let Some((m, _)) = visible.iter().find(|(m, _)| layout.span_of(*m).is_none()) {
        return Err(Error::contract(format!("{m}: not present in the sequence")));
    }
    keep_rows.extend(layout.fusion.start..layout.len());
    let new_layout = TokenLayout::from_visible(&new_visible, layout.grid)?;
    debug_assert_eq!(new_layout.len(), keep_rows.len());
    Ok((tape.gather_rows(sequence, &keep_rows), new_layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn tokenizer() -> (ParamStore<f64>, Tokenizer<f64>) {
        let mut store = ParamStore::new();
        let mut rng = stream(1, Purpose::Init, &[]);
        let cfg = TokenizerConfig { size: 32, patch: 8, dim: 16, classes: 5, class_embed: 4, omega: DEFAULT_OMEGA };
        let t = Tokenizer::new(&mut store, &mut rng, cfg).unwrap();
        (store, t)
    }

    #[test]
    fn patch_grid_shapes() {
        let g = patchify(&vec![0.0f64; 3 * 32 * 32], 3, 32, 32, 8).unwrap();
        assert_eq!((g.count(), g.grid, g.patches.cols()), (16, (4, 4), 192));
        let g = patchify(&vec![0.0f32; 256 * 256], 1, 256, 256, 16).unwrap();
        assert_eq!(g.count(), 256);
        assert!(matches!(patchify(&vec![0.0f32; 30 * 32], 1, 30, 32, 8), Err(Error::Config(_))));
    }

    #[test]
    fn constant_raster_gives_identical_patches() {
        let g = patchify(&vec![2.5f32; 2 * 16 * 16], 2, 16, 16, 4).unwrap();
        assert!((1..g.count()).all(|i| g.patches.row(i) == g.patches.row(0)));
    }

    #[test]
    fn position_code_values() {
        let z = position_encoding(0, 8, DEFAULT_OMEGA).unwrap();
        assert!(z.chunks(2).all(|p| p[0] == 0.0 && p[1] == 1.0));
        let e = position_encoding(3, 8, DEFAULT_OMEGA).unwrap();
        assert!((e[0] - 3f64.sin()).abs() < 1e-15);
        assert!((e[0] - 0.14112).abs() < 1e-5);
        for k in 0..50 {
            for p in position_encoding(k, 32, DEFAULT_OMEGA).unwrap().chunks(2) {
                assert!((p[0] * p[0] + p[1] * p[1] - 1.0).abs() < 1e-12);
            }
        }
        assert!(position_encoding(1, 7, DEFAULT_OMEGA).is_err());
    }

    #[test]
    fn sequence_lengths_follow_layout_rules() {
        let (store, tok) = tokenizer();
        let sample = crate::synthdata::render_sample(
            &crate::synthdata::generate_scene(4, 32, 5, 8, (2, 4)).unwrap(),
            &Default::default(),
            0,
        );
        let inputs = SampleInputs::<f64>::from_sample(&sample, 8).unwrap();
        let mut tape = Tape::with_params(&store);
        let (seq, layout) = tok.assemble(&mut tape, &inputs, ModalitySet::FULL).unwrap();
        assert_eq!(tape.shape(seq), (85, 16));
        assert_eq!(layout.len(), 85);
        let (seq, _) = tok.assemble(&mut tape, &inputs, ModalitySet::single(Modality::Dem)).unwrap();
        assert_eq!(tape.shape(seq).0, 34);
        assert!(tok.assemble(&mut tape, &inputs, ModalitySet::EMPTY).is_err());
    }

    #[test]
    fn layout_is_canonical() {
        let a = TokenLayout::from_visible(&[(Modality::Optical, vec![0, 1]), (Modality::Sar, vec![2])], (2, 2)).unwrap();
        let b = TokenLayout::from_visible(&[(Modality::Sar, vec![2]), (Modality::Optical, vec![1, 0])], (2, 2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.position(2), Some((1, 0)));
        assert_eq!(a.owner(a.class_slot(Modality::Sar).unwrap()), Some(Modality::Sar));
        assert_eq!(a.owner(a.global_class), None);
    }

    #[test]
    fn map_patch_of_uniform_class_embeds_repeated_row() {
        let (store, tok) = tokenizer();
        let emb = tok.embedder(Modality::Map);
        let ids = vec![3usize; 16 * 64];
        let mut tape = Tape::with_params(&store);
        let out = emb.embed(&mut tape, &ModalityInput::Classes(ids)).unwrap();
        let table = store.get(emb.table.unwrap());
        let w = store.get(emb.weight);
        let b = store.get(emb.bias);
        let repeated: Vec<f64> = (0..64).flat_map(|_| table.row(3).to_vec()).collect();
        for j in 0..16 {
            let expected: f64 = (0..repeated.len()).map(|k| repeated[k] * w.get(k, j)).sum::<f64>() + b.get(0, j);
            assert!((tape.value(out).get(5, j) - expected).abs() < 1e-12);
        }
    }
}
