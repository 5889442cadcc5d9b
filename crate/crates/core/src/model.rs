//! Full network: tokenizer, encoder, pretraining decoders and heads, and the
//! segmentation head, all sharing one parameter store.

use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::config::ModelConfig;
use crate::container::{Blob, Container, ContainerWriter};
use crate::downstream::SegHead;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::pretrain::{ContrastiveHeads, Decoder};
use crate::rng::{stream, Purpose};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::tokenizer::{Tokenizer, TokenizerConfig};

pub const CHECKPOINT_KIND: &str = "imfuse-checkpoint";

/// Raster geometry the model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataShape {
    pub size: usize,
    pub patch: usize,
    pub classes: usize,
}

impl DataShape {
    pub fn grid(&self) -> (usize, usize) {
        (self.size / self.patch, self.size / self.patch)
    }

    pub fn patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub shape: DataShape,
    pub store: ParamStore<T>,
    pub tokenizer: Tokenizer<T>,
    pub encoder: EncoderParams,
    pub decoders: Vec<Decoder>,
    pub contrastive: ContrastiveHeads,
    pub seg_head: SegHead,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig, shape: DataShape, seed: u64) -> Result<Self> {
        config.validate()?;
        if shape.classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        let mut store = ParamStore::new();
        let tok_config = TokenizerConfig {
            size: shape.size,
            patch: shape.patch,
            dim: config.dim,
            classes: shape.classes,
            class_embed: config.class_embed,
            omega: config.omega,
        };
        let tokenizer = Tokenizer::new(&mut store, &mut stream(seed, Purpose::Init, &[0]), tok_config)?;
        let encoder = EncoderParams::new(
            &mut store,
            &mut stream(seed, Purpose::Init, &[1]),
            config.dim,
            config.layers,
            config.heads,
            config.dim * config.mlp_ratio,
        )?;
        let mut rng = stream(seed, Purpose::Init, &[2]);
        let decoders = Modality::ALL.iter().map(|&m| Decoder::new(&mut store, &mut rng, m, config, shape)).collect();
        let contrastive = ContrastiveHeads::new(&mut store, &mut stream(seed, Purpose::Init, &[3]), config.dim, config.proj_dim);
        let seg_head = SegHead::new(&mut store, &mut stream(seed, Purpose::Init, &[4]), config.dim, shape.patch, shape.classes);
        Ok(Self { config: config.clone(), shape, store, tokenizer, encoder, decoders, contrastive, seg_head })
    }

    pub fn decoder(&self, m: Modality) -> &Decoder {
        &self.decoders[m.index()]
    }

    /// Learning-rate multiplier per parameter: `backbone` for everything but
    /// the segmentation head.
    pub fn lr_scales(&self, backbone: f64) -> Vec<f64> {
        self.store.iter().map(|(_, name, _)| if SegHead::owns(name) { 1.0 } else { backbone }).collect()
    }

    /// Freeze flags leaving only the segmentation head trainable.
    pub fn head_only(&self) -> Vec<bool> {
        self.store.iter().map(|(_, name, _)| !SegHead::owns(name)).collect()
    }

    /// Checksum over backbone parameters (everything but the segmentation head).
    pub fn backbone_checksum(&self) -> u64 {
        self.store.checksum(|name| !SegHead::owns(name))
    }
}

fn to_blob<T: Scalar>(m: &Matrix<T>) -> Blob {
    if T::BYTES == 4 {
        Blob::F32(m.data().iter().map(|x| x.to_f32().unwrap()).collect())
    } else {
        Blob::F64(m.data().iter().map(|x| x.to_f64().unwrap()).collect())
    }
}

fn from_blob<T: Scalar>(blob: Blob) -> Result<Vec<T>> {
    match blob {
        Blob::F32(v) => Ok(v.into_iter().map(|x| T::from_f32(x).unwrap()).collect()),
        Blob::F64(v) => Ok(v.into_iter().map(|x| T::from_f64(x).unwrap()).collect()),
        other => Err(Error::contract(format!("checkpoint holds {} values where floats were expected", other.dtype()))),
    }
}

/// Writes parameters, optionally with optimizer moments, to a checkpoint
/// directory. `meta` is stored verbatim in the manifest.
pub fn save_checkpoint<T: Scalar>(dir: impl AsRef<Path>, store: &ParamStore<T>, optimizer: Option<&AdamW<T>>, meta: Value) -> Result<PathBuf> {
    let mut meta = meta;
    if let (Some(opt), Value::Object(map)) = (optimizer, &mut meta) {
        map.insert("adam_steps".into(), serde_json::to_value(&opt.steps).unwrap());
    }
    let mut w = ContainerWriter::create(dir, CHECKPOINT_KIND, meta)?;
    for (id, name, value) in store.iter() {
        let shape = [value.rows(), value.cols()];
        w.add(&format!("param/{name}"), &shape, &to_blob(value))?;
        if let Some(opt) = optimizer {
            w.add(&format!("adam_m/{name}"), &shape, &to_blob(&opt.m[id.index()]))?;
            w.add(&format!("adam_v/{name}"), &shape, &to_blob(&opt.v[id.index()]))?;
        }
    }
    w.finish()
}

fn read_matrix<T: Scalar>(c: &Container, name: &str, rows: usize, cols: usize) -> Result<Matrix<T>> {
    let (shape, blob) = c.read(name)?;
    if shape != [rows, cols] {
        return Err(Error::contract(format!("{name}: checkpoint shape {shape:?} does not match model shape [{rows}, {cols}]")));
    }
    Ok(Matrix::from_vec(rows, cols, from_blob(blob)?))
}

/// Loads every model parameter present in the checkpoint and accepted by
/// `filter`; returns the number loaded. Shapes must agree.
pub fn load_params<T: Scalar>(dir: impl AsRef<Path>, store: &mut ParamStore<T>, filter: impl Fn(&str) -> bool) -> Result<usize> {
    let c = Container::open(dir)?;
    if c.manifest().kind != CHECKPOINT_KIND {
        return Err(Error::contract(format!("{} is not a checkpoint", c.dir().display())));
    }
    let ids: Vec<_> = store.ids().collect();
    let mut loaded = 0;
    for id in ids {
        let name = store.name(id).to_string();
        let key = format!("param/{name}");
        if !filter(&name) || c.entry(&key).is_none() {
            continue;
        }
        let (r, cols) = store.get(id).shape();
        *store.get_mut(id) = read_matrix(&c, &key, r, cols)?;
        loaded += 1;
    }
    Ok(loaded)
}

/// Restores parameters and optimizer state written with moments; returns the
/// manifest metadata.
pub fn load_training_state<T: Scalar>(dir: impl AsRef<Path>, store: &mut ParamStore<T>, optimizer: &mut AdamW<T>) -> Result<Value> {
    let dir = dir.as_ref();
    let n = load_params(dir, store, |_| true)?;
    if n != store.len() {
        return Err(Error::contract(format!("{}: checkpoint holds {n} of {} parameters", dir.display(), store.len())));
    }
    let c = Container::open(dir)?;
    for (id, name, value) in store.iter() {
        let (r, cols) = value.shape();
        optimizer.m[id.index()] = read_matrix(&c, &format!("adam_m/{name}"), r, cols)?;
        optimizer.v[id.index()] = read_matrix(&c, &format!("adam_v/{name}"), r, cols)?;
    }
    let meta = c.manifest().meta.clone();
    optimizer.steps = meta
        .get("adam_steps")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .filter(|s: &Vec<u64>| s.len() == store.len())
        .ok_or_else(|| Error::contract(format!("{}: checkpoint has no optimizer step counts", dir.display())))?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ModelConfig, DataShape) {
        let cfg = ModelConfig { dim: 8, layers: 1, heads: 2, mlp_ratio: 2, class_embed: 2, dec_dim: 4, dec_heads: 1, dec_layers: 1, proj_dim: 4, ..ModelConfig::default() };
        (cfg, DataShape { size: 8, patch: 4, classes: 3 })
    }

    #[test]
    fn construction_is_seeded() {
        let (cfg, shape) = tiny();
        let a = Model::<f64>::new(&cfg, shape, 3).unwrap();
        let b = Model::<f64>::new(&cfg, shape, 3).unwrap();
        let c = Model::<f64>::new(&cfg, shape, 4).unwrap();
        assert_eq!(a.store.checksum(|_| true), b.store.checksum(|_| true));
        assert_ne!(a.store.checksum(|_| true), c.store.checksum(|_| true));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, shape) = tiny();
        let a = Model::<f32>::new(&cfg, shape, 1).unwrap();
        let mut opt = AdamW::new(&a.store, 0.1);
        opt.steps[0] = 5;
        opt.m[0] = opt.m[0].map(|_| 0.5);
        save_checkpoint(dir.path().join("ck"), &a.store, Some(&opt), serde_json::json!({"epoch": 2})).unwrap();
        let mut b = Model::<f32>::new(&cfg, shape, 2).unwrap();
        let mut opt_b = AdamW::new(&b.store, 0.1);
        let meta = load_training_state(dir.path().join("ck"), &mut b.store, &mut opt_b).unwrap();
        assert_eq!(meta["epoch"], 2);
        assert_eq!(a.store.checksum(|_| true), b.store.checksum(|_| true));
        assert_eq!(opt, opt_b);
        let mut wide = Model::<f64>::new(&cfg, shape, 9).unwrap();
        assert_eq!(load_params(dir.path().join("ck"), &mut wide.store, |n| !n.starts_with("seg.")).unwrap(), a.store.len() - 2);
    }
}
