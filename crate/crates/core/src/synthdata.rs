//! Correlated synthetic multimodal tiles.
//!
//! A [`LatentScene`] is a set of labelled shapes with heights. Rendering
//! produces four aligned modalities that each carry partial information about
//! the class raster:
//!
//! * optical: per-class colour plus Gaussian noise; class pairs (1, 2) and
//!   (3, 4) have near-identical colours,
//! * sar: boundary response of the height and class fields under
//!   multiplicative speckle, plus a small additive noise floor,
//! * dem: per-object height plus additive noise; heights separate the classes
//!   that optical confuses,
//! * map: the clean labels with a fraction of pixels replaced by uniformly
//!   random classes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{Blob, Container, ContainerWriter};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::rng::{self, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub class: usize,
    /// Centre in pixels, (row, col).
    pub center: (f64, f64),
    /// Half extents in pixels, (rows, cols).
    pub extent: (f64, f64),
    pub height: f64,
}

impl SceneObject {
    fn covers(&self, r: usize, c: usize) -> bool {
        let dy = (r as f64 + 0.5 - self.center.0) / self.extent.0;
        let dx = (c as f64 + 0.5 - self.center.1) / self.extent.1;
        match self.shape {
            ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentScene {
    pub seed: u64,
    pub size: usize,
    pub classes: usize,
    pub objects: Vec<SceneObject>,
}

const PALETTE: [[f32; 3]; 8] = [
    [0.35, 0.45, 0.30],
    [0.80, 0.30, 0.25],
    [0.76, 0.34, 0.29],
    [0.25, 0.35, 0.75],
    [0.29, 0.39, 0.71],
    [0.85, 0.80, 0.30],
    [0.55, 0.20, 0.60],
    [0.15, 0.65, 0.65],
];

const CLASS_HEIGHT: [f64; 8] = [0.0, 0.5, 3.0, 1.5, 4.5, 2.0, 6.0, 1.0];

const HEIGHT_JITTER: f64 = 0.3;

/// Base optical colour of a class.
pub fn class_color(class: usize) -> [f32; 3] {
    if class < PALETTE.len() {
        return PALETTE[class];
    }
    let mut rng = rng::stream(class as u64, Purpose::Render, &[0xC010]);
    [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
}

/// Mean object height of a class (background is 0).
pub fn class_height(class: usize) -> f64 {
    CLASS_HEIGHT.get(class).copied().unwrap_or(0.75 * class as f64)
}

pub fn generate_scene(
    seed: u64,
    size: usize,
    classes: usize,
    patch: usize,
    object_count: (usize, usize),
) -> Result<LatentScene> {
    if patch == 0 || size == 0 || !size.is_multiple_of(patch) {
        return Err(Error::config(format!("tile size {size} is not a positive multiple of patch size {patch}")));
    }
    if classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {classes}")));
    }
    if object_count.0 > object_count.1 {
        return Err(Error::config(format!("object count range {object_count:?} is empty")));
    }
    let mut rng = rng::stream(seed, Purpose::Scene, &[]);
    let count = rng.gen_range(object_count.0..=object_count.1);
    let s = size as f64;
    let max_extent = (s / 4.0).max(3.5);
    let objects = (0..count)
        .map(|_| {
            let shape = if rng.gen_bool(0.5) { ShapeKind::Rectangle } else { ShapeKind::Ellipse };
            let class = rng.gen_range(1..classes);
            let center = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
            let extent = (rng.gen_range(3.0..max_extent), rng.gen_range(3.0..max_extent));
            let height = class_height(class) + rng.gen_range(-HEIGHT_JITTER..HEIGHT_JITTER);
            SceneObject { shape, class, center, extent, height }
        })
        .collect();
    Ok(LatentScene { seed, size, classes, objects })
}

impl LatentScene {
    /// Class id per pixel, row-major; later objects paint over earlier ones.
    pub fn class_raster(&self) -> Vec<usize> {
        self.paint(0, |o| o.class)
    }

    pub fn height_field(&self) -> Vec<f64> {
        self.paint(0.0, |o| o.height)
    }

    fn paint<V: Copy>(&self, background: V, f: impl Fn(&SceneObject) -> V) -> Vec<V> {
        let n = self.size;
        let mut out = vec![background; n * n];
        for o in &self.objects {
            for r in 0..n {
                for c in 0..n {
                    if o.covers(r, c) {
                        out[r * n + c] = f(o);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub optical_sigma: f64,
    /// Number of looks of the gamma speckle; 0 disables speckle.
    pub sar_looks: f64,
    pub sar_sigma: f64,
    pub dem_sigma: f64,
    /// Fraction of map pixels replaced by a uniformly random class.
    pub map_flip: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { optical_sigma: 0.08, sar_looks: 16.0, sar_sigma: 0.02, dem_sigma: 0.1, map_flip: 0.05 }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self { optical_sigma: 0.0, sar_looks: 0.0, sar_sigma: 0.0, dem_sigma: 0.0, map_flip: 0.0 }
    }

    pub fn clamped(&self) -> Self {
        let nonneg = |x: f64| if x.is_finite() { x.max(0.0) } else { 0.0 };
        Self {
            optical_sigma: nonneg(self.optical_sigma),
            sar_looks: nonneg(self.sar_looks),
            sar_sigma: nonneg(self.sar_sigma),
            dem_sigma: nonneg(self.dem_sigma),
            map_flip: if self.map_flip.is_finite() { self.map_flip.clamp(0.0, 1.0) } else { 0.0 },
        }
    }
}

/// `channels x height x width` float raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn at(&self, c: usize, r: usize, x: usize) -> f32 {
        self.data[(c * self.height + r) * self.width + x]
    }
}

/// Single-channel class-id raster.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRaster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<i32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub classes: usize,
    pub optical: Raster,
    pub sar: Raster,
    pub dem: Raster,
    pub map: ClassRaster,
    pub label: ClassRaster,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.label.height, self.label.width)
    }

    /// Float raster of a measurement modality.
    pub fn raster(&self, m: Modality) -> Option<&Raster> {
        match m {
            Modality::Optical => Some(&self.optical),
            Modality::Sar => Some(&self.sar),
            Modality::Dem => Some(&self.dem),
            Modality::Map => None,
        }
    }
}

fn edge_magnitude(field: &[f64], n: usize) -> Vec<f64> {
    let at = |r: isize, c: isize| field[(r.clamp(0, n as isize - 1) as usize) * n + c.clamp(0, n as isize - 1) as usize];
    let mut out = vec![0.0; n * n];
    for r in 0..n as isize {
        for c in 0..n as isize {
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            out[r as usize * n + c as usize] = (gx * gx + gy * gy).sqrt() / 8.0;
        }
    }
    out
}

pub fn render_sample(scene: &LatentScene, noise: &NoiseConfig, id: u64) -> Sample {
    let noise = noise.clamped();
    let n = scene.size;
    let k = scene.classes;
    let mut rng = rng::stream(scene.seed, Purpose::Render, &[]);
    let classes = scene.class_raster();
    let heights = scene.height_field();

    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut optical = Raster::zeros(3, n, n);
    for ch in 0..3 {
        for p in 0..n * n {
            let base = class_color(classes[p])[ch] as f64;
            optical.data[ch * n * n + p] = (base + noise.optical_sigma * std_normal.sample(&mut rng)) as f32;
        }
    }

    let indicator: Vec<f64> = classes.iter().map(|&c| c as f64 / (k - 1) as f64).collect();
    let vv = edge_magnitude(&heights, n);
    let vh = edge_magnitude(&indicator, n);
    let speckle = (noise.sar_looks > 0.0).then(|| Gamma::new(noise.sar_looks, 1.0 / noise.sar_looks).unwrap());
    let mut sar = Raster::zeros(2, n, n);
    for (ch, edges) in [vv, vh].iter().enumerate() {
        for p in 0..n * n {
            let s = speckle.as_ref().map_or(1.0, |g| g.sample(&mut rng));
            let floor = noise.sar_sigma * std_normal.sample(&mut rng);
            sar.data[ch * n * n + p] = (edges[p] * s + floor) as f32;
        }
    }

    let mut dem = Raster::zeros(1, n, n);
    for p in 0..n * n {
        dem.data[p] = (heights[p] + noise.dem_sigma * std_normal.sample(&mut rng)) as f32;
    }

    let label = ClassRaster { height: n, width: n, data: classes.iter().map(|&c| c as i32).collect() };
    let mut map = label.clone();
    for v in map.data.iter_mut() {
        // Both draws are always taken so the stream position is independent of the flip rate.
        let flip = rng.gen::<f64>() < noise.map_flip;
        let replacement = rng.gen_range(0..k) as i32;
        if flip {
            *v = replacement;
        }
    }

    Sample { id, classes: k, optical, sar, dem, map, label }
}

pub fn sample_dir_name(id: u64) -> String {
    format!("sample_{id:05}")
}

/// Writes `sample` into `<directory>/sample_<id>` and returns that path.
pub fn write_sample(sample: &Sample, directory: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = directory.as_ref().join(sample_dir_name(sample.id));
    let (h, w) = sample.size();
    let meta = serde_json::json!({ "id": sample.id, "classes": sample.classes });
    let mut writer = ContainerWriter::create(&dir, "sample", meta)?;
    for m in [Modality::Optical, Modality::Sar, Modality::Dem] {
        let r = sample.raster(m).unwrap();
        writer.add(m.name(), &[r.channels, r.height, r.width], &Blob::F32(r.data.clone()))?;
    }
    writer.add("map", &[1, h, w], &Blob::I32(sample.map.data.clone()))?;
    writer.add("label", &[1, h, w], &Blob::I32(sample.label.data.clone()))?;
    writer.finish()
}

pub fn read_sample(path: impl AsRef<Path>) -> Result<Sample> {
    let container = Container::open(path.as_ref())?;
    let meta = &container.manifest().meta;
    let field = |key: &str| {
        meta.get(key).and_then(|v| v.as_u64()).ok_or_else(|| Error::Manifest {
            path: path.as_ref().join(crate::container::MANIFEST),
            source: serde::de::Error::custom(format!("missing `{key}`")),
        })
    };
    let id = field("id")?;
    let classes = field("classes")? as usize;

    let label = read_class_raster(&container, "label", classes)?;
    let (h, w) = (label.height, label.width);
    let read_float = |m: Modality| -> Result<Raster> {
        let (shape, blob) = container.read(m.name())?;
        let Blob::F32(data) = blob else {
            return Err(Error::Modality { modality: m.name().into(), message: "expected float32".into() });
        };
        if shape != [m.channels(), h, w] {
            return Err(Error::Modality {
                modality: m.name().into(),
                message: format!("shape {shape:?} disagrees with label {h}x{w} and {} channels", m.channels()),
            });
        }
        Ok(Raster { channels: shape[0], height: h, width: w, data })
    };
    let optical = read_float(Modality::Optical)?;
    let sar = read_float(Modality::Sar)?;
    let dem = read_float(Modality::Dem)?;
    let map = read_class_raster(&container, "map", classes)?;
    if (map.height, map.width) != (h, w) {
        return Err(Error::Modality { modality: "map".into(), message: "size disagrees with label".into() });
    }
    Ok(Sample { id, classes, optical, sar, dem, map, label })
}

fn read_class_raster(container: &Container, name: &str, classes: usize) -> Result<ClassRaster> {
    let (shape, blob) = container.read(name)?;
    let bad = |message: String| Error::Modality { modality: name.into(), message };
    let Blob::I32(data) = blob else { return Err(bad("expected int32".into())) };
    if shape.len() != 3 || shape[0] != 1 {
        return Err(bad(format!("expected shape [1, H, W], got {shape:?}")));
    }
    if let Some(v) = data.iter().find(|&&v| v < 0 || v as usize >= classes) {
        return Err(bad(format!("class id {v} outside [0, {classes})")));
    }
    Ok(ClassRaster { height: shape[1], width: shape[2], data })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

/// Seeded shuffle of `ids` cut into train/val/test by `ratios`; split sizes use
/// largest-remainder rounding so they always add up to `ids.len()`.
pub fn make_splits(ids: &[u64], seed: u64, ratios: [f64; 3]) -> Result<SplitManifest> {
    if ids.is_empty() {
        return Err(Error::config("cannot split an empty id list"));
    }
    if ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let n = ids.len();
    let mut sizes = largest_remainder(&ratios.map(|r| r * n as f64), n);
    // Keep every split non-empty when there are enough ids to do so.
    if n >= 3 {
        for i in 0..3 {
            if sizes[i] == 0 {
                let donor = (0..3).max_by_key(|&j| sizes[j]).unwrap();
                sizes[donor] -= 1;
                sizes[i] = 1;
            }
        }
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut rng::stream(seed, Purpose::Split, &[]));
    let val_start = sizes[0];
    let test_start = sizes[0] + sizes[1];
    Ok(SplitManifest {
        seed,
        ratios,
        train: order[..val_start].to_vec(),
        val: order[val_start..test_start].to_vec(),
        test: order[test_start..].to_vec(),
    })
}

/// Rounds `quotas` down and hands the missing units to the largest fractional
/// parts (earlier entries win ties) so the result sums to `total`.
pub fn largest_remainder(quotas: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor().max(0.0) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

impl SplitManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# imfuse split manifest\n");
        writeln!(s, "seed {}", self.seed).unwrap();
        writeln!(s, "ratios {} {} {}", self.ratios[0], self.ratios[1], self.ratios[2]).unwrap();
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let list: Vec<String> = ids.iter().map(u64::to_string).collect();
            writeln!(s, "{name} {}", list.join(" ")).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::config(format!("split manifest: {m}"));
        let mut seed = None;
        let mut ratios = None;
        let (mut train, mut val, mut test) = (None, None, None);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            let ids = || rest.iter().map(|t| t.parse::<u64>().map_err(|e| bad(format!("{key}: {e}")))).collect::<Result<Vec<_>>>();
            match key {
                "seed" => seed = Some(rest.first().ok_or_else(|| bad("empty seed".into()))?.parse().map_err(|e| bad(format!("seed: {e}")))?),
                "ratios" => {
                    let r: Vec<f64> = rest.iter().map(|t| t.parse().map_err(|e| bad(format!("ratios: {e}")))).collect::<Result<_>>()?;
                    let r: [f64; 3] = r.try_into().map_err(|_| bad("need three ratios".into()))?;
                    ratios = Some(r);
                }
                "train" => train = Some(ids()?),
                "val" => val = Some(ids()?),
                "test" => test = Some(ids()?),
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        Ok(SplitManifest {
            seed: seed.ok_or_else(|| bad("missing seed".into()))?,
            ratios: ratios.ok_or_else(|| bad("missing ratios".into()))?,
            train: train.ok_or_else(|| bad("missing train".into()))?,
            val: val.ok_or_else(|| bad("missing val".into()))?,
            test: test.ok_or_else(|| bad("missing test".into()))?,
        })
    }
}

/// Generation settings recorded next to a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub samples: usize,
    pub size: usize,
    pub patch: usize,
    pub classes: usize,
    pub object_count: (usize, usize),
    pub ratios: [f64; 3],
    pub noise: NoiseConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { samples: 640, size: 32, patch: 8, classes: 5, object_count: (2, 6), ratios: [0.8, 0.1, 0.1], noise: NoiseConfig::default() }
    }
}

pub const DATASET_FILE: &str = "dataset.json";
pub const SPLITS_FILE: &str = "splits.txt";
pub const SAMPLES_DIR: &str = "samples";

pub fn scene_seed(seed: u64, id: u64) -> u64 {
    rng::derive_seed(seed, &[Purpose::Scene as u64, id])
}

/// In-memory dataset with its split manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub samples: Vec<Sample>,
    pub splits: SplitManifest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split `{s}`"))),
        }
    }
}

impl Dataset {
    pub fn generate(config: &SynthConfig, seed: u64) -> Result<Self> {
        if config.samples == 0 {
            return Err(Error::config("sample count must be positive"));
        }
        let samples = (0..config.samples as u64)
            .map(|id| {
                let scene = generate_scene(scene_seed(seed, id), config.size, config.classes, config.patch, config.object_count)?;
                Ok(render_sample(&scene, &config.noise, id))
            })
            .collect::<Result<Vec<_>>>()?;
        let ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
        let splits = make_splits(&ids, seed, config.ratios)?;
        Ok(Self { config: config.clone(), seed, samples, splits })
    }

    pub fn write(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        let samples_dir = root.join(SAMPLES_DIR);
        fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
        for s in &self.samples {
            write_sample(s, &samples_dir)?;
        }
        let splits = root.join(SPLITS_FILE);
        fs::write(&splits, self.splits.to_text()).map_err(|e| Error::io(&splits, e))?;
        let info = serde_json::json!({ "seed": self.seed, "config": self.config });
        let path = root.join(DATASET_FILE);
        fs::write(&path, serde_json::to_string_pretty(&info).unwrap()).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let path = root.join(DATASET_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        #[derive(Deserialize)]
        struct Info {
            seed: u64,
            config: SynthConfig,
        }
        let info: Info = serde_json::from_str(&text).map_err(|e| Error::Manifest { path: path.clone(), source: e })?;
        let split_path = root.join(SPLITS_FILE);
        let split_text = fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
        let splits = SplitManifest::parse(&split_text)?;
        let mut samples = Vec::with_capacity(info.config.samples);
        for id in 0..info.config.samples as u64 {
            let s = read_sample(root.join(SAMPLES_DIR).join(sample_dir_name(id)))?;
            let (h, w) = s.size();
            if h % info.config.patch != 0 || w % info.config.patch != 0 {
                return Err(Error::config(format!("sample {id}: {h}x{w} not divisible by patch {}", info.config.patch)));
            }
            samples.push(s);
        }
        Ok(Self { config: info.config, seed: info.seed, samples, splits })
    }

    pub fn split_ids(&self, split: Split) -> &[u64] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    pub fn sample(&self, id: u64) -> &Sample {
        &self.samples[id as usize]
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.split_ids(split).iter().map(|&id| self.sample(id)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_in_seed() {
        let a = generate_scene(7, 32, 4, 8, (2, 6)).unwrap();
        let b = generate_scene(7, 32, 4, 8, (2, 6)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(8, 32, 4, 8, (2, 6)).unwrap();
        assert_ne!(serde_json::to_string(&a.objects).unwrap(), serde_json::to_string(&c.objects).unwrap());
    }

    #[test]
    fn empty_scene_is_background() {
        let s = generate_scene(7, 32, 4, 8, (0, 0)).unwrap();
        assert!(s.objects.is_empty());
        assert!(s.class_raster().iter().all(|&c| c == 0));
        let sample = render_sample(&s, &NoiseConfig::zero(), 0);
        assert!(sample.dem.data.iter().all(|&v| v == sample.dem.data[0]));
        assert!(sample.sar.data.iter().all(|&v| v == 0.0));
        // With noise, the radar channels carry only the additive floor.
        let noisy = render_sample(&s, &NoiseConfig::default(), 0);
        assert!(noisy.sar.data.iter().all(|&v| v.abs() < 0.2));
    }

    #[test]
    fn invalid_scene_parameters() {
        assert!(matches!(generate_scene(1, 30, 4, 8, (1, 2)), Err(Error::Config(_))));
        assert!(matches!(generate_scene(1, 32, 1, 8, (1, 2)), Err(Error::Config(_))));
    }

    #[test]
    fn zero_noise_map_equals_label() {
        let s = generate_scene(3, 32, 5, 8, (3, 6)).unwrap();
        let sample = render_sample(&s, &NoiseConfig::zero(), 3);
        assert_eq!(sample.map, sample.label);
    }

    #[test]
    fn full_flip_agreement_is_one_over_k() {
        // 128 tiles of 32x32 = 131072 pixels; binomial sd of the agreement rate is ~0.0014.
        let noise = NoiseConfig { map_flip: 1.0, ..NoiseConfig::zero() };
        let (mut agree, mut total) = (0usize, 0usize);
        for seed in 0..128 {
            let s = generate_scene(seed, 32, 2, 8, (2, 6)).unwrap();
            let sample = render_sample(&s, &noise, seed);
            agree += sample.map.data.iter().zip(&sample.label.data).filter(|(a, b)| a == b).count();
            total += sample.label.data.len();
        }
        let rate = agree as f64 / total as f64;
        assert!((rate - 0.5).abs() < 5.0 * 0.0014, "agreement {rate}");
    }

    #[test]
    fn map_accuracy_is_at_least_one_minus_flip() {
        let noise = NoiseConfig::default();
        let (mut agree, mut total) = (0usize, 0usize);
        for seed in 0..64 {
            let s = generate_scene(seed, 32, 5, 8, (2, 6)).unwrap();
            let sample = render_sample(&s, &noise, seed);
            agree += sample.map.data.iter().zip(&sample.label.data).filter(|(a, b)| a == b).count();
            total += sample.label.data.len();
        }
        assert!(agree as f64 / total as f64 >= 1.0 - noise.map_flip);
    }

    #[test]
    fn splits_sizes_and_errors() {
        let ids: Vec<u64> = (0..10).collect();
        let m = make_splits(&ids, 1, [0.8, 0.1, 0.1]).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (8, 1, 1));
        assert_eq!(m, make_splits(&ids, 1, [0.8, 0.1, 0.1]).unwrap());
        let mut all: Vec<u64> = m.train.iter().chain(&m.val).chain(&m.test).copied().collect();
        all.sort();
        assert_eq!(all, ids);
        assert!(make_splits(&ids, 1, [0.5, 0.5, 0.5]).is_err());
        assert!(make_splits(&[], 1, [0.8, 0.1, 0.1]).is_err());
        let big: Vec<u64> = (0..640).collect();
        let m = make_splits(&big, 9, [0.8, 0.1, 0.1]).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (512, 64, 64));
        assert_eq!(SplitManifest::parse(&m.to_text()).unwrap(), m);
    }
}
