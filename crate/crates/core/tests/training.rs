use imfuse::config::{DownstreamConfig, ModelConfig, PretrainConfig, TrainMode};
use imfuse::downstream::{evaluate, segment, train_downstream, SegHead};
use imfuse::encoder::EncoderOptions;
use imfuse::modality::ModalitySet;
use imfuse::pretrain::{pretrain, save_weights, RunControl};
use imfuse::synthdata::{Dataset, Split, SynthConfig};
use imfuse::tokenizer::SampleInputs;
use imfuse::{DataShape, Model, Model32, Model64, Scalar};

fn tiny_model() -> ModelConfig {
    ModelConfig { dim: 16, layers: 1, heads: 2, mlp_ratio: 2, class_embed: 4, dec_dim: 8, dec_heads: 1, dec_layers: 1, proj_dim: 8, ..ModelConfig::default() }
}

fn data<T: Scalar>() -> (Vec<SampleInputs<T>>, Vec<SampleInputs<T>>, DataShape) {
    let cfg = SynthConfig { samples: 16, size: 16, ratios: [0.75, 0.125, 0.125], ..SynthConfig::default() };
    let ds = Dataset::generate(&cfg, 5).unwrap();
    let conv = |s| ds.split(s).into_iter().map(|x| SampleInputs::from_sample(x, cfg.patch).unwrap()).collect::<Vec<_>>();
    (conv(Split::Train), conv(Split::Val), DataShape { size: cfg.size, patch: cfg.patch, classes: cfg.classes })
}

fn pre_config() -> PretrainConfig {
    PretrainConfig { epochs: 4, batch: 4, checkpoint_every: 1, ..PretrainConfig::default() }
}

#[test]
fn scalar_types_agree() {
    let (train32, _, shape) = data::<f32>();
    let (train64, _, _) = data::<f64>();
    let m32 = Model32::new(&tiny_model(), shape, 3).unwrap();
    let m64 = Model64::new(&tiny_model(), shape, 3).unwrap();
    let a = segment(&m32, &train32[0], ModalitySet::FULL, EncoderOptions::default()).unwrap();
    let b = segment(&m64, &train64[0], ModalitySet::FULL, EncoderOptions::default()).unwrap();
    assert_eq!(a.len(), shape.classes * shape.size * shape.size);
    let diff = a.iter().zip(&b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-4, "f32 and f64 logits differ by {diff}");
}

#[test]
fn interrupted_pretraining_resumes_exactly() {
    let (train, val, shape) = data::<f64>();
    let dir = tempfile::tempdir().unwrap();
    let config = pre_config();
    let mut whole = Model::<f64>::new(&tiny_model(), shape, 1).unwrap();
    let straight = pretrain(&mut whole, &train, &val, &config, 1, &RunControl::default()).unwrap();

    let ck = dir.path().join("ck");
    let mut first = Model::<f64>::new(&tiny_model(), shape, 1).unwrap();
    let control = RunControl { checkpoint_dir: Some(ck.clone()), resume: false, stop_after: Some(2) };
    let partial = pretrain(&mut first, &train, &val, &config, 1, &control).unwrap();
    assert_eq!(partial.epochs_completed, 2);
    assert!(partial.alignment.is_none());

    let mut second = Model::<f64>::new(&tiny_model(), shape, 1).unwrap();
    let control = RunControl { checkpoint_dir: Some(ck), resume: true, stop_after: None };
    let resumed = pretrain(&mut second, &train, &val, &config, 1, &control).unwrap();
    assert_eq!(resumed.curve, straight.curve);
    assert_eq!(resumed.alignment, straight.alignment);
    assert_eq!(second.store.checksum(|_| true), whole.store.checksum(|_| true));
}

#[test]
fn generative_only_pretraining_has_no_contrastive_terms() {
    let (train, val, shape) = data::<f32>();
    let config = PretrainConfig { lambda2: 0.0, epochs: 1, ..pre_config() };
    let mut m = Model32::new(&tiny_model(), shape, 2).unwrap();
    let out = pretrain(&mut m, &train, &val, &config, 2, &RunControl::default()).unwrap();
    assert!(out.curve[0].contrastive.is_empty());
    assert!((out.curve[0].total - out.curve[0].reconstruction()).abs() < 1e-5, "{:?}", out.curve[0]);
}

#[test]
fn partial_finetune_leaves_the_backbone_alone() {
    let (train, _, shape) = data::<f32>();
    let dir = tempfile::tempdir().unwrap();
    let pre = Model32::new(&tiny_model(), shape, 7).unwrap();
    save_weights(dir.path().join("pre"), &pre, serde_json::json!({})).unwrap();
    let config = DownstreamConfig { mode: TrainMode::PartialFinetune, epochs: 1, batch: 4, checkpoint: Some(dir.path().join("pre")), ..DownstreamConfig::default() };
    let mut m = Model32::new(&tiny_model(), shape, 8).unwrap();
    let head_before = m.store.checksum(SegHead::owns);
    train_downstream(&mut m, &train, &config, 8).unwrap();
    assert_eq!(m.backbone_checksum(), pre.backbone_checksum());
    assert_ne!(m.store.checksum(SegHead::owns), head_before);

    let full = DownstreamConfig { mode: TrainMode::FullFinetune, ..config.clone() };
    let mut m = Model32::new(&tiny_model(), shape, 8).unwrap();
    train_downstream(&mut m, &train, &full, 8).unwrap();
    assert_ne!(m.backbone_checksum(), pre.backbone_checksum());

    let missing = DownstreamConfig { checkpoint: Some(dir.path().join("absent")), ..config };
    let mut m = Model32::new(&tiny_model(), shape, 8).unwrap();
    assert!(train_downstream(&mut m, &train, &missing, 8).unwrap_err().is_io());
}

#[test]
fn downstream_training_is_deterministic() {
    let (train, val, shape) = data::<f32>();
    let config = DownstreamConfig { epochs: 2, batch: 4, ..DownstreamConfig::default() };
    let run = || {
        let mut m = Model32::new(&tiny_model(), shape, 4).unwrap();
        let out = train_downstream(&mut m, &train, &config, 4).unwrap();
        let reports = evaluate(&m, &val, &ModalitySet::FULL.nonempty_subsets(), config.encoder_options()).unwrap();
        (out, reports)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra.len(), 15);
}
