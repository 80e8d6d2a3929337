use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtl_lab::attention::{MaskConfig, TaskAttentionConfig, TaskAttentionLayer};
use mtl_lab::nn::Tensor;
use mtl_lab::synth::{generate_dataset, CoverageMatrix, Dataset};
use mtl_lab::trainer::{
    infer, load_checkpoint, prepare_dataset, prepare_sample, sample_grads, write_checkpoint, CheckpointKind, Model, ModelConfig,
    PreparedDataset, TrainConfig, Trainer, Weights,
};
use mtl_lab::{Annotation, TaskId};

fn small_config() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 16,
        width: 8,
        heads: 2,
        norm_groups: 2,
        task_attention: TaskAttentionConfig { heads: 2, separate_projections: true },
        ..ModelConfig::default()
    }
}

fn setup() -> (Model, Vec<Dataset>, Vec<PreparedDataset>) {
    let model = Model::new(small_config(), 1).unwrap();
    let sets: Vec<Dataset> = CoverageMatrix::default()
        .rows
        .iter()
        .map(|row| Dataset::from_row(row, generate_dataset(row, 3, 5, 16, 16).unwrap()))
        .collect();
    let prepared = sets.iter().map(|d| prepare_dataset(&model, d).unwrap()).collect();
    (model, sets, prepared)
}

fn train_cfg() -> TrainConfig {
    TrainConfig { seed: 2, ..TrainConfig::toy() }
}

#[test]
fn same_seed_gives_identical_weights() {
    let (model, _, data) = setup();
    let run = || {
        let w = Weights::fresh(&model, 1).unwrap();
        let mut t = Trainer::new(model.clone(), w, train_cfg(), &data).unwrap();
        for _ in 0..4 {
            t.step().unwrap();
        }
        t.weights.trainable().checksum_exact()
    };
    assert_eq!(run(), run());
}

#[test]
fn stage_two_keeps_frozen_parts_bit_stable() {
    let (model, _, data) = setup();
    let Weights::Single(p) = Weights::fresh(&model, 1).unwrap() else { unreachable!() };
    let multi = Weights::multi_from_single(&model, &p, 3);
    let before_aux = p.checksum_exact();
    let before_main = multi.trainable().checksum_exact();
    let cfg = TrainConfig { mask: MaskConfig { rho: 1.0, ..MaskConfig::default() }, ..train_cfg() };
    let mut t = Trainer::new(model.clone(), multi, cfg, &data).unwrap();
    for _ in 0..3 {
        t.step().unwrap();
    }
    let Weights::Multi { main, aux } = &t.weights else { unreachable!() };
    assert_eq!(aux.checksum_exact(), before_aux);
    assert_ne!(main.checksum_exact(), before_main);
    assert_eq!(t.model.tokens, model.tokens);
    assert_eq!(t.model.codec.params.checksum_exact(), model.codec.params.checksum_exact());
}

#[test]
fn invalid_target_pixels_do_not_affect_gradients() {
    let (model, sets, _) = setup();
    let weights = Weights::fresh(&model, 1).unwrap();
    let urban = sets.iter().find(|d| d.id == "toy-urban").unwrap();
    let sample = urban.samples.iter().find(|s| s.valid(TaskId::Depth).unwrap().iter().any(|v| !v)).expect("an urban sample with sky");
    let prepared = prepare_sample(&model, sample).unwrap();
    let mut perturbed = prepared.clone();
    let target = perturbed.targets.get_mut(&TaskId::Depth).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (p, &ok) in target.valid.clone().iter().enumerate() {
        if !ok {
            target.image.px_mut(p).iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
    }
    target.latent = model.codec.encode_image(&target.image).unwrap();
    let mask = MaskConfig::disabled();
    let (l1, g1) = sample_grads(&model, &weights, &prepared, TaskId::Depth, &mask, &mut rng).unwrap();
    let (l2, g2) = sample_grads(&model, &weights, &perturbed, TaskId::Depth, &mask, &mut rng).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
}

#[test]
fn checkpoints_round_trip_and_detect_tampering() {
    let (model, _, _) = setup();
    let Weights::Single(p) = Weights::fresh(&model, 1).unwrap() else { unreachable!() };
    let weights = Weights::multi_from_single(&model, &p, 3);
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ck");
    write_checkpoint(&dir, &model, &weights, &train_cfg(), CheckpointKind::Stage2, 17).unwrap();
    let c = load_checkpoint(&dir).unwrap();
    assert_eq!(c.manifest.kind, CheckpointKind::Stage2);
    assert_eq!(c.manifest.step, 17);
    let (Weights::Multi { main, aux }, Weights::Multi { main: m0, aux: a0 }) = (&c.weights, &weights) else { panic!("kind") };
    let mut m0 = m0.clone();
    let mut a0 = a0.clone();
    m0.quantize_f32();
    a0.quantize_f32();
    assert_eq!(main, &m0);
    assert_eq!(aux, &a0);
    let mut tokens = model.tokens.clone();
    tokens.rows.iter_mut().flatten().for_each(|v| *v = *v as f32 as f64);
    assert_eq!(c.model.tokens, tokens);

    let victim = dir.join("unet").join("out.c.w.bin");
    let mut bytes = fs::read(&victim).unwrap();
    bytes[0] ^= 0x40;
    fs::write(&victim, bytes).unwrap();
    assert!(load_checkpoint(&dir).is_err());
    assert!(load_checkpoint(tmp.path()).is_err());
}

#[test]
fn inference_is_deterministic_and_labels_stay_in_palette() {
    let (model, sets, _) = setup();
    let Weights::Single(p) = Weights::fresh(&model, 1).unwrap() else { unreachable!() };
    let weights = Weights::multi_from_single(&model, &p, 3);
    let s = &sets[1].samples[0];
    let a = infer(&model, &weights, &s.frame_i, None, TaskId::Semantic).unwrap();
    let b = infer(&model, &weights, &s.frame_i, None, TaskId::Semantic).unwrap();
    assert_eq!(a, b);
    let Annotation::Labels(l) = a else { panic!("semantic inference must return labels") };
    assert!(l.data.iter().all(|&c| (0..model.palette.n_classes() as i32).contains(&c)));
}

#[test]
fn shared_projections_give_task_independent_traces() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, c) = (10, 8);
    let mut t = || Tensor::new(vec![n, c], (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let main = t();
    let aux: Vec<(TaskId, Tensor)> = [TaskId::Normal, TaskId::Depth, TaskId::Shading].into_iter().map(|k| (k, t())).collect();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let trace = |layer: &TaskAttentionLayer, main_task: TaskId, r: &mut ChaCha8Rng| {
        layer.forward(&main, main_task, &aux, &MaskConfig::disabled(), r, true).unwrap().trace.unwrap()
    };
    let shared = TaskAttentionLayer::new(c, TaskAttentionConfig { heads: 2, separate_projections: false }, 4);
    assert_eq!(trace(&shared, TaskId::Semantic, &mut r), trace(&shared, TaskId::Albedo, &mut r));
    let separate = TaskAttentionLayer::new(c, TaskAttentionConfig { heads: 2, separate_projections: true }, 4);
    assert_ne!(trace(&separate, TaskId::Semantic, &mut r), trace(&separate, TaskId::Albedo, &mut r));
}
