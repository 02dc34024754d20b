use super::*;
use crate::data::{generate_dataset, SynthConfig, TextGuidance};
use crate::model::ModelConfig;

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        bags: 2,
        channels: vec![2, 4],
        pool: vec![false, false],
        input_downsample: 8,
        strips: 4,
        strip_dim: 4,
        text_dim: 4,
        ..ModelConfig::default()
    }
}

fn tiny_model() -> Model {
    Model::new(tiny_model_config(), TextGuidance::seeded(4, 1)).unwrap()
}

fn tiny_dataset() -> Vec<FrameSequence> {
    let cfg = SynthConfig {
        front_frames: [4, 5],
        turning_frames: [4, 5],
        back_frames: [4, 5],
        ..SynthConfig::well_separated()
    };
    generate_dataset(3, 3, 4, &cfg, 11).unwrap()
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        steps_per_epoch: Some(4),
        sampler: SamplerConfig { subjects_per_batch: 4, samples_per_subject: 2, window: 8, ratio: [1.0, 1.0, 1.0] },
        ..TrainConfig::default()
    }
}

#[test]
fn eval_windows_cover_sequence() {
    assert_eq!(eval_windows(5, 8), vec![0..5]);
    assert_eq!(eval_windows(8, 8), vec![0..8]);
    assert_eq!(eval_windows(20, 8), vec![0..8, 6..14, 12..20]);
    for len in 9..60 {
        let w = eval_windows(len, 8);
        assert_eq!(w.len(), len.div_ceil(8));
        assert_eq!(w[0].start, 0);
        assert_eq!(w.last().unwrap().end, len);
        assert!(w.windows(2).all(|p| p[1].start <= p[0].end));
    }
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
    assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-12);
    assert!(cosine_lr(0.1, 9, 10) < 0.01);
}

#[test]
fn training_is_deterministic() {
    let ds = tiny_dataset();
    let cfg = tiny_train_config();
    let a = train(&ds, tiny_model(), &cfg).unwrap();
    let b = train(&ds, tiny_model(), &cfg).unwrap();
    assert!(a.diverged.is_none());
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 3);
    for (x, y) in a.model.params().iter().zip(b.model.params()) {
        assert_eq!(x.data(), y.data());
    }
    let ra = evaluate(&a.model, &ds, 8, 4).unwrap();
    let rb = evaluate(&b.model, &ds, 8, 4).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra.total, ds.len());
}

#[test]
fn training_moves_parameters_and_running_stats() {
    let ds = tiny_dataset();
    let before = tiny_model();
    let out = train(&ds, before.clone(), &tiny_train_config()).unwrap();
    let moved = before.params().iter().zip(out.model.params()).filter(|(a, b)| a.max_abs_diff(b) > 0.0).count();
    assert_eq!(moved, before.params().len());
    assert_ne!(out.model.running("bn3.running_mean"), before.running("bn3.running_mean"));
    assert!(out.history.iter().all(|h| h.total.is_finite() && h.bce > 0.0));
}

#[test]
fn loss_decreases_on_separable_data() {
    let ds = tiny_dataset();
    let cfg = TrainConfig { epochs: 12, lr: 0.02, ..tiny_train_config() };
    let out = train(&ds, tiny_model(), &cfg).unwrap();
    let first = out.history[0].total;
    let last = out.history.last().unwrap().total;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn divergence_keeps_last_finite_parameters() {
    let ds = tiny_dataset();
    let cfg = TrainConfig { lr: 1e200, momentum: 0.0, ..tiny_train_config() };
    let out = train(&ds, tiny_model(), &cfg).unwrap();
    let msg = out.diverged.clone().expect("diverges");
    assert!(msg.contains("step"), "{msg}");
    assert!(out.model.params().iter().all(|p| p.is_finite()));
    assert!(matches!(out.ok(), Err(Error::Numeric(_))));
}

#[test]
fn predictions_and_embeddings() {
    let ds = tiny_dataset();
    let model = tiny_model();
    let p = predict(&model, &ds, 8, 3).unwrap();
    assert_eq!(p.logits.shape(), &[ds.len(), 3]);
    assert_eq!(p.embeddings.shape(), &[ds.len(), model.config().fused_dim()]);
    let csv = p.embeddings_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), ds.len() + 1);
    assert!(lines[0].starts_with("subject_id,label,e0,"));
    assert_eq!(lines[1].split(',').count(), 2 + model.config().fused_dim());
    let single = predict(&model, &ds, 8, 1).unwrap();
    assert!(single.logits.max_abs_diff(&p.logits) < 1e-9);
}

#[test]
fn history_csv_layout() {
    let h = [EpochLosses { epoch: 1, total: 2.5, triplet: 0.5, ce: 1.25, bce: 0.75 }];
    assert_eq!(history_csv(&h), "epoch,L_total,L_triplet,L_ce,L_binaryce\n1,2.5,0.5,1.25,0.75\n");
}

#[test]
fn ratio_parsing() {
    assert_eq!(parse_ratio("1:1:8").unwrap(), [1.0, 1.0, 8.0]);
    assert_eq!(parse_ratio(" 1 : 0.5 : 2 ").unwrap(), [1.0, 0.5, 2.0]);
    for bad in ["1:1", "a:b:c", "0:0:0", "1:-1:2", "1:1:1:1"] {
        assert!(parse_ratio(bad).is_err(), "{bad}");
    }
    assert_eq!(format_ratio(&[1.0, 1.0, 16.0]), "1:1:16");
}

#[test]
fn split_and_subsample() {
    let cfg =
        SynthConfig { front_frames: [3, 3], turning_frames: [3, 3], back_frames: [3, 3], ..SynthConfig::default() };
    let ds = generate_dataset(10, 10, 40, &cfg, 5).unwrap();
    let (tr, te) = stratified_split(&ds, 0.25, 3).unwrap();
    assert_eq!(tr.len() + te.len(), 60);
    let te_counts = crate::data::class_counts(&te.iter().map(|&i| ds[i].clone()).collect::<Vec<_>>());
    assert_eq!(te_counts, [10, 3, 3]);
    assert_eq!(stratified_split(&ds, 0.25, 3).unwrap(), (tr.clone(), te));

    assert_eq!(max_subset_size(&ds, &tr, &[1.0, 1.0, 4.0]), 42);
    assert_eq!(max_subset_size(&ds, &tr, &[1.0, 1.0, 16.0]), 18);
    let counts_of = |idx: &[usize]| crate::data::class_counts(&idx.iter().map(|&i| ds[i].clone()).collect::<Vec<_>>());
    let sub = subsample_to_ratio(&ds, &tr, &[1.0, 1.0, 4.0], 42).unwrap();
    assert_eq!(counts_of(&sub), [28, 7, 7]);
    let sub = subsample_to_ratio(&ds, &tr, &[1.0, 1.0, 8.0], 20).unwrap();
    assert_eq!(counts_of(&sub), [16, 2, 2]);
    assert!(sub.iter().all(|i| tr.contains(i)));
    assert!(subsample_to_ratio(&ds, &tr, &[1.0, 1.0, 4.0], 60).is_err());
    assert!(subsample_to_ratio(&ds, &tr, &[1.0, 1.0, 100.0], 30).is_err());
}

#[test]
fn ablation_flags() {
    let base = ModelConfig::default();
    assert_eq!(Ablation::Full.apply(&base), base);
    assert!(!Ablation::NoBam.apply(&base).borderline_head);
    assert!(!Ablation::NoText.apply(&base).text);
    assert!(!Ablation::NoIbta.apply(&base).cascade);
    assert_eq!(Ablation::NoDtw.apply(&base).partition, crate::model::PartitionMode::Uniform);
    for a in Ablation::ALL {
        assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
    }
    assert!("no_such".parse::<Ablation>().is_err());
}

#[test]
fn sweep_rows_and_csv() {
    let cfg = SynthConfig {
        front_frames: [4, 4],
        turning_frames: [4, 4],
        back_frames: [4, 4],
        ..SynthConfig::well_separated()
    };
    let pool = generate_dataset(4, 4, 8, &cfg, 3).unwrap();
    let test = generate_dataset(1, 1, 2, &cfg, 4).unwrap();
    let train_cfg = TrainConfig { epochs: 1, steps_per_epoch: Some(2), ..tiny_train_config() };
    let text = TextGuidance::seeded(4, 1);
    let ratios = [[1.0, 1.0, 1.0], [1.0, 1.0, 2.0], [1.0, 1.0, 0.0]];
    let rows = run_sweep(&pool, &test, &ratios, &tiny_model_config(), &text, &train_cfg).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].train_counts, [3, 3, 3]);
    assert_eq!(rows[1].train_counts, [4, 2, 2]);
    assert_eq!(rows[2].train_counts, [0, 4, 4]);
    assert_eq!(rows[0].report.total, 4);
    let two_class = &rows[2].report;
    assert_eq!(two_class.total, 2);
    assert_eq!(two_class.sensitivity, None);
    assert!(two_class.specificity.is_some());
    let csv = sweep_csv(&rows);
    assert!(csv.starts_with("ratio,accuracy,macro_f1,sensitivity,specificity\n1:1:1,"));
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().last().unwrap().starts_with("1:1:0,"));
}
