//! Full model against the ablated variants on a borderline-heavy synthetic
//! set, over several seeds, reporting per-class recall.
//!
//! cargo run --release --example ablation -- [seeds] [epochs] [steps_per_epoch] [variant...]

use gaitmil::data::{generate_dataset, ClassLabel, SynthConfig, TextGuidance};
use gaitmil::model::ModelConfig;
use gaitmil::trainer::{run_ablation, stratified_split, Ablation, SamplerConfig, TrainConfig};

fn main() -> gaitmil::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let num = |i: usize, d: usize| args.get(i).map_or(d, |a| a.parse().expect("numeric argument"));
    let (seeds, epochs, steps) = (num(0, 2), num(1, 6), num(2, 10));
    let variants: Vec<Ablation> = if args.len() > 3 {
        args[3..].iter().map(|a| a.parse()).collect::<gaitmil::Result<_>>()?
    } else {
        vec![Ablation::Full, Ablation::NoBam]
    };

    let synth = SynthConfig { bands: [[2.0, 3.0], [3.0, 5.0], [5.0, 6.0]], ..SynthConfig::default() };
    for seed in 0..seeds as u64 {
        let ds = generate_dataset(30, 60, 30, &synth, 100 + seed)?;
        let (tr, te) = stratified_split(&ds, 0.3, seed)?;
        let train_set: Vec<_> = tr.iter().map(|&i| ds[i].clone()).collect();
        let test_set: Vec<_> = te.iter().map(|&i| ds[i].clone()).collect();
        let model_cfg = ModelConfig {
            channels: vec![4, 8, 16],
            pool: vec![true, false, false],
            input_downsample: 4,
            strip_dim: 8,
            init_seed: seed,
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            epochs,
            steps_per_epoch: Some(steps),
            seed,
            sampler: SamplerConfig { ratio: [1.0, 2.0, 1.0], ..SamplerConfig::default() },
            ..TrainConfig::default()
        };
        for &v in &variants {
            let r = run_ablation(v, &train_set, &test_set, &model_cfg, &TextGuidance::bundled(), &cfg)?;
            let rec = |c: ClassLabel| r.recall_of(c).map_or("-".to_string(), |x| format!("{x:.3}"));
            println!(
                "seed {seed} {v:<8} acc {:.3}  recall neg {} neu {} pos {}",
                r.accuracy,
                rec(ClassLabel::Negative),
                rec(ClassLabel::Neutral),
                rec(ClassLabel::Positive)
            );
        }
    }
    Ok(())
}
