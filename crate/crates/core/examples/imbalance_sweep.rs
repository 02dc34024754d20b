//! Trains one model per class ratio and prints a sweep table.
//!
//! cargo run --release --example imbalance_sweep -- [epochs] [steps_per_epoch] [seed] [sway_noise] [test_per_class]

use gaitmil::data::{generate_dataset, SynthConfig, TextGuidance};
use gaitmil::model::ModelConfig;
use gaitmil::trainer::{format_ratio, run_sweep, SamplerConfig, TrainConfig};

fn main() -> gaitmil::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let arg = |i: usize, d: f64| args.get(i).copied().unwrap_or(d);
    let (epochs, steps, seed) = (arg(0, 15.0) as usize, arg(1, 10.0) as usize, arg(2, 0.0) as u64);
    let (sway_noise, per_class) = (arg(3, 0.5), arg(4, 150.0) as usize);

    let synth = SynthConfig { sway_noise, ..SynthConfig::default() };
    let pool = generate_dataset(25, 25, 400, &synth, 500 + seed)?;
    let test_set = generate_dataset(per_class, per_class, per_class, &synth, 900 + seed)?;
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
        sampler: SamplerConfig::default(),
        ..TrainConfig::default()
    };
    let ratios = [[1.0, 1.0, 2.0], [1.0, 1.0, 4.0], [1.0, 1.0, 8.0], [1.0, 1.0, 16.0]];
    let rows = run_sweep(&pool, &test_set, &ratios, &model_cfg, &TextGuidance::bundled(), &cfg)?;
    println!("{:<8} {:>6} {:>6} {:>6} {:>6}  train counts (neg/neu/pos)", "ratio", "Acc", "Sen", "Spe", "F1");
    for r in &rows {
        let f = |x: Option<f64>| x.map_or("-".into(), |v| format!("{:.3}", v));
        println!(
            "{:<8} {:>6.3} {:>6} {:>6} {:>6.3}  {:?}",
            format_ratio(&r.ratio),
            r.report.accuracy,
            f(r.report.sensitivity),
            f(r.report.specificity),
            r.report.macro_f1,
            r.train_counts
        );
    }
    Ok(())
}
