//! Trains briefly, then writes one embedding per sequence to CSV for external
//! projection plots.
//!
//! cargo run --release --example export_embeddings -- [out.csv]

use gaitmil::data::{generate_dataset, SynthConfig, TextGuidance};
use gaitmil::model::{Model, ModelConfig};
use gaitmil::trainer::{predict, train, SamplerConfig, TrainConfig};

fn main() -> gaitmil::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "embeddings.csv".into());
    let ds = generate_dataset(8, 8, 16, &SynthConfig::well_separated(), 3)?;
    let model_cfg = ModelConfig {
        channels: vec![4, 8, 16],
        pool: vec![true, false, false],
        input_downsample: 4,
        strip_dim: 8,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 4,
        steps_per_epoch: Some(5),
        sampler: SamplerConfig { ratio: [1.0, 1.0, 2.0], ..SamplerConfig::default() },
        ..TrainConfig::default()
    };
    let (model, _) = train(&ds, Model::new(model_cfg, TextGuidance::bundled())?, &cfg)?.ok()?;
    let p = predict(&model, &ds, cfg.sampler.window, cfg.eval_batch)?;
    std::fs::write(&out, p.embeddings_csv()).map_err(|e| gaitmil::Error::io(&out, e))?;
    println!("wrote {} embeddings of dimension {} to {out}", ds.len(), p.embeddings.shape()[1]);
    Ok(())
}
