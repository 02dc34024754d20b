//! Compares the autodiff gradient of the full training loss with central
//! finite differences on a small model.
//!
//! Frames are continuous noise: binary silhouettes put many exact ties into the
//! max pools, where finite differences only see one side of the kink.

use gaitmil::autodiff::grad_check_many;
use gaitmil::data::{ClassLabel, TextGuidance};
use gaitmil::dtw::BagPartition;
use gaitmil::losses::{total_loss, BatchLabels, LossConfig};
use gaitmil::model::{BagBatch, Mode, Model, ModelConfig};
use gaitmil::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gaitmil::Result<()> {
    let cfg = ModelConfig {
        bags: 2,
        channels: vec![2, 4],
        pool: vec![false, false],
        input_downsample: 16,
        strips: 4,
        strip_dim: 2,
        text_dim: 3,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, TextGuidance::seeded(3, 1))?;
    let (h, w) = model.config().input_hw();
    let frames_per_sample = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let bags = (0..2)
        .map(|s| {
            let part = BagPartition::uniform(frames_per_sample, 2)?;
            Ok(part
                .ranges()
                .into_iter()
                .map(|r| r.start + s * frames_per_sample..r.end + s * frames_per_sample)
                .collect())
        })
        .collect::<gaitmil::Result<Vec<_>>>()?;
    let batch = BagBatch { frames: Tensor::uniform(vec![2 * frames_per_sample, 1, h, w], 1.0, &mut rng), bags };
    let labels = BatchLabels::new(vec![ClassLabel::Neutral, ClassLabel::Positive], vec!["a".into(), "b".into()]);

    let err = grad_check_many(
        |tape, vars| {
            let out = model.forward_bound(tape, vars, &batch, Mode::Train)?;
            Ok(total_loss(tape, &out, &labels, &LossConfig::default())?.total)
        },
        model.params(),
        1e-5,
    )?;
    println!("{} parameters, max relative gradient error {err:.2e}", model.param_count());
    Ok(())
}
