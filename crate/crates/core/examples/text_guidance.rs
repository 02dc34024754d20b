//! Writes a seeded text-guidance file (two random unit vectors) to stdout.
//!
//!     cargo run --example text_guidance -- 64 32327 > guidance.json

use gaitmil::data::{TextGuidance, BUNDLED_TEXT_SEED};

fn main() {
    let mut args = std::env::args().skip(1);
    let dim = args.next().map_or(64, |s| s.parse().expect("dim must be an integer"));
    let seed = args.next().map_or(BUNDLED_TEXT_SEED, |s| s.parse().expect("seed must be an integer"));
    print!("{}", TextGuidance::seeded(dim, seed).to_json());
}
