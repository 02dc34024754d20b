//! Splits synthetic walks into K contiguous bags with DTW clustering and
//! compares the bag boundaries with the generator's view changes.
//!
//! cargo run --release --example dtw_bags -- [k] [sway_px]

use gaitmil::data::{generate_sequence, SwayProfile};
use gaitmil::dtw::{distance_matrix, frame_features, partition_sequence, BagPartition, DEFAULT_STRIPS};

fn main() -> gaitmil::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let k: usize = args.first().map_or(4, |a| a.parse().expect("k"));
    let sway: f64 = args.get(1).map_or(0.5, |a| a.parse().expect("sway"));

    for seed in 0..5 {
        let profile = SwayProfile::three_phase(sway, 0.1, 10, [14, 10, 14]);
        let seq = generate_sequence(&profile, seed)?;
        let part = partition_sequence(&seq.frames, k)?;
        let uniform = BagPartition::uniform(seq.frames.len(), k)?;
        println!(
            "seed {seed}: phases {:?}  dtw bags {:?}  uniform {:?}",
            profile.phase_boundaries(),
            part.boundaries,
            uniform.boundaries
        );
    }

    let seq = generate_sequence(&SwayProfile::three_phase(sway, 0.1, 10, [6, 4, 6]), 0)?;
    let d = distance_matrix(&frame_features(&seq.frames, DEFAULT_STRIPS)?)?;
    println!("\nframe distance matrix of a 16-frame walk:");
    for row in d.rows() {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:5.1}")).collect();
        println!("{}", cells.join(" "));
    }
    Ok(())
}
