//! Generates a labelled synthetic dataset, writes it to disk and reads it back.
//!
//! cargo run --example synth_dataset -- OUT_DIR [pos neu neg seed]

use gaitmil::data::{class_counts, generate_dataset, load_dataset, save_dataset, SynthConfig};

fn main() -> gaitmil::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().map_or("synthetic-data", String::as_str);
    let num = |i: usize, d: u64| args.get(i).map_or(d, |a| a.parse().expect("numeric argument"));
    let (pos, neu, neg, seed) = (num(1, 2) as usize, num(2, 2) as usize, num(3, 8) as usize, num(4, 7));

    let cfg = SynthConfig::default();
    let ds = generate_dataset(pos, neu, neg, &cfg, seed)?;
    save_dataset(&ds, out.as_ref())?;
    let back = load_dataset(out.as_ref())?;
    assert_eq!(back, ds);

    let [n_neg, n_neu, n_pos] = class_counts(&ds);
    println!("{} sequences in {out}: negative {n_neg}, neutral {n_neu}, positive {n_pos}", ds.len());
    for s in ds.iter().take(5) {
        let p = s.profile.as_ref().expect("synthetic sequences carry their profile");
        println!(
            "{}  {:<8} {:>2} frames  sway {:.2} px  phase boundaries {:?}",
            s.subject_id,
            s.label,
            s.frames.len(),
            p.sway_amplitude,
            p.phase_boundaries()
        );
    }
    Ok(())
}
