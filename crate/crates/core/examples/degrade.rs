//! Writes a few procedural clean/degraded pairs for each water type and
//! prints their channel means.
//!
//! cargo run --example degrade -- [out_dir]

use cvgan::degrade::{channel_means, synth_pair, Preset};
use cvgan::pipeline::save_image;

fn main() -> cvgan::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "degrade_demo".into());
    let out = std::path::Path::new(&out);
    for preset in Preset::ALL {
        for seed in 0..3u64 {
            let (clean, degraded) = synth_pair(seed, preset, (64, 64));
            save_image(out.join(format!("{preset}_{seed}_clean.png")), &clean)?;
            save_image(out.join(format!("{preset}_{seed}_degraded.png")), &degraded)?;
            let [r, g, b] = channel_means(&degraded);
            println!("{preset:>8} seed {seed}: degraded means r {r:.3} g {g:.3} b {b:.3}");
        }
    }
    println!("images in {}", out.display());
    Ok(())
}
