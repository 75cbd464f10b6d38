//! Shared helpers for CLI integration tests: synthetic data generation and
//! binary invocation.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn binary() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_blockperm"))
}

pub fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(binary())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

pub fn run_ok(args: &[&str], dir: &Path) -> Output {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; plenty for synthetic data.
    let u1: f64 = rng.gen::<f64>().max(1e-15);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub struct SyntheticTrial {
    pub block_id: String,
    pub trial_index: u32,
    pub treated: bool,
    pub response: f64,
}

/// A study-shaped synthetic dataset: `blocks` blocks of 87..=104 trials,
/// roughly a quarter treated (clamped to 13..=37), responses standard
/// Normal plus `effect` for treated trials.
pub fn synthetic_study(blocks: usize, effect: f64, seed: u64) -> Vec<SyntheticTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for b in 0..blocks {
        let size = rng.gen_range(87..=104usize);
        let mut n: usize = (0..size).map(|_| (rng.gen::<f64>() < 0.25) as usize).sum();
        n = n.clamp(13, 37.min(size - 1));
        let mut treated = vec![false; size];
        for t in treated.iter_mut().take(n) {
            *t = true;
        }
        // Fisher-Yates.
        for i in (1..size).rev() {
            let j = rng.gen_range(0..=i);
            treated.swap(i, j);
        }
        for (i, &z) in treated.iter().enumerate() {
            out.push(SyntheticTrial {
                block_id: format!("s{b:03}"),
                trial_index: i as u32,
                treated: z,
                response: normal(&mut rng) + if z { effect } else { 0.0 },
            });
        }
    }
    out
}

pub fn write_trials_csv(path: &Path, trials: &[SyntheticTrial]) {
    let mut text = String::from("block_id,trial_index,z,response\n");
    for t in trials {
        text.push_str(&format!(
            "{},{},{},{:.17e}\n",
            t.block_id,
            t.trial_index,
            t.treated as u8,
            t.response
        ));
    }
    std::fs::write(path, text).unwrap();
}
