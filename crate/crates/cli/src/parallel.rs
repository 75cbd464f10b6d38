//! Multithreaded scenario execution.
//!
//! Replications carry their own RNG streams and rejections are aggregated
//! by integer counting, so the result is bit-identical for any thread count
//! (including one). Calibration tables are built up front, sequentially and
//! deterministically, and shared across scenarios.

use anyhow::Result;
use blockperm_core::sim::{PlacementCalibration, PowerRow, ScenarioRunner, SimScenario};
use rayon::prelude::*;

pub fn run_scenarios(scenarios: &[SimScenario], threads: usize) -> Result<Vec<PowerRow>> {
    let mut shared: Vec<PlacementCalibration> = Vec::new();
    let mut runners = Vec::with_capacity(scenarios.len());
    for scenario in scenarios {
        runners.push(ScenarioRunner::with_shared_calibrations(scenario, &mut shared)?);
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()?;

    let rows = pool.install(|| {
        runners
            .iter()
            .map(|runner| {
                let tests = runner.scenario().tests.len();
                let reps = runner.scenario().replications;
                let (rejections, redraws) = (0..reps)
                    .into_par_iter()
                    .map(|rep| runner.run_replication(rep))
                    .fold(
                        || (vec![0u64; tests], 0u64),
                        |(mut counts, redraws), (flags, re)| {
                            for (c, f) in counts.iter_mut().zip(flags) {
                                *c += f as u64;
                            }
                            (counts, redraws + re)
                        },
                    )
                    .reduce(
                        || (vec![0u64; tests], 0u64),
                        |(mut a, ra), (b, rb)| {
                            for (x, y) in a.iter_mut().zip(b) {
                                *x += y;
                            }
                            (a, ra + rb)
                        },
                    );
                PowerRow {
                    scenario: runner.scenario().clone(),
                    rejections,
                    replications: reps,
                    redraws,
                }
            })
            .collect()
    });
    Ok(rows)
}
