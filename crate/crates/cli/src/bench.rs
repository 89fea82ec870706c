//! Micro-benchmarks of the attention transforms.

use std::hint::black_box;
use std::time::Instant;

use anyhow::Result;
use rand::Rng;
use rand_distr::StandardNormal;
use skam::rng::seeded;
use skam::transforms::TransformSpec;

pub const MIN_REPS: usize = 30;

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub kind: String,
    pub n: usize,
    pub median_ns: u128,
}

/// Median wall time of one `apply` over `reps` (at least 30) runs.
pub fn bench_transform(label: &str, spec: &TransformSpec, n: usize, reps: usize, seed: u64) -> Result<BenchRow> {
    let mut rng = seeded(seed, n as u64);
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let spec = spec.capped_to(n);
    spec.apply(&z)?;
    let mut times: Vec<u128> = (0..reps.max(MIN_REPS))
        .map(|_| {
            let t = Instant::now();
            black_box(spec.apply(black_box(&z)).ok());
            t.elapsed().as_nanos()
        })
        .collect();
    times.sort_unstable();
    Ok(BenchRow {
        kind: label.to_string(),
        n,
        median_ns: times[times.len() / 2],
    })
}
