use crate::error::{config_err, Error, Result};
use serde::Serialize;
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub label: String,
    pub reps: usize,
    pub warmup: usize,
    pub threads: usize,
    /// Seconds.
    pub median: f64,
    pub mean: f64,
    pub p95: f64,
}

/// Times `run` `reps` times after `warmup` untimed calls, inside a pool of
/// exactly `threads` workers.
pub fn bench_latency<F>(label: &str, reps: usize, warmup: usize, threads: usize, mut run: F) -> Result<BenchResult>
where
    F: FnMut() -> Result<()> + Send,
{
    if reps < 10 {
        return config_err(format!("need at least 10 repetitions, got {reps}"));
    }
    if warmup < 3 {
        return config_err(format!("need at least 3 warmup runs, got {warmup}"));
    }
    if threads == 0 {
        return config_err("thread count must be positive");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut times = pool.install(|| -> Result<Vec<f64>> {
        for _ in 0..warmup {
            run()?;
        }
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t = Instant::now();
            run()?;
            times.push(t.elapsed().as_secs_f64());
        }
        Ok(times)
    })?;
    times.sort_by(f64::total_cmp);
    let mean = times.iter().sum::<f64>() / reps as f64;
    let median = if reps % 2 == 1 {
        times[reps / 2]
    } else {
        0.5 * (times[reps / 2 - 1] + times[reps / 2])
    };
    let p95 = times[((0.95 * reps as f64).ceil() as usize).clamp(1, reps) - 1];
    Ok(BenchResult {
        label: label.to_string(),
        reps,
        warmup,
        threads,
        median,
        mean,
        p95,
    })
}
