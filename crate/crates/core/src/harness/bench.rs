//! Wall-clock throughput of the trajectory engine.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::rtg::{ChannelChunk, RtgConfig, RtgEngine, RtgError};

/// Spacing of synthetic chunk observations.
const INGEST_PERIOD: f64 = 0.05;
const CHUNK_DT: f64 = 0.1;
const LATENCY: f64 = 0.01;
/// Reader period, the 250 Hz control tick.
const SAMPLE_PERIOD: Duration = Duration::from_micros(4000);

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchStats {
    pub chunk_len: usize,
    pub channels: usize,
    pub repetitions: usize,
    /// Wall time of one `ingest_channels` call, seconds.
    pub ingest_median: f64,
    pub ingest_p99: f64,
    pub ingest_mean: f64,
    pub ingest_max: f64,
    pub accepted: usize,
    /// Wall time of one `sample_channels` call on a concurrent reader thread
    /// ticking at the control rate.
    pub sample_median: f64,
    pub sample_p99: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MachineInfo {
    pub arch: String,
    pub os: String,
    pub cpu: Option<String>,
    pub threads: usize,
}

pub fn machine_info() -> MachineInfo {
    let cpu = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
        s.lines()
            .find(|l| l.starts_with("model name"))
            .and_then(|l| l.split(':').nth(1))
            .map(|v| v.trim().to_string())
    });
    MachineInfo {
        arch: std::env::consts::ARCH.into(),
        os: std::env::consts::OS.into(),
        cpu,
        threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

/// Nearest-rank quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

fn synthetic_chunk(rng: &mut ChaCha8Rng, k: usize, chunk_len: usize, channels: usize) -> ChannelChunk {
    let t_obs = k as f64 * INGEST_PERIOD;
    let frames = (0..chunk_len)
        .map(|i| {
            let t = t_obs + i as f64 * CHUNK_DT;
            (0..channels)
                .map(|c| 0.2 * (0.5 * t + c as f64).sin() + 0.01 * (rng.random::<f64>() - 0.5))
                .collect()
        })
        .collect();
    ChannelChunk::new(t_obs, CHUNK_DT, frames).expect("valid synthetic chunk")
}

/// Times `repetitions` back-to-back ingests of synthetic chunks spaced 0.05 s
/// apart in chunk time, while another thread samples the published trajectory
/// every 4 ms.
pub fn throughput_bench(chunk_len: usize, channels: usize, repetitions: usize, seed: u64) -> Result<BenchStats, RtgError> {
    if chunk_len < 2 || channels == 0 || repetitions == 0 {
        return Err(RtgError::InvalidInput(
            "need chunk_len >= 2, channels >= 1 and repetitions >= 1".into(),
        ));
    }
    let mut engine = RtgEngine::new(RtgConfig::uniform(channels, 1.0))?;
    let reader = engine.reader();
    let stop = Arc::new(AtomicBool::new(false));
    let stop_r = Arc::clone(&stop);
    let sampler = std::thread::spawn(move || {
        let mut v = vec![0.0; channels];
        let mut r = vec![0.0; channels];
        let mut times = Vec::new();
        let mut i = 0u64;
        let mut next = Instant::now();
        while !stop_r.load(Ordering::Relaxed) {
            next += SAMPLE_PERIOD;
            if let Some(d) = next.checked_duration_since(Instant::now()) {
                std::thread::sleep(d);
            }
            let snap = reader.snapshot();
            let (Some(t0), Some(t1)) = (snap.t_start(), snap.t_end()) else {
                continue;
            };
            drop(snap);
            let t = t0 + (t1 - t0) * ((i % 1000) as f64 / 1000.0);
            i += 1;
            let start = Instant::now();
            let res = reader.sample_channels(t, &mut v, &mut r);
            let el = start.elapsed().as_secs_f64();
            if res.is_ok() {
                times.push(el);
            }
        }
        times
    });

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ingest = Vec::with_capacity(repetitions);
    let mut accepted = 0;
    let mut failure = None;
    for k in 0..repetitions {
        let chunk = synthetic_chunk(&mut rng, k, chunk_len, channels);
        let now = chunk.t_obs + LATENCY;
        let start = Instant::now();
        let res = engine.ingest_channels(&chunk, now);
        ingest.push(start.elapsed().as_secs_f64());
        match res {
            Ok(_) => accepted += 1,
            Err(RtgError::Stale { .. } | RtgError::InfeasibleBlend { .. }) => {}
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    stop.store(true, Ordering::Relaxed);
    let mut samples = sampler.join().unwrap_or_default();
    if let Some(e) = failure {
        return Err(e);
    }
    ingest.sort_by(f64::total_cmp);
    samples.sort_by(f64::total_cmp);
    Ok(BenchStats {
        chunk_len,
        channels,
        repetitions,
        ingest_median: quantile(&ingest, 0.5),
        ingest_p99: quantile(&ingest, 0.99),
        ingest_mean: ingest.iter().sum::<f64>() / ingest.len() as f64,
        ingest_max: *ingest.last().expect("non-empty"),
        accepted,
        sample_median: quantile(&samples, 0.5),
        sample_p99: quantile(&samples, 0.99),
        samples: samples.len(),
    })
}
