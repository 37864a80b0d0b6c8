//! Wall-clock timing of the detection pipeline and of the two NMS variants.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{nms3d, nms_two_pass_2d, Box3D, NmsConfig};
use crate::grid::decode_grid;
use crate::net::Network;
use crate::tensor::Tensor4;

pub const DEVICE: &str = "CPU (1 thread)";

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedRow {
    pub method: String,
    pub device: String,
    /// Median seconds per run.
    pub median_s: f64,
    pub runs: usize,
}

impl SpeedRow {
    pub fn fps(&self) -> f64 {
        1.0 / self.median_s
    }
}

fn median(mut v: Vec<Duration>) -> f64 {
    v.sort_unstable();
    let n = v.len();
    let mid = if n % 2 == 1 {
        v[n / 2].as_secs_f64()
    } else {
        (v[n / 2 - 1].as_secs_f64() + v[n / 2].as_secs_f64()) / 2.0
    };
    // a clock that cannot resolve the run still counts as nonzero time
    mid.max(1e-9)
}

/// Times `f` `runs` times after `warmup` untimed calls.
pub fn time_median<T>(warmup: usize, runs: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    for _ in 0..warmup {
        std::hint::black_box(f()?);
    }
    let mut times = Vec::with_capacity(runs.max(1));
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        std::hint::black_box(f()?);
        times.push(t.elapsed());
    }
    Ok(median(times))
}

/// Seeded uniform input matching the network's expected shape.
pub fn random_input(net: &Network, seed: u64) -> Tensor4 {
    let n = net.config().input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn([1, 4, n, n], |_, _, _, _| rng.random::<f64>())
}

/// End-to-end forward + decode + NMS on a single image.
pub fn bench_speed(net: &Network, nms: &NmsConfig, warmup: usize, runs: usize, seed: u64) -> Result<SpeedRow> {
    let input = random_input(net, seed);
    let spec = net.grid_spec();
    let median_s = time_median(warmup, runs, || {
        let raw = net.forward(&input)?;
        let boxes = decode_grid(raw.item(0), &spec, nms.confidence_floor)?;
        Ok(nms3d(&boxes, nms))
    })?;
    Ok(SpeedRow {
        method: format!("eyolo {} preset", net.config().preset.name()),
        device: DEVICE.into(),
        median_s,
        runs: runs.max(1),
    })
}

/// Clustered candidate boxes, as a detector emits around each object.
pub fn random_candidates(count: usize, seed: u64) -> Vec<Box3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects: Vec<([f64; 3], [f64; 3])> = (0..(count / 20).max(1))
        .map(|_| {
            let e = [0.05, 0.05, 0.05].map(|lo: f64| rng.random_range(lo..0.3));
            let c = [0, 1, 2].map(|a| rng.random_range(e[a] / 2.0..1.0 - e[a] / 2.0));
            (c, e)
        })
        .collect();
    (0..count)
        .map(|_| {
            let (c, e) = objects[rng.random_range(0..objects.len())];
            let center = c.map(|v| v + rng.random_range(-0.03..0.03));
            let extent = e.map(|v| v * rng.random_range(0.8..1.2));
            let class = rng.random_range(0..2usize);
            let mut scores = vec![0.0; 2];
            scores[class] = 1.0;
            Box3D::new(center, extent, rng.random_range(0.5..1.0), scores)
        })
        .collect()
}

/// Times single-pass 3D-IoU NMS against the two-projection 2D variant on the
/// same candidates.
pub fn bench_nms(candidates: &[Box3D], nms: &NmsConfig, warmup: usize, runs: usize) -> Result<[SpeedRow; 2]> {
    let row = |method: &str, median_s| SpeedRow {
        method: method.into(),
        device: DEVICE.into(),
        median_s,
        runs: runs.max(1),
    };
    let single = time_median(warmup, runs, || Ok(nms3d(candidates, nms)))?;
    let two = time_median(warmup, runs, || Ok(nms_two_pass_2d(candidates, nms)))?;
    Ok([
        row("NMS, single-pass 3D IoU", single),
        row("NMS, two-pass 2D IoU", two),
    ])
}

/// `Method | Device | SPEED [fps]` table.
pub fn format_speed_table(rows: &[SpeedRow]) -> String {
    let w = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let dw = rows.iter().map(|r| r.device.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<w$}  {:<dw$}  {:>12}", "Method", "Device", "SPEED [fps]");
    for r in rows {
        let _ = writeln!(out, "{:<w$}  {:<dw$}  {:>12.2}", r.method, r.device, r.fps());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;

    #[test]
    fn median_of_odd_and_even_counts() {
        let d = |ms| Duration::from_millis(ms);
        assert_eq!(median(vec![d(3), d(1), d(2)]), 0.002);
        assert_eq!(median(vec![d(4), d(1), d(2), d(3)]), 0.0025);
    }

    #[test]
    fn tiny_pipeline_reports_finite_fps() {
        let net = Network::build(NetConfig::tiny(), 0).unwrap();
        let row = bench_speed(&net, &NmsConfig::default(), 1, 3, 0).unwrap();
        assert!(row.fps().is_finite() && row.fps() > 0.0);
        let table = format_speed_table(&[row]);
        assert!(table.contains("SPEED [fps]") && table.contains("tiny"));
    }

    #[test]
    fn nms_variants_time_the_same_candidates() {
        let c = random_candidates(200, 1);
        assert_eq!(c.len(), 200);
        assert_eq!(random_candidates(200, 1), c);
        let rows = bench_nms(&c, &NmsConfig::default(), 0, 3).unwrap();
        assert!(rows.iter().all(|r| r.fps() > 0.0));
        assert_ne!(rows[0].method, rows[1].method);
    }
}
