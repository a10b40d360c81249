//! Measurement harness: graph-construction work/latency grids and forward
//! throughput, reported as CSV.

use std::path::Path;
use std::time::Instant;

use crate::cluster::{self, KmeansInit, PartitionSet};
use crate::error::{Error, Result};
use crate::graph;
use crate::model::{self, ModelConfig};
use crate::numeric::Tensor;
use crate::rng::SplitMix64;

/// Discarded timing runs before measurement starts.
pub const WARMUP_RUNS: usize = 2;
/// Minimum measured repeats per cell.
pub const MIN_REPEATS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub scenario: String,
    pub n: usize,
    pub c: usize,
    pub kappa: usize,
    pub k: usize,
    pub b: usize,
    pub variant: String,
    pub wall_ns_med: u64,
    pub wall_ns_min: u64,
    pub wall_ns_max: u64,
    pub distance_ops: u64,
    pub span_ops: u64,
    /// items per second, derived from the median
    pub throughput: f64,
    pub status: String,
}

impl BenchRecord {
    fn failed(scenario: &str, n: usize, c: usize, kappa: usize, k: usize, b: usize, err: &Error) -> Self {
        BenchRecord {
            scenario: scenario.into(),
            n,
            c,
            kappa,
            k,
            b,
            variant: String::new(),
            wall_ns_med: 0,
            wall_ns_min: 0,
            wall_ns_max: 0,
            distance_ops: 0,
            span_ops: 0,
            throughput: 0.0,
            status: err.to_string().replace([',', '\n'], ";"),
        }
    }
}

/// Median/min/max wall time of `repeats` runs after [`WARMUP_RUNS`]
/// discarded warmups. The monotonic clock is `Instant`.
pub fn time_runs<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(u64, u64, u64)> {
    let repeats = repeats.max(MIN_REPEATS);
    for _ in 0..WARMUP_RUNS {
        f()?;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        f()?;
        samples.push(t0.elapsed().as_nanos() as u64);
    }
    samples.sort_unstable();
    Ok((samples[samples.len() / 2], samples[0], samples[samples.len() - 1]))
}

fn random_points(n: usize, c: usize, seed: u64) -> Tensor<f32> {
    let mut rng = SplitMix64::new(seed);
    Tensor::new(
        vec![n, c],
        (0..n * c).map(|_| rng.uniform(-1.0, 1.0) as f32).collect(),
    )
    .expect("points shape")
}

fn graph_cell(
    scenario: &str,
    x: &Tensor<f32>,
    parts: Option<&PartitionSet<f32>>,
    k: usize,
    kappa: usize,
    repeats: usize,
) -> BenchRecord {
    let (n, c) = x.dims2().expect("2-d points");
    let run = || match parts {
        Some(p) => graph::knn_partitioned(x, p, k),
        None => graph::knn_full(x, k),
    };
    match run().and_then(|(_, counter)| Ok((counter, time_runs(repeats, run)?))) {
        Ok((counter, (med, min, max))) => BenchRecord {
            scenario: scenario.into(),
            n,
            c,
            kappa,
            k,
            b: 1,
            variant: String::new(),
            wall_ns_med: med,
            wall_ns_min: min,
            wall_ns_max: max,
            distance_ops: counter.distance_ops,
            span_ops: counter.span_ops,
            throughput: if med > 0 { 1e9 / med as f64 } else { 0.0 },
            status: "ok".into(),
        },
        Err(e) => BenchRecord::failed(scenario, n, c, kappa, k, 1, &e),
    }
}

/// Measure full k-NN against partitioned k-NN, the latter with both
/// k-means labels and forced-balanced round-robin labels. Failed cells are
/// recorded with a status and the run continues.
pub fn bench_graph_construction(
    ns: &[usize],
    cs: &[usize],
    kappas: &[usize],
    ks: &[usize],
    repeats: usize,
    seed: u64,
) -> Vec<BenchRecord> {
    let mut records = Vec::new();
    for &n in ns {
        for &c in cs {
            let x = random_points(n, c, seed ^ ((n as u64) << 20) ^ c as u64);
            for &k in ks {
                records.push(graph_cell("knn_full", &x, None, k, 1, repeats));
                for &kappa in kappas {
                    match cluster::kmeans(&x, kappa, cluster::DEFAULT_MAX_ITERS, KmeansInit::Stride)
                    {
                        Ok(parts) => records.push(graph_cell(
                            "knn_part_kmeans",
                            &x,
                            Some(&parts),
                            k,
                            kappa,
                            repeats,
                        )),
                        Err(e) => {
                            records.push(BenchRecord::failed("knn_part_kmeans", n, c, kappa, k, 1, &e))
                        }
                    }
                    let balanced: Vec<usize> = (0..n).map(|v| v % kappa).collect();
                    match PartitionSet::from_labels(&x, balanced, kappa) {
                        Ok(parts) => records.push(graph_cell(
                            "knn_part_balanced",
                            &x,
                            Some(&parts),
                            k,
                            kappa,
                            repeats,
                        )),
                        Err(e) => records
                            .push(BenchRecord::failed("knn_part_balanced", n, c, kappa, k, 1, &e)),
                    }
                }
            }
        }
    }
    records
}

/// Per-batch-size forward latency/throughput for a variant with seeded
/// weights.
pub fn bench_forward(
    config: &ModelConfig,
    batch_sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Vec<BenchRecord> {
    let mut records = Vec::new();
    let params = match model::init_weights::<f32>(config, seed) {
        Ok(p) => p,
        Err(e) => {
            records.push(BenchRecord::failed("forward", config.n_iso, config.c_iso, config.kappa, config.k_schedule[0], 0, &e));
            return records;
        }
    };
    let sz = config.img_size();
    for &b in batch_sizes {
        let mut rng = SplitMix64::new(seed ^ b as u64);
        let images = Tensor::new(
            vec![b, sz, sz, 3],
            (0..b * sz * sz * 3)
                .map(|_| rng.uniform(0.0, 1.0) as f32)
                .collect(),
        )
        .expect("image shape");
        let timing = time_runs(repeats, || model::model_forward_eval(&params, &images));
        match timing {
            Ok((med, min, max)) => records.push(BenchRecord {
                scenario: "forward".into(),
                n: config.n_iso,
                c: config.c_iso,
                kappa: config.kappa,
                k: config.k_schedule[0],
                b,
                variant: config.name.clone(),
                wall_ns_med: med,
                wall_ns_min: min,
                wall_ns_max: max,
                distance_ops: 0,
                span_ops: 0,
                throughput: if med > 0 { b as f64 * 1e9 / med as f64 } else { 0.0 },
                status: "ok".into(),
            }),
            Err(e) => records.push(BenchRecord::failed(
                "forward",
                config.n_iso,
                config.c_iso,
                config.kappa,
                config.k_schedule[0],
                b,
                &e,
            )),
        }
    }
    records
}

pub const CSV_HEADER: &str = "scenario,N,C,kappa,K,B,variant,wall_ns_med,wall_ns_min,wall_ns_max,distance_ops,span_ops,throughput,status";

pub fn report_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.scenario,
            r.n,
            r.c,
            r.kappa,
            r.k,
            r.b,
            r.variant,
            r.wall_ns_med,
            r.wall_ns_min,
            r.wall_ns_max,
            r.distance_ops,
            r.span_ops,
            r.throughput,
            r.status
        ));
    }
    out
}

pub fn write_report(path: impl AsRef<Path>, records: &[BenchRecord]) -> Result<()> {
    std::fs::write(path, report_csv(records))?;
    Ok(())
}

/// Parse a report back; the inverse of [`report_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        _ => return Err(Error::InvalidArg("bad CSV header".into())),
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(Error::InvalidArg(format!("row {}: {} fields", i + 2, f.len())));
        }
        let pu = |s: &str| s.parse::<usize>().map_err(|e| Error::InvalidArg(e.to_string()));
        let p64 = |s: &str| s.parse::<u64>().map_err(|e| Error::InvalidArg(e.to_string()));
        records.push(BenchRecord {
            scenario: f[0].into(),
            n: pu(f[1])?,
            c: pu(f[2])?,
            kappa: pu(f[3])?,
            k: pu(f[4])?,
            b: pu(f[5])?,
            variant: f[6].into(),
            wall_ns_med: p64(f[7])?,
            wall_ns_min: p64(f[8])?,
            wall_ns_max: p64(f[9])?,
            distance_ops: p64(f[10])?,
            span_ops: p64(f[11])?,
            throughput: f[12]
                .parse::<f64>()
                .map_err(|e| Error::InvalidArg(e.to_string()))?,
            status: f[13].into(),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_is_header_only() {
        let csv = report_csv(&[]);
        assert_eq!(csv.trim_end(), CSV_HEADER);
        assert_eq!(parse_csv(&csv).unwrap(), vec![]);
    }

    #[test]
    fn csv_round_trip() {
        let records = bench_graph_construction(&[64], &[4], &[1, 2], &[3], 5, 7);
        assert!(!records.is_empty());
        let csv = report_csv(&records);
        assert_eq!(parse_csv(&csv).unwrap(), records);
        assert_eq!(csv.lines().count(), records.len() + 1);
    }

    #[test]
    fn kappa_one_cell_matches_full_work() {
        let records = bench_graph_construction(&[64], &[4], &[1], &[3], 5, 7);
        let full = records.iter().find(|r| r.scenario == "knn_full").unwrap();
        let part = records
            .iter()
            .find(|r| r.scenario == "knn_part_kmeans")
            .unwrap();
        assert_eq!(full.distance_ops, part.distance_ops);
        assert_eq!(full.status, "ok");
    }

    #[test]
    fn work_counters_are_timing_independent() {
        let a = bench_graph_construction(&[128], &[8], &[4], &[5], 5, 3);
        let b = bench_graph_construction(&[128], &[8], &[4], &[5], 5, 3);
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.distance_ops, rb.distance_ops);
            assert_eq!(ra.span_ops, rb.span_ops);
        }
    }

    #[test]
    fn forward_throughput_consistent_with_latency() {
        let cfg = ModelConfig::preset("tiny").unwrap();
        let records = bench_forward(&cfg, &[1, 2], 5, 42);
        for r in &records {
            assert_eq!(r.status, "ok");
            let expect = r.b as f64 * 1e9 / r.wall_ns_med as f64;
            assert!((r.throughput - expect).abs() < 1e-9 * expect.max(1.0));
        }
    }
}
