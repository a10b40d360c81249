//! Single CLI over the library: inference, gradient checking, partition
//! recall measurement, benchmarking, and toy training.
//!
//! Exit codes: 0 success, 1 computation failure, 2 usage error,
//! 3 non-finite values during a gradient check.

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use clustervig::bench;
use clustervig::cluster::{self, KmeansInit};
use clustervig::error::Error;
use clustervig::gradcheck;
use clustervig::graph;
use clustervig::model::{self, Checkpoint, ModelConfig};
use clustervig::numeric::Tensor;
use clustervig::rng::SplitMix64;
use clustervig::scalar::{Dtype, Scalar};

#[derive(Parser)]
#[command(name = "cvig", version, about = "ClusterViG: partitioned vision graph networks")]
struct Cli {
    /// Seed for all randomness (weights, data, k-means seeded init).
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Element type where selectable (train-toy). Inference follows the
    /// checkpoint; gradient checks always run in f64.
    #[arg(long, global = true, default_value = "f32")]
    dtype: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a checkpoint on a tensor container and emit logits.
    Infer(InferArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Measure the neighbor recall of partitioned k-NN.
    KnnRecall(KnnRecallArgs),
    /// Benchmarks (graph construction, forward latency).
    Bench {
        #[command(subcommand)]
        which: BenchCmd,
    },
    /// Train a tiny variant on synthetic blobs.
    TrainToy(TrainToyArgs),
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: String,
    /// Container holding one tensor named "input" of shape [B, S, S, 3].
    #[arg(long)]
    input: String,
    #[arg(long)]
    output: String,
    /// Optional preset name cross-checked against the checkpoint config.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Config preset; only "tiny" is allowed (guards runtime).
    #[arg(long, default_value = "tiny")]
    variant: String,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

#[derive(Args)]
struct KnnRecallArgs {
    #[arg(long, default_value_t = 196)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    c: usize,
    #[arg(long, default_value_t = 4)]
    kappa: usize,
    #[arg(long, default_value_t = 9)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    /// Data model: "gaussian" or "blobs" (well-separated clusters).
    #[arg(long, default_value = "gaussian")]
    data: String,
    /// Blob count for --data blobs; defaults to kappa.
    #[arg(long)]
    blobs: Option<usize>,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// k-NN graph construction grid: full vs partitioned.
    Graph(BenchGraphArgs),
    /// Forward latency/throughput over batch sizes.
    Forward(BenchForwardArgs),
}

#[derive(Args)]
struct BenchGraphArgs {
    #[arg(long, value_delimiter = ',', default_value = "1024")]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64")]
    c: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    kappa: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "9")]
    k: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct BenchForwardArgs {
    #[arg(long, default_value = "tiny")]
    variant: String,
    #[arg(long, value_delimiter = ',', default_value = "1,8")]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long, default_value = "tiny")]
    variant: String,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    per_class: usize,
    /// Save the trained weights here.
    #[arg(long)]
    out: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(w) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("error: worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    let res = match &cli.cmd {
        Cmd::Infer(a) => cmd_infer(&cli, a),
        Cmd::Gradcheck(a) => return cmd_gradcheck(&cli, a),
        Cmd::KnnRecall(a) => cmd_knn_recall(&cli, a),
        Cmd::Bench { which } => cmd_bench(&cli, which),
        Cmd::TrainToy(a) => cmd_train_toy(&cli, a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn print_resolved(cli: &Cli, what: &str, detail: &str) {
    eprintln!(
        "# resolved config: cmd={} seed={} workers={} dtype={} {}",
        what,
        cli.seed,
        cli.workers
            .map(|w| w.to_string())
            .unwrap_or_else(|| "auto".into()),
        cli.dtype,
        detail
    );
}

fn cmd_infer(cli: &Cli, a: &InferArgs) -> clustervig::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let dtype = ck
        .entries
        .first()
        .and_then(|e| Dtype::parse(&e.dtype))
        .ok_or_else(|| Error::CorruptManifest("checkpoint has no tensors".into()))?;
    print_resolved(cli, "infer", &format!("checkpoint={} dtype={}", a.checkpoint, dtype.name()));
    match dtype {
        Dtype::F32 => infer_run::<f32>(&ck, a),
        Dtype::F64 => infer_run::<f64>(&ck, a),
    }
}

fn infer_run<F: Scalar>(ck: &Checkpoint, a: &InferArgs) -> clustervig::Result<()> {
    let params = model::checkpoint::model_from_checkpoint::<F>(ck)?;
    if let Some(v) = &a.variant {
        if *v != params.config.name {
            return Err(Error::InvalidArg(format!(
                "checkpoint is '{}', requested variant '{}'",
                params.config.name, v
            )));
        }
    }
    let input_ck = Checkpoint::load(&a.input)?;
    let input: Tensor<F> = input_ck.get_tensor("input")?;
    let sz = params.config.img_size();
    let shape = input.shape().to_vec();
    if shape.len() != 4 || shape[1] != sz || shape[2] != sz || shape[3] != 3 {
        return Err(Error::shape(
            "infer",
            format!("tensor 'input' has shape {:?}, expected [B,{sz},{sz},3]", shape),
        ));
    }
    let logits = model::model_forward_eval(&params, &input)?;
    for i in 0..logits.dims2()?.0 {
        let row = logits.row(i);
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&p, &q| row[q].partial_cmp(&row[p]).unwrap().then(p.cmp(&q)));
        let top: Vec<String> = idx.iter().take(5).map(|j| j.to_string()).collect();
        println!("image {} top5: {}", i, top.join(" "));
    }
    let mut out = Checkpoint::new(None);
    out.push_tensor("logits", &logits);
    out.save(&a.output)
}

fn cmd_gradcheck(cli: &Cli, a: &GradcheckArgs) -> ExitCode {
    if a.variant != "tiny" {
        eprintln!("error: gradcheck supports only --variant tiny");
        return ExitCode::from(2);
    }
    if a.eps <= 0.0 {
        eprintln!("error: --eps must be positive");
        return ExitCode::from(2);
    }
    print_resolved(cli, "gradcheck", &format!("variant=tiny eps={} (f64)", a.eps));
    let run = || -> clustervig::Result<(gradcheck::GradReport, gradcheck::GradReport)> {
        let degc = gradcheck::degc_gradcheck_all(cli.seed, a.eps)?;
        let model = gradcheck::model_gradcheck(cli.seed, a.eps)?;
        Ok((degc, model))
    };
    match run() {
        Ok((degc, model)) => {
            for (name, err) in degc.per_param.iter().chain(model.per_param.iter()) {
                println!("group {} max_rel_err {:.3e}", name, err);
            }
            println!("degc max_rel_err {:.3e} (threshold 1e-4)", degc.max_rel_err);
            println!("model max_rel_err {:.3e} (threshold 1e-3)", model.max_rel_err);
            if degc.max_rel_err < 1e-4 && model.max_rel_err < 1e-3 {
                println!("gradcheck PASS");
                ExitCode::SUCCESS
            } else {
                println!("gradcheck FAIL");
                ExitCode::from(1)
            }
        }
        Err(Error::NonFinite(ctx)) => {
            eprintln!("error: non-finite value during gradcheck ({ctx})");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn recall_data(a: &KnnRecallArgs, seed: u64) -> clustervig::Result<Tensor<f32>> {
    let mut rng = SplitMix64::new(seed);
    let data = match a.data.as_str() {
        "gaussian" => (0..a.n * a.c).map(|_| rng.next_normal() as f32).collect(),
        "blobs" => {
            let m = a.blobs.unwrap_or(a.kappa).max(1);
            let centers: Vec<Vec<f32>> = (0..m)
                .map(|_| (0..a.c).map(|_| (rng.uniform(-1.0, 1.0) * 100.0) as f32).collect())
                .collect();
            let mut d = Vec::with_capacity(a.n * a.c);
            for i in 0..a.n {
                let ctr = &centers[i % m];
                for j in 0..a.c {
                    d.push(ctr[j] + rng.next_normal() as f32 * 0.5);
                }
            }
            d
        }
        other => {
            return Err(Error::InvalidArg(format!(
                "unknown data model '{}', expected gaussian|blobs",
                other
            )))
        }
    };
    Tensor::new(vec![a.n, a.c], data)
}

fn cmd_knn_recall(cli: &Cli, a: &KnnRecallArgs) -> clustervig::Result<()> {
    if a.trials < 1 {
        return Err(Error::InvalidArg("--trials must be >= 1".into()));
    }
    print_resolved(
        cli,
        "knn-recall",
        &format!(
            "n={} c={} kappa={} k={} trials={} data={}",
            a.n, a.c, a.kappa, a.k, a.trials, a.data
        ),
    );
    println!("trial,recall");
    let mut values = Vec::with_capacity(a.trials);
    for t in 0..a.trials {
        let x = recall_data(a, cli.seed.wrapping_add(t as u64))?;
        let parts = cluster::kmeans(&x, a.kappa, cluster::DEFAULT_MAX_ITERS, KmeansInit::Stride)?;
        let r = graph::neighbor_recall(&x, &parts, a.k)?;
        println!("{},{}", t, r);
        values.push(r);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("mean,{}", mean);
    println!("min,{}", min);
    Ok(())
}

fn emit_records(out: &Option<String>, records: &[bench::BenchRecord]) -> clustervig::Result<()> {
    match out {
        Some(path) => bench::write_report(path, records),
        None => {
            print!("{}", bench::report_csv(records));
            Ok(())
        }
    }
}

fn cmd_bench(cli: &Cli, which: &BenchCmd) -> clustervig::Result<()> {
    match which {
        BenchCmd::Graph(a) => {
            print_resolved(
                cli,
                "bench graph",
                &format!("n={:?} c={:?} kappa={:?} k={:?} repeats={}", a.n, a.c, a.kappa, a.k, a.repeats),
            );
            let records =
                bench::bench_graph_construction(&a.n, &a.c, &a.kappa, &a.k, a.repeats, cli.seed);
            emit_records(&a.out, &records)
        }
        BenchCmd::Forward(a) => {
            let config = ModelConfig::preset(&a.variant)?;
            print_resolved(
                cli,
                "bench forward",
                &format!("variant={} batch_sizes={:?} repeats={}", a.variant, a.batch_sizes, a.repeats),
            );
            let records = bench::bench_forward(&config, &a.batch_sizes, a.repeats, cli.seed);
            emit_records(&a.out, &records)
        }
    }
}

fn cmd_train_toy(cli: &Cli, a: &TrainToyArgs) -> clustervig::Result<()> {
    let config = ModelConfig::preset(&a.variant)?;
    if config.n_b > 2 || config.c_iso > 32 || config.n_iso > 64 {
        return Err(Error::InvalidArg(
            "train-toy is restricted to tiny configs (n_b <= 2, C <= 32, N <= 64)".into(),
        ));
    }
    let dtype = Dtype::parse(&cli.dtype)
        .ok_or_else(|| Error::InvalidArg(format!("unknown dtype '{}'", cli.dtype)))?;
    print_resolved(
        cli,
        "train-toy",
        &format!(
            "variant={} steps={} lr={} classes={} per_class={}",
            a.variant, a.steps, a.lr, a.classes, a.per_class
        ),
    );
    match dtype {
        Dtype::F32 => train_toy_run::<f32>(cli, a, &config),
        Dtype::F64 => train_toy_run::<f64>(cli, a, &config),
    }
}

fn train_toy_run<F: Scalar>(
    cli: &Cli,
    a: &TrainToyArgs,
    config: &ModelConfig,
) -> clustervig::Result<()> {
    let mut config = config.clone();
    config.num_classes = a.classes;
    let mut params = model::init_weights::<F>(&config, cli.seed)?;
    let (images, labels) = model::toy_dataset(&config, a.classes, a.per_class, cli.seed ^ 0xb10b)?;
    let trace = model::train_toy(&mut params, &images, &labels, a.steps, a.lr)?;
    for (i, l) in trace.iter().enumerate() {
        println!("step {} loss {}", i, l);
    }
    let acc = model::accuracy(&params, &images, &labels)?;
    println!("train accuracy {}", acc);
    if let Some(path) = &a.out {
        model::save_model(path, &params)?;
        println!("saved {}", path);
    }
    Ok(())
}
