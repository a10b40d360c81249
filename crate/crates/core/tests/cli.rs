//! End-to-end checks of the `cvig` binary: exit codes, file round trips,
//! and output formats.

use std::path::PathBuf;
use std::process::{Command, Output};

use clustervig::bench;
use clustervig::model::{self, Checkpoint, ModelConfig};
use clustervig::numeric::Tensor;

fn cvig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvig"))
        .args(args)
        .output()
        .expect("spawn cvig")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cvig-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn train_toy_zero_steps_prints_single_loss() {
    let out = cvig(&["train-toy", "--steps", "0", "--per-class", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let losses: Vec<&str> = stdout.lines().filter(|l| l.starts_with("step ")).collect();
    assert_eq!(losses.len(), 1, "{stdout}");
    assert!(stdout.contains("train accuracy"));
}

#[test]
fn train_toy_is_deterministic() {
    let run = || {
        let out = cvig(&["train-toy", "--steps", "3", "--per-class", "2", "--seed", "7"]);
        assert!(out.status.success());
        String::from_utf8(out.stdout).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn gradcheck_zero_eps_is_usage_error() {
    let out = cvig(&["gradcheck", "--eps", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_on_tiny() {
    let out = cvig(&["gradcheck", "--seed", "42", "--eps", "1e-5"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.contains("gradcheck PASS"), "{stdout}");
}

#[test]
fn knn_recall_reports_fractions() {
    let out = cvig(&[
        "knn-recall", "--n", "64", "--c", "4", "--kappa", "2", "--k", "5", "--trials", "3",
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut rows = 0;
    for line in stdout.lines().skip(1) {
        let (_, val) = line.split_once(',').unwrap();
        let r: f64 = val.parse().unwrap();
        assert!((0.0..=1.0).contains(&r), "{line}");
        rows += 1;
    }
    assert_eq!(rows, 5); // 3 trials + mean + min
}

#[test]
fn bench_graph_writes_parseable_csv() {
    let path = tmp("bench.csv");
    let out = cvig(&[
        "bench", "graph", "--n", "32,64", "--c", "4", "--kappa", "1,2", "--k", "3",
        "--out", path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    let records = bench::parse_csv(&text).unwrap();
    // per (n, c, k): one full cell plus kmeans+balanced per kappa
    assert_eq!(records.len(), 2 * (1 + 2 * 2));
    assert!(records.iter().all(|r| r.status == "ok"));
}

#[test]
fn infer_round_trips_logits() {
    let config = ModelConfig::preset("tiny").unwrap();
    let params = model::init_weights::<f32>(&config, 5).unwrap();
    let ckpt = tmp("model.ckpt");
    model::save_model(&ckpt, &params).unwrap();

    let sz = config.img_size();
    let mut rng = clustervig::rng::SplitMix64::new(9);
    let images = Tensor::<f32>::new(
        vec![2, sz, sz, 3],
        (0..2 * sz * sz * 3).map(|_| rng.uniform(0.0, 1.0) as f32).collect(),
    )
    .unwrap();
    let input = tmp("input.ckpt");
    let mut ic = Checkpoint::new(None);
    ic.push_tensor("input", &images);
    ic.save(&input).unwrap();

    let output = tmp("logits.ckpt");
    let out = cvig(&[
        "infer",
        "--checkpoint", ckpt.to_str().unwrap(),
        "--input", input.to_str().unwrap(),
        "--output", output.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.starts_with("image ")).count(), 2);

    // saved logits reload to the in-memory values bitwise
    let expect = model::model_forward_eval(&params, &images).unwrap();
    let got: Tensor<f32> = Checkpoint::load(&output).unwrap().get_tensor("logits").unwrap();
    assert_eq!(expect.shape(), got.shape());
    assert_eq!(expect.data(), got.data());
}

#[test]
fn infer_rejects_wrong_variant_and_bad_shape() {
    let config = ModelConfig::preset("tiny").unwrap();
    let params = model::init_weights::<f32>(&config, 5).unwrap();
    let ckpt = tmp("model2.ckpt");
    model::save_model(&ckpt, &params).unwrap();

    let input = tmp("bad-input.ckpt");
    let mut ic = Checkpoint::new(None);
    ic.push_tensor("input", &Tensor::<f32>::zeros(vec![1, 3, 3, 3]));
    ic.save(&input).unwrap();
    let output = tmp("unused.ckpt");

    let out = cvig(&[
        "infer",
        "--checkpoint", ckpt.to_str().unwrap(),
        "--input", input.to_str().unwrap(),
        "--output", output.to_str().unwrap(),
        "--variant", "cvig-ti",
    ]);
    assert_eq!(out.status.code(), Some(1));

    let out = cvig(&[
        "infer",
        "--checkpoint", ckpt.to_str().unwrap(),
        "--input", input.to_str().unwrap(),
        "--output", output.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("input"), "{err}");
}
