use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pexcite(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pexcite")).args(args).output().expect("binary runs")
}

/// Runs a subcommand that must succeed and returns its run directory.
fn run_ok(args: &[&str]) -> PathBuf {
    let out = pexcite(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

/// Every file in a run directory except the timestamped sidecar.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "run.meta.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn body(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    let (head, rest) = text.split_once('\n').unwrap();
    assert!(head.starts_with("# pexcite ") && head.contains("config_hash=") && head.contains("seed="), "{head}");
    rest.to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &str = r#"
seeds = [1]
[data.generator]
kind = "blobs"
per_class = 10
[data]
test_fraction = 0.3
[arch]
type = "two_layer"
hidden = 6
[train]
step_size = 0.01
max_iters = 200
batch_size = 4
inner_steps = 5
log_every = 50
[attack]
eps_max = 1.0
pgd_steps = 10
bisect_iters = 6
"#;

#[test]
fn unknown_subcommand_fails() {
    let out = pexcite(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn invalid_config_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "seeds = []\n");
    let out = pexcite(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
    let out = pexcite(&["train", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert!(!out.status.success());
    let out = pexcite(&["margins", "--loss", "mse"]);
    assert!(!out.status.success());
}

#[test]
fn gen_data_round_trips_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let run = run_ok(&["gen-data", "--seed", "4", "--out", out]);
    let csv = run.join("dataset-seed4.csv");
    let ds = pexcite::data_io::read_csv(&csv).unwrap();
    let expect = pexcite::data_io::generate(&pexcite::data_io::DatasetKind::from_name("three_cluster").unwrap(), 4).unwrap();
    assert_eq!(ds.points, expect.points);
    assert_eq!(ds.labels, expect.labels);
    let side = json(&pexcite::data_io::sidecar_path(&csv));
    assert_eq!(side["seed"], 4);
    assert_eq!(side["config_hash"].as_str().unwrap().len(), 64);
    let first = artifacts(&run);
    let again = run_ok(&["gen-data", "--seed", "4", "--out", out]);
    assert_eq!(again, run);
    assert_eq!(artifacts(&again), first);
    assert!(run.join("run.meta.json").exists());
}

#[test]
fn different_configs_get_different_directories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let a = run_ok(&["gen-data", "--seed", "1", "--out", out]);
    let b = run_ok(&["gen-data", "--seed", "2", "--out", out]);
    assert_ne!(a, b);
    assert!(a.join("dataset-seed1.csv").exists() && b.join("dataset-seed2.csv").exists());
}

#[test]
fn zero_radius_excitation_matches_plain_sgd_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    // single-sample steps: batch sums accumulate in a different order
    let base = SMALL.replace("batch_size = 4", "batch_size = 1");
    let pe = write_config(dir.path(), "pe.toml", &base);
    // excitation training differentiates two full squared errors, four times
    // the one-half convention of plain SGD
    let sgd_text = format!("optimizer = \"sgd\"\n{}", base.replace("step_size = 0.01", "step_size = 0.04"));
    let sgd = write_config(dir.path(), "sgd.toml", &sgd_text);

    let pe_run = run_ok(&["pe-train", "--config", &pe, "--radii", "0", "--out", out]);
    let sgd_run = run_ok(&["train", "--config", &sgd, "--out", out]);
    let pe_ckpt = pe_run.join("checkpoint-r0-seed1.json");
    let sgd_ckpt = sgd_run.join("checkpoint-seed1.json");
    let (pe_net, _) = pexcite::net::load_checkpoint(&pe_ckpt).unwrap();
    let (sgd_net, _) = pexcite::net::load_checkpoint(&sgd_ckpt).unwrap();
    assert_eq!(pe_net.params(), sgd_net.params());

    let a = run_ok(&["margins", "--config", &pe, "--checkpoint", pe_ckpt.to_str().unwrap(), "--out", out]);
    let b = run_ok(&["margins", "--config", &pe, "--checkpoint", sgd_ckpt.to_str().unwrap(), "--out", out]);
    for split in ["train", "test"] {
        let pa = body(&a.join(format!("margins-checkpoint-r0-seed1-{split}.csv")));
        let pb = body(&b.join(format!("margins-checkpoint-seed1-{split}.csv")));
        assert_eq!(pa, pb);
        assert!(pa.lines().count() > 1);
    }
}

#[test]
fn margins_sweep_writes_one_curve_per_radius() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let run = run_ok(&["margins", "--config", &cfg, "--radii", "0.005,0.010,0.020", "--out", out]);
    for r in ["0.005", "0.01", "0.02"] {
        for split in ["train", "test"] {
            let b = body(&run.join(format!("margins-r{r}-seed1-{split}.csv")));
            assert!(b.lines().count() > 1, "{r} {split}");
        }
        assert!(run.join(format!("checkpoint-r{r}-seed1.json")).exists());
    }
    let summary = json(&run.join("margins-summary.json"));
    assert_eq!(summary["result"].as_array().unwrap().len(), 3);
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 64);
    let again = run_ok(&["margins", "--config", &cfg, "--radii", "0.005,0.010,0.020", "--out", out]);
    assert_eq!(artifacts(&again), artifacts(&run));
}

#[test]
fn equiv_sweep_recovers_ridge_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "e.toml", "[data.generator]\nkind = \"separable_random\"\nn = 15\ndim = 3\n[equiv]\np = 2.0\nm = 2.0\n");
    let run = run_ok(&["equiv", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    let b = body(&run.join("equiv-seed0.csv"));
    let mut rows = 0;
    for line in b.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        let (eps, lambda, residual) = (f[0], f[1], f[3]);
        assert!((lambda - eps * eps).abs() <= 1e-6 * eps * eps, "{line}");
        assert!(residual <= 1e-6, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 10);
}

#[test]
fn analysis_subcommands_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &SMALL.replace("max_iters = 200", "max_iters = 2000"));

    let run = run_ok(&["boundary", "--config", &cfg, "--loss", "ce", "--out", out]);
    let raster = body(&run.join("boundary-ce-seed1.txt"));
    assert!(raster.starts_with("xmin,xmax,ymin,ymax,nx,ny"));
    let grid = json(&run.join("grid-margins-ce-seed1.json"));
    assert!(grid["result"]["min_margin"].as_f64().unwrap() >= 0.0);

    let run = run_ok(&["bounds", "--config", &cfg, "--loss", "se", "--out", out]);
    let rep = json(&run.join("bounds-seed1.json"));
    assert!(rep["result"]["svm"]["gamma_opt"].as_f64().unwrap() > 0.0);
    assert!(rep["result"]["lipschitz_bound"].is_object());
    assert!(rep["result"]["empirical_lipschitz"]["value"].as_f64().unwrap() > 0.0);

    let run = run_ok(&["bounds", "--config", &cfg, "--loss", "ce", "--out", out]);
    assert!(json(&run.join("bounds-seed1.json"))["result"]["support_bound"].is_object());

    let linear = write_config(
        dir.path(),
        "lin.toml",
        "loss = \"ce\"\n[data.generator]\nkind = \"affine_support\"\n[arch]\ntype = \"dense\"\nhidden = []\nactivation = \"identity\"\noutput_bias = true\n[train]\nstep_size = 0.5\nmax_iters = 20000\n",
    );
    let run = run_ok(&["bounds", "--config", &linear, "--out", out]);
    let rep = json(&run.join("bounds-seed0.json"));
    let m = &rep["result"]["margin_bound"];
    assert!(m["geometric_margin"].as_f64().unwrap() <= m["bound"].as_f64().unwrap() + 1e-6);

    let rank = write_config(
        dir.path(),
        "rank.toml",
        "loss = \"ce\"\n[data.generator]\nkind = \"blobs\"\n[arch]\ntype = \"linear_chain\"\nhidden = [3, 3]\n[train]\nstep_size = 0.5\nweight_decay = 0.001\nmax_iters = 40000\ngrad_tol = 1e-9\n",
    );
    let run = run_ok(&["rank", "--config", &rank, "--out", out]);
    let rep = json(&run.join("rank-seed0.json"));
    for layer in rep["result"]["layers"].as_array().unwrap() {
        assert!(layer["ratio"].as_f64().unwrap() <= 1e-3, "{layer}");
    }

    let stab = write_config(dir.path(), "s.toml", "[data.generator]\nkind = \"three_cluster\"\nper_cluster = 5\n[arch]\ntype = \"two_layer\"\nhidden = 4\n[train]\nstep_size = 0.02\nmax_iters = 60000\ngrad_tol = 1e-8\n");
    let run = run_ok(&["stability", "--config", &stab, "--seed", "0", "--out", out]);
    let rep = json(&run.join("stability-seed0.json"));
    assert!(rep["result"]["report"]["lambda_f1"].as_f64().unwrap() > 0.0);
}

#[test]
fn cifar2_runs_on_a_binary_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for r in 0..12u8 {
        bytes.push([0u8, 7, 3][(r % 3) as usize]);
        bytes.extend((0..3072u32).map(|i| ((i * 7 + u32::from(r) * 31) % 256) as u8));
    }
    let bin = dir.path().join("data_batch_1.bin");
    std::fs::write(&bin, &bytes).unwrap();
    let text = format!(
        "[data]\ntest_fraction = 0.25\n[data.cifar]\nfiles = [{:?}]\ndownscale = 4\n[arch]\ntype = \"two_layer\"\nhidden = 4\n[train]\nstep_size = 0.01\nmax_iters = 30\nbatch_size = 2\ninner_steps = 3\n[attack]\neps_max = 0.5\npgd_steps = 5\nbisect_iters = 4\n",
        bin.to_string_lossy()
    );
    let cfg = write_config(dir.path(), "c.toml", &text);
    let run = run_ok(&["cifar2", "--config", &cfg, "--radii", "0.02", "--out", dir.path().to_str().unwrap()]);
    let summary = json(&run.join("summary-r0.02-seed0.json"));
    assert!(summary["result"]["train_accuracy"].as_f64().is_some());
    assert!(body(&run.join("margins-r0.02-seed0-test.csv")).lines().count() > 1);

    let plain = write_config(dir.path(), "p.toml", "seeds = [0]\n");
    assert!(!pexcite(&["cifar2", "--config", &plain, "--out", dir.path().to_str().unwrap()]).status.success());
}
