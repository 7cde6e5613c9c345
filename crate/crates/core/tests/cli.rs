use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_modepinn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    let text = format!(
        "seed = 3\n\n[train]\niters = 4\nfinetune_iters = 3\nbatch_equations = 2\nn_f = 24\nn_u = 8\nn_b = 8\n\n\
         [reference]\nnx = 32\nnt = 11\n\n[output]\ndir = \"{}\"\n{extra}",
        dir.join("runs").display()
    );
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn read(dir: &Path, run: &str, file: &str) -> Vec<u8> {
    fs::read(dir.join("runs").join(run).join(file)).unwrap()
}

#[test]
fn missing_config_exits_2_and_names_path() {
    let out = run(&["pretrain", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/cfg.toml"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out_csv = dir.path().join("f.csv").display().to_string();
    assert_eq!(run(&["reference", "--family", "navier", "--out", &out_csv]).status.code(), Some(2));
    assert_eq!(run(&["reference", "--family", "cdr", "--ic", "triangle", "--out", &out_csv]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "");
    assert_eq!(run(&["bench", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(run(&["pretrain", "--config", &cfg, "--set", "adapter.kind=dora"]).status.code(), Some(2));
}

#[test]
fn reference_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("adv.csv");
    let out = run(&["reference", "--family", "cdr", "--beta", "1", "--nx", "16", "--nt", "5", "--out", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 2 + 16 * 5);
    let bin_path = dir.path().join("h.bin");
    let out = run(&["reference", "--family", "helmholtz", "--a", "3", "--nx", "9", "--nt", "9", "--format", "binary", "--out", bin_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let f = modepinn::refsolve::GridField::read_binary(&mut fs::File::open(&bin_path).unwrap()).unwrap();
    for i in 0..9 {
        assert!(f.get(0, i).abs() < 1e-12 && f.get(8, i).abs() < 1e-12);
    }
    // An explicit scheme at this resolution violates its stability bound.
    let out = run(&["reference", "--family", "cdr", "--nu", "5", "--nx", "256", "--nt", "3", "--scheme", "explicit", "--out", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stability"));
}

/// Runs `args` twice and returns the named outputs of `run`, asserting both runs wrote the same bytes.
fn twice(dir: &Path, args: &[&str], run_id: &str, files: &[&str]) -> (Output, Vec<Vec<u8>>) {
    let mut snaps = Vec::new();
    let mut last = None;
    for _ in 0..2 {
        let out = run(args);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        snaps.push(files.iter().map(|f| read(dir, run_id, f)).collect::<Vec<_>>());
        last = Some(out);
    }
    for (f, (a, b)) in files.iter().zip(snaps[0].iter().zip(&snaps[1])) {
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    (last.unwrap(), snaps.pop().unwrap())
}

#[test]
fn pretrain_finetune_bench_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "");
    let files = ["checkpoint.bin", "history.csv", "metrics.csv", "config.toml"];
    let (_, pre) = twice(d, &["pretrain", "--config", &cfg, "--run-id", "pre"], "pre", &files);
    assert_eq!(String::from_utf8(pre[1].clone()).unwrap().lines().count(), 1 + 4);
    assert!(d.join("runs/pre/run.log").exists());

    let ckpt = d.join("runs/pre/checkpoint.bin").display().to_string();
    let args = ["finetune", "--config", &cfg, "--checkpoint", &ckpt, "--adapter", "mode", "--rank", "4", "--mu", "15,0.01,0", "--run-id", "ft"];
    let (out, _) = twice(d, &args, "ft", &files);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches("mode: 67 trainable").count(), 2, "{stdout}");
    let out = run(&["finetune", "--config", &cfg, "--checkpoint", &ckpt, "--adapter", "lora", "--rank", "2", "--run-id", "ft-lora"]);
    assert_eq!(out.status.code(), Some(0));

    let ft_mode = d.join("runs/ft/checkpoint.bin").display().to_string();
    let ft_lora = d.join("runs/ft-lora/checkpoint.bin").display().to_string();
    let args = ["bench", "--config", &cfg, "--checkpoints", &ft_mode, &ft_lora, "--diagnostics", "affine", "--base", &ckpt, "--seeds", "0", "--run-id", "bench"];
    let (_, bench) = twice(d, &args, "bench", &["pareto.csv", "diagnostics.csv", "metrics.csv"]);
    let pareto = String::from_utf8(bench[0].clone()).unwrap();
    assert!(pareto.lines().next().unwrap().contains("non_dominated"));
    assert_eq!(pareto.lines().count(), 3);
    let diag = String::from_utf8(bench[1].clone()).unwrap();
    for phase in ["phase=0", "phase=90", "phase=180"] {
        assert!(diag.contains(phase), "{phase}");
    }

    let csv = d.join("ref.csv");
    let args = ["reference", "--family", "cdr", "--beta", "2", "--nu", "0.1", "--rho", "1", "--nx", "32", "--nt", "9", "--out", csv.to_str().unwrap()];
    assert_eq!(run(&args).status.code(), Some(0));
    let first = fs::read(&csv).unwrap();
    assert_eq!(run(&args).status.code(), Some(0));
    assert_eq!(fs::read(&csv).unwrap(), first);
}

#[test]
fn finetune_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = run(&["pretrain", "--config", &cfg, "--iters", "0", "--run-id", "fresh"]);
    assert_eq!(out.status.code(), Some(0));
    let ckpt = dir.path().join("runs/fresh/checkpoint.bin");
    let fresh = modepinn::model::build_p2inn(&modepinn::model::ArchConfig::desk(3), 3).unwrap();
    assert_eq!(modepinn::checkpoint::load(&ckpt).unwrap(), fresh);
    let ckpt = ckpt.display().to_string();

    let out = run(&["finetune", "--config", &cfg, "--checkpoint", &ckpt, "--adapter", "none", "--run-id", "frozen"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("total trainable: 0"));
    assert_eq!(String::from_utf8(read(dir.path(), "frozen", "history.csv")).unwrap().lines().count(), 1);

    let out = run(&["finetune", "--config", &cfg, "--checkpoint", &ckpt, "--adapter", "mode", "--rank", "51", "--run-id", "bad"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rank 51"));

    let wide = write_config(dir.path(), "\n[model]\ndecoder = [64, 40, 40, 1]\n");
    let out = run(&["finetune", "--config", &wide, "--checkpoint", &ckpt, "--run-id", "mismatch"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[64, 50, 50, 50, 1]"));
}

#[test]
fn selftest_passes() {
    let out = run(&["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
