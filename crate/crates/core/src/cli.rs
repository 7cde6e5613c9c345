//! Subcommand implementations behind the `modepinn` binary.
//!
//! Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.
//! Run directories hold `checkpoint.bin`, `history.csv`, `metrics.csv` and
//! `config.toml`; wall-clock timestamps go only to the `run.log` sidecar.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::AdapterKind;
use crate::bench::{deadlock_diagnostics, evaluate, pareto_report, write_long_csv, Diagnostic, DiagnosticsConfig, ErrorReport, ParetoRow};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{build_p2inn, P2innModel};
use crate::pde::{sample_batch, CdrParams, Family, HelmholtzParams, IcKind, ProblemSpec};
use crate::refsolve::{helmholtz_exact, strang_cdr_with, DiffusionScheme, GridField};
use crate::selftest;
use crate::train::{finetune, pinn_loss, pretrain};

/// Salt for the held-out batch behind `test_loss`.
const TEST_SALT: u64 = 0x7e57_ba7c;

#[derive(Debug, Parser)]
#[command(name = "modepinn", version, about = "Parameterized PINNs with spectral fine-tuning adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// `section.key=value` overrides applied after the file, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output.run_id`.
    #[arg(long)]
    pub run_id: Option<String>,
    /// Overrides `output.dir`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train on the configured source grid.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Attach an adapter to a pre-trained checkpoint and fit one target.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        adapter: Option<String>,
        #[arg(long)]
        rank: Option<usize>,
        /// Comma-separated target coefficients, e.g. `15,0.01,0`.
        #[arg(long)]
        mu: Option<String>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Write a ground-truth field.
    Reference(ReferenceArgs),
    /// Score adapted checkpoints into a Pareto table, optionally with diagnostics.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 0..)]
        checkpoints: Vec<PathBuf>,
        /// Comma-separated subset of locking, truncation, affine.
        #[arg(long)]
        diagnostics: Option<String>,
        /// Pre-trained checkpoint the diagnostics fine-tune from.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Seeds for the diagnostics; defaults to seed, seed+1, seed+2.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Runs the invariant suite and prints one line per property.
    Selftest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FieldFormat {
    Csv,
    Binary,
}

#[derive(Debug, Args)]
pub struct ReferenceArgs {
    #[arg(long)]
    pub family: String,
    #[arg(long, default_value = "sinusoid")]
    pub ic: String,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.0)]
    pub nu: f64,
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 2.5)]
    pub a: f64,
    #[arg(long, default_value_t = 256)]
    pub nx: usize,
    #[arg(long, default_value_t = 101)]
    pub nt: usize,
    #[arg(long, default_value = "crank-nicolson")]
    pub scheme: String,
    #[arg(long, value_enum, default_value_t = FieldFormat::Csv)]
    pub format: FieldFormat,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownIc(_) | Error::Rank { .. } => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run_from<I, T>(args: I, out: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    for o in &common.overrides {
        cfg.set(o)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(r) = &common.run_id {
        cfg.output.run_id = r.clone();
    }
    if let Some(d) = &common.out_dir {
        cfg.output.dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::Config(format!("cannot create '{}': {e}", dir.display())))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(dir)
}

fn sidecar(dir: &Path, event: &str) -> Result<()> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join("run.log"))?;
    writeln!(f, "{secs} {event}")?;
    Ok(())
}

fn write_file(path: &Path, body: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    body(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Ground truth at `mu` on the configured reference grid.
pub fn reference_field(spec: &ProblemSpec, mu: &[f64], nx: usize, nt: usize, scheme: DiffusionScheme) -> Result<GridField> {
    match spec.family {
        Family::Cdr => strang_cdr_with(&CdrParams::from_mu(mu)?, spec, nx, nt, scheme),
        Family::Helmholtz => helmholtz_exact(&spec.helmholtz_params(mu)?, nx, nt),
    }
}

/// `(train loss, held-out loss, error vs ground truth)` of `model` at `mu`.
pub fn score(model: &P2innModel, cfg: &RunConfig, mu: &[f64]) -> Result<(f64, f64, ErrorReport)> {
    let spec = cfg.problem_spec()?;
    let opts = cfg.loss();
    let train = sample_batch(&spec, cfg.counts(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let test = sample_batch(&spec, cfg.counts(), &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ TEST_SALT))?;
    let truth = reference_field(&spec, mu, cfg.reference.nx, cfg.reference.nt, cfg.reference.scheme)?;
    Ok((
        pinn_loss(model, &spec, &train, mu, &opts)?.total,
        pinn_loss(model, &spec, &test, mu, &opts)?.total,
        evaluate(model, mu, &truth)?,
    ))
}

fn method_name(model: &P2innModel) -> String {
    let (kind, rank) = model.adapter_summary();
    if kind.uses_rank() {
        format!("{kind}-r{rank}")
    } else {
        kind.to_string()
    }
}

fn metrics_header() -> String {
    format!("method,mu,params,train_loss,test_loss,{}", ErrorReport::csv_header())
}

fn metrics_row(method: &str, mu: &[f64], params: usize, train: f64, test: f64, e: &ErrorReport) -> String {
    let mu: Vec<String> = mu.iter().map(|v| v.to_string()).collect();
    format!("{method},{},{params},{train:e},{test:e},{}", mu.join(";"), e.csv_row())
}

fn check_arch(model: &P2innModel, cfg: &RunConfig) -> Result<()> {
    let want = cfg.arch()?;
    if model.arch != want {
        return Err(Error::Config(format!(
            "checkpoint architecture coord {:?} param {:?} decoder {:?} differs from config coord {:?} param {:?} decoder {:?}",
            model.arch.coord, model.arch.param, model.arch.decoder, want.coord, want.param, want.decoder
        )));
    }
    Ok(())
}

fn parse_mu(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad --mu entry '{v}'"))))
        .collect()
}

fn run(cmd: Command, out: &mut impl Write) -> Result<i32> {
    match cmd {
        Command::Pretrain { common, iters } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = iters {
                cfg.train.iters = n;
            }
            cmd_pretrain(&cfg, out)
        }
        Command::Finetune {
            common,
            checkpoint,
            adapter,
            rank,
            mu,
            iters,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(a) = adapter {
                cfg.adapter.kind = a.parse()?;
            }
            if let Some(r) = rank {
                cfg.adapter.rank = r;
            }
            if let Some(n) = iters {
                cfg.train.finetune_iters = n;
            }
            if let Some(m) = mu {
                let v = parse_mu(&m)?;
                match (cfg.problem.family, v.as_slice()) {
                    (Family::Cdr, [b, n, r]) => (cfg.problem.beta, cfg.problem.nu, cfg.problem.rho) = (*b, *n, *r),
                    (Family::Helmholtz, [a]) => cfg.problem.a = *a,
                    _ => return Err(Error::Config(format!("--mu '{m}' has the wrong length for the family"))),
                }
            }
            cfg.validate()?;
            cmd_finetune(&cfg, &checkpoint, out)
        }
        Command::Reference(args) => cmd_reference(&args, out),
        Command::Bench {
            common,
            checkpoints,
            diagnostics,
            base,
            seeds,
        } => {
            if checkpoints.is_empty() {
                return Err(Error::Config("bench needs at least one checkpoint".into()));
            }
            let cfg = load_config(&common)?;
            let which = diagnostics
                .map(|d| d.split(',').map(|s| s.trim().parse::<Diagnostic>()).collect::<Result<Vec<_>>>())
                .transpose()?
                .unwrap_or_default();
            cmd_bench(&cfg, &checkpoints, &which, base.as_deref(), &seeds, out)
        }
        Command::Selftest => cmd_selftest(out),
    }
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &mut impl Write) -> Result<i32> {
    let spec = cfg.problem_spec()?;
    let dist = cfg.source_distribution()?;
    let dir = prepare_run_dir(cfg)?;
    sidecar(&dir, "pretrain started")?;
    let mut model = build_p2inn(&cfg.arch()?, cfg.seed)?;
    writeln!(out, "pretraining {} scalars on {} equations for {} iterations", model.trainable_count(), dist.mus.len(), cfg.train.iters)?;
    let history = pretrain(&mut model, &spec, &dist, &cfg.pretrain_config())?;
    checkpoint::save(&model, &dir.join("checkpoint.bin"))?;
    write_file(&dir.join("history.csv"), |w| history.write_csv(w))?;
    let mut lines = vec![metrics_header()];
    for mu in &dist.mus {
        let (train, test, e) = score(&model, cfg, mu)?;
        lines.push(metrics_row("pretrained", mu, model.trainable_count(), train, test, &e));
    }
    fs::write(dir.join("metrics.csv"), lines.join("\n") + "\n")?;
    if let Some(last) = history.last() {
        writeln!(out, "final loss {:.6e}", last.total)?;
    }
    writeln!(out, "wrote {}", dir.display())?;
    sidecar(&dir, "pretrain finished")?;
    Ok(0)
}

pub fn cmd_finetune(cfg: &RunConfig, ckpt: &Path, out: &mut impl Write) -> Result<i32> {
    let mut model = checkpoint::load(ckpt).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read checkpoint '{}': {io}", ckpt.display())),
        other => other,
    })?;
    check_arch(&model, cfg)?;
    let spec = cfg.problem_spec()?;
    let mu = cfg.target_mu()?;
    let mut ft = cfg.finetune_config();
    if cfg.adapter.kind == AdapterKind::None {
        ft.iters = 0;
    }
    let dir = prepare_run_dir(cfg)?;
    sidecar(&dir, "finetune started")?;
    let history = finetune(&mut model, &spec, &mu, &cfg.adapter_spec(), &ft)?;
    for (part, mlp) in model.parts() {
        for (i, l) in mlp.layers.iter().enumerate() {
            let n = l.trainable_count();
            if n > 0 {
                let what = l.adapter.as_ref().map_or("dense".to_string(), |a| a.kind().to_string());
                writeln!(out, "{}.{i} {what}: {n} trainable", part.name())?;
            }
        }
    }
    writeln!(out, "total trainable: {}", model.trainable_count())?;
    checkpoint::save(&model, &dir.join("checkpoint.bin"))?;
    write_file(&dir.join("history.csv"), |w| history.write_csv(w))?;
    let (train, test, e) = score(&model, cfg, &mu)?;
    let body = format!(
        "{}\n{}\n",
        metrics_header(),
        metrics_row(&method_name(&model), &mu, model.trainable_count(), train, test, &e)
    );
    fs::write(dir.join("metrics.csv"), body)?;
    writeln!(out, "rel-L2 {:.6e}", e.rel_l2)?;
    writeln!(out, "wrote {}", dir.display())?;
    sidecar(&dir, "finetune finished")?;
    Ok(0)
}

pub fn cmd_reference(args: &ReferenceArgs, out: &mut impl Write) -> Result<i32> {
    let family: Family = args.family.parse()?;
    let scheme: DiffusionScheme = match args.scheme.as_str() {
        "crank-nicolson" | "cn" => DiffusionScheme::CrankNicolson,
        "explicit" => DiffusionScheme::Explicit,
        other => return Err(Error::Config(format!("unknown scheme '{other}'"))),
    };
    let field = match family {
        Family::Cdr => {
            let ic: IcKind = args.ic.parse()?;
            strang_cdr_with(&CdrParams::new(args.beta, args.nu, args.rho)?, &ProblemSpec::cdr(ic), args.nx, args.nt, scheme)?
        }
        Family::Helmholtz => helmholtz_exact(&HelmholtzParams::new(args.a), args.nx, args.nt)?,
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    match args.format {
        FieldFormat::Csv => write_file(&args.out, |w| field.write_csv(w))?,
        FieldFormat::Binary => write_file(&args.out, |w| field.write_binary(w))?,
    }
    writeln!(out, "wrote {}x{} field to {}", field.nt, field.nx, args.out.display())?;
    Ok(0)
}

pub fn cmd_bench(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    which: &[Diagnostic],
    base: Option<&Path>,
    seeds: &[u64],
    out: &mut impl Write,
) -> Result<i32> {
    let mu = cfg.target_mu()?;
    let dir = prepare_run_dir(cfg)?;
    sidecar(&dir, "bench started")?;
    let mut rows = Vec::new();
    let mut metrics = vec![metrics_header()];
    for path in checkpoints {
        let model = checkpoint::load(path)
            .map_err(|e| Error::Config(format!("checkpoint '{}': {e}", path.display())))?;
        check_arch(&model, cfg)?;
        let (train, test, e) = score(&model, cfg, &mu)?;
        let mut name = method_name(&model);
        if rows.iter().any(|r: &ParetoRow| r.method == name) {
            name = format!("{name}#{}", rows.len());
        }
        metrics.push(metrics_row(&name, &mu, model.trainable_count(), train, test, &e));
        if model.trainable_count() == 0 {
            writeln!(out, "{name}: no trainable parameters, left out of the Pareto table")?;
            continue;
        }
        rows.push(ParetoRow::new(name, model.trainable_count(), train, test, e.rel_l2)?);
    }
    fs::write(dir.join("metrics.csv"), metrics.join("\n") + "\n")?;
    let table = pareto_report(&rows);
    write_file(&dir.join("pareto.csv"), |w| table.write_csv(w))?;
    for (r, d) in table.rows.iter().zip(&table.dominated_by) {
        let flag = if d.is_empty() { "front".to_string() } else { format!("dominated by {}", d.join(", ")) };
        writeln!(out, "{:<16} params {:>6} rel-L2 {:.4e} efficiency {:.4e} {flag}", r.method, r.params, r.rel_l2, r.efficiency)?;
    }
    if !which.is_empty() {
        let base = base.ok_or_else(|| Error::Config("diagnostics need --base <pretrained checkpoint>".into()))?;
        let model = checkpoint::load(base)
            .map_err(|e| Error::Config(format!("base checkpoint '{}': {e}", base.display())))?;
        check_arch(&model, cfg)?;
        let spec = cfg.problem_spec()?;
        let mut dc = DiagnosticsConfig::desk(spec);
        dc.seeds = if seeds.is_empty() { (0..3).map(|i| cfg.seed + i).collect() } else { seeds.to_vec() };
        dc.finetune = cfg.finetune_config();
        dc.rank = cfg.adapter.rank;
        dc.base = CdrParams::from_mu(&cfg.target_mu()?)?;
        dc.grid = (cfg.reference.nx, cfg.reference.nt);
        let report = deadlock_diagnostics(&model, &dc, which)?;
        write_file(&dir.join("diagnostics.csv"), |w| write_long_csv(&report.records(), w))?;
        writeln!(out, "diagnostics: {} runs", report.runs.len())?;
    }
    writeln!(out, "wrote {}", dir.display())?;
    sidecar(&dir, "bench finished")?;
    Ok(0)
}

pub fn cmd_selftest(out: &mut impl Write) -> Result<i32> {
    let checks = selftest::run_all()?;
    for c in &checks {
        writeln!(out, "{}", c.line())?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    writeln!(out, "{} of {} properties hold", checks.len() - failed, checks.len())?;
    Ok(if failed == 0 { 0 } else { 1 })
}
