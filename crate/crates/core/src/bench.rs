//! Error metrics, parameter efficiency, Pareto tables and the deadlock diagnostics.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterKind};
use crate::error::{Error, Result};
use crate::model::P2innModel;
use crate::pde::{sample_batch, CdrParams, IcKind, ProblemSpec};
use crate::refsolve::{strang_cdr, GridField};
use crate::train::{finetune, finetune_attached, pinn_loss, AdapterSpec, FinetuneConfig, History};

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::dim(
            "metric",
            format!("prediction {} vs truth {}", pred.len(), truth.len()),
        ));
    }
    Ok(())
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖pred − truth‖₂`.
pub fn abs_l2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(norm(pred.iter().zip(truth).map(|(p, t)| p - t)))
}

/// `‖pred − truth‖₂ / ‖truth‖₂`.
pub fn rel_l2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    let num = abs_l2(pred, truth)?;
    let den = norm(truth.iter().copied());
    if den == 0.0 {
        return Err(Error::InvalidInput("relative error against a zero field".into()));
    }
    Ok(num / den)
}

pub fn max_err(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).fold(0.0, |m, (p, t)| m.max((p - t).abs())))
}

fn variance(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    v.map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// `1 − Var(truth − pred) / Var(truth)`.
pub fn explained_variance(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let vt = variance(truth.iter().copied());
    if vt == 0.0 {
        return Err(Error::InvalidInput("explained variance of a constant field".into()));
    }
    Ok(1.0 - variance(truth.iter().zip(pred).map(|(t, p)| t - p)) / vt)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub rel_l2: f64,
    pub abs_l2: f64,
    pub max_err: f64,
    pub explained_variance: f64,
    pub n_points: usize,
}

impl ErrorReport {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Self> {
        Ok(ErrorReport {
            rel_l2: rel_l2(pred, truth)?,
            abs_l2: abs_l2(pred, truth)?,
            max_err: max_err(pred, truth)?,
            explained_variance: explained_variance(pred, truth)?,
            n_points: pred.len(),
        })
    }

    pub fn csv_header() -> &'static str {
        "rel_l2,rel_l2_percent,abs_l2,max_err,explained_variance,n_points"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:e},{:e},{:e},{:e},{:e},{}",
            self.rel_l2,
            100.0 * self.rel_l2,
            self.abs_l2,
            self.max_err,
            self.explained_variance,
            self.n_points
        )
    }
}

/// Model predictions on every node of `truth`, compared pointwise.
pub fn evaluate(model: &P2innModel, mu: &[f64], truth: &GridField) -> Result<ErrorReport> {
    let pred = model.predict(&truth.points(), mu)?;
    ErrorReport::compute(&pred, truth.values.data())
}

/// `1 / (loss · params / 1000)`.
pub fn efficiency(loss: f64, params: usize) -> Result<f64> {
    if !(loss > 0.0) || params == 0 {
        return Err(Error::InvalidInput(format!(
            "efficiency needs positive loss and params, got {loss} and {params}"
        )));
    }
    Ok(1.0 / (loss * params as f64 / 1000.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub method: String,
    pub params: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub rel_l2: f64,
    pub efficiency: f64,
}

impl ParetoRow {
    /// Efficiency is computed from the train loss.
    pub fn new(method: impl Into<String>, params: usize, train_loss: f64, test_loss: f64, rel_l2: f64) -> Result<Self> {
        Ok(ParetoRow {
            method: method.into(),
            params,
            train_loss,
            test_loss,
            rel_l2,
            efficiency: efficiency(train_loss, params)?,
        })
    }

    /// `self` dominates `other`: no more parameters, no larger error, one strictly better.
    pub fn dominates(&self, other: &ParetoRow) -> bool {
        self.params <= other.params
            && self.rel_l2 <= other.rel_l2
            && (self.params < other.params || self.rel_l2 < other.rel_l2)
    }
}

/// Rows sorted by efficiency (descending) with the names of their dominators.
#[derive(Clone, Debug, PartialEq)]
pub struct ParetoTable {
    pub rows: Vec<ParetoRow>,
    pub dominated_by: Vec<Vec<String>>,
}

impl ParetoTable {
    pub fn front(&self) -> Vec<&ParetoRow> {
        self.rows
            .iter()
            .zip(&self.dominated_by)
            .filter(|(_, d)| d.is_empty())
            .map(|(r, _)| r)
            .collect()
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "method,params,train_loss,test_loss,rel_l2,efficiency,non_dominated,dominated_by")?;
        for (r, d) in self.rows.iter().zip(&self.dominated_by) {
            writeln!(
                w,
                "{},{},{:e},{:e},{:e},{:e},{},{}",
                r.method,
                r.params,
                r.train_loss,
                r.test_loss,
                r.rel_l2,
                r.efficiency,
                d.is_empty(),
                d.join(";")
            )?;
        }
        Ok(())
    }
}

pub fn pareto_report(rows: &[ParetoRow]) -> ParetoTable {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| b.efficiency.total_cmp(&a.efficiency).then_with(|| a.method.cmp(&b.method)));
    let dominated_by = rows
        .iter()
        .map(|r| {
            rows.iter()
                .filter(|o| o.dominates(r))
                .map(|o| o.method.clone())
                .collect()
        })
        .collect();
    ParetoTable { rows, dominated_by }
}

/// Rows stored with an efficiency that disagrees with `1/(loss·kP)` beyond `tol` (relative).
pub fn efficiency_mismatches(rows: &[ParetoRow], tol: f64) -> Vec<(String, f64, f64)> {
    rows.iter()
        .filter_map(|r| {
            let want = efficiency(r.train_loss, r.params).ok()?;
            ((r.efficiency - want).abs() > tol * want).then(|| (r.method.clone(), r.efficiency, want))
        })
        .collect()
}

/// One `(method, setting, seed, metric, value)` record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongRecord {
    pub experiment: String,
    pub method: String,
    pub setting: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn write_long_csv(records: &[LongRecord], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "experiment,method,setting,seed,metric,value")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{:e}",
            r.experiment, r.method, r.setting, r.seed, r.metric, r.value
        )?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Diagnostic {
    /// SVD-diag versus MODE at out-of-range convection speeds.
    Locking,
    /// MODE with `τ` trainable versus `τ ≡ 0` on a stiff reaction target.
    Truncation,
    /// MODE with `Δb` trainable versus frozen on phase-shifted initial profiles.
    Affine,
}

impl std::str::FromStr for Diagnostic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "locking" => Ok(Diagnostic::Locking),
            "truncation" => Ok(Diagnostic::Truncation),
            "affine" => Ok(Diagnostic::Affine),
            other => Err(Error::Config(format!("unknown diagnostic '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    pub seeds: Vec<u64>,
    pub finetune: FinetuneConfig,
    pub rank: usize,
    /// Pre-training problem; its initial profile is the unshifted reference.
    pub spec: ProblemSpec,
    /// Coefficients held fixed while `β` varies in the locking experiment.
    pub base: CdrParams,
    pub ood_betas: Vec<f64>,
    pub stiff: CdrParams,
    /// Convection coefficients for the phase-shift targets.
    pub phase_mu: CdrParams,
    pub phases: Vec<f64>,
    pub grid: (usize, usize),
}

impl DiagnosticsConfig {
    pub fn desk(spec: ProblemSpec) -> Self {
        DiagnosticsConfig {
            seeds: vec![0, 1, 2],
            finetune: FinetuneConfig::default(),
            rank: 4,
            spec,
            base: CdrParams::default(),
            ood_betas: vec![15.0, 20.0],
            stiff: CdrParams {
                beta: 1.0,
                nu: 0.0,
                rho: 5.0,
            },
            phase_mu: CdrParams {
                beta: 5.0,
                nu: 0.0,
                rho: 0.0,
            },
            phases: vec![0.0, 90.0, 180.0],
            grid: (256, 101),
        }
    }
}

/// Outcome of one fine-tuning run inside a diagnostic.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub method: String,
    pub setting: String,
    pub seed: u64,
    pub final_loss: f64,
    pub error: ErrorReport,
    pub params: usize,
    /// Final `τ` of every adapted layer (MODE runs only).
    pub taus: Vec<f64>,
    pub history: History,
}

impl RunOutcome {
    fn records(&self, experiment: &str) -> Vec<LongRecord> {
        let rec = |metric: &str, value: f64| LongRecord {
            experiment: experiment.to_string(),
            method: self.method.clone(),
            setting: self.setting.clone(),
            seed: self.seed,
            metric: metric.to_string(),
            value,
        };
        let mut out = vec![
            rec("rel_l2", self.error.rel_l2),
            rec("max_err", self.error.max_err),
            rec("final_loss", self.final_loss),
            rec("params", self.params as f64),
        ];
        for (i, t) in self.taus.iter().enumerate() {
            out.push(rec(&format!("tau_{i}"), *t));
        }
        out
    }
}

/// How a run prepares the model before optimizing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    /// No fine-tuning at all.
    Frozen,
    Adapter(AdapterKind),
    /// MODE with `τ ≡ 0`.
    ModeTauZero,
    /// MODE with `Δb` held at zero.
    ModeBiasFrozen,
}

impl Variant {
    pub fn name(self) -> String {
        match self {
            Variant::Frozen => "frozen".into(),
            Variant::Adapter(k) => k.name().into(),
            Variant::ModeTauZero => "mode-tau0".into(),
            Variant::ModeBiasFrozen => "mode-bias-frozen".into(),
        }
    }
}

/// Fine-tunes a copy of `base` on one target and scores it on the reference grid.
pub fn run_variant(
    base: &P2innModel,
    variant: Variant,
    rank: usize,
    spec: &ProblemSpec,
    mu: &CdrParams,
    cfg: &FinetuneConfig,
    truth: &GridField,
    setting: &str,
) -> Result<RunOutcome> {
    let mut model = base.clone();
    let mu_v = mu.to_mu();
    let history = match variant {
        Variant::Frozen => {
            let frozen = FinetuneConfig { iters: 0, ..cfg.clone() };
            finetune(&mut model, spec, &mu_v, &AdapterSpec::new(AdapterKind::None, 0), &frozen)?;
            History::default()
        }
        Variant::Adapter(kind) => finetune(&mut model, spec, &mu_v, &AdapterSpec::new(kind, rank), cfg)?,
        Variant::ModeTauZero | Variant::ModeBiasFrozen => {
            let range = model.default_adapted_layers();
            model.attach_adapters(AdapterKind::Mode, rank, range, cfg.seed)?;
            for p in model.mode_params_mut() {
                if variant == Variant::ModeTauZero {
                    p.tau = 0.0;
                    p.train_tau = false;
                } else {
                    p.train_delta_b = false;
                }
            }
            finetune_attached(&mut model, spec, &mu_v, cfg)?
        }
    };
    let final_loss = match history.last() {
        Some(r) => r.total,
        None => {
            let batch = sample_batch(spec, cfg.counts, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            pinn_loss(&model, spec, &batch, &mu_v, &cfg.loss)?.total
        }
    };
    let taus = model
        .decoder
        .layers
        .iter()
        .filter_map(|l| match &l.adapter {
            Some(Adapter::Mode(p)) => Some(p.tau),
            _ => None,
        })
        .collect();
    Ok(RunOutcome {
        method: variant.name(),
        setting: setting.to_string(),
        seed: cfg.seed,
        final_loss,
        error: evaluate(&model, &mu_v, truth)?,
        params: model.trainable_count(),
        taus,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DiagnosticsReport {
    pub runs: Vec<(Diagnostic, RunOutcome)>,
}

impl DiagnosticsReport {
    pub fn records(&self) -> Vec<LongRecord> {
        let name = |d: Diagnostic| match d {
            Diagnostic::Locking => "locking",
            Diagnostic::Truncation => "truncation",
            Diagnostic::Affine => "affine",
        };
        self.runs.iter().flat_map(|(d, r)| r.records(name(*d))).collect()
    }

    pub fn select(&self, diag: Diagnostic, method: &str, setting: &str) -> Vec<&RunOutcome> {
        self.runs
            .iter()
            .filter(|(d, r)| *d == diag && r.method == method && r.setting == setting)
            .map(|(_, r)| r)
            .collect()
    }
}

/// Runs the requested diagnostics for every seed on a shared pre-trained model.
pub fn deadlock_diagnostics(base: &P2innModel, cfg: &DiagnosticsConfig, which: &[Diagnostic]) -> Result<DiagnosticsReport> {
    let (nx, nt) = cfg.grid;
    let mut report = DiagnosticsReport::default();
    for &diag in which {
        let targets: Vec<(String, ProblemSpec, CdrParams, Vec<Variant>)> = match diag {
            Diagnostic::Locking => cfg
                .ood_betas
                .iter()
                .map(|&b| {
                    let mu = CdrParams { beta: b, ..cfg.base };
                    let v = vec![Variant::Frozen, Variant::Adapter(AdapterKind::SvdDiag), Variant::Adapter(AdapterKind::Mode)];
                    (format!("beta={b}"), cfg.spec, mu, v)
                })
                .collect(),
            Diagnostic::Truncation => vec![(
                format!("rho={}", cfg.stiff.rho),
                cfg.spec,
                cfg.stiff,
                vec![Variant::Adapter(AdapterKind::Mode), Variant::ModeTauZero],
            )],
            Diagnostic::Affine => cfg
                .phases
                .iter()
                .map(|&deg| {
                    let spec = ProblemSpec {
                        ic: IcKind::ShiftedSinusoid(deg),
                        ..cfg.spec
                    };
                    let v = vec![Variant::Frozen, Variant::Adapter(AdapterKind::Mode), Variant::ModeBiasFrozen];
                    (format!("phase={deg}"), spec, cfg.phase_mu, v)
                })
                .collect(),
        };
        for (setting, spec, mu, variants) in targets {
            let truth = strang_cdr(&mu, &spec, nx, nt)?;
            for &seed in &cfg.seeds {
                let ft = FinetuneConfig {
                    seed,
                    ..cfg.finetune.clone()
                };
                for &v in &variants {
                    let out = run_variant(base, v, cfg.rank, &spec, &mu, &ft, &truth, &setting)?;
                    report.runs.push((diag, out));
                }
            }
        }
    }
    Ok(report)
}
