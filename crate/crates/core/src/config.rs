//! TOML run configuration.
//!
//! ```toml
//! seed = 0                      # required
//!
//! [model]
//! preset = "desk"               # "desk" | "full-scale"; explicit widths override it
//! # coord = [2, 32, 32]
//! # param = [3, 32, 32]         # first entry must equal |mu| of the family
//! # decoder = [64, 50, 50, 50, 1]
//! activation = "tanh"           # "tanh" | "silu"
//!
//! [problem]
//! family = "cdr"                # "cdr" | "helmholtz"
//! ic = "sinusoid"               # gauss_wide | gauss_narrow | sinusoid | sinusoid@<deg>
//! beta = 1.0                    # target coefficients (CDR)
//! nu = 0.0
//! rho = 0.0
//! a = 2.5                       # target coefficient (Helmholtz)
//! kappa = 1.0
//! # x_range = [0.0, 6.283185307179586]
//! # t_range = [0.0, 1.0]
//!
//! [source]                      # pre-training grid: one coefficient swept, others from [problem]
//! axis = "beta"                 # beta | nu | rho | a
//! start = 1.0
//! stop = 10.0
//! step = 1.0
//!
//! [train]
//! iters = 20000
//! finetune_iters = 5000
//! batch_equations = 10
//! n_f = 1000
//! n_u = 200
//! n_b = 200
//! lr = 1e-3
//! finetune_lr = 1e-3
//! w_pde = 1.0
//! w_ic = 100.0
//! w_bc = 100.0
//! periodic_slope = false
//! resample = true
//!
//! [adapter]
//! kind = "mode"                 # mode | svd-diag | lora | ia3 | bias-only | full | none
//! rank = 4
//! # layers = [1, 3]             # 0-based half-open decoder range
//!
//! [reference]
//! nx = 256
//! nt = 101
//! scheme = "crank-nicolson"     # crank-nicolson | explicit
//!
//! [output]
//! dir = "runs"
//! run_id = "run"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterKind;
use crate::autodiff::Activation;
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::pde::{CdrParams, Counts, Family, IcKind, ProblemSpec};
use crate::refsolve::DiffusionScheme;
use crate::train::{AdapterSpec, FinetuneConfig, LossOptions, LossWeights, PretrainConfig, SourceDistribution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Desk,
    FullScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Preset,
    pub coord: Option<Vec<usize>>,
    pub param: Option<Vec<usize>>,
    pub decoder: Option<Vec<usize>>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSection {
    pub family: Family,
    pub ic: IcKind,
    pub beta: f64,
    pub nu: f64,
    pub rho: f64,
    pub a: f64,
    pub kappa: f64,
    pub x_range: Option<(f64, f64)>,
    pub t_range: Option<(f64, f64)>,
}

impl Default for ProblemSection {
    fn default() -> Self {
        ProblemSection {
            family: Family::Cdr,
            ic: IcKind::Sinusoid,
            beta: 1.0,
            nu: 0.0,
            rho: 0.0,
            a: 2.5,
            kappa: 1.0,
            x_range: None,
            t_range: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceAxis {
    Beta,
    Nu,
    Rho,
    A,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSection {
    pub axis: SourceAxis,
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for SourceSection {
    fn default() -> Self {
        SourceSection {
            axis: SourceAxis::Beta,
            start: 1.0,
            stop: 10.0,
            step: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iters: usize,
    pub finetune_iters: usize,
    pub batch_equations: usize,
    pub n_f: usize,
    pub n_u: usize,
    pub n_b: usize,
    pub lr: f64,
    pub finetune_lr: f64,
    pub w_pde: f64,
    pub w_ic: f64,
    pub w_bc: f64,
    pub periodic_slope: bool,
    pub resample: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let pre = PretrainConfig::default();
        let ft = FinetuneConfig::default();
        let w = LossWeights::default();
        TrainSection {
            iters: pre.iters,
            finetune_iters: ft.iters,
            batch_equations: pre.batch_equations,
            n_f: pre.counts.n_f,
            n_u: pre.counts.n_u,
            n_b: pre.counts.n_b,
            lr: pre.lr,
            finetune_lr: ft.lr,
            w_pde: w.w_pde,
            w_ic: w.w_ic,
            w_bc: w.w_bc,
            periodic_slope: false,
            resample: ft.resample,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub kind: AdapterKind,
    pub rank: usize,
    pub layers: Option<(usize, usize)>,
}

impl Default for AdapterSection {
    fn default() -> Self {
        AdapterSection {
            kind: AdapterKind::Mode,
            rank: 4,
            layers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSection {
    pub nx: usize,
    pub nt: usize,
    pub scheme: DiffusionScheme,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        ReferenceSection {
            nx: 256,
            nt: 101,
            scheme: DiffusionScheme::CrankNicolson,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub run_id: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs"),
            run_id: "run".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub problem: ProblemSection,
    #[serde(default)]
    pub source: SourceSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub adapter: AdapterSection,
    #[serde(default)]
    pub reference: ReferenceSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            model: ModelSection::default(),
            problem: ProblemSection::default(),
            source: SourceSection::default(),
            train: TrainSection::default(),
            adapter: AdapterSection::default(),
            reference: ReferenceSection::default(),
            output: OutputSection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config '{}': {e}", path.display())))?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical TOML form, written next to every run as its config echo.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies a `section.key=value` override, reparsing the value as TOML
    /// (bare words are taken as strings).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.trim().to_string()),
        };
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        let (last, parents) = keys.split_last().expect("split yields one item");
        let mut node = &mut doc;
        for k in parents {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*k))
                .ok_or_else(|| Error::Config(format!("unknown config section '{k}'")))?;
        }
        node.as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{path}' is not inside a section")))?
            .insert(last.to_string(), value);
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        *self = RunConfig::parse(&text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        self.arch()?.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.problem_spec()?.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.loss().weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        let t = &self.train;
        if t.batch_equations == 0 {
            return cfg("train.batch_equations must be at least 1".into());
        }
        if !(t.lr > 0.0) || !(t.finetune_lr > 0.0) {
            return cfg(format!("learning rates must be positive, got {} and {}", t.lr, t.finetune_lr));
        }
        if self.adapter.kind.uses_rank() && self.adapter.rank == 0 {
            return cfg(format!("adapter '{}' needs rank >= 1", self.adapter.kind));
        }
        if self.reference.nx < 4 || self.reference.nt < 2 {
            return cfg(format!("reference grid {}x{} too small", self.reference.nx, self.reference.nt));
        }
        let axis_ok = match self.problem.family {
            Family::Cdr => self.source.axis != SourceAxis::A,
            Family::Helmholtz => self.source.axis == SourceAxis::A,
        };
        if !axis_ok {
            return cfg(format!("source axis {:?} does not belong to family {:?}", self.source.axis, self.problem.family));
        }
        self.source_distribution()?;
        self.target_mu()?;
        if self.output.run_id.is_empty() || self.output.run_id.contains(['/', '\\']) {
            return cfg(format!("output.run_id '{}' must be a plain name", self.output.run_id));
        }
        Ok(())
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        let p = &self.problem;
        let mut spec = match p.family {
            Family::Cdr => ProblemSpec::cdr(p.ic),
            Family::Helmholtz => ProblemSpec::helmholtz(),
        };
        spec.kappa = p.kappa;
        if let Some(r) = p.x_range {
            spec.x_range = r;
        }
        if let Some(r) = p.t_range {
            spec.t_range = r;
        }
        Ok(spec)
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        let mu_dim = match self.problem.family {
            Family::Cdr => 3,
            Family::Helmholtz => 1,
        };
        let m = &self.model;
        let mut arch = match m.preset {
            Preset::Desk => ArchConfig::desk(mu_dim),
            Preset::FullScale => ArchConfig::full_scale(mu_dim),
        };
        if let Some(c) = &m.coord {
            arch.coord = c.clone();
        }
        if let Some(c) = &m.param {
            arch.param = c.clone();
        }
        if let Some(c) = &m.decoder {
            arch.decoder = c.clone();
        }
        arch.activation = m.activation;
        if arch.param.first() != Some(&mu_dim) {
            return Err(Error::Config(format!(
                "model.param must start with |mu| = {mu_dim}, got {:?}",
                arch.param
            )));
        }
        Ok(arch)
    }

    /// Target coefficients for fine-tuning and reference solves.
    pub fn target_mu(&self) -> Result<Vec<f64>> {
        let p = &self.problem;
        match p.family {
            Family::Cdr => Ok(CdrParams::new(p.beta, p.nu, p.rho)
                .map_err(|e| Error::Config(e.to_string()))?
                .to_mu()),
            Family::Helmholtz if p.a.is_finite() => Ok(vec![p.a]),
            Family::Helmholtz => Err(Error::Config(format!("problem.a = {} is not finite", p.a))),
        }
    }

    pub fn source_distribution(&self) -> Result<SourceDistribution> {
        let s = &self.source;
        let p = &self.problem;
        let err = |e: Error| Error::Config(e.to_string());
        match s.axis {
            SourceAxis::A => {
                if s.step <= 0.0 || s.stop < s.start {
                    return Err(Error::Config(format!("bad source range [{}, {}] step {}", s.start, s.stop, s.step)));
                }
                let n = ((s.stop - s.start) / s.step + 1e-9).floor() as usize + 1;
                let mus = (0..n).map(|i| vec![s.start + i as f64 * s.step]).collect();
                SourceDistribution::new(Family::Helmholtz, mus).map_err(err)
            }
            axis => {
                let base = CdrParams {
                    beta: p.beta,
                    nu: p.nu,
                    rho: p.rho,
                };
                let idx = match axis {
                    SourceAxis::Beta => 0,
                    SourceAxis::Nu => 1,
                    _ => 2,
                };
                SourceDistribution::cdr_range(base, idx, s.start, s.stop, s.step).map_err(err)
            }
        }
    }

    pub fn loss(&self) -> LossOptions {
        LossOptions {
            weights: LossWeights {
                w_pde: self.train.w_pde,
                w_ic: self.train.w_ic,
                w_bc: self.train.w_bc,
            },
            periodic_slope: self.train.periodic_slope,
        }
    }

    pub fn counts(&self) -> Counts {
        Counts {
            n_f: self.train.n_f,
            n_u: self.train.n_u,
            n_b: self.train.n_b,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            iters: self.train.iters,
            batch_equations: self.train.batch_equations,
            counts: self.counts(),
            lr: self.train.lr,
            loss: self.loss(),
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            iters: self.train.finetune_iters,
            counts: self.counts(),
            lr: self.train.finetune_lr,
            loss: self.loss(),
            seed: self.seed,
            resample: self.train.resample,
        }
    }

    pub fn adapter_spec(&self) -> AdapterSpec {
        AdapterSpec {
            kind: self.adapter.kind,
            rank: self.adapter.rank,
            layers: self.adapter.layers,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.dir.join(&self.output.run_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = RunConfig::parse("seed = 7").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.arch().unwrap(), ArchConfig::desk(3));
        assert_eq!(c.pretrain_config().iters, 20_000);
        assert_eq!(c.target_mu().unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(c.source_distribution().unwrap().mus.len(), 10);
    }

    #[test]
    fn seed_is_required() {
        assert!(matches!(RunConfig::parse("[train]\niters = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn bad_keys_and_enums_are_config_errors() {
        for text in [
            "seed = 0\n[problem]\nfamily = \"navier\"",
            "seed = 0\n[problem]\nic = \"triangle\"",
            "seed = 0\n[adapter]\nkind = \"dora\"",
            "seed = 0\n[train]\nitres = 3",
            "seed = 0\n[model]\nparam = [2, 32, 32]",
            "seed = 0\n[model]\ndecoder = [64, 50, 2]",
            "seed = 0\n[train]\nlr = 0.0",
            "seed = 0\n[train]\nw_ic = -1.0",
            "seed = 0\n[source]\naxis = \"a\"",
            "seed = 0\n[output]\nrun_id = \"a/b\"",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn helmholtz_config() {
        let c = RunConfig::parse("seed = 1\n[problem]\nfamily = \"helmholtz\"\na = 3.0\n[source]\naxis = \"a\"\nstart = 2.5\nstop = 3.0\nstep = 0.1").unwrap();
        assert_eq!(c.arch().unwrap().param[0], 1);
        assert_eq!(c.source_distribution().unwrap().mus.len(), 6);
        assert_eq!(c.target_mu().unwrap(), vec![3.0]);
    }

    #[test]
    fn toml_echo_round_trips() {
        let mut c = RunConfig::with_seed(3);
        c.problem.ic = IcKind::ShiftedSinusoid(90.0);
        c.adapter.layers = Some((1, 2));
        let back = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::with_seed(0);
        c.set("train.iters=12").unwrap();
        c.set("adapter.kind=lora").unwrap();
        c.set("problem.ic=sinusoid@180").unwrap();
        c.set("seed=9").unwrap();
        assert_eq!((c.train.iters, c.adapter.kind, c.seed), (12, AdapterKind::Lora, 9));
        assert_eq!(c.problem.ic, IcKind::ShiftedSinusoid(180.0));
        assert!(c.set("nosection.key=1").is_err());
        assert!(c.set("train.iters").is_err());
        assert!(c.set("adapter.kind=dora").is_err());
        assert_eq!(c.adapter.kind, AdapterKind::Lora);
    }

    #[test]
    fn full_scale_preset() {
        let c = RunConfig::parse("seed = 0\n[model]\npreset = \"full-scale\"").unwrap();
        assert_eq!(c.arch().unwrap().scalar_count(), 76_889);
    }
}
