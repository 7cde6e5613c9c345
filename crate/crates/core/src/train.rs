//! Physics-informed loss, Adam, multi-equation pre-training and adapter fine-tuning.

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterKind;
use crate::autodiff::jet::seed_inputs;
use crate::autodiff::{JetLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::P2innModel;
use crate::pde::{sample_batch, BoundarySet, CdrParams, CollocationBatch, Counts, Family, ProblemSpec};

/// Total loss above which a run is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_pde: f64,
    pub w_ic: f64,
    pub w_bc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_pde: 1.0,
            w_ic: 100.0,
            w_bc: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_pde, self.w_ic, self.w_bc];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config(format!("loss weights {w:?} must be non-negative, not all zero")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_pde: f64,
    pub l_ic: f64,
    pub l_bc: f64,
    pub total: f64,
    pub n_f: usize,
    pub n_u: usize,
    pub n_b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossOptions {
    pub weights: LossWeights,
    /// Also match `u_x` across the periodic boundary.
    #[serde(default)]
    pub periodic_slope: bool,
}

/// Records the field on a set of points and returns its stacked jet column.
pub type FieldRecorder<'a> = dyn FnMut(&mut Tape, &[(f64, f64)], &JetLayout) -> Result<Var> + 'a;

fn record_model<'a>(model: &'a P2innModel, tape: &mut Tape, mu: &'a [f64]) -> impl FnMut(&mut Tape, &[(f64, f64)], &JetLayout) -> Result<Var> + 'a {
    let bound = model.bind(tape, true);
    move |tape: &mut Tape, pts: &[(f64, f64)], layout: &JetLayout| {
        let rows: Vec<Vec<f64>> = pts.iter().map(|&(a, b)| vec![a, b]).collect();
        let x = tape.constant(seed_inputs(&rows, model.coord_encoder.in_dim(), layout));
        model.record(tape, &bound, x, mu, layout)
    }
}

fn require(name: &'static str, len: usize, weight: f64) -> Result<bool> {
    if weight == 0.0 {
        return Ok(false);
    }
    if len == 0 {
        return Err(Error::EmptyGroup(name));
    }
    Ok(true)
}

fn mse(tape: &mut Tape, diff: Var) -> Result<Var> {
    let sq = tape.square(diff)?;
    Ok(tape.mean(sq))
}

/// Records the weighted physics-informed loss for one equation on `tape` and
/// returns its scalar node with the component report.
pub fn record_loss(
    tape: &mut Tape,
    field: &mut FieldRecorder<'_>,
    spec: &ProblemSpec,
    batch: &CollocationBatch,
    mu: &[f64],
    opts: &LossOptions,
) -> Result<(Var, LossReport)> {
    opts.weights.validate()?;
    let w = opts.weights;
    let zero = tape.constant(Matrix::zeros(1, 1));
    let mut l_pde = zero;
    let mut l_ic = zero;
    let mut l_bc = zero;

    if require("interior", batch.interior.len(), w.w_pde)? {
        let n = batch.interior.len();
        match spec.family {
            Family::Cdr => {
                let p = CdrParams::from_mu(mu)?;
                let out = field(tape, &batch.interior, &JetLayout::cdr())?;
                let u = tape.slice_rows(out, 0, n)?;
                let ux = tape.slice_rows(out, n, n)?;
                let ut = tape.slice_rows(out, 2 * n, n)?;
                let uxx = tape.slice_rows(out, 3 * n, n)?;
                let conv = tape.scale(ux, p.beta);
                let diff = tape.scale(uxx, p.nu);
                // ρu(1−u) = ρu − ρu².
                let u2 = tape.square(u)?;
                let lin = tape.scale(u, p.rho);
                let quad = tape.scale(u2, p.rho);
                let r = tape.add(ut, conv)?;
                let r = tape.sub(r, diff)?;
                let r = tape.sub(r, lin)?;
                let r = tape.add(r, quad)?;
                l_pde = mse(tape, r)?;
            }
            Family::Helmholtz => {
                let p = spec.helmholtz_params(mu)?;
                let out = field(tape, &batch.interior, &JetLayout::laplace_2d())?;
                let u = tape.slice_rows(out, 0, n)?;
                let uxx = tape.slice_rows(out, 3 * n, n)?;
                let uyy = tape.slice_rows(out, 4 * n, n)?;
                let q: Vec<f64> = batch.interior.iter().map(|&(x, y)| p.source(x, y)).collect();
                let q = tape.constant(Matrix::column_vector(&q));
                let ku = tape.scale(u, p.kappa * p.kappa);
                let r = tape.add(uxx, uyy)?;
                let r = tape.add(r, ku)?;
                let r = tape.sub(r, q)?;
                l_pde = mse(tape, r)?;
            }
        }
    }

    if spec.family == Family::Cdr && require("initial", batch.initial.len(), w.w_ic)? {
        let pts: Vec<(f64, f64)> = batch.initial.iter().map(|&x| (x, spec.t_range.0)).collect();
        let out = field(tape, &pts, &JetLayout::value())?;
        let target: Vec<f64> = batch.initial.iter().map(|&x| spec.ic.eval(x)).collect();
        let target = tape.constant(Matrix::column_vector(&target));
        let d = tape.sub(out, target)?;
        l_ic = mse(tape, d)?;
    }

    if require("boundary", batch.boundary.len(), w.w_bc)? {
        match &batch.boundary {
            BoundarySet::Periodic(ts) => {
                let m = ts.len();
                let pts: Vec<(f64, f64)> = ts
                    .iter()
                    .map(|&t| (spec.x_range.0, t))
                    .chain(ts.iter().map(|&t| (spec.x_range.1, t)))
                    .collect();
                let layout = if opts.periodic_slope {
                    JetLayout::slope_x()
                } else {
                    JetLayout::value()
                };
                let out = field(tape, &pts, &layout)?;
                let left = tape.slice_rows(out, 0, m)?;
                let right = tape.slice_rows(out, m, m)?;
                let d = tape.sub(left, right)?;
                l_bc = mse(tape, d)?;
                if opts.periodic_slope {
                    let lx = tape.slice_rows(out, 2 * m, m)?;
                    let rx = tape.slice_rows(out, 3 * m, m)?;
                    let dx = tape.sub(lx, rx)?;
                    let extra = mse(tape, dx)?;
                    l_bc = tape.add(l_bc, extra)?;
                }
            }
            BoundarySet::Dirichlet(pts) => {
                let target: Vec<f64> = match spec.family {
                    Family::Helmholtz => {
                        let p = spec.helmholtz_params(mu)?;
                        pts.iter().map(|&(x, y)| p.exact(x, y)).collect()
                    }
                    Family::Cdr => vec![0.0; pts.len()],
                };
                let out = field(tape, pts, &JetLayout::value())?;
                let target = tape.constant(Matrix::column_vector(&target));
                let d = tape.sub(out, target)?;
                l_bc = mse(tape, d)?;
            }
        }
    }

    let a = tape.scale(l_pde, w.w_pde);
    let b = tape.scale(l_ic, w.w_ic);
    let c = tape.scale(l_bc, w.w_bc);
    let total = tape.add(a, b)?;
    let total = tape.add(total, c)?;
    let report = LossReport {
        l_pde: tape.scalar(l_pde),
        l_ic: tape.scalar(l_ic),
        l_bc: tape.scalar(l_bc),
        total: tape.scalar(total),
        n_f: batch.interior.len(),
        n_u: batch.initial.len(),
        n_b: batch.boundary.len(),
    };
    Ok((total, report))
}

/// Loss of `model` for one equation, without gradients.
pub fn pinn_loss(model: &P2innModel, spec: &ProblemSpec, batch: &CollocationBatch, mu: &[f64], opts: &LossOptions) -> Result<LossReport> {
    Ok(pinn_loss_grad(model, spec, batch, mu, opts)?.0)
}

/// Loss and its gradient with respect to [`P2innModel::trainable_flat`].
pub fn pinn_loss_grad(
    model: &P2innModel,
    spec: &ProblemSpec,
    batch: &CollocationBatch,
    mu: &[f64],
    opts: &LossOptions,
) -> Result<(LossReport, Vec<f64>)> {
    let mut tape = Tape::new();
    let mut rec = record_model(model, &mut tape, mu);
    let (total, report) = record_loss(&mut tape, &mut rec, spec, batch, mu, opts)?;
    tape.set_output(total)?;
    let grad = tape.backward(1.0)?;
    Ok((report, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// `θ ← θ − η m̂ / (√v̂ + ε)` with bias-corrected moments.
pub fn adam_step(state: &mut AdamState, grads: &[f64], params: &mut [f64]) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim(
            "adam_step",
            format!("{} grads, {} params, {} moments", grads.len(), params.len(), state.m.len()),
        ));
    }
    if let Some(slot) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NanGradient { slot });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= state.lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

/// Discrete source family of coefficient vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceDistribution {
    pub family: Family,
    pub mus: Vec<Vec<f64>>,
}

impl SourceDistribution {
    pub fn new(family: Family, mus: Vec<Vec<f64>>) -> Result<Self> {
        if mus.is_empty() || mus.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("source distribution must be non-empty and finite".into()));
        }
        Ok(SourceDistribution { family, mus })
    }

    /// CDR coefficients where entry `axis` (0 = β, 1 = ν, 2 = ρ) runs over
    /// `start, start + step, …, ≤ stop` and the others are taken from `base`.
    pub fn cdr_range(base: CdrParams, axis: usize, start: f64, stop: f64, step: f64) -> Result<Self> {
        if axis > 2 || step <= 0.0 || stop < start {
            return Err(Error::Config(format!("bad range axis {axis} [{start}, {stop}] step {step}")));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
        let mus = (0..n)
            .map(|i| {
                let mut mu = base.to_mu();
                mu[axis] = start + i as f64 * step;
                mu
            })
            .collect();
        SourceDistribution::new(Family::Cdr, mus)
    }

    /// `b` coefficient vectors, without replacement while `b` fits the grid.
    pub fn sample(&self, b: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        if b <= self.mus.len() {
            sample(rng, self.mus.len(), b).into_iter().map(|i| self.mus[i].clone()).collect()
        } else {
            (0..b).map(|_| self.mus[rng.random_range(0..self.mus.len())].clone()).collect()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub l_pde: f64,
    pub l_ic: f64,
    pub l_bc: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "iter,l_pde,l_ic,l_bc,total")?;
        for r in &self.rows {
            writeln!(w, "{},{:e},{:e},{:e},{:e}", r.iter, r.l_pde, r.l_ic, r.l_bc, r.total)?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&HistoryRow> {
        self.rows.last()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub iters: usize,
    /// Equations per iteration.
    pub batch_equations: usize,
    pub counts: Counts,
    pub lr: f64,
    pub loss: LossOptions,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            iters: 20_000,
            batch_equations: 10,
            counts: Counts::default(),
            lr: 1e-3,
            loss: LossOptions::default(),
            seed: 0,
        }
    }
}

fn check_divergence(iter: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(Error::Divergence { iter, loss });
    }
    Ok(())
}

/// Trains every parameter on `b` sampled equations per iteration, averaging
/// their losses. History row `i` holds the loss before update `i`.
pub fn pretrain(model: &mut P2innModel, spec: &ProblemSpec, dist: &SourceDistribution, cfg: &PretrainConfig) -> Result<History> {
    pretrain_with(model, spec, dist, cfg, |_, _| {})
}

/// [`pretrain`] with a progress callback invoked after every iteration.
pub fn pretrain_with(
    model: &mut P2innModel,
    spec: &ProblemSpec,
    dist: &SourceDistribution,
    cfg: &PretrainConfig,
    mut progress: impl FnMut(usize, &HistoryRow),
) -> Result<History> {
    if dist.family != spec.family {
        return Err(Error::Config("source family differs from the problem family".into()));
    }
    if cfg.batch_equations == 0 {
        return Err(Error::Config("batch_equations must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.trainable_flat();
    let mut adam = AdamState::new(params.len(), cfg.lr);
    let mut history = History::default();
    let inv_b = 1.0 / cfg.batch_equations as f64;
    for iter in 0..cfg.iters {
        let mus = dist.sample(cfg.batch_equations, &mut rng);
        let mut grad = vec![0.0; params.len()];
        let mut row = HistoryRow {
            iter,
            l_pde: 0.0,
            l_ic: 0.0,
            l_bc: 0.0,
            total: 0.0,
        };
        for mu in &mus {
            let batch = sample_batch(spec, cfg.counts, &mut rng)?;
            let (rep, g) = pinn_loss_grad(model, spec, &batch, mu, &cfg.loss)?;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += gi * inv_b;
            }
            row.l_pde += rep.l_pde * inv_b;
            row.l_ic += rep.l_ic * inv_b;
            row.l_bc += rep.l_bc * inv_b;
            row.total += rep.total * inv_b;
        }
        check_divergence(iter, row.total)?;
        adam_step(&mut adam, &grad, &mut params)?;
        model.set_trainable_flat(&params)?;
        progress(iter, &row);
        history.rows.push(row);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub iters: usize,
    pub counts: Counts,
    pub lr: f64,
    pub loss: LossOptions,
    pub seed: u64,
    /// Draw fresh collocation points every iteration; otherwise reuse the first batch.
    pub resample: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            iters: 5_000,
            counts: Counts::default(),
            lr: 1e-3,
            loss: LossOptions::default(),
            seed: 0,
            resample: true,
        }
    }
}

/// Adapter set to attach before fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub rank: usize,
    /// 0-based decoder layers; `None` selects every hidden-to-hidden layer.
    pub layers: Option<(usize, usize)>,
}

impl AdapterSpec {
    pub fn new(kind: AdapterKind, rank: usize) -> Self {
        AdapterSpec { kind, rank, layers: None }
    }
}

/// Freezes `model`, attaches `adapter` and optimizes only its parameters at `mu`.
pub fn finetune(
    model: &mut P2innModel,
    spec: &ProblemSpec,
    mu: &[f64],
    adapter: &AdapterSpec,
    cfg: &FinetuneConfig,
) -> Result<History> {
    let range = adapter
        .layers
        .map(|(a, b)| a..b)
        .unwrap_or_else(|| model.default_adapted_layers());
    model.attach_adapters(adapter.kind, adapter.rank, range, cfg.seed)?;
    finetune_attached(model, spec, mu, cfg)
}

/// Optimizes the already-attached trainables of `model` at `mu`. History row
/// `i` holds the loss before update `i`.
pub fn finetune_attached(model: &mut P2innModel, spec: &ProblemSpec, mu: &[f64], cfg: &FinetuneConfig) -> Result<History> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.trainable_flat();
    let mut adam = AdamState::new(params.len(), cfg.lr);
    let mut history = History::default();
    let mut batch = sample_batch(spec, cfg.counts, &mut rng)?;
    for iter in 0..cfg.iters {
        if cfg.resample && iter > 0 {
            batch = sample_batch(spec, cfg.counts, &mut rng)?;
        }
        let (rep, grad) = pinn_loss_grad(model, spec, &batch, mu, &cfg.loss)?;
        check_divergence(iter, rep.total)?;
        if !params.is_empty() {
            adam_step(&mut adam, &grad, &mut params)?;
            model.set_trainable_flat(&params)?;
        }
        history.rows.push(HistoryRow {
            iter,
            l_pde: rep.l_pde,
            l_ic: rep.l_ic,
            l_bc: rep.l_bc,
            total: rep.total,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::model::{build_p2inn, ArchConfig};
    use crate::pde::IcKind;
    use std::f64::consts::PI;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            coord: vec![2, 6, 6],
            param: vec![3, 4, 4],
            decoder: vec![10, 8, 8, 8, 1],
            activation: Activation::Tanh,
        }
    }

    fn closed_form_recorder(nu: f64) -> impl FnMut(&mut Tape, &[(f64, f64)], &JetLayout) -> Result<Var> {
        move |tape: &mut Tape, pts: &[(f64, f64)], layout: &JetLayout| {
            let n = pts.len();
            let mut col = vec![0.0; layout.comps() * n];
            for (i, &(x, t)) in pts.iter().enumerate() {
                let e = (-nu * t).exp();
                col[i] = 1.0 + e * x.sin();
                for (d, &input) in layout.dirs.iter().enumerate() {
                    col[layout.first_block(d) * n + i] = if input == 0 { e * x.cos() } else { -nu * e * x.sin() };
                }
                for (k, &d) in layout.second.iter().enumerate() {
                    col[layout.second_block(k) * n + i] = if layout.dirs[d] == 0 { -e * x.sin() } else { nu * nu * e * x.sin() };
                }
            }
            Ok(tape.constant(Matrix::column_vector(&col)))
        }
    }

    #[test]
    fn closed_form_field_has_vanishing_loss() {
        let nu = 0.8;
        let spec = ProblemSpec::cdr(IcKind::Sinusoid);
        let batch = sample_batch(&spec, Counts::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut tape = Tape::new();
        let mut rec = closed_form_recorder(nu);
        let (_, rep) = record_loss(&mut tape, &mut rec, &spec, &batch, &[0.0, nu, 0.0], &LossOptions::default()).unwrap();
        assert!(rep.l_pde <= 1e-8, "{rep:?}");
        assert!(rep.l_ic <= 1e-24 && rep.l_bc <= 1e-24);
    }

    #[test]
    fn constant_field_initial_loss_oracle() {
        let spec = ProblemSpec::cdr(IcKind::GaussWide);
        let xs: Vec<f64> = (0..50).map(|i| i as f64 * 2.0 * PI / 50.0).collect();
        let batch = CollocationBatch {
            interior: vec![(1.0, 0.5)],
            initial: xs.clone(),
            boundary: BoundarySet::Periodic(vec![0.3]),
        };
        let mut rec = |tape: &mut Tape, pts: &[(f64, f64)], layout: &JetLayout| {
            let mut col = vec![0.0; layout.comps() * pts.len()];
            col[..pts.len()].fill(1.0);
            Ok(tape.constant(Matrix::column_vector(&col)))
        };
        let opts = LossOptions {
            weights: LossWeights {
                w_pde: 0.0,
                w_ic: 1.0,
                w_bc: 0.0,
            },
            periodic_slope: false,
        };
        let mut tape = Tape::new();
        let (_, rep) = record_loss(&mut tape, &mut rec, &spec, &batch, &[0.0, 0.0, 0.0], &opts).unwrap();
        let want = xs.iter().map(|&x| (1.0 - IcKind::GaussWide.eval(x)).powi(2)).sum::<f64>() / 50.0;
        assert!((rep.l_ic - want).abs() <= 1e-15);
        assert_eq!(rep.total, rep.l_ic);
    }

    #[test]
    fn report_total_is_weighted_sum_and_groups_are_required() {
        let m = build_p2inn(&tiny_arch(), 1).unwrap();
        let spec = ProblemSpec::cdr(IcKind::GaussWide);
        let batch = sample_batch(&spec, Counts { n_f: 16, n_u: 8, n_b: 8 }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let opts = LossOptions {
            weights: LossWeights {
                w_pde: 1.0,
                w_ic: 7.0,
                w_bc: 3.0,
            },
            periodic_slope: true,
        };
        let rep = pinn_loss(&m, &spec, &batch, &[2.0, 0.1, 1.0], &opts).unwrap();
        assert_eq!(rep.total, 1.0 * rep.l_pde + 7.0 * rep.l_ic + 3.0 * rep.l_bc);
        assert!(rep.l_pde >= 0.0 && rep.l_ic >= 0.0 && rep.l_bc >= 0.0);
        let empty = CollocationBatch {
            initial: vec![],
            ..batch
        };
        assert!(matches!(
            pinn_loss(&m, &spec, &empty, &[2.0, 0.1, 1.0], &opts),
            Err(Error::EmptyGroup("initial"))
        ));
    }

    #[test]
    fn adam_hand_formula() {
        let mut s = AdamState::new(1, 0.1);
        let mut p = [2.0];
        adam_step(&mut s, &[1.0], &mut p).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        assert!((p[0] - (2.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);

        let mut s = AdamState::new(3, 0.1);
        let mut p = [1.0, -2.0, 3.0];
        adam_step(&mut s, &[0.0; 3], &mut p).unwrap();
        assert_eq!(p, [1.0, -2.0, 3.0]);
        assert!(matches!(
            adam_step(&mut s, &[0.0, f64::NAN, 0.0], &mut p),
            Err(Error::NanGradient { slot: 1 })
        ));
    }

    #[test]
    fn adam_descends_scalar_quadratic() {
        // Scalar simulation oracle: |θ| decreases each step on θ².
        let mut s = AdamState::new(1, 0.1);
        let mut p = [1.0];
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let g = [2.0 * p[0]];
            adam_step(&mut s, &g, &mut p).unwrap();
            assert!(p[0].abs() < prev);
            prev = p[0].abs();
        }
    }

    fn small_pretrain(iters: usize) -> (P2innModel, History) {
        let mut m = build_p2inn(&tiny_arch(), 4).unwrap();
        let spec = ProblemSpec::cdr(IcKind::Sinusoid);
        let dist = SourceDistribution::cdr_range(CdrParams::default(), 0, 1.0, 3.0, 1.0).unwrap();
        let cfg = PretrainConfig {
            iters,
            batch_equations: 2,
            counts: Counts { n_f: 20, n_u: 10, n_b: 10 },
            seed: 9,
            ..Default::default()
        };
        let h = pretrain(&mut m, &spec, &dist, &cfg).unwrap();
        (m, h)
    }

    #[test]
    fn pretrain_zero_iterations_is_identity() {
        let fresh = build_p2inn(&tiny_arch(), 4).unwrap();
        let (m, h) = small_pretrain(0);
        assert_eq!(m, fresh);
        assert!(h.rows.is_empty());
    }

    #[test]
    fn pretrain_is_deterministic() {
        let (a, ha) = small_pretrain(5);
        let (b, hb) = small_pretrain(5);
        assert_eq!(ha, hb);
        let bits = |m: &P2innModel| m.trainable_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(ha.rows.len(), 5);
    }

    #[test]
    fn source_grid_and_sampling() {
        let d = SourceDistribution::cdr_range(CdrParams::default(), 2, 1.0, 10.0, 1.0).unwrap();
        assert_eq!(d.mus.len(), 10);
        assert_eq!(d.mus[9], vec![0.0, 0.0, 10.0]);
        let picks = d.sample(10, &mut ChaCha8Rng::seed_from_u64(0));
        let mut rhos: Vec<f64> = picks.iter().map(|m| m[2]).collect();
        rhos.sort_by(f64::total_cmp);
        assert_eq!(rhos, (1..=10).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn finetune_restricts_updates_to_adapters() {
        let (base, _) = small_pretrain(3);
        let spec = ProblemSpec::cdr(IcKind::Sinusoid);
        let mu = [5.0, 0.0, 0.0];
        let cfg = FinetuneConfig {
            iters: 4,
            counts: Counts { n_f: 20, n_u: 10, n_b: 10 },
            seed: 2,
            ..Default::default()
        };
        let frozen_batch = sample_batch(&spec, cfg.counts, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        let frozen_loss = pinn_loss(&base, &spec, &frozen_batch, &mu, &cfg.loss).unwrap().total;
        for kind in [AdapterKind::Mode, AdapterKind::Lora, AdapterKind::Ia3, AdapterKind::BiasOnly] {
            let mut m = base.clone();
            let h = finetune(&mut m, &spec, &mu, &AdapterSpec::new(kind, 2), &cfg).unwrap();
            assert!((h.rows[0].total - frozen_loss).abs() <= 1e-12 * frozen_loss.max(1.0), "{kind:?}");
            let mut reference = base.clone();
            reference.attach_adapters(kind, 2, 1..3, cfg.seed).unwrap();
            assert_eq!(m.frozen_flat(), reference.frozen_flat(), "{kind:?}");
            assert_ne!(m.trainable_flat(), reference.trainable_flat(), "{kind:?}");
        }
    }

    #[test]
    fn mode_gradients_live_only_on_adapter_slots() {
        let (mut m, _) = small_pretrain(2);
        m.attach_adapters(AdapterKind::Mode, 2, 1..3, 0).unwrap();
        let spec = ProblemSpec::cdr(IcKind::Sinusoid);
        let batch = sample_batch(&spec, Counts { n_f: 16, n_u: 8, n_b: 8 }, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut tape = Tape::new();
        let mu = [4.0, 0.0, 0.0];
        let mut rec = record_model(&m, &mut tape, &mu);
        let (total, _) = record_loss(&mut tape, &mut rec, &spec, &batch, &mu, &LossOptions::default()).unwrap();
        tape.set_output(total).unwrap();
        let g = tape.backward(1.0).unwrap();
        assert_eq!(g.len(), 2 * (4 + 1 + 8));
        for s in tape.slots() {
            let name = s.name.rsplit('.').next().unwrap();
            assert!(["phi", "tau", "delta_b"].contains(&name), "{}", s.name);
        }
        assert!(g.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn divergence_is_reported() {
        assert!(matches!(check_divergence(7, 2e6), Err(Error::Divergence { iter: 7, .. })));
        assert!(matches!(check_divergence(1, f64::NAN), Err(Error::Divergence { .. })));
        assert!(check_divergence(1, 10.0).is_ok());
    }

    #[test]
    fn helmholtz_loss_vanishes_on_manufactured_field() {
        let spec = ProblemSpec::helmholtz();
        let batch = sample_batch(&spec, Counts { n_f: 50, n_u: 0, n_b: 40 }, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let p = spec.helmholtz_params(&[2.7]).unwrap();
        let mut rec = |tape: &mut Tape, pts: &[(f64, f64)], layout: &JetLayout| {
            let n = pts.len();
            let k = p.a * PI;
            let mut col = vec![0.0; layout.comps() * n];
            for (i, &(x, y)) in pts.iter().enumerate() {
                let u = p.exact(x, y);
                col[i] = u;
                for b in 0..layout.second.len() {
                    col[layout.second_block(b) * n + i] = -k * k * u;
                }
            }
            Ok(tape.constant(Matrix::column_vector(&col)))
        };
        let mut tape = Tape::new();
        let (_, rep) = record_loss(&mut tape, &mut rec, &spec, &batch, &[2.7], &LossOptions::default()).unwrap();
        assert!(rep.l_pde <= 1e-18 && rep.l_bc <= 1e-30, "{rep:?}");
    }
}
