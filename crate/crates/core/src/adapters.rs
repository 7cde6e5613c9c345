//! Per-layer reparameterizations over a frozen affine map `(W₀, b₀)`.
//!
//! MODE keeps the truncated factors `U_k, Σ_k, V_k` of `W₀` and trains a dense
//! `k×k` core `Φ`, one residual scale `τ` and a bias drift `Δb`:
//!
//! ```text
//! y = τ·(W₀h) + U_k [Φ + (1−τ)Σ_k] (V_kᵀh) + (b₀ + Δb)
//! ```
//!
//! which equals `[U_k(Σ_k+Φ)V_kᵀ + τ W_res] h + b₀ + Δb` without ever building
//! `W_res = W₀ − U_kΣ_kV_kᵀ`. The baselines (diagonal singular-value scaling,
//! LoRA, IA³-style output scaling, bias-only) share the same interface.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm_t, reconstruct_principal, svd_truncate, Matrix, SvdFactors};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    Mode,
    SvdDiag,
    Lora,
    Ia3,
    BiasOnly,
    /// Every decoder weight and bias trainable; no adapter object.
    Full,
    /// Evaluate the frozen model only.
    None,
}

impl AdapterKind {
    pub fn tag(self) -> u8 {
        match self {
            AdapterKind::Mode => 1,
            AdapterKind::SvdDiag => 2,
            AdapterKind::Lora => 3,
            AdapterKind::Ia3 => 4,
            AdapterKind::BiasOnly => 5,
            AdapterKind::Full => 6,
            AdapterKind::None => 0,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => AdapterKind::Mode,
            2 => AdapterKind::SvdDiag,
            3 => AdapterKind::Lora,
            4 => AdapterKind::Ia3,
            5 => AdapterKind::BiasOnly,
            6 => AdapterKind::Full,
            0 => AdapterKind::None,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Mode => "mode",
            AdapterKind::SvdDiag => "svd-diag",
            AdapterKind::Lora => "lora",
            AdapterKind::Ia3 => "ia3",
            AdapterKind::BiasOnly => "bias-only",
            AdapterKind::Full => "full",
            AdapterKind::None => "none",
        }
    }

    /// Whether the kind is parameterised by a rank.
    pub fn uses_rank(self) -> bool {
        matches!(self, AdapterKind::Mode | AdapterKind::SvdDiag | AdapterKind::Lora)
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "mode" => AdapterKind::Mode,
            "svd-diag" | "svd_diag" | "svd" => AdapterKind::SvdDiag,
            "lora" => AdapterKind::Lora,
            "ia3" => AdapterKind::Ia3,
            "bias-only" | "bias_only" | "bitfit" => AdapterKind::BiasOnly,
            "full" => AdapterKind::Full,
            "none" => AdapterKind::None,
            other => return Err(Error::Config(format!("unknown adapter kind '{other}'"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeParams {
    pub phi: Matrix,
    pub tau: f64,
    pub delta_b: Vec<f64>,
    pub factors: SvdFactors,
    /// `τ` is held at its current value when false (truncation-trap ablation).
    pub train_tau: bool,
    /// `Δb` is held at its current value when false (affine-lock ablation).
    pub train_delta_b: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvdDiagParams {
    pub alpha: Vec<f64>,
    pub factors: SvdFactors,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraParams {
    /// `r × d_in`.
    pub a: Matrix,
    /// `d_out × r`.
    pub b: Matrix,
    pub r: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ia3Params {
    pub scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasOnlyParams {
    pub delta_b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Adapter {
    Mode(ModeParams),
    SvdDiag(SvdDiagParams),
    Lora(LoraParams),
    Ia3(Ia3Params),
    BiasOnly(BiasOnlyParams),
}

fn check_len(op: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::dim(op, format!("vector length {got}, expected {want}")));
    }
    Ok(())
}

fn affine(w0: &Matrix, b0: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    check_len("affine", b0.len(), w0.rows())?;
    let mut y = w0.matvec(h)?;
    for (v, b) in y.iter_mut().zip(b0) {
        *v += b;
    }
    Ok(y)
}

/// Exact-recovery initialisation: `Φ = 0`, `τ = 1`, `Δb = 0`.
pub fn mode_init(w0: &Matrix, b0: &[f64], k: usize) -> Result<ModeParams> {
    check_len("mode_init", b0.len(), w0.rows())?;
    let factors = svd_truncate(w0, k)?;
    Ok(ModeParams {
        phi: Matrix::zeros(k, k),
        tau: 1.0,
        delta_b: vec![0.0; w0.rows()],
        factors,
        train_tau: true,
        train_delta_b: true,
    })
}

impl ModeParams {
    /// `Φ + (1−τ)Σ_k`.
    pub fn core(&self) -> Matrix {
        let mut core = self.phi.clone();
        for (i, s) in self.factors.sigma_k.iter().enumerate() {
            core.set(i, i, core.get(i, i) + (1.0 - self.tau) * s);
        }
        core
    }
}

/// Residual-free MODE forward: `τ(W₀h) + U_k[Φ + (1−τ)Σ_k](V_kᵀh) + b₀ + Δb`.
pub fn mode_forward(p: &ModeParams, w0: &Matrix, b0: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    check_len("mode_forward", b0.len(), w0.rows())?;
    check_len("mode_forward", p.delta_b.len(), w0.rows())?;
    let full = w0.matvec(h)?;
    let proj = p.factors.v_k.matvec_t(h)?;
    let mixed = p.core().matvec(&proj)?;
    let low = p.factors.u_k.matvec(&mixed)?;
    Ok((0..full.len())
        .map(|i| p.tau * full[i] + low[i] + b0[i] + p.delta_b[i])
        .collect())
}

/// Dense oracle `[U_k(Σ_k+Φ)V_kᵀ + τ W_res] h + b₀ + Δb` that materialises `W_res`.
pub fn mode_forward_standard(p: &ModeParams, w0: &Matrix, b0: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    check_len("mode_forward_standard", b0.len(), w0.rows())?;
    check_len("mode_forward_standard", h.len(), w0.cols())?;
    let principal = reconstruct_principal(&p.factors)?;
    let w_res = w0.sub(&principal)?;
    let mut core = p.phi.clone();
    for (i, s) in p.factors.sigma_k.iter().enumerate() {
        core.set(i, i, core.get(i, i) + s);
    }
    let w_prin = p.factors.expand_core(&core)?;
    let w = w_prin.add(&w_res.scale(p.tau))?;
    let mut y = w.matvec(h)?;
    for i in 0..y.len() {
        y[i] += b0[i] + p.delta_b[i];
    }
    Ok(y)
}

/// Native singular-value scaling initialised at `α = σ`.
pub fn svd_diag_init(w0: &Matrix, k: usize) -> Result<SvdDiagParams> {
    let factors = svd_truncate(w0, k)?;
    Ok(SvdDiagParams {
        alpha: factors.sigma_k.clone(),
        factors,
    })
}

/// `U_k diag(α) V_kᵀ h + b₀` (residual discarded, bias frozen).
pub fn svd_diag_forward(p: &SvdDiagParams, b0: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    check_len("svd_diag_forward", b0.len(), p.factors.d_out())?;
    check_len("svd_diag_forward", p.alpha.len(), p.factors.k)?;
    let proj = p.factors.v_k.matvec_t(h)?;
    let scaled: Vec<f64> = proj.iter().zip(&p.alpha).map(|(x, a)| x * a).collect();
    let mut y = p.factors.u_k.matvec(&scaled)?;
    for (v, b) in y.iter_mut().zip(b0) {
        *v += b;
    }
    Ok(y)
}

/// `A ~ N(0, 0.01²)`, `B = 0`, so `BA = 0` at the start.
pub fn lora_init(w0: &Matrix, r: usize, rng: &mut impl Rng) -> Result<LoraParams> {
    let (d_out, d_in) = w0.shape();
    if r == 0 || r > d_out.min(d_in) {
        return Err(Error::Rank {
            k: r,
            rows: d_out,
            cols: d_in,
        });
    }
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    let a = Matrix::from_fn(r, d_in, |_, _| normal.sample(rng));
    Ok(LoraParams {
        a,
        b: Matrix::zeros(d_out, r),
        r,
    })
}

/// `W₀h + B(Ah) + b₀`.
pub fn lora_forward(p: &LoraParams, w0: &Matrix, b0: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    let mut y = affine(w0, b0, h)?;
    let low = p.b.matvec(&p.a.matvec(h)?)?;
    check_len("lora_forward", low.len(), y.len())?;
    for (v, l) in y.iter_mut().zip(low) {
        *v += l;
    }
    Ok(y)
}

pub fn ia3_init(d_out: usize) -> Ia3Params {
    Ia3Params {
        scale: vec![1.0; d_out],
    }
}

/// `scale ⊙ (W₀h) + b₀`.
pub fn ia3_forward(p: &Ia3Params, w0: &Matrix, b0: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    check_len("ia3_forward", p.scale.len(), w0.rows())?;
    check_len("ia3_forward", b0.len(), w0.rows())?;
    let wh = w0.matvec(h)?;
    Ok(wh
        .iter()
        .zip(&p.scale)
        .zip(b0)
        .map(|((w, s), b)| s * w + b)
        .collect())
}

pub fn bias_only_init(d_out: usize) -> BiasOnlyParams {
    BiasOnlyParams {
        delta_b: vec![0.0; d_out],
    }
}

/// `W₀h + b₀ + Δb`.
pub fn bias_only_forward(p: &BiasOnlyParams, w0: &Matrix, b0: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    check_len("bias_only_forward", p.delta_b.len(), w0.rows())?;
    let mut y = affine(w0, b0, h)?;
    for (v, d) in y.iter_mut().zip(&p.delta_b) {
        *v += d;
    }
    Ok(y)
}

impl Adapter {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Mode(_) => AdapterKind::Mode,
            Adapter::SvdDiag(_) => AdapterKind::SvdDiag,
            Adapter::Lora(_) => AdapterKind::Lora,
            Adapter::Ia3(_) => AdapterKind::Ia3,
            Adapter::BiasOnly(_) => AdapterKind::BiasOnly,
        }
    }

    /// Rank for the low-rank kinds, 0 otherwise.
    pub fn rank(&self) -> usize {
        match self {
            Adapter::Mode(p) => p.factors.k,
            Adapter::SvdDiag(p) => p.factors.k,
            Adapter::Lora(p) => p.r,
            Adapter::Ia3(_) | Adapter::BiasOnly(_) => 0,
        }
    }

    /// Builds the exact-recovery (or, for SVD-diag, `α = σ`) initialisation.
    pub fn init(kind: AdapterKind, w0: &Matrix, b0: &[f64], rank: usize, rng: &mut impl Rng) -> Result<Option<Adapter>> {
        Ok(Some(match kind {
            AdapterKind::Mode => Adapter::Mode(mode_init(w0, b0, rank)?),
            AdapterKind::SvdDiag => Adapter::SvdDiag(svd_diag_init(w0, rank)?),
            AdapterKind::Lora => Adapter::Lora(lora_init(w0, rank, rng)?),
            AdapterKind::Ia3 => Adapter::Ia3(ia3_init(w0.rows())),
            AdapterKind::BiasOnly => Adapter::BiasOnly(bias_only_init(w0.rows())),
            AdapterKind::Full | AdapterKind::None => return Ok(None),
        }))
    }

    pub fn forward(&self, w0: &Matrix, b0: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        match self {
            Adapter::Mode(p) => mode_forward(p, w0, b0, h),
            Adapter::SvdDiag(p) => svd_diag_forward(p, b0, h),
            Adapter::Lora(p) => lora_forward(p, w0, b0, h),
            Adapter::Ia3(p) => ia3_forward(p, w0, b0, h),
            Adapter::BiasOnly(p) => bias_only_forward(p, w0, b0, h),
        }
    }

    /// Trainable tensors in slot order, as `(name, rows, cols, row-major values)`.
    pub fn trainable(&self) -> Vec<(&'static str, usize, usize, Vec<f64>)> {
        match self {
            Adapter::Mode(p) => {
                let mut out = vec![("phi", p.factors.k, p.factors.k, p.phi.data().to_vec())];
                if p.train_tau {
                    out.push(("tau", 1, 1, vec![p.tau]));
                }
                if p.train_delta_b {
                    out.push(("delta_b", 1, p.delta_b.len(), p.delta_b.clone()));
                }
                out
            }
            Adapter::SvdDiag(p) => vec![("alpha", 1, p.alpha.len(), p.alpha.clone())],
            Adapter::Lora(p) => vec![
                ("a", p.a.rows(), p.a.cols(), p.a.data().to_vec()),
                ("b", p.b.rows(), p.b.cols(), p.b.data().to_vec()),
            ],
            Adapter::Ia3(p) => vec![("scale", 1, p.scale.len(), p.scale.clone())],
            Adapter::BiasOnly(p) => vec![("delta_b", 1, p.delta_b.len(), p.delta_b.clone())],
        }
    }

    /// Reads trainable values back from `flat` in [`Adapter::trainable`] order; returns entries consumed.
    pub fn load_trainable(&mut self, flat: &[f64]) -> usize {
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        };
        match self {
            Adapter::Mode(p) => {
                take(p.phi.data_mut());
                if p.train_tau {
                    let mut t = [p.tau];
                    take(&mut t);
                    p.tau = t[0];
                }
                if p.train_delta_b {
                    take(&mut p.delta_b);
                }
            }
            Adapter::SvdDiag(p) => take(&mut p.alpha),
            Adapter::Lora(p) => {
                take(p.a.data_mut());
                take(p.b.data_mut());
            }
            Adapter::Ia3(p) => take(&mut p.scale),
            Adapter::BiasOnly(p) => take(&mut p.delta_b),
        }
        pos
    }
}

/// Dense `(W̃, b̃)` with the same forward map as the adapted layer.
pub fn merge_to_dense(adapter: &Adapter, w0: &Matrix, b0: &[f64]) -> Result<(Matrix, Vec<f64>)> {
    match adapter {
        Adapter::Mode(p) => {
            let w = w0.scale(p.tau).add(&p.factors.expand_core(&p.core())?)?;
            let b = b0.iter().zip(&p.delta_b).map(|(a, d)| a + d).collect();
            Ok((w, b))
        }
        Adapter::SvdDiag(p) => Ok((p.factors.expand_core(&Matrix::diag(&p.alpha))?, b0.to_vec())),
        Adapter::Lora(p) => Ok((w0.add(&gemm_t(&p.b, false, &p.a, false)?)?, b0.to_vec())),
        Adapter::Ia3(p) => {
            let w = Matrix::from_fn(w0.rows(), w0.cols(), |i, j| p.scale[i] * w0.get(i, j));
            Ok((w, b0.to_vec()))
        }
        Adapter::BiasOnly(p) => Ok((
            w0.clone(),
            b0.iter().zip(&p.delta_b).map(|(a, d)| a + d).collect(),
        )),
    }
}

/// Number of trainable scalars the adapter adds.
pub fn param_count(adapter: &Adapter) -> usize {
    adapter.trainable().iter().map(|(_, r, c, _)| r * c).sum()
}

/// Closed-form trainable count of one adapted `d_out × d_in` layer.
pub fn closed_form_count(kind: AdapterKind, rank: usize, d_out: usize, d_in: usize) -> usize {
    match kind {
        AdapterKind::Mode => rank * rank + 1 + d_out,
        AdapterKind::SvdDiag => rank,
        AdapterKind::Lora => rank * (d_in + d_out),
        AdapterKind::Ia3 | AdapterKind::BiasOnly => d_out,
        AdapterKind::Full => d_out * d_in + d_out,
        AdapterKind::None => 0,
    }
}
