//! Parameterized PINN: coordinate encoder, parameter encoder and a decoder over
//! the concatenated latents `[h_coord; h_param]`, with optional adapters on
//! decoder layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterKind};
use crate::autodiff::jet::seed_inputs;
use crate::autodiff::{Activation, JetLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Points evaluated per tape during inference.
const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Widths of the coordinate encoder, input first.
    pub coord: Vec<usize>,
    /// Widths of the parameter encoder, input (`|μ|`) first.
    pub param: Vec<usize>,
    /// Widths of the decoder; the first equals the sum of both latent widths, the last is 1.
    pub decoder: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ArchConfig {
    /// Default desk architecture for a problem with `mu_dim` coefficients.
    pub fn desk(mu_dim: usize) -> Self {
        ArchConfig {
            coord: vec![2, 32, 32],
            param: vec![mu_dim, 32, 32],
            decoder: vec![64, 50, 50, 50, 1],
            activation: Activation::Tanh,
        }
    }

    /// A wider variant totalling 76 889 scalars for `|μ| = 3`.
    pub fn full_scale(mu_dim: usize) -> Self {
        let mut decoder = vec![128];
        decoder.extend([104; 6]);
        decoder.push(1);
        ArchConfig {
            coord: vec![2, 64, 64],
            param: vec![mu_dim, 64, 64],
            decoder,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("coord", &self.coord), ("param", &self.param), ("decoder", &self.decoder)] {
            if w.len() < 2 || w.contains(&0) {
                return Err(Error::Config(format!(
                    "{name} widths {w:?} need at least one layer and non-zero widths"
                )));
            }
        }
        let latent = self.coord.last().unwrap() + self.param.last().unwrap();
        if self.decoder[0] != latent {
            return Err(Error::dim(
                "build_p2inn",
                format!(
                    "decoder input {} != coord latent {} + param latent {}",
                    self.decoder[0],
                    self.coord.last().unwrap(),
                    self.param.last().unwrap()
                ),
            ));
        }
        if *self.decoder.last().unwrap() != 1 {
            return Err(Error::dim("build_p2inn", "decoder must end in a scalar output"));
        }
        Ok(())
    }

    /// Σ (in·out + out) over all three sub-networks.
    pub fn scalar_count(&self) -> usize {
        [&self.coord, &self.param, &self.decoder]
            .iter()
            .map(|w| w.windows(2).map(|p| p[0] * p[1] + p[1]).sum::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim × in_dim`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub frozen: bool,
    pub adapter: Option<Adapter>,
}

impl LayerSpec {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        let (out_dim, in_dim) = weight.shape();
        if bias.len() != out_dim {
            return Err(Error::dim("LayerSpec", format!("bias {} for {out_dim} outputs", bias.len())));
        }
        Ok(LayerSpec {
            in_dim,
            out_dim,
            weight,
            bias,
            frozen: false,
            adapter: None,
        })
    }

    fn xavier(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = Matrix::from_fn(out_dim, in_dim, |_, _| rng.random_range(-a..=a));
        LayerSpec {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
            frozen: false,
            adapter: None,
        }
    }

    /// Trainable scalars contributed by this layer in its current state.
    pub fn trainable_count(&self) -> usize {
        let own = if self.frozen { 0 } else { self.out_dim * (self.in_dim + 1) };
        own + self.adapter.as_ref().map_or(0, crate::adapters::param_count)
    }
}

/// Fully connected stack; the activation follows every layer except, when
/// `activate_output` is false, the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<LayerSpec>,
    pub activate_output: bool,
}

impl Mlp {
    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct P2innModel {
    pub arch: ArchConfig,
    pub seed: u64,
    pub coord_encoder: Mlp,
    pub param_encoder: Mlp,
    pub decoder: Mlp,
    pub activation: Activation,
}

pub fn build_p2inn(cfg: &ArchConfig, seed: u64) -> Result<P2innModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stack = |w: &[usize], activate_output: bool| Mlp {
        layers: w.windows(2).map(|p| LayerSpec::xavier(p[0], p[1], &mut rng)).collect(),
        activate_output,
    };
    let coord_encoder = stack(&cfg.coord, true);
    let param_encoder = stack(&cfg.param, true);
    let decoder = stack(&cfg.decoder, false);
    Ok(P2innModel {
        arch: cfg.clone(),
        seed,
        coord_encoder,
        param_encoder,
        decoder,
        activation: cfg.activation,
    })
}

/// Which sub-network a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Coord,
    Param,
    Decoder,
}

impl Part {
    pub fn name(self) -> &'static str {
        match self {
            Part::Coord => "coord",
            Part::Param => "param",
            Part::Decoder => "decoder",
        }
    }
}

/// Tape handles of one network's tensors.
pub struct Bound {
    coord: Vec<BoundLayer>,
    param: Vec<BoundLayer>,
    decoder: Vec<BoundLayer>,
}

struct BoundLayer {
    w: Var,
    b: Var,
    adapter: Option<BoundAdapter>,
}

enum BoundAdapter {
    Mode {
        phi: Var,
        tau: Var,
        delta_b: Var,
        sigma: Var,
        u: Var,
        v: Var,
    },
    SvdDiag {
        alpha: Var,
        u: Var,
        v: Var,
    },
    Lora {
        a: Var,
        b: Var,
    },
    Ia3 {
        scale: Var,
    },
    BiasOnly {
        delta_b: Var,
    },
}

fn leaf(tape: &mut Tape, trainable: bool, name: String, value: Matrix) -> Var {
    if trainable {
        tape.param(name, value)
    } else {
        tape.constant(value)
    }
}

fn bind_adapter(tape: &mut Tape, live: bool, prefix: &str, ad: &Adapter) -> BoundAdapter {
    let leaf = |tape: &mut Tape, trainable: bool, name: &str, m: Matrix| {
        leaf(tape, live && trainable, format!("{prefix}.{name}"), m)
    };
    match ad {
        Adapter::Mode(p) => {
            let phi = leaf(tape, true, "phi", p.phi.clone());
            let tau = leaf(tape, p.train_tau, "tau", Matrix::from_vec_unchecked(1, 1, vec![p.tau]));
            let delta_b = leaf(tape, p.train_delta_b, "delta_b", Matrix::row_vector(&p.delta_b));
            BoundAdapter::Mode {
                phi,
                tau,
                delta_b,
                sigma: tape.constant(Matrix::diag(&p.factors.sigma_k)),
                u: tape.constant(p.factors.u_k.clone()),
                v: tape.constant(p.factors.v_k.clone()),
            }
        }
        Adapter::SvdDiag(p) => BoundAdapter::SvdDiag {
            alpha: leaf(tape, true, "alpha", Matrix::row_vector(&p.alpha)),
            u: tape.constant(p.factors.u_k.clone()),
            v: tape.constant(p.factors.v_k.clone()),
        },
        Adapter::Lora(p) => BoundAdapter::Lora {
            a: leaf(tape, true, "a", p.a.clone()),
            b: leaf(tape, true, "b", p.b.clone()),
        },
        Adapter::Ia3(p) => BoundAdapter::Ia3 {
            scale: leaf(tape, true, "scale", Matrix::row_vector(&p.scale)),
        },
        Adapter::BiasOnly(p) => BoundAdapter::BiasOnly {
            delta_b: leaf(tape, true, "delta_b", Matrix::row_vector(&p.delta_b)),
        },
    }
}

impl P2innModel {
    pub fn parts(&self) -> [(Part, &Mlp); 3] {
        [
            (Part::Coord, &self.coord_encoder),
            (Part::Param, &self.param_encoder),
            (Part::Decoder, &self.decoder),
        ]
    }

    pub fn part_mut(&mut self, part: Part) -> &mut Mlp {
        match part {
            Part::Coord => &mut self.coord_encoder,
            Part::Param => &mut self.param_encoder,
            Part::Decoder => &mut self.decoder,
        }
    }

    pub fn mu_dim(&self) -> usize {
        self.param_encoder.in_dim()
    }

    /// Registers the network's tensors on `tape`. With `live`, unfrozen
    /// weights and adapter tensors become parameters in [`Self::trainable_flat`]
    /// order; otherwise everything is a constant.
    pub fn bind(&self, tape: &mut Tape, live: bool) -> Bound {
        let bind_mlp = |tape: &mut Tape, part: Part, mlp: &Mlp| -> Vec<BoundLayer> {
            mlp.layers
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let own = live && !l.frozen;
                    let prefix = format!("{}.{}", part.name(), i);
                    let w = leaf(tape, own, format!("{prefix}.weight"), l.weight.clone());
                    let b = leaf(tape, own, format!("{prefix}.bias"), Matrix::row_vector(&l.bias));
                    let adapter = l.adapter.as_ref().map(|a| bind_adapter(tape, live, &prefix, a));
                    BoundLayer { w, b, adapter }
                })
                .collect()
        };
        Bound {
            coord: bind_mlp(tape, Part::Coord, &self.coord_encoder),
            param: bind_mlp(tape, Part::Param, &self.param_encoder),
            decoder: bind_mlp(tape, Part::Decoder, &self.decoder),
        }
    }

    /// Records the network on stacked input jets `inputs`
    /// (`layout.comps() · n` rows × coordinate width); returns the stacked
    /// output column.
    pub fn record(&self, tape: &mut Tape, bound: &Bound, inputs: Var, mu: &[f64], layout: &JetLayout) -> Result<Var> {
        if mu.len() != self.mu_dim() {
            return Err(Error::dim(
                "forward",
                format!("mu has {} entries, encoder expects {}", mu.len(), self.mu_dim()),
            ));
        }
        let rows = tape.value(inputs).rows();
        let n = rows / layout.comps();
        let h_coord = self.record_mlp(tape, Part::Coord, &self.coord_encoder, &bound.coord, inputs, layout, n)?;
        let mu_in = tape.constant(Matrix::row_vector(mu));
        let value = JetLayout::value();
        let h_param = self.record_mlp(tape, Part::Param, &self.param_encoder, &bound.param, mu_in, &value, 1)?;
        let h_param = tape.broadcast_rows(h_param, n, rows)?;
        let h = tape.concat_cols(h_coord, h_param)?;
        self.record_mlp(tape, Part::Decoder, &self.decoder, &bound.decoder, h, layout, n)
    }

    #[allow(clippy::too_many_arguments)]
    fn record_mlp(
        &self,
        tape: &mut Tape,
        part: Part,
        mlp: &Mlp,
        bound: &[BoundLayer],
        mut h: Var,
        layout: &JetLayout,
        n: usize,
    ) -> Result<Var> {
        let depth = mlp.layers.len();
        for (i, bl) in bound.iter().enumerate() {
            let z = record_layer(tape, bl, h, n)?;
            h = if i + 1 < depth || mlp.activate_output {
                tape.jet_activation(z, layout, self.activation)?
            } else {
                z
            };
            if !tape.value(h).is_finite() {
                return Err(Error::NonFinite {
                    location: format!("{} layer {}", part.name(), i + 1),
                });
            }
        }
        Ok(h)
    }

    /// Stacked output column (`layout.comps() · n` values) at `points`.
    pub fn eval_stacked(&self, points: &[(f64, f64)], mu: &[f64], layout: &JetLayout) -> Result<Vec<f64>> {
        let comps = layout.comps();
        let mut blocks: Vec<Vec<f64>> = vec![Vec::with_capacity(points.len()); comps];
        for chunk in points.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let pts: Vec<Vec<f64>> = chunk.iter().map(|&(a, b)| vec![a, b]).collect();
            let x = tape.constant(seed_inputs(&pts, self.coord_encoder.in_dim(), layout));
            let out = self.record(&mut tape, &bound, x, mu, layout)?;
            let data = tape.value(out).data();
            let m = chunk.len();
            for (c, block) in blocks.iter_mut().enumerate() {
                block.extend_from_slice(&data[c * m..(c + 1) * m]);
            }
        }
        Ok(blocks.concat())
    }

    /// Predictions `û` at many points.
    pub fn predict(&self, points: &[(f64, f64)], mu: &[f64]) -> Result<Vec<f64>> {
        let u = self.eval_stacked(points, mu, &JetLayout::value())?;
        if let Some(i) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("output at point {i}"),
            });
        }
        Ok(u)
    }

    pub fn forward_u(&self, x: f64, t: f64, mu: &[f64]) -> Result<f64> {
        Ok(self.predict(&[(x, t)], mu)?[0])
    }

    pub fn trainable_count(&self) -> usize {
        self.parts()
            .iter()
            .flat_map(|(_, m)| m.layers.iter())
            .map(LayerSpec::trainable_count)
            .sum()
    }

    /// Current trainable values in binding order.
    pub fn trainable_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_count());
        for (_, mlp) in self.parts() {
            for l in &mlp.layers {
                if !l.frozen {
                    out.extend_from_slice(l.weight.data());
                    out.extend_from_slice(&l.bias);
                }
                if let Some(a) = &l.adapter {
                    for (_, _, _, v) in a.trainable() {
                        out.extend(v);
                    }
                }
            }
        }
        out
    }

    pub fn set_trainable_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.trainable_count() {
            return Err(Error::dim(
                "set_trainable_flat",
                format!("{} values for {} trainables", flat.len(), self.trainable_count()),
            ));
        }
        let mut pos = 0;
        for part in [Part::Coord, Part::Param, Part::Decoder] {
            for l in &mut self.part_mut(part).layers {
                if !l.frozen {
                    let nw = l.weight.data().len();
                    l.weight.data_mut().copy_from_slice(&flat[pos..pos + nw]);
                    pos += nw;
                    let nb = l.bias.len();
                    l.bias.copy_from_slice(&flat[pos..pos + nb]);
                    pos += nb;
                }
                if let Some(a) = &mut l.adapter {
                    pos += a.load_trainable(&flat[pos..]);
                }
            }
        }
        Ok(())
    }

    /// Every frozen scalar (weights, biases, SVD factors), for invariance checks.
    pub fn frozen_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, mlp) in self.parts() {
            for l in &mlp.layers {
                if l.frozen {
                    out.extend_from_slice(l.weight.data());
                    out.extend_from_slice(&l.bias);
                }
                match &l.adapter {
                    Some(Adapter::Mode(p)) => {
                        out.extend_from_slice(p.factors.u_k.data());
                        out.extend_from_slice(&p.factors.sigma_k);
                        out.extend_from_slice(p.factors.v_k.data());
                        if !p.train_tau {
                            out.push(p.tau);
                        }
                        if !p.train_delta_b {
                            out.extend_from_slice(&p.delta_b);
                        }
                    }
                    Some(Adapter::SvdDiag(p)) => {
                        out.extend_from_slice(p.factors.u_k.data());
                        out.extend_from_slice(&p.factors.sigma_k);
                        out.extend_from_slice(p.factors.v_k.data());
                    }
                    _ => {}
                }
            }
        }
        out
    }

    /// Decoder layers (0-based) that adapters target by default: all but the first and last.
    pub fn default_adapted_layers(&self) -> std::ops::Range<usize> {
        1..self.decoder.layers.len().saturating_sub(1)
    }

    /// Freezes the whole network, then attaches `kind` to decoder layers in
    /// `layers` (0-based). `Full` unfreezes the decoder instead; `None` only freezes.
    pub fn attach_adapters(
        &mut self,
        kind: AdapterKind,
        rank: usize,
        layers: std::ops::Range<usize>,
        seed: u64,
    ) -> Result<()> {
        if layers.end > self.decoder.layers.len() {
            return Err(Error::InvalidInput(format!(
                "adapter layers {layers:?} exceed decoder depth {}",
                self.decoder.layers.len()
            )));
        }
        for part in [Part::Coord, Part::Param, Part::Decoder] {
            for l in &mut self.part_mut(part).layers {
                if l.adapter.is_some() {
                    return Err(Error::InvalidInput("adapters already attached".into()));
                }
                l.frozen = true;
            }
        }
        match kind {
            AdapterKind::Full => {
                for l in &mut self.decoder.layers {
                    l.frozen = false;
                }
            }
            AdapterKind::None => {}
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for i in layers {
                    let l = &mut self.decoder.layers[i];
                    l.adapter = Adapter::init(kind, &l.weight, &l.bias, rank, &mut rng)?;
                }
            }
        }
        Ok(())
    }

    /// Mutable access to the MODE parameters of every adapted layer.
    pub fn mode_params_mut(&mut self) -> impl Iterator<Item = &mut crate::adapters::ModeParams> {
        self.decoder.layers.iter_mut().filter_map(|l| match &mut l.adapter {
            Some(Adapter::Mode(p)) => Some(p),
            _ => None,
        })
    }

    /// Kind and rank of the attached adapters.
    pub fn adapter_summary(&self) -> (AdapterKind, usize) {
        if let Some(a) = self.decoder.layers.iter().find_map(|l| l.adapter.as_ref()) {
            return (a.kind(), a.rank());
        }
        let all_frozen = self.parts().iter().all(|(_, m)| m.layers.iter().all(|l| l.frozen));
        let dec_live = self.decoder.layers.iter().all(|l| !l.frozen);
        let enc_frozen = self.coord_encoder.layers.iter().chain(&self.param_encoder.layers).all(|l| l.frozen);
        if all_frozen {
            (AdapterKind::None, 0)
        } else if dec_live && enc_frozen {
            (AdapterKind::Full, 0)
        } else {
            (AdapterKind::None, 0)
        }
    }
}

fn record_layer(tape: &mut Tape, bl: &BoundLayer, h: Var, n: usize) -> Result<Var> {
    let frozen_map = |tape: &mut Tape| tape.matmul_t(h, false, bl.w, true);
    let (z, bias) = match &bl.adapter {
        None => (frozen_map(tape)?, bl.b),
        Some(BoundAdapter::Mode {
            phi,
            tau,
            delta_b,
            sigma,
            u,
            v,
        }) => {
            let wh = frozen_map(tape)?;
            let full = tape.scale_by(wh, *tau)?;
            let neg = tape.scale(*tau, -1.0);
            let one_minus = tape.add_scalar(neg, 1.0);
            let sig = tape.scale_by(*sigma, one_minus)?;
            let core = tape.add(*phi, sig)?;
            let p = tape.matmul(h, *v)?;
            let q = tape.matmul_t(p, false, core, true)?;
            let low = tape.matmul_t(q, false, *u, true)?;
            let z = tape.add(full, low)?;
            (z, tape.add(bl.b, *delta_b)?)
        }
        Some(BoundAdapter::SvdDiag { alpha, u, v }) => {
            let p = tape.matmul(h, *v)?;
            let p = tape.mul_row_broadcast(p, *alpha)?;
            (tape.matmul_t(p, false, *u, true)?, bl.b)
        }
        Some(BoundAdapter::Lora { a, b }) => {
            let wh = frozen_map(tape)?;
            let ah = tape.matmul_t(h, false, *a, true)?;
            let bah = tape.matmul_t(ah, false, *b, true)?;
            (tape.add(wh, bah)?, bl.b)
        }
        Some(BoundAdapter::Ia3 { scale }) => {
            let wh = frozen_map(tape)?;
            (tape.mul_row_broadcast(wh, *scale)?, bl.b)
        }
        Some(BoundAdapter::BiasOnly { delta_b }) => (frozen_map(tape)?, tape.add(bl.b, *delta_b)?),
    };
    tape.add_row_bias(z, bias, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{forward_jet, forward_jet_2d};

    fn linear_model(w: &[f64], b: f64) -> P2innModel {
        // Identity-free: coord encoder is a single linear map to the output
        // width 1; param encoder contributes a zero latent.
        let arch = ArchConfig {
            coord: vec![2, 1],
            param: vec![1, 1],
            decoder: vec![2, 1],
            activation: Activation::Tanh,
        };
        let mut m = build_p2inn(&arch, 0).unwrap();
        m.coord_encoder.layers[0] = LayerSpec::new(Matrix::row_vector(w), vec![b]).unwrap();
        m.coord_encoder.activate_output = false;
        m.param_encoder.layers[0] = LayerSpec::new(Matrix::zeros(1, 1), vec![0.0]).unwrap();
        m.decoder.layers[0] = LayerSpec::new(Matrix::row_vector(&[1.0, 0.0]), vec![0.0]).unwrap();
        m
    }

    #[test]
    fn concatenation_width() {
        let arch = ArchConfig {
            coord: vec![2, 8],
            param: vec![3, 8],
            decoder: vec![16, 5, 1],
            activation: Activation::Tanh,
        };
        let m = build_p2inn(&arch, 1).unwrap();
        assert_eq!(m.decoder.layers[0].in_dim, 16);
        let bad = ArchConfig {
            decoder: vec![15, 5, 1],
            ..arch
        };
        assert!(matches!(build_p2inn(&bad, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_p2inn(&ArchConfig::desk(3), 42).unwrap();
        let b = build_p2inn(&ArchConfig::desk(3), 42).unwrap();
        let c = build_p2inn(&ArchConfig::desk(3), 43).unwrap();
        assert_eq!(a.trainable_flat(), b.trainable_flat());
        assert_ne!(a.trainable_flat(), c.trainable_flat());
    }

    #[test]
    fn desk_count_matches_hand_sum() {
        let m = build_p2inn(&ArchConfig::desk(3), 0).unwrap();
        let coord = 2 * 32 + 32 + 32 * 32 + 32;
        let param = 3 * 32 + 32 + 32 * 32 + 32;
        let dec = 64 * 50 + 50 + 2 * (50 * 50 + 50) + 50 + 1;
        assert_eq!(m.trainable_count(), coord + param + dec);
        assert_eq!(m.trainable_count(), 10737);
        assert_eq!(m.trainable_flat().len(), 10737);
    }

    #[test]
    fn full_scale_count_rounds_to_76_9k() {
        let n = ArchConfig::full_scale(3).scalar_count();
        assert_eq!(n, 76889);
        assert_eq!((n as f64 / 100.0).round() / 10.0, 76.9);
        let m = build_p2inn(&ArchConfig::full_scale(3), 0).unwrap();
        assert_eq!(m.trainable_count(), n);
    }

    #[test]
    fn xavier_bounds_and_zero_bias() {
        let m = build_p2inn(&ArchConfig::desk(3), 5).unwrap();
        for (_, mlp) in m.parts() {
            for l in &mlp.layers {
                let a = (6.0 / (l.in_dim + l.out_dim) as f64).sqrt();
                assert!(l.weight.max_abs() <= a);
                assert!(l.bias.iter().all(|&b| b == 0.0));
            }
        }
    }

    #[test]
    fn linear_jet() {
        let m = linear_model(&[2.0, 3.0], 1.0);
        let j = forward_jet(&m, 0.7, -0.2, &[0.0]).unwrap();
        assert!((j.u - (1.4 - 0.6 + 1.0)).abs() < 1e-14);
        assert_eq!((j.u_x, j.u_t, j.u_xx), (2.0, 3.0, 0.0));
    }

    #[test]
    fn tanh_jet_at_origin() {
        let mut m = linear_model(&[1.0, 0.0], 0.0);
        m.coord_encoder.activate_output = true;
        let j = forward_jet(&m, 0.0, 0.0, &[0.0]).unwrap();
        assert_eq!((j.u, j.u_x, j.u_xx), (0.0, 1.0, 0.0));
        let z: f64 = 0.4;
        let j = forward_jet(&m, z, 0.0, &[0.0]).unwrap();
        let s = 1.0 - z.tanh().powi(2);
        assert!((j.u_x - s).abs() <= 1e-12);
        assert!((j.u_xx + 2.0 * z.tanh() * s).abs() <= 1e-12);
    }

    #[test]
    fn jet_linearity_on_linear_layers() {
        let (a, b) = (0.3, -1.7);
        let f = linear_model(&[1.0, -2.0], 0.5);
        let g = linear_model(&[4.0, 0.25], -1.0);
        let h = linear_model(&[a * 1.0 + b * 4.0, a * -2.0 + b * 0.25], a * 0.5 + b * -1.0);
        let (jf, jg, jh) = (
            forward_jet(&f, 0.9, 0.1, &[0.0]).unwrap(),
            forward_jet(&g, 0.9, 0.1, &[0.0]).unwrap(),
            forward_jet(&h, 0.9, 0.1, &[0.0]).unwrap(),
        );
        assert!((jh.u - (a * jf.u + b * jg.u)).abs() < 1e-12);
        assert!((jh.u_x - (a * jf.u_x + b * jg.u_x)).abs() < 1e-12);
        assert!((jh.u_t - (a * jf.u_t + b * jg.u_t)).abs() < 1e-12);
    }

    fn random_net(seed: u64) -> P2innModel {
        let arch = ArchConfig {
            coord: vec![2, 6, 5],
            param: vec![2, 4],
            decoder: vec![9, 7, 1],
            activation: Activation::Tanh,
        };
        let mut m = build_p2inn(&arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let n = m.trainable_count();
        let flat: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
        m.set_trainable_flat(&flat).unwrap();
        m
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-3)
    }

    #[test]
    fn jets_match_central_differences() {
        let h = 1e-4;
        for seed in 0..5 {
            let m = random_net(seed);
            let mu = [0.4, -0.3];
            let (x, t) = (0.3 + 0.1 * seed as f64, 0.6);
            let j = forward_jet(&m, x, t, &mu).unwrap();
            let u = |x: f64, t: f64| m.forward_u(x, t, &mu).unwrap();
            let ux = (u(x + h, t) - u(x - h, t)) / (2.0 * h);
            let ut = (u(x, t + h) - u(x, t - h)) / (2.0 * h);
            let uxx = (u(x + h, t) - 2.0 * u(x, t) + u(x - h, t)) / (h * h);
            assert!(rel(j.u_x, ux) <= 1e-5, "u_x {} vs {}", j.u_x, ux);
            assert!(rel(j.u_t, ut) <= 1e-5, "u_t {} vs {}", j.u_t, ut);
            assert!(rel(j.u_xx, uxx) <= 1e-4, "u_xx {} vs {}", j.u_xx, uxx);
            assert!(j.is_finite());
            let j2 = forward_jet_2d(&m, x, t, &mu).unwrap();
            let uyy = (u(x, t + h) - 2.0 * u(x, t) + u(x, t - h)) / (h * h);
            assert!(rel(j2.u_xx, uxx) <= 1e-4);
            assert!(rel(j2.u_yy, uyy) <= 1e-4);
        }
    }

    #[test]
    fn quadratic_bowl_second_derivatives() {
        // u = x² + y² through a linear jet product.
        let layout = JetLayout::laplace_2d();
        let mut tape = Tape::new();
        let x = tape.constant(seed_inputs(&[vec![0.3, -1.1]], 2, &layout));
        let sq = tape.jet_mul(x, x, &layout).unwrap();
        let ones = tape.constant(Matrix::column_vector(&[1.0, 1.0]));
        let u = tape.matmul(sq, ones).unwrap();
        let v = tape.value(u).data().to_vec();
        assert!((v[0] - (0.09 + 1.21)).abs() < 1e-14);
        assert_eq!((v[3], v[4]), (2.0, 2.0));
    }

    #[test]
    fn constant_net_has_zero_derivatives() {
        let mut m = build_p2inn(&ArchConfig::desk(3), 3).unwrap();
        let last = m.decoder.layers.last_mut().unwrap();
        last.weight = Matrix::zeros(1, 50);
        last.bias = vec![0.75];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (x, t) = (rng.random_range(0.0..6.28), rng.random_range(0.0..1.0));
            let j = forward_jet(&m, x, t, &[1.0, 0.0, 0.0]).unwrap();
            assert_eq!((j.u, j.u_x, j.u_t, j.u_xx), (0.75, 0.0, 0.0, 0.0));
            let j2 = forward_jet_2d(&m, x, t, &[1.0, 0.0, 0.0]).unwrap();
            assert_eq!((j2.u_xx, j2.u_yy), (0.0, 0.0));
        }
    }

    #[test]
    fn forward_u_matches_jet_value() {
        let m = build_p2inn(&ArchConfig::desk(3), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (x, t) = (rng.random_range(0.0..6.28), rng.random_range(0.0..1.0));
            let mu = [rng.random_range(1.0..10.0), 0.0, 0.0];
            let u = m.forward_u(x, t, &mu).unwrap();
            assert!(u.is_finite());
            assert!((u - forward_jet(&m, x, t, &mu).unwrap().u).abs() <= 1e-14);
        }
    }

    #[test]
    fn mu_width_checked() {
        let m = build_p2inn(&ArchConfig::desk(3), 9).unwrap();
        assert!(m.forward_u(0.0, 0.0, &[1.0]).is_err());
    }

    #[test]
    fn overflow_names_layer() {
        let mut m = build_p2inn(&ArchConfig::desk(3), 9).unwrap();
        m.decoder.layers[0].weight = Matrix::from_fn(50, 64, |_, _| 1e308);
        let err = forward_jet(&m, 1.0, 0.5, &[1e10, 1e300, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn mode_attachment_counts_and_recovery() {
        let mut m = build_p2inn(&ArchConfig::desk(3), 11).unwrap();
        let before = m.clone();
        let range = m.default_adapted_layers();
        assert_eq!(range, 1..3);
        m.attach_adapters(AdapterKind::Mode, 4, range, 0).unwrap();
        assert_eq!(m.trainable_count(), 134);
        assert_eq!(m.adapter_summary(), (AdapterKind::Mode, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<(f64, f64)> = (0..1000)
            .map(|_| (rng.random_range(0.0..6.28), rng.random_range(0.0..1.0)))
            .collect();
        let mu = [12.0, 0.0, 0.0];
        let a = before.predict(&pts, &mu).unwrap();
        let b = m.predict(&pts, &mu).unwrap();
        let worst = a.iter().zip(&b).fold(0.0f64, |w, (p, q)| w.max((p - q).abs()));
        assert!(worst <= 1e-12, "{worst}");
    }

    #[test]
    fn other_attachment_counts() {
        let base = build_p2inn(&ArchConfig::desk(3), 11).unwrap();
        let count = |kind, r| {
            let mut m = base.clone();
            m.attach_adapters(kind, r, 1..3, 0).unwrap();
            m.trainable_count()
        };
        assert_eq!(count(AdapterKind::Full, 0), 64 * 50 + 50 + 2 * 2550 + 51);
        assert_eq!(count(AdapterKind::BiasOnly, 0), 100);
        assert_eq!(count(AdapterKind::Ia3, 0), 100);
        assert_eq!(count(AdapterKind::SvdDiag, 4), 8);
        assert_eq!(count(AdapterKind::Lora, 4), 800);
        assert_eq!(count(AdapterKind::None, 0), 0);
        let mut m = base.clone();
        assert!(matches!(
            m.attach_adapters(AdapterKind::Mode, 51, 1..3, 0),
            Err(Error::Rank { .. })
        ));
    }

    #[test]
    fn flat_roundtrip_after_attach() {
        let mut m = build_p2inn(&ArchConfig::desk(3), 2).unwrap();
        m.attach_adapters(AdapterKind::Lora, 2, 1..3, 5).unwrap();
        let frozen = m.frozen_flat();
        let flat: Vec<f64> = (0..m.trainable_count()).map(|i| i as f64 * 1e-3).collect();
        m.set_trainable_flat(&flat).unwrap();
        assert_eq!(m.trainable_flat(), flat);
        assert_eq!(m.frozen_flat(), frozen);
        let mut tape = Tape::new();
        m.bind(&mut tape, true);
        assert_eq!(tape.n_params(), flat.len());
    }
}
