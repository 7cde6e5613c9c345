//! Forward jets through the network and a reverse tape for parameter gradients.

pub mod jet;
pub mod tape;

pub use jet::{Activation, Jet1D, Jet2D, JetLayout};
pub use tape::{Slot, Tape, Var};

use crate::error::{Error, Result};
use crate::model::P2innModel;

/// Output value and `(x, t)` partials of the network at one point.
pub fn forward_jet(model: &P2innModel, x: f64, t: f64, mu: &[f64]) -> Result<Jet1D> {
    let jets = forward_jet_batch(model, &[(x, t)], mu)?;
    Ok(jets[0])
}

pub fn forward_jet_batch(model: &P2innModel, points: &[(f64, f64)], mu: &[f64]) -> Result<Vec<Jet1D>> {
    let layout = JetLayout::cdr();
    let stacked = model.eval_stacked(points, mu, &layout)?;
    let n = points.len();
    let jets: Vec<Jet1D> = (0..n)
        .map(|i| Jet1D {
            u: stacked[i],
            u_x: stacked[n + i],
            u_t: stacked[2 * n + i],
            u_xx: stacked[3 * n + i],
        })
        .collect();
    if let Some(i) = jets.iter().position(|j| !j.is_finite()) {
        return Err(Error::NonFinite {
            location: format!("output jet at point {i}"),
        });
    }
    Ok(jets)
}

/// Output value and pure second partials over the two spatial inputs.
pub fn forward_jet_2d(model: &P2innModel, x: f64, y: f64, mu: &[f64]) -> Result<Jet2D> {
    let layout = JetLayout::laplace_2d();
    let s = model.eval_stacked(&[(x, y)], mu, &layout)?;
    Ok(Jet2D {
        u: s[0],
        u_xx: s[3],
        u_yy: s[4],
    })
}

/// Analytic gradient of a recorded scalar computation; see [`Tape::backward`].
pub fn backward(tape: &Tape, seed: f64) -> Result<Vec<f64>> {
    tape.backward(seed)
}
