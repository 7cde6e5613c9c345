//! Truncated second-order Taylor components carried through the network.
//!
//! A batch of `n` points is stored as one stacked matrix of `comps · n` rows:
//! block 0 holds values, blocks `1..=first` the first derivatives along each
//! seeded direction, and the remaining blocks pure second derivatives
//! `∂²/∂d²` for the directions listed in `second`. Mixed partials are not
//! carried.

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct JetLayout {
    /// Input coordinate index seeded by each first-order direction.
    pub dirs: Vec<usize>,
    /// First-order direction index squared by each second-order block.
    pub second: Vec<usize>,
}

impl JetLayout {
    pub fn value() -> Self {
        JetLayout {
            dirs: vec![],
            second: vec![],
        }
    }

    /// `(u, u_x, u_t, u_xx)` over inputs `(x, t)`.
    pub fn cdr() -> Self {
        JetLayout {
            dirs: vec![0, 1],
            second: vec![0],
        }
    }

    /// `(u, u_x, u_y, u_xx, u_yy)` over inputs `(x, y)`.
    pub fn laplace_2d() -> Self {
        JetLayout {
            dirs: vec![0, 1],
            second: vec![0, 1],
        }
    }

    /// `(u, u_x)`: value and slope along x.
    pub fn slope_x() -> Self {
        JetLayout {
            dirs: vec![0],
            second: vec![],
        }
    }

    pub fn comps(&self) -> usize {
        1 + self.dirs.len() + self.second.len()
    }

    pub fn first_block(&self, dir: usize) -> usize {
        1 + dir
    }

    pub fn second_block(&self, idx: usize) -> usize {
        1 + self.dirs.len() + idx
    }
}

/// Stacked input jets for `points` (each of width `dim`): values in block 0,
/// unit seeds in the first-order blocks, zeros in the second-order blocks.
pub fn seed_inputs(points: &[Vec<f64>], dim: usize, layout: &JetLayout) -> Matrix {
    let n = points.len();
    let mut m = Matrix::zeros(layout.comps() * n, dim);
    for (i, p) in points.iter().enumerate() {
        for (j, v) in p.iter().enumerate().take(dim) {
            m.set(i, j, *v);
        }
        for (d, &input) in layout.dirs.iter().enumerate() {
            m.set(layout.first_block(d) * n + i, input, 1.0);
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Silu,
}

impl Activation {
    /// `(σ, σ', σ'', σ''')` at `z`.
    #[inline]
    pub fn derivs(self, z: f64) -> (f64, f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let a = z.tanh();
                let s1 = 1.0 - a * a;
                let s2 = -2.0 * a * s1;
                let s3 = s1 * (4.0 * a * a - 2.0 * s1);
                (a, s1, s2, s3)
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                let q = s * (1.0 - s);
                let w = 1.0 - 2.0 * s;
                let f = z * s;
                let f1 = s + z * q;
                let f2 = q * (2.0 + z * w);
                let f3 = q * (w * (3.0 + z * w) - 2.0 * z * q);
                (f, f1, f2, f3)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        }
    }
}

/// Value and `(x, t)` partials of a scalar field at one point.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Jet1D {
    pub u: f64,
    pub u_x: f64,
    pub u_t: f64,
    pub u_xx: f64,
}

impl Jet1D {
    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.u_x.is_finite() && self.u_t.is_finite() && self.u_xx.is_finite()
    }
}

/// Value and pure second partials of a 2-D field at one point.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Jet2D {
    pub u: f64,
    pub u_xx: f64,
    pub u_yy: f64,
}
