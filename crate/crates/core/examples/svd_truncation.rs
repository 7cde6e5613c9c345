//! One-sided Jacobi SVD of a pre-trained-looking weight: how much the
//! principal spectrum keeps and how much the discarded residual carries.

use modepinn::linalg::{reconstruct_principal, svd_full, svd_truncate};
use modepinn::model::{build_p2inn, ArchConfig};

fn main() -> modepinn::Result<()> {
    let model = build_p2inn(&ArchConfig::desk(3), 0)?;
    let w = &model.decoder.layers[1].weight;
    let full = svd_full(w)?;
    let total: f64 = full.sigma_k.iter().map(|s| s * s).sum();
    println!("leading singular values: {:.3?}", &full.sigma_k[..6]);
    for k in [1, 2, 4, 8, 16, 32, 50] {
        let f = svd_truncate(w, k)?;
        let resid = w.sub(&reconstruct_principal(&f)?)?.frobenius_norm();
        let kept: f64 = f.sigma_k.iter().map(|s| s * s).sum::<f64>() / total;
        println!("k={k:>2}  energy kept {:>6.2}%  residual ||W - U S V^T||_F = {resid:.3e}", 100.0 * kept);
    }
    Ok(())
}
