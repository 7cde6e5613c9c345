//! Attaches MODE to a random layer, checks the lossless start and the dual
//! forward forms, and prints the parameter budget against the baselines.

use modepinn::adapters::{closed_form_count, mode_forward, mode_forward_standard, mode_init, AdapterKind};
use modepinn::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> modepinn::Result<()> {
    let (d_out, d_in, k) = (50, 50, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w0 = Matrix::from_fn(d_out, d_in, |_, _| rng.random_range(-0.3..0.3));
    let b0: Vec<f64> = (0..d_out).map(|_| rng.random_range(-0.1..0.1)).collect();
    let h: Vec<f64> = (0..d_in).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut p = mode_init(&w0, &b0, k)?;
    let frozen = w0.matvec(&h)?.iter().zip(&b0).map(|(a, b)| a + b).collect::<Vec<_>>();
    let start = mode_forward(&p, &w0, &b0, &h)?;
    let gap = start.iter().zip(&frozen).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    println!("initial gap to the frozen layer: {gap:.1e}");

    p.phi = Matrix::from_fn(k, k, |_, _| rng.random_range(-0.5..0.5));
    p.tau = 0.3;
    p.delta_b = (0..d_out).map(|_| rng.random_range(-0.1..0.1)).collect();
    let fast = mode_forward(&p, &w0, &b0, &h)?;
    let dense = mode_forward_standard(&p, &w0, &b0, &h)?;
    let gap = fast.iter().zip(&dense).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    println!("efficient vs materialized forward after a random update: {gap:.1e}");

    println!("trainable scalars for a {d_out}x{d_in} layer at rank {k}:");
    for kind in [AdapterKind::Mode, AdapterKind::SvdDiag, AdapterKind::Lora, AdapterKind::Ia3, AdapterKind::BiasOnly, AdapterKind::Full] {
        println!("  {:<10} {}", kind.name(), closed_form_count(kind, k, d_out, d_in));
    }
    Ok(())
}
