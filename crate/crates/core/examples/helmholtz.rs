//! Manufactured Helmholtz problem: residual of the exact field and a short
//! pre-training run over the wavenumber grid.

use modepinn::autodiff::Jet2D;
use modepinn::bench::evaluate;
use modepinn::model::{build_p2inn, ArchConfig};
use modepinn::pde::{helmholtz_residual, Counts, Family, HelmholtzParams, ProblemSpec};
use modepinn::refsolve::helmholtz_exact;
use modepinn::train::{pretrain, PretrainConfig, SourceDistribution};
use std::f64::consts::PI;

fn main() -> modepinn::Result<()> {
    let p = HelmholtzParams::new(2.7);
    let (x, y) = (0.31, -0.42);
    let k = p.a * PI;
    let exact = Jet2D { u: p.exact(x, y), u_xx: -k * k * p.exact(x, y), u_yy: -k * k * p.exact(x, y) };
    println!("residual of the manufactured field: {:.1e}", helmholtz_residual(&exact, &p, x, y));

    let spec = ProblemSpec::helmholtz();
    let mus = (0..6).map(|i| vec![2.5 + 0.1 * i as f64]).collect();
    let dist = SourceDistribution::new(Family::Helmholtz, mus)?;
    let mut model = build_p2inn(&ArchConfig::desk(1), 0)?;
    let cfg = PretrainConfig { iters: 300, batch_equations: 3, counts: Counts { n_f: 200, n_u: 0, n_b: 80 }, ..PretrainConfig::default() };
    let h = pretrain(&mut model, &spec, &dist, &cfg)?;
    println!("loss {:.3e} -> {:.3e}", h.rows[0].total, h.last().unwrap().total);
    let truth = helmholtz_exact(&p, 64, 64)?;
    println!("rel-L2 at a=2.7 after a short run: {:.3}", evaluate(&model, &[p.a], &truth)?.rel_l2);
    Ok(())
}
