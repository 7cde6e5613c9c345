//! Ground-truth CDR fields from the split-step solver, with its temporal
//! self-convergence order and a CSV export.

use modepinn::pde::{CdrParams, IcKind, ProblemSpec};
use modepinn::refsolve::{convergence_order, strang_cdr, translation_error};

fn main() -> modepinn::Result<()> {
    let adv = strang_cdr(&CdrParams::new(1.0, 0.0, 0.0)?, &ProblemSpec::cdr(IcKind::GaussWide), 256, 200)?;
    println!("pure advection, max distance from exact translation: {:.2e}", translation_error(&adv, 1.0, IcKind::GaussWide));

    let mu = CdrParams::new(1.0, 0.5, 2.0)?;
    let rep = convergence_order(&mu, &ProblemSpec::cdr(IcKind::Sinusoid), 512, &[21, 41, 81])?;
    for (dt, e) in rep.steps.iter().zip(&rep.errors) {
        println!("dt {dt:.4}  error {e:.3e}");
    }
    println!("observed order {:.3}", rep.order.unwrap_or(f64::NAN));

    let f = strang_cdr(&CdrParams::new(5.0, 0.01, 3.0)?, &ProblemSpec::cdr(IcKind::GaussNarrow), 128, 51)?;
    let path = std::env::temp_dir().join("cdr_reference.csv");
    f.write_csv(&mut std::fs::File::create(&path)?)?;
    println!("wrote {} ({}x{})", path.display(), f.nt, f.nx);
    Ok(())
}
