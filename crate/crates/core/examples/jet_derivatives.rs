//! Forward jets through the network against finite differences, then the
//! reverse tape against finite differences of the full physics loss.

use modepinn::adapters::AdapterKind;
use modepinn::autodiff::forward_jet;
use modepinn::model::{build_p2inn, ArchConfig};
use modepinn::selftest::gradient_check;

fn main() -> modepinn::Result<()> {
    let model = build_p2inn(&ArchConfig::desk(3), 1)?;
    let mu = [2.0, 0.5, 1.0];
    let (x, t, h) = (1.3, 0.4, 1e-4);
    let j = forward_jet(&model, x, t, &mu)?;
    let u = |x: f64, t: f64| model.forward_u(x, t, &mu).unwrap();
    let fd_x = (u(x + h, t) - u(x - h, t)) / (2.0 * h);
    let fd_t = (u(x, t + h) - u(x, t - h)) / (2.0 * h);
    let fd_xx = (u(x + h, t) - 2.0 * u(x, t) + u(x - h, t)) / (h * h);
    println!("u_x  jet {:+.10} fd {:+.10}", j.u_x, fd_x);
    println!("u_t  jet {:+.10} fd {:+.10}", j.u_t, fd_t);
    println!("u_xx jet {:+.10} fd {:+.10}", j.u_xx, fd_xx);
    for kind in [AdapterKind::Mode, AdapterKind::Lora, AdapterKind::SvdDiag, AdapterKind::BiasOnly, AdapterKind::Full] {
        println!("loss gradient vs differences ({kind}): worst relative gap {:.2e}", gradient_check(kind, 0)?);
    }
    Ok(())
}
