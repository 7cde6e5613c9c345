//! Short pre-training on a convection grid followed by MODE and LoRA
//! fine-tuning at an unseen speed, scored against the reference solver.

use modepinn::adapters::AdapterKind;
use modepinn::bench::evaluate;
use modepinn::model::{build_p2inn, ArchConfig};
use modepinn::pde::{CdrParams, Counts, IcKind, ProblemSpec};
use modepinn::refsolve::strang_cdr;
use modepinn::train::{finetune, pretrain, AdapterSpec, FinetuneConfig, PretrainConfig, SourceDistribution};

fn main() -> modepinn::Result<()> {
    let spec = ProblemSpec::cdr(IcKind::Sinusoid);
    let base = CdrParams::new(0.0, 0.01, 0.0)?;
    let dist = SourceDistribution::cdr_range(base, 0, 1.0, 10.0, 1.0)?;
    let counts = Counts { n_f: 200, n_u: 50, n_b: 50 };
    let mut model = build_p2inn(&ArchConfig::desk(3), 0)?;
    let pre = PretrainConfig { iters: 1000, batch_equations: 5, counts, ..PretrainConfig::default() };
    let h = pretrain(&mut model, &spec, &dist, &pre)?;
    println!("pre-training loss {:.3e} -> {:.3e}", h.rows[0].total, h.last().unwrap().total);

    let target = CdrParams { beta: 15.0, ..base };
    let truth = strang_cdr(&target, &spec, 256, 101)?;
    println!("frozen rel-L2 at beta=15: {:.4}", evaluate(&model, &target.to_mu(), &truth)?.rel_l2);
    let ft = FinetuneConfig { iters: 1000, counts, ..FinetuneConfig::default() };
    for (kind, rank) in [(AdapterKind::Mode, 4), (AdapterKind::Lora, 4)] {
        let mut m = model.clone();
        let h = finetune(&mut m, &spec, &target.to_mu(), &AdapterSpec::new(kind, rank), &ft)?;
        let e = evaluate(&m, &target.to_mu(), &truth)?;
        println!(
            "{kind:<5} {:>4} trainable  loss {:.3e} -> {:.3e}  rel-L2 {:.4}",
            m.trainable_count(),
            h.rows[0].total,
            h.last().unwrap().total,
            e.rel_l2
        );
    }
    Ok(())
}
