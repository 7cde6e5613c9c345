//! The three deadlock diagnostics at a toy budget, written as long-format CSV.

use modepinn::bench::{deadlock_diagnostics, write_long_csv, Diagnostic, DiagnosticsConfig};
use modepinn::model::{build_p2inn, ArchConfig};
use modepinn::pde::{CdrParams, Counts, IcKind, ProblemSpec};
use modepinn::train::{pretrain, FinetuneConfig, PretrainConfig, SourceDistribution};

fn main() -> modepinn::Result<()> {
    let spec = ProblemSpec::cdr(IcKind::Sinusoid);
    let base = CdrParams::new(0.0, 0.01, 0.0)?;
    let counts = Counts { n_f: 100, n_u: 25, n_b: 25 };
    let mut model = build_p2inn(&ArchConfig::desk(3), 0)?;
    let dist = SourceDistribution::cdr_range(base, 0, 1.0, 10.0, 1.0)?;
    pretrain(&mut model, &spec, &dist, &PretrainConfig { iters: 300, batch_equations: 4, counts, ..PretrainConfig::default() })?;

    let mut cfg = DiagnosticsConfig::desk(spec);
    cfg.seeds = vec![0];
    cfg.base = base;
    cfg.finetune = FinetuneConfig { iters: 200, counts, ..FinetuneConfig::default() };
    cfg.grid = (128, 51);
    let report = deadlock_diagnostics(&model, &cfg, &[Diagnostic::Locking, Diagnostic::Truncation, Diagnostic::Affine])?;
    for (d, r) in &report.runs {
        println!("{d:?} {:<16} {:<10} rel-L2 {:.4} final loss {:.3e}", r.method, r.setting, r.error.rel_l2, r.final_loss);
    }
    write_long_csv(&report.records(), &mut std::io::stdout().lock())?;
    Ok(())
}
