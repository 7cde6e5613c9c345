//! Efficiency scores and Pareto dominance over a small method table.

use modepinn::bench::{efficiency_mismatches, pareto_report, ParetoRow};

fn main() -> modepinn::Result<()> {
    // (method, trainable scalars, train loss, test loss, stored efficiency)
    let table = [
        ("svd", 600, 19.41, 19.51, 0.09),
        ("ia3", 600, 14.92, 17.04, 0.11),
        ("lora", 2300, 19.82, 19.81, 0.02),
        ("mode", 500, 2.34, 2.50, 1.20),
    ];
    let rows = table
        .iter()
        .map(|&(m, p, tr, te, _)| ParetoRow::new(m, p, tr, te, te))
        .collect::<modepinn::Result<Vec<_>>>()?;
    let report = pareto_report(&rows);
    report.write_csv(&mut std::io::stdout().lock())?;

    let stored: Vec<ParetoRow> = rows.iter().zip(&table).map(|(r, t)| ParetoRow { efficiency: t.4, ..r.clone() }).collect();
    for (m, got, want) in efficiency_mismatches(&stored, 0.1) {
        println!("stored efficiency for {m} is {got}, recomputed 1/(loss*kP) gives {want:.3}");
    }
    Ok(())
}
