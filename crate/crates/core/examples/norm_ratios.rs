//! Grid-norm ratios ||u||_p / ||f||_p across a family of right-hand sides.
//!
//! For each closed data family member on the bidisk the solution is
//! evaluated on a product grid and compared against the data in the same
//! discrete L^p norm.  The interesting output is the spread of the ratios:
//! they vary with the data but stay of unit size, which is what a bounded
//! solution operator looks like from the outside.

use pompeiu::analysis::{norm_ratio_experiment, standard_form_family};
use pompeiu::geometry::PlanarDomain;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let domain = PlanarDomain::unit_disk();
    let family = standard_form_family(2)?;
    let ps = [2.0, 4.0, f64::INFINITY];
    let rows = norm_ratio_experiment(&domain, 2, &ps, &family, 24)?;

    println!(
        "{:<26} {:>4} {:>12} {:>12} {:>8}",
        "data", "p", "||u||_p", "||f||_p", "ratio"
    );
    let mut max_ratio = 0.0f64;
    for row in &rows {
        if row.skipped {
            println!("{:<26} {:>4} {:>12} {:>12} {:>8}", row.label, row.p, "-", "-", "skip");
            continue;
        }
        let r = row.ratio.unwrap();
        max_ratio = max_ratio.max(r);
        println!(
            "{:<26} {:>4} {:>12.5} {:>12.5} {:>8.4}",
            row.label, row.p, row.u_norm, row.f_norm, r
        );
    }
    println!("\nmax ratio over the family: {max_ratio:.4}");
    Ok(())
}
