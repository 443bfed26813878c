//! Interior mollification of the data family.
//!
//! The smooth cutoff has unit mass and sits inside the unit disk, so the
//! mollified data f^eps lives on the 1/m-inset region whenever eps < 1/m.
//! For polynomial data the convolution is carried out exactly through the
//! cutoff's complex moments.  With the off-center cutoff, mollifying
//! conj(z) shifts it by -eps * conj(center), so the L^2 distance to the
//! original decays exactly linearly in eps.

use num_complex::Complex64;
use pompeiu::expr::parse_expr;
use pompeiu::geometry::{build_rule, shrink, PlanarDomain};
use pompeiu::solver::{mollify_form, Form, Mollifier};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let moll = Mollifier::offset();
    println!(
        "cutoff: center {}, radius {}, quadrature mass {:.12}",
        moll.center,
        moll.radius,
        moll.mass()
    );

    let m = 4.0;
    let inner = shrink(&PlanarDomain::unit_disk(), m)?
        .exact
        .expect("disk insets are disks");
    let rule = build_rule(&inner, 96, None)?;

    let potential = parse_expr("conj(z1)*conj(z2)")?;
    let form = Form::from_potential(&potential, 2)?;

    println!(
        "\n{:>8}  {:>22}  {:>14}  {:>14}",
        "eps", "shift of f_1", "L2 distance", "eps*|c|*sqrt(A)"
    );
    let area = rule.total_weight();
    for eps in [0.1, 0.05, 0.025] {
        let fe = mollify_form(&form, eps, m, &moll)?;
        // Component 1 of the original is conj(z2); its mollification is
        // conj(z2) - eps*conj(center), a pure constant shift.
        let shift = fe.eval(0, &[Complex64::new(0.0, 0.0); 2]);
        let l2 = rule
            .integrate_real(|w| {
                let z = [Complex64::new(0.0, 0.0), w];
                (fe.eval(0, &z) - w.conj()).norm_sqr()
            })
            .sqrt();
        let predicted = eps * moll.center.norm() * area.sqrt();
        println!(
            "{eps:>8}  {:>10.4} {:>+10.4}i  {:>14.6e}  {:>14.6e}",
            shift.re, shift.im, l2, predicted
        );
    }

    // eps at or above 1/m is rejected: the mollified data would need values
    // of f outside the original product domain.
    match mollify_form(&form, 0.3, m, &moll) {
        Err(e) => println!("\neps = 0.3 with m = 4 rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
