//! Solve dbar u = f on a product of two planar domains with a manufactured
//! right-hand side, then check the answer by finite differences.
//!
//! The data comes from the potential u = conj(z1) conj(z2) + exp(z1) conj(z2)^2,
//! so f_j = du/dconj(z_j) is closed by construction and the residual
//! | d(T f)/dconj(z_j) - f_j | should shrink as the quadrature refines.

use num_complex::Complex64;
use pompeiu::expr::parse_expr;
use pompeiu::geometry::PlanarDomain;
use pompeiu::solver::{default_fd_step, residual_at, Form};
use pompeiu::transforms::TransformContext;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let domains = vec![
        PlanarDomain::unit_disk(),
        PlanarDomain::rectangle(-1.0, -1.0, 1.0, 1.0),
    ];
    let potential = parse_expr("conj(z1)*conj(z2) + exp(z1)*conj(z2)^2")?;
    let form = Form::from_potential(&potential, 2)?;

    let points = vec![
        vec![Complex64::new(0.31, -0.12), Complex64::new(-0.40, 0.25)],
        vec![Complex64::new(-0.22, 0.35), Complex64::new(0.11, -0.47)],
    ];

    println!("{:>10}  {:>12}  {:>12}", "resolution", "sup residual", "fd step");
    for resolution in [24usize, 48] {
        let ctx = TransformContext::new(domains.clone(), resolution);
        let h = default_fd_step(resolution);
        let mut sup = 0.0f64;
        for z in &points {
            for j in 0..2 {
                let r = residual_at(&ctx, &form, z, j, h)?;
                sup = sup.max(r.value.norm());
            }
        }
        println!("{resolution:>10}  {sup:>12.4e}  {h:>12.4e}");
    }
    Ok(())
}
