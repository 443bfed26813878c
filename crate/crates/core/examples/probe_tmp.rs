//! Scratch probe (deleted after use).

use num_complex::Complex64;
use pompeiu::expr::parse_expr;
use pompeiu::geometry::PlanarDomain;
use pompeiu::solver::{default_fd_step, residual_at, Form};
use pompeiu::transforms::TransformContext;
use std::time::Instant;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let domains = vec![PlanarDomain::unit_disk(), PlanarDomain::unit_disk()];
    let pot = parse_expr("conj(z1)*conj(z2) + exp(z1)*conj(z2)^2")?;
    let form = Form::from_potential(&pot, 2)?;
    let points = [
        [Complex64::new(0.1, 0.2), Complex64::new(-0.3, 0.1)],
        [Complex64::new(-0.4, -0.2), Complex64::new(0.2, 0.35)],
        [Complex64::new(0.0, 0.0), Complex64::new(0.45, -0.3)],
    ];
    for &res in &[64usize, 128] {
        let ctx = TransformContext::new(domains.clone(), res);
        let h = default_fd_step(res);
        let start = Instant::now();
        let mut sup: f64 = 0.0;
        for z in &points {
            for j in 0..2 {
                let r = residual_at(&ctx, &form, z, j, h)?;
                println!("res {res} z1={:?} j={j}: residual {:.4e}", z[0], r.value.norm());
                sup = sup.max(r.value.norm());
            }
        }
        println!(
            "res {res}: sup residual {:.4e}  elapsed {:.1}s",
            sup,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
