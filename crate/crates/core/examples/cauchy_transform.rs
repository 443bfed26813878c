//! One-variable Cauchy transforms against closed forms.
//!
//! On a disk centered at the origin the transform of the constant 1 is
//! exactly conj(z), and the transform of |w|^2 is z*conj(z)^2/2.  Both are
//! checked on a grid, then the complement transform (over an annulus) is
//! shown to be holomorphic inside the hole.

use num_complex::Complex64;
use pompeiu::geometry::PlanarDomain;
use pompeiu::transforms::{cauchy, cauchy_complement};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let disk = PlanarDomain::unit_disk();
    let resolution = 96;

    println!("cauchy(1) vs conj(z) on the unit disk, resolution {resolution}");
    let mut worst = 0.0f64;
    for z in disk.interior_samples(5, 0.2) {
        let got = cauchy(&disk, |_| Complex64::new(1.0, 0.0), z, resolution)?;
        let rel = (got - z.conj()).norm() / z.conj().norm().max(1e-9);
        worst = worst.max(rel);
    }
    println!("  worst relative error: {worst:.3e}");

    println!("cauchy(|w|^2) vs z*conj(z)^2/2");
    let mut worst2 = 0.0f64;
    for z in disk.interior_samples(5, 0.2) {
        let got = cauchy(&disk, |w| Complex64::new(w.norm_sqr(), 0.0), z, resolution)?;
        let want = z * z.conj() * z.conj() / 2.0;
        worst2 = worst2.max((got - want).norm());
    }
    println!("  worst absolute error: {worst2:.3e}");

    // Transform over {1 < |w| < 2} of a function holomorphic across the
    // hole: the result extends holomorphically to the hole, so its Wirtinger
    // dbar-derivative there vanishes.
    let outer = PlanarDomain::disk(Complex64::new(0.0, 0.0), 2.0);
    let inner = PlanarDomain::unit_disk();
    let g = |w: Complex64| (Complex64::new(3.0, 0.0) - w).inv();
    let z = Complex64::new(0.3, -0.2);
    let h = 1e-4;
    let f = |z| cauchy_complement(&outer, &inner, g, z, resolution);
    let dx = (f(z + h)? - f(z - h)?) / (2.0 * h);
    let dy = (f(z + Complex64::new(0.0, h))? - f(z - Complex64::new(0.0, h))?) / (2.0 * h);
    let dbar = (dx + Complex64::new(0.0, 1.0) * dy) / 2.0;
    println!("complement transform inside the hole:");
    println!("  value at z = {z}: {}", f(z)?);
    println!("  closed form 1/(z-3):  {}", (z - Complex64::new(3.0, 0.0)).inv());
    println!("  |dbar| (finite differences): {:.3e}", dbar.norm());
    Ok(())
}
