//! Solution operators for the dbar-equation on products of planar domains.
//!
//! Two constructions are provided.  `solve` evaluates the weighted-kernel
//! operator: a sum over the admissible kernel trees of the matching order,
//! each term integrating a tree kernel against one data component with the
//! remaining coordinates frozen at the evaluation point.  It requires only
//! distance-type regularity of the factors and works for dbar-closed data on
//! the product itself.
//!
//! `solve_extension` evaluates the composition-style operator built from
//! one-variable Cauchy transforms over ambient factors and their
//! complement-domain variants: for data dbar-closed on an inner product
//! region (but merely differentiable on the larger ambient product) it
//! produces a solution on the inner region.  The recursion is
//!   T_m = S_m[f_m] + T_{m-1}[f'] - S_m T_{m-1}[d f'/d conj(z_m)]
//!         + S^c_m T_{m-1}[D],   D_j = d f_j/d conj(z_m) - d f_m/d conj(z_j),
//! where S^c is the complement transform; the final correction vanishes
//! identically when the data is closed on the whole ambient product.
//!
//! Both residual checkers approximate d/d conj(z_j) with a four-point
//! Wirtinger stencil.  In Monte Carlo mode the stencil is evaluated with
//! common random numbers so the difference does not amplify independent
//! sampling noise.

use std::rc::Rc;
use std::sync::OnceLock;
use std::time::Instant;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::{CExpr, TensorForm};
use crate::geometry::PlanarDomain;
use crate::kernels::operator_terms;
use crate::transforms::{
    cauchy, cauchy_complement, kernel_transform_mc, mc_combination, FactorRule, McConfig,
    McEstimate, StencilPoint, TransformContext,
};

/// A (0,1)-type data set on an n-fold product: one component per variable.
pub struct Form {
    components: Vec<CExpr>,
    tensors: Vec<Option<TensorForm>>,
}

impl Form {
    pub fn new(components: Vec<CExpr>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("a form needs at least one component".into()));
        }
        let n = components.len();
        for c in &components {
            if c.num_vars() > n {
                return Err(Error::Config(format!(
                    "component references variable z{} beyond the {n} factors",
                    c.num_vars()
                )));
            }
        }
        let tensors = components
            .iter()
            .map(|c| TensorForm::from_expr(c, n))
            .collect();
        Ok(Form {
            components,
            tensors,
        })
    }

    /// Components d u / d conj(z_j) of a potential; closed by construction.
    pub fn from_potential(u: &CExpr, n: usize) -> Result<Self> {
        Form::new((0..n).map(|j| u.wirtinger_bar(j).simplify()).collect())
    }

    pub fn n(&self) -> usize {
        self.components.len()
    }

    pub fn component(&self, j: usize) -> &CExpr {
        &self.components[j]
    }

    pub fn eval(&self, j: usize, x: &[Complex64]) -> Complex64 {
        self.components[j].eval(x)
    }

    /// Separable normal form of component j, or an error directing the
    /// caller to Monte Carlo mode.
    pub fn tensor(&self, j: usize) -> Result<&TensorForm> {
        self.tensors[j].as_ref().ok_or_else(|| {
            Error::Config(format!(
                "component {} is not tensor-decomposable; use Monte Carlo mode",
                j + 1
            ))
        })
    }

    pub fn is_separable(&self) -> bool {
        self.tensors.iter().all(|t| t.is_some())
    }
}

/// a*f + b*g, componentwise.  The solution operator is linear, so solving
/// the combination must match combining the solutions on a fixed grid.
pub fn linear_combination(a: Complex64, f: &Form, b: Complex64, g: &Form) -> Result<Form> {
    if f.n() != g.n() {
        return Err(Error::Config("component count mismatch".into()));
    }
    let ca = CExpr::constant(a);
    let cb = CExpr::constant(b);
    Form::new(
        (0..f.n())
            .map(|j| {
                CExpr::Add(
                    Box::new(CExpr::Mul(
                        Box::new(ca.clone()),
                        Box::new(f.component(j).clone()),
                    )),
                    Box::new(CExpr::Mul(
                        Box::new(cb.clone()),
                        Box::new(g.component(j).clone()),
                    )),
                )
                .simplify()
            })
            .collect(),
    )
}

/// Largest sampled | d f_j / d conj(z_i) - d f_i / d conj(z_j) | over the
/// given points; zero (symbolically) for the derivative family of a
/// potential.
pub fn closedness_defect(form: &Form, points: &[Vec<Complex64>]) -> f64 {
    let n = form.n();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dij = form.component(j).wirtinger_bar(i).simplify();
            let dji = form.component(i).wirtinger_bar(j).simplify();
            for z in points {
                worst = worst.max((dij.eval(z) - dji.eval(z)).norm());
            }
        }
    }
    worst
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMode {
    Tensor,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    pub resolution: usize,
    pub mode: SolveMode,
    pub samples: u64,
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            resolution: 64,
            mode: SolveMode::Tensor,
            samples: 200_000,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SolveOutput {
    pub value: Complex64,
    pub std_error: Option<f64>,
    pub terms: usize,
}

/// Evaluate the weighted-kernel solution operator at `z` using a shared
/// quadrature context (tensor mode).
pub fn solve_at(ctx: &TransformContext, form: &Form, z: &[Complex64]) -> Result<Complex64> {
    let n = ctx.num_factors();
    if form.n() != n || z.len() != n {
        return Err(Error::Config("form/point arity mismatch".into()));
    }
    let mut acc = Complex64::new(0.0, 0.0);
    for tree in operator_terms(n) {
        acc += ctx.kernel_transform(&tree, form.tensor(tree.root)?, z)?;
    }
    Ok(acc)
}

pub fn solve(
    domains: &[PlanarDomain],
    form: &Form,
    z: &[Complex64],
    opts: &SolveOptions,
) -> Result<SolveOutput> {
    let n = domains.len();
    if form.n() != n || z.len() != n {
        return Err(Error::Config("form/point arity mismatch".into()));
    }
    let terms = operator_terms(n);
    match opts.mode {
        SolveMode::Tensor => {
            let ctx = TransformContext::new(domains.to_vec(), opts.resolution);
            let value = solve_at(&ctx, form, z)?;
            Ok(SolveOutput {
                value,
                std_error: None,
                terms: terms.len(),
            })
        }
        SolveMode::MonteCarlo => {
            let mut value = Complex64::new(0.0, 0.0);
            let mut var = 0.0;
            for (ti, tree) in terms.iter().enumerate() {
                let cfg = McConfig::new(opts.samples, opts.seed).with_salt(ti as u64);
                let est =
                    kernel_transform_mc(domains, tree, form.component(tree.root), z, &cfg)?;
                value += est.value;
                var += est.std_error * est.std_error;
            }
            Ok(SolveOutput {
                value,
                std_error: Some(var.sqrt()),
                terms: terms.len(),
            })
        }
    }
}

/// Four-point central Wirtinger stencil for d/d conj(z_j):
/// (u(z+h) - u(z-h))/(4h) + i (u(z+ih) - u(z-ih))/(4h).
pub fn wirtinger_stencil(z: &[Complex64], j: usize, h: f64) -> Vec<StencilPoint> {
    let shifts = [
        (Complex64::new(h, 0.0), Complex64::new(0.25 / h, 0.0)),
        (Complex64::new(-h, 0.0), Complex64::new(-0.25 / h, 0.0)),
        (Complex64::new(0.0, h), Complex64::new(0.0, 0.25 / h)),
        (Complex64::new(0.0, -h), Complex64::new(0.0, -0.25 / h)),
    ];
    shifts
        .iter()
        .map(|&(dz, coeff)| {
            let mut zz = z.to_vec();
            zz[j] += dz;
            StencilPoint { z: zz, coeff }
        })
        .collect()
}

/// Default finite-difference step for a given tensor resolution: large
/// enough that quadrature error does not dominate the difference quotient.
pub fn default_fd_step(resolution: usize) -> f64 {
    (1.6 / resolution as f64).max(5e-4)
}

#[derive(Clone, Copy, Debug)]
pub struct Residual {
    pub value: Complex64,
    pub std_error: Option<f64>,
}

/// | d(T f)/d conj(z_j) - f_j | at z, tensor mode.  The context caches
/// factor rules, so the four stencil evaluations rebuild only the rules of
/// the shifted coordinate.
pub fn residual_at(
    ctx: &TransformContext,
    form: &Form,
    z: &[Complex64],
    j: usize,
    h: f64,
) -> Result<Residual> {
    let mut acc = Complex64::new(0.0, 0.0);
    for sp in wirtinger_stencil(z, j, h) {
        acc += sp.coeff * solve_at(ctx, form, &sp.z)?;
    }
    Ok(Residual {
        value: acc - form.eval(j, z),
        std_error: None,
    })
}

/// Monte Carlo residual with common random numbers across the stencil.
pub fn residual_mc(
    domains: &[PlanarDomain],
    form: &Form,
    z: &[Complex64],
    j: usize,
    h: f64,
    samples: u64,
    seed: u64,
) -> Result<Residual> {
    let stencil = wirtinger_stencil(z, j, h);
    let mut acc = Complex64::new(0.0, 0.0);
    let mut var = 0.0;
    for (ti, tree) in operator_terms(domains.len()).iter().enumerate() {
        let cfg = McConfig::new(samples, seed).with_salt(0x5eed ^ ti as u64);
        let est: McEstimate =
            mc_combination(domains, tree, form.component(tree.root), &stencil, z, &cfg)?;
        acc += est.value;
        var += est.std_error * est.std_error;
    }
    Ok(Residual {
        value: acc - form.eval(j, z),
        std_error: Some(var.sqrt()),
    })
}

// ---------------------------------------------------------------------------
// Composition-style extension operator.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceKind {
    /// One-variable Cauchy transform over the ambient factor.
    Ambient,
    /// Transform over ambient-minus-inner; holomorphic inside the inner set.
    Complement,
}

#[derive(Clone, Debug)]
pub struct CompositeTerm {
    pub sign: f64,
    pub ops: Vec<(usize, SliceKind)>,
    pub data: CExpr,
}

/// Unrolled terms of the extension recursion over the first `m` components.
fn extension_terms(components: &[CExpr], m: usize) -> Vec<CompositeTerm> {
    if m == 1 {
        return vec![CompositeTerm {
            sign: 1.0,
            ops: vec![(0, SliceKind::Ambient)],
            data: components[0].clone(),
        }];
    }
    let last = m - 1;
    let mut out = Vec::new();
    // S_m[f_m]
    out.push(CompositeTerm {
        sign: 1.0,
        ops: vec![(last, SliceKind::Ambient)],
        data: components[last].clone(),
    });
    // T_{m-1}[f']
    out.extend(extension_terms(components, last));
    // - S_m T_{m-1}[d f'/d conj(z_m)]
    let shifted: Vec<CExpr> = components[..last]
        .iter()
        .map(|c| c.wirtinger_bar(last).simplify())
        .collect();
    for mut t in extension_terms(&shifted, last) {
        t.sign = -t.sign;
        t.ops.push((last, SliceKind::Ambient));
        out.push(t);
    }
    // + S^c_m T_{m-1}[D],  D_j = d f_j/d conj(z_m) - d f_m/d conj(z_j)
    let defect: Vec<CExpr> = components[..last]
        .iter()
        .enumerate()
        .map(|(jj, c)| {
            CExpr::Add(
                Box::new(c.wirtinger_bar(last)),
                Box::new(CExpr::Neg(Box::new(components[last].wirtinger_bar(jj)))),
            )
            .simplify()
        })
        .collect();
    for mut t in extension_terms(&defect, last) {
        t.ops.push((last, SliceKind::Complement));
        out.push(t);
    }
    out
}

/// Ambient factors, inner factors, and quadrature resolution for the
/// extension operator.
pub struct ExtensionSetup {
    pub ambient: Vec<PlanarDomain>,
    pub inner: Vec<PlanarDomain>,
    pub resolution: usize,
}

impl ExtensionSetup {
    pub fn new(
        ambient: Vec<PlanarDomain>,
        inner: Vec<PlanarDomain>,
        resolution: usize,
    ) -> Result<Self> {
        if ambient.len() != inner.len() {
            return Err(Error::Config("ambient/inner arity mismatch".into()));
        }
        Ok(ExtensionSetup {
            ambient,
            inner,
            resolution,
        })
    }

    pub fn n(&self) -> usize {
        self.ambient.len()
    }

    pub fn terms(&self, form: &Form) -> Result<Vec<CompositeTerm>> {
        if form.n() != self.n() {
            return Err(Error::Config("form arity mismatch".into()));
        }
        if self.n() > 3 {
            return Err(Error::Config(
                "extension recursion implemented for up to three factors".into(),
            ));
        }
        let comps: Vec<CExpr> = (0..form.n()).map(|j| form.component(j).clone()).collect();
        Ok(extension_terms(&comps, self.n()))
    }
}

fn one_dim_transform(
    setup: &ExtensionSetup,
    kind: SliceKind,
    j: usize,
    g: impl Fn(Complex64) -> Complex64,
    zj: Complex64,
) -> Result<Complex64> {
    match kind {
        SliceKind::Ambient => cauchy(&setup.ambient[j], g, zj, setup.resolution),
        SliceKind::Complement => {
            cauchy_complement(&setup.ambient[j], &setup.inner[j], g, zj, setup.resolution)
        }
    }
}

/// Evaluate one composite term at z.  Separable data factorizes the nested
/// one-variable transforms into an ordinary product.
pub fn composite_term_value(
    setup: &ExtensionSetup,
    term: &CompositeTerm,
    z: &[Complex64],
) -> Result<Complex64> {
    let n = setup.n();
    let tf = TensorForm::from_expr(&term.data, n).ok_or_else(|| {
        Error::Config("extension data is not tensor-decomposable; refactor the form".into())
    })?;
    let mut total = Complex64::new(0.0, 0.0);
    for t in &tf.terms {
        let mut prod = t.coeff;
        for s in 0..n {
            let op = term.ops.iter().find(|(v, _)| *v == s).map(|(_, k)| *k);
            match op {
                None => {
                    if let Some(g) = &t.factors[s] {
                        prod *= g.eval_single(s, z[s]);
                    }
                }
                Some(kind) => {
                    let val = match &t.factors[s] {
                        Some(g) => {
                            one_dim_transform(setup, kind, s, |w| g.eval_single(s, w), z[s])?
                        }
                        None => one_dim_transform(
                            setup,
                            kind,
                            s,
                            |_| Complex64::new(1.0, 0.0),
                            z[s],
                        )?,
                    };
                    prod *= val;
                }
            }
            if prod.norm_sqr() == 0.0 {
                break;
            }
        }
        total += prod;
    }
    Ok(total * term.sign)
}

/// Extension-operator solution at `z` (a point of the inner product).
pub fn solve_extension(setup: &ExtensionSetup, form: &Form, z: &[Complex64]) -> Result<Complex64> {
    for (j, d) in setup.inner.iter().enumerate() {
        if !d.contains_open(z[j]) {
            return Err(Error::Config(format!(
                "evaluation point coordinate {} lies outside the inner factor",
                j + 1
            )));
        }
    }
    let mut acc = Complex64::new(0.0, 0.0);
    for term in setup.terms(form)? {
        acc += composite_term_value(setup, &term, z)?;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Interior mollification.

/// Normalization of the standard radial bump exp(-1/(1-|w|^2)) on the unit
/// disk: 1 / (pi * integral_0^1 exp(-1/t) dt).
fn bump_normalization() -> f64 {
    static C: OnceLock<f64> = OnceLock::new();
    *C.get_or_init(|| {
        let n = 4096;
        let h = 1.0 / n as f64;
        let f = |t: f64| if t <= 0.0 { 0.0 } else { (-1.0 / t).exp() };
        let mut s = f(0.0) + f(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(i as f64 * h);
        }
        1.0 / (std::f64::consts::PI * s * h / 3.0)
    })
}

/// Value of the unit mollifier at radius r.
pub fn bump(r: f64) -> f64 {
    if r >= 1.0 {
        0.0
    } else {
        bump_normalization() * (-1.0 / (1.0 - r * r)).exp()
    }
}

/// Radially-weighted polar quadrature of g over the unit disk against the
/// bump: integral g(w) bump(|w|) dA(w).  Simpson in r, trapezoid in angle.
fn bump_average(mut g: impl FnMut(Complex64) -> Complex64) -> Complex64 {
    let nr = 128;
    let na = 64;
    let hr = 1.0 / nr as f64;
    let ha = 2.0 * std::f64::consts::PI / na as f64;
    let mut acc = Complex64::new(0.0, 0.0);
    for ir in 0..=nr {
        let r = ir as f64 * hr;
        let chi = bump(r) * r;
        if chi == 0.0 {
            continue;
        }
        let wr = if ir == 0 || ir == nr {
            1.0
        } else if ir % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let mut ring = Complex64::new(0.0, 0.0);
        for ia in 0..na {
            let th = ia as f64 * ha;
            ring += g(Complex64::new(r * th.cos(), r * th.sin()));
        }
        acc += ring * (chi * wr);
    }
    acc * (hr / 3.0) * ha
}

/// A smooth unit-mass cutoff supported in the unit disk: the standard bump
/// rescaled to the disk D(center, radius).  Any center/radius with
/// |center| + radius <= 1 is admissible.  The radial choice (center 0)
/// averages harmonic functions exactly; an off-center choice has first
/// moment equal to `center`, so the mollification error for smooth data
/// scales linearly in the width, which makes convergence observable on
/// data the radial cutoff would reproduce exactly.
#[derive(Clone, Copy, Debug)]
pub struct Mollifier {
    pub center: Complex64,
    pub radius: f64,
}

impl Mollifier {
    pub fn radial() -> Self {
        Mollifier {
            center: Complex64::new(0.0, 0.0),
            radius: 1.0,
        }
    }

    pub fn offset() -> Self {
        Mollifier {
            center: Complex64::new(0.3, 0.0),
            radius: 0.6,
        }
    }

    /// Pointwise value of the cutoff (unit mass over the plane).
    pub fn chi(&self, w: Complex64) -> f64 {
        bump((w - self.center).norm() / self.radius) / (self.radius * self.radius)
    }

    /// First moment (the centroid); the analytic shift of mollified
    /// anti-linear data.
    pub fn first_moment(&self) -> Complex64 {
        self.center
    }

    /// Quadrature of the cutoff's total mass (should be 1).
    pub fn mass(&self) -> f64 {
        bump_average(|_| Complex64::new(1.0, 0.0)).re
    }

    /// (g * chi_eps)(z) = integral g(z - eps w) chi(w) dA(w).
    pub fn convolve(
        &self,
        mut g: impl FnMut(Complex64) -> Complex64,
        z: Complex64,
        eps: f64,
    ) -> Complex64 {
        let scale = eps * self.radius;
        let shift = z - eps * self.center;
        bump_average(|v| g(shift - scale * v))
    }

    /// Complex moments m[j][k] = integral w^j conj(w)^k chi(w) dA(w) for
    /// j, k <= deg, normalized so m[0][0] is exactly 1 (the quadrature's
    /// tiny mass defect would otherwise leak into every mollified
    /// constant).
    pub fn moments(&self, deg: u32) -> Vec<Vec<Complex64>> {
        let mass = bump_average(|_| Complex64::new(1.0, 0.0)).re;
        (0..=deg)
            .map(|j| {
                (0..=deg)
                    .map(|k| {
                        if j == 0 && k == 0 {
                            return Complex64::new(1.0, 0.0);
                        }
                        let m = bump_average(|u| {
                            let w = self.center + self.radius * u;
                            w.powu(j) * w.conj().powu(k)
                        });
                        m / mass
                    })
                    .collect()
            })
            .collect()
    }

    /// Exact mollification of expression data that is polynomial in the
    /// listed slots: every monomial z_v^a conj(z_v)^b turns into its
    /// convolution against chi_eps through the binomial expansion of
    /// (z - eps w)^a (conj z - eps conj w)^b and the cutoff's moments.
    /// Slots not listed pass through untouched; a listed slot under exp()
    /// is an error.
    pub fn convolve_expr(&self, e: &CExpr, eps: f64, vars: &[usize]) -> Result<CExpr> {
        fn binom(n: u32, k: u32) -> f64 {
            let mut v = 1.0;
            for i in 0..k {
                v = v * (n - i) as f64 / (i + 1) as f64;
            }
            v
        }
        let mut cur = e.clone();
        for &v in vars {
            let terms = cur.expand_in_var(v)?;
            let deg = terms
                .iter()
                .map(|((a, b), _)| (*a).max(*b))
                .max()
                .unwrap_or(0);
            let mom = self.moments(deg);
            let mut acc = CExpr::zero();
            for ((a, b), cf) in terms {
                for j in 0..=a {
                    for k in 0..=b {
                        let w = binom(a, j)
                            * binom(b, k)
                            * (-eps).powi((j + k) as i32)
                            * mom[j as usize][k as usize];
                        if w == Complex64::new(0.0, 0.0) {
                            continue;
                        }
                        let mono = CExpr::Mul(
                            Box::new(CExpr::Pow(Box::new(CExpr::Var(v)), a - j)),
                            Box::new(CExpr::Pow(Box::new(CExpr::ConjVar(v)), b - k)),
                        );
                        acc = CExpr::Add(
                            Box::new(acc),
                            Box::new(CExpr::Mul(
                                Box::new(CExpr::Mul(
                                    Box::new(CExpr::constant(w)),
                                    Box::new(cf.clone()),
                                )),
                                Box::new(mono),
                            )),
                        );
                    }
                }
            }
            cur = acc.simplify();
        }
        Ok(cur)
    }
}

/// Componentwise mollification of a whole data family, exact for
/// polynomial components.  `m` indexes the inner region where the result
/// lives (clearance above 1/m), so eps must stay below 1/m.
pub fn mollify_form(form: &Form, eps: f64, m: f64, moll: &Mollifier) -> Result<Form> {
    if !(eps > 0.0 && eps < 1.0 / m) {
        return Err(Error::Config(format!(
            "mollification width {eps} must lie in (0, 1/{m})"
        )));
    }
    let vars: Vec<usize> = (0..form.n()).collect();
    Form::new(
        (0..form.n())
            .map(|j| moll.convolve_expr(form.component(j), eps, &vars))
            .collect::<Result<Vec<_>>>()?,
    )
}

/// Mollification of a single-variable expression in its own variable.
pub fn mollify_single(
    g: &CExpr,
    var: usize,
    z: Complex64,
    eps: f64,
    moll: &Mollifier,
) -> Complex64 {
    moll.convolve(|w| g.eval_single(var, w), z, eps)
}

/// Mollification of a separable expression in every variable jointly;
/// factorizes into per-variable convolutions.
pub fn mollify_tensor(
    tf: &TensorForm,
    z: &[Complex64],
    eps: f64,
    moll: &Mollifier,
) -> Complex64 {
    let mut total = Complex64::new(0.0, 0.0);
    for t in &tf.terms {
        let mut prod = t.coeff;
        for (s, factor) in t.factors.iter().enumerate() {
            if let Some(g) = factor {
                prod *= mollify_single(g, s, z[s], eps, moll);
            }
        }
        total += prod;
    }
    total
}

// ---------------------------------------------------------------------------
// Report assembly.

/// "2", "4", ... or "inf" for the grid-max proxy of the sup norm.
pub fn p_label(p: f64) -> String {
    if p.is_infinite() {
        "inf".into()
    } else if p.fract() == 0.0 {
        format!("{}", p as i64)
    } else {
        format!("{p}")
    }
}

/// Equal-weight discrete norm over an evaluation grid; grid max for
/// p = infinity.  A proxy — ratios of two such norms on the same grid are
/// normalization-free.
pub fn grid_norm(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    if p.is_infinite() {
        values.iter().fold(0.0f64, |m, &v| m.max(v))
    } else {
        let mean = values.iter().map(|&v| v.powf(p)).sum::<f64>() / values.len() as f64;
        mean.powf(1.0 / p)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PointReport {
    pub z: Vec<[f64; 2]>,
    pub u: [f64; 2],
    pub u_std_error: Option<f64>,
    /// |dbar_j u - f_j| per component; empty for flagged points.
    pub residuals: Vec<f64>,
    pub residual_std_errors: Vec<f64>,
    /// Set when a coordinate clears the boundary by less than the
    /// finite-difference trust radius 2/resolution; such points report u
    /// but are excluded from residual statistics.
    pub flagged: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub dimension: usize,
    pub mode: String,
    pub resolution: usize,
    pub samples: Option<u64>,
    pub fd_step: f64,
    pub points: Vec<PointReport>,
    /// Sup of residual entries over unflagged points; absent when every
    /// point was flagged.
    pub residual_sup: Option<f64>,
    /// Grid-proxy norms of |u| over the unflagged evaluation points.
    pub u_norms: Vec<(String, f64)>,
    /// Grid-proxy norms of the data's pointwise Euclidean length.
    pub f_norms: Vec<(String, f64)>,
    /// Sampled max | dbar_i f_j - dbar_j f_i |; absent for one variable.
    pub closedness_defect: Option<f64>,
    pub closedness_warning: bool,
    /// Plain-rule node count per factor (tensor mode).
    pub node_counts: Vec<usize>,
    /// Worst per-factor quadrature area dropped by the rule builder.
    pub max_skipped_weight: f64,
    pub flagged_points: usize,
    /// Wall-clock duration; the only field exempt from byte
    /// reproducibility.
    pub elapsed_ms: u64,
}

/// Evaluate the solution, residuals, and norm proxies at a list of product
/// points and assemble the full report.
pub fn solve_report(
    domains: &[PlanarDomain],
    form: &Form,
    points: &[Vec<Complex64>],
    opts: &SolveOptions,
    ps: &[f64],
) -> Result<SolveReport> {
    solve_report_with_resolutions(domains, form, points, opts, ps, None)
}

/// `solve_report` with an optional per-factor quadrature resolution vector
/// (tensor mode); the finite-difference step and flag radii follow the
/// coarsest factor.
pub fn solve_report_with_resolutions(
    domains: &[PlanarDomain],
    form: &Form,
    points: &[Vec<Complex64>],
    opts: &SolveOptions,
    ps: &[f64],
    resolutions: Option<&[usize]>,
) -> Result<SolveReport> {
    let start = Instant::now();
    let n = domains.len();
    if form.n() != n {
        return Err(Error::Config(format!(
            "{}-component data on an {n}-fold product",
            form.n()
        )));
    }
    if points.is_empty() {
        return Err(Error::Config("no evaluation points".into()));
    }
    let res: Vec<usize> = match resolutions {
        Some(r) if r.len() != n => {
            return Err(Error::Config(format!(
                "{} resolutions for {n} factors",
                r.len()
            )));
        }
        Some(r) if r.iter().any(|&v| v == 0) => {
            return Err(Error::Config("resolution must be positive".into()));
        }
        Some(r) => r.to_vec(),
        None => vec![opts.resolution; n],
    };
    for z in points {
        if z.len() != n {
            return Err(Error::Config(format!(
                "evaluation point has {} coordinates, expected {n}",
                z.len()
            )));
        }
        for (j, &zj) in z.iter().enumerate() {
            if !domains[j].contains_open(zj) {
                return Err(Error::Config(format!(
                    "evaluation point coordinate {} = {zj} lies outside factor {}",
                    j + 1,
                    j + 1
                )));
            }
        }
    }
    let res_min = *res.iter().min().expect("n >= 1");
    let h = default_fd_step(res_min);
    let ctx = match opts.mode {
        SolveMode::Tensor => Some(TransformContext::with_resolutions(
            domains.to_vec(),
            res.clone(),
        )?),
        SolveMode::MonteCarlo => None,
    };

    let mut reports = Vec::with_capacity(points.len());
    let mut u_len = Vec::new();
    let mut f_len = Vec::new();
    let mut residual_sup: Option<f64> = None;
    for z in points {
        let flagged = z
            .iter()
            .enumerate()
            .any(|(j, &zj)| domains[j].distance(zj).value < 2.0 / res[j] as f64);
        let (u, u_se) = match (&ctx, opts.mode) {
            (Some(c), _) => (solve_at(c, form, z)?, None),
            (None, _) => {
                let out = solve(domains, form, z, opts)?;
                (out.value, out.std_error)
            }
        };
        let mut residuals = Vec::new();
        let mut residual_ses = Vec::new();
        if !flagged {
            for j in 0..n {
                let r = match &ctx {
                    Some(c) => residual_at(c, form, z, j, h)?,
                    None => residual_mc(domains, form, z, j, h, opts.samples, opts.seed)?,
                };
                let mag = r.value.norm();
                residual_sup = Some(residual_sup.unwrap_or(0.0).max(mag));
                residuals.push(mag);
                residual_ses.push(r.std_error.unwrap_or(0.0));
            }
            u_len.push(u.norm());
            f_len.push(
                (0..n)
                    .map(|j| form.eval(j, z).norm_sqr())
                    .sum::<f64>()
                    .sqrt(),
            );
        }
        reports.push(PointReport {
            z: z.iter().map(|c| [c.re, c.im]).collect(),
            u: [u.re, u.im],
            u_std_error: u_se,
            residuals,
            residual_std_errors: residual_ses,
            flagged,
        });
    }

    let u_norms: Vec<(String, f64)> = ps
        .iter()
        .map(|&p| (p_label(p), grid_norm(&u_len, p)))
        .collect();
    let f_norms: Vec<(String, f64)> = ps
        .iter()
        .map(|&p| (p_label(p), grid_norm(&f_len, p)))
        .collect();

    let (closedness, warn) = if n >= 2 {
        let d = closedness_defect(form, points);
        (Some(d), d > 1e-6)
    } else {
        (None, false)
    };

    let mut node_counts = Vec::new();
    let mut max_skip = 0.0f64;
    if let Some(c) = &ctx {
        for j in 0..n {
            let r = c.plain(j)?;
            node_counts.push(r.len());
            max_skip = max_skip.max(r.skipped_weight);
        }
    }
    let flagged_points = reports.iter().filter(|r| r.flagged).count();

    Ok(SolveReport {
        dimension: n,
        mode: match opts.mode {
            SolveMode::Tensor => "tensor".into(),
            SolveMode::MonteCarlo => "mc".into(),
        },
        resolution: res_min,
        samples: match opts.mode {
            SolveMode::Tensor => None,
            SolveMode::MonteCarlo => Some(opts.samples),
        },
        fd_step: h,
        points: reports,
        residual_sup,
        u_norms,
        f_norms,
        closedness_defect: closedness,
        closedness_warning: warn,
        node_counts,
        max_skipped_weight: max_skip,
        flagged_points,
        elapsed_ms: start.elapsed().as_millis() as u64,
    })
}

// ---------------------------------------------------------------------------
// Product-domain integration helpers (norms, closedness defects).

/// Integrate a real integrand over a product of factor rules.
pub fn product_integral(
    rules: &[Rc<FactorRule>],
    mut f: impl FnMut(&[Complex64]) -> f64,
) -> f64 {
    let k = rules.len();
    let mut idx = vec![0usize; k];
    let mut point = vec![Complex64::new(0.0, 0.0); k];
    let mut total = 0.0;
    'outer: loop {
        let mut weight = 1.0;
        for (slot, r) in rules.iter().enumerate() {
            point[slot] = r.nodes[idx[slot]];
            weight *= r.weights[idx[slot]];
        }
        total += weight * f(&point);
        for slot in (0..k).rev() {
            idx[slot] += 1;
            if idx[slot] < rules[slot].len() {
                continue 'outer;
            }
            idx[slot] = 0;
            if slot == 0 {
                break 'outer;
            }
        }
    }
    total
}

/// L^p norm over the product of the pointwise Euclidean length of the
/// component vector; p = infinity is approximated by the mesh maximum.
pub fn form_lp_norm(
    rules: &[Rc<FactorRule>],
    mut component: impl FnMut(usize, &[Complex64]) -> Complex64,
    n: usize,
    p: f64,
) -> f64 {
    if p.is_infinite() {
        let mut best = 0.0f64;
        product_integral(rules, |x| {
            let mut s = 0.0;
            for j in 0..n {
                s += component(j, x).norm_sqr();
            }
            best = best.max(s.sqrt());
            0.0
        });
        return best;
    }
    let integral = product_integral(rules, |x| {
        let mut s = 0.0;
        for j in 0..n {
            s += component(j, x).norm_sqr();
        }
        s.sqrt().powf(p)
    });
    integral.max(0.0).powf(1.0 / p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;
    use approx::assert_relative_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn one_variable_solve_matches_cauchy_transform() {
        let domains = vec![PlanarDomain::unit_disk()];
        let form = Form::new(vec![parse_expr("1").unwrap()]).unwrap();
        let z = [c(0.3, -0.2)];
        let out = solve(&domains, &form, &z, &SolveOptions::default()).unwrap();
        assert_eq!(out.terms, 1);
        assert!((out.value - z[0].conj()).norm() <= 5e-5);
    }

    #[test]
    fn one_variable_residual_small() {
        let domains = vec![PlanarDomain::unit_disk()];
        // f = z conj(z), not holomorphic, not radial-exact.
        let form = Form::new(vec![parse_expr("z1*conj(z1)").unwrap()]).unwrap();
        let ctx = TransformContext::new(domains, 64);
        let z = [c(0.25, 0.35)];
        let r = residual_at(&ctx, &form, &z, 0, default_fd_step(64)).unwrap();
        assert!(r.value.norm() <= 1e-2, "residual {}", r.value.norm());
    }

    #[test]
    fn two_variable_residual_small() {
        let domains = vec![PlanarDomain::unit_disk(), PlanarDomain::unit_disk()];
        let u = parse_expr("conj(z1)*conj(z2)").unwrap();
        let form = Form::from_potential(&u, 2).unwrap();
        let ctx = TransformContext::new(domains, 48);
        let z = [c(0.2, 0.1), c(-0.15, 0.3)];
        for j in 0..2 {
            let r = residual_at(&ctx, &form, &z, j, default_fd_step(48)).unwrap();
            assert!(
                r.value.norm() <= 5e-2,
                "component {j}: residual {}",
                r.value.norm()
            );
        }
    }

    #[test]
    fn mc_solve_agrees_with_tensor_solve() {
        let domains = vec![PlanarDomain::unit_disk(), PlanarDomain::unit_disk()];
        let u = parse_expr("conj(z1)*conj(z2)").unwrap();
        let form = Form::from_potential(&u, 2).unwrap();
        let z = [c(0.2, 0.1), c(-0.15, 0.3)];
        let tensor = solve(
            &domains,
            &form,
            &z,
            &SolveOptions {
                resolution: 48,
                ..Default::default()
            },
        )
        .unwrap();
        let mc = solve(
            &domains,
            &form,
            &z,
            &SolveOptions {
                mode: SolveMode::MonteCarlo,
                samples: 150_000,
                seed: 11,
                ..Default::default()
            },
        )
        .unwrap();
        let se = mc.std_error.unwrap();
        assert!(
            (tensor.value - mc.value).norm() <= 3.0 * se + 3e-3,
            "tensor {} vs mc {} +- {se}",
            tensor.value,
            mc.value
        );
    }

    #[test]
    fn extension_term_census() {
        let u = parse_expr("conj(z1)*conj(z2)*conj(z3)").unwrap();
        let form = Form::from_potential(&u, 3).unwrap();
        let comps: Vec<CExpr> = (0..form.n()).map(|j| form.component(j).clone()).collect();
        for (m, want) in [(1usize, 1usize), (2, 4), (3, 13)] {
            assert_eq!(extension_terms(&comps, m).len(), want);
        }
    }

    #[test]
    fn extension_solver_reproduces_potential_two_vars() {
        // Globally closed data: the complement correction vanishes and the
        // telescoping is exact, so T equals the potential itself.
        let ambient = vec![
            PlanarDomain::disk(c(0.0, 0.0), 2.0),
            PlanarDomain::disk(c(0.0, 0.0), 2.0),
        ];
        let inner = vec![PlanarDomain::unit_disk(), PlanarDomain::unit_disk()];
        let setup = ExtensionSetup::new(ambient, inner, 96).unwrap();
        let u = parse_expr("conj(z1)*conj(z2)").unwrap();
        let form = Form::from_potential(&u, 2).unwrap();
        for &(a, b) in &[(0.3, 0.2), (-0.4, 0.1)] {
            let z = [c(a, b), c(b, -a)];
            let got = solve_extension(&setup, &form, &z).unwrap();
            let want = z[0].conj() * z[1].conj();
            assert!((got - want).norm() <= 2e-3, "z={z:?} got={got} want={want}");
        }
    }

    #[test]
    fn extension_solver_reproduces_potential_three_vars() {
        let ambient = vec![PlanarDomain::disk(c(0.0, 0.0), 2.0); 3];
        let inner = vec![PlanarDomain::unit_disk(); 3];
        let setup = ExtensionSetup::new(ambient, inner, 64).unwrap();
        let u = parse_expr("conj(z1)*conj(z2)*conj(z3)").unwrap();
        let form = Form::from_potential(&u, 3).unwrap();
        let z = [c(0.3, 0.1), c(-0.2, 0.25), c(0.15, -0.3)];
        let got = solve_extension(&setup, &form, &z).unwrap();
        let want = z[0].conj() * z[1].conj() * z[2].conj();
        assert!((got - want).norm() <= 6e-3, "got={got} want={want}");
    }

    #[test]
    fn mollifier_normalization_and_moment() {
        // Constant: reproduced exactly.  |w|^2: shifted by eps^2 times the
        // second moment of the bump, computed independently below.
        let one = parse_expr("1").unwrap();
        let got = mollify_single(&one, 0, c(0.4, -0.3), 0.25, &Mollifier::radial());
        assert_relative_eq!(got.re, 1.0, max_relative = 1e-9);
        assert!(got.im.abs() <= 1e-12);

        let m2 = {
            // 2 pi c * integral r^3 exp(-1/(1-r^2)) dr via Simpson.
            let n = 4096;
            let h = 1.0 / n as f64;
            let f = |r: f64| {
                if r >= 1.0 {
                    0.0
                } else {
                    r * r * r * (-1.0 / (1.0 - r * r)).exp()
                }
            };
            let mut s = f(0.0) + f(1.0);
            for i in 1..n {
                s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
            }
            2.0 * std::f64::consts::PI * bump_normalization() * s * h / 3.0
        };
        let sq = parse_expr("z1*conj(z1)").unwrap();
        let z = c(0.4, -0.3);
        let eps = 0.2;
        let got = mollify_single(&sq, 0, z, eps, &Mollifier::radial());
        let want = z.norm_sqr() + eps * eps * m2;
        assert_relative_eq!(got.re, want, max_relative = 1e-8);
        assert!(got.im.abs() <= 1e-10);
    }

    #[test]
    fn mollifier_fixes_harmonic_functions() {
        // Mean value property: radial averaging reproduces conj(z) exactly.
        let g = parse_expr("conj(z1)").unwrap();
        let z = c(-0.2, 0.5);
        for &eps in &[0.3, 0.1, 0.02] {
            let got = mollify_single(&g, 0, z, eps, &Mollifier::radial());
            assert!((got - z.conj()).norm() <= 1e-8, "eps={eps} got={got}");
        }
    }

    #[test]
    fn offset_mollifier_shifts_antilinear_data() {
        // With first moment a, (conj * chi_eps)(z) = conj(z) - eps*conj(a):
        // an exactly known, strictly eps-dependent mollification error.
        let moll = Mollifier::offset();
        assert!((moll.mass() - 1.0).abs() <= 1e-8, "mass {}", moll.mass());
        let g = parse_expr("conj(z1)").unwrap();
        let z = c(0.1, 0.4);
        for &eps in &[0.1, 0.05, 0.025] {
            let got = mollify_single(&g, 0, z, eps, &moll);
            let want = z.conj() - eps * moll.first_moment().conj();
            assert!((got - want).norm() <= 1e-8, "eps={eps} got={got} want={want}");
        }
    }

    #[test]
    fn exact_expression_mollification_matches_quadrature() {
        let moll = Mollifier::offset();
        let eps = 0.15;
        // Mixed-degree single-variable data.
        let g = parse_expr("conj(z1)^2 + z1*conj(z1) + 3").unwrap();
        let ge = moll.convolve_expr(&g, eps, &[0]).unwrap();
        for &(x, y) in &[(0.3, -0.2), (-0.5, 0.1)] {
            let z = [c(x, y)];
            let numeric = mollify_single(&g, 0, z[0], eps, &moll);
            let exact = ge.eval(&z);
            assert!(
                (numeric - exact).norm() <= 1e-8,
                "numeric {numeric} vs exact {exact}"
            );
        }
        // Constants survive untouched (unit-mass normalization is exact).
        let konst = parse_expr("2.5").unwrap();
        let ke = moll.convolve_expr(&konst, eps, &[0]).unwrap();
        assert_eq!(ke, CExpr::Const(c(2.5, 0.0)));
        // Exponential in a mollified slot is rejected; in a spectator slot
        // it passes through.
        let e1 = parse_expr("exp(conj(z1))").unwrap();
        assert!(moll.convolve_expr(&e1, eps, &[0]).is_err());
        let e2 = parse_expr("exp(z2)*conj(z1)").unwrap();
        assert!(moll.convolve_expr(&e2, eps, &[0]).is_ok());
    }

    #[test]
    fn mollified_family_stays_closed_and_respects_width_cap() {
        let u = parse_expr("conj(z1)*conj(z2)").unwrap();
        let form = Form::from_potential(&u, 2).unwrap();
        let moll = Mollifier::offset();
        let fe = mollify_form(&form, 0.1, 4.0, &moll).unwrap();
        let pts = vec![
            vec![c(0.2, 0.1), c(-0.3, 0.2)],
            vec![c(-0.1, -0.4), c(0.25, 0.3)],
        ];
        assert!(closedness_defect(&fe, &pts) <= 1e-12);
        // Anti-linear components shift by exactly -eps * conj(center).
        let want = pts[0][1].conj() - 0.1 * moll.first_moment().conj();
        let got = fe.eval(0, &pts[0]);
        assert!((got - want).norm() <= 1e-10, "got {got} want {want}");
        // Width at or above the inner-region clearance is refused.
        assert!(mollify_form(&form, 0.25, 4.0, &moll).is_err());
        assert!(mollify_form(&form, 0.3, 4.0, &moll).is_err());
    }

    #[test]
    fn solve_is_linear_on_a_fixed_grid() {
        let domains = vec![PlanarDomain::unit_disk(), PlanarDomain::unit_disk()];
        let ctx = TransformContext::new(domains, 24);
        let f = Form::from_potential(&parse_expr("conj(z1)*conj(z2)").unwrap(), 2).unwrap();
        let g = Form::from_potential(&parse_expr("conj(z1)^2").unwrap(), 2).unwrap();
        let (a, b) = (c(0.3, 0.0), c(2.0, -1.0));
        let combo = linear_combination(a, &f, b, &g).unwrap();
        let z = [c(0.2, 0.3), c(-0.4, 0.1)];
        let lhs = solve_at(&ctx, &combo, &z).unwrap();
        let rhs =
            a * solve_at(&ctx, &f, &z).unwrap() + b * solve_at(&ctx, &g, &z).unwrap();
        assert!(
            (lhs - rhs).norm() <= 1e-13 * rhs.norm().max(1.0),
            "lhs {lhs} rhs {rhs}"
        );
    }

    #[test]
    fn swapping_labels_swaps_arguments() {
        let domains = vec![PlanarDomain::unit_disk(), PlanarDomain::unit_disk()];
        let ctx = TransformContext::new(domains, 32);
        let u = parse_expr("conj(z1)^2*conj(z2)").unwrap();
        let us = parse_expr("conj(z2)^2*conj(z1)").unwrap();
        let form = Form::from_potential(&u, 2).unwrap();
        let swapped = Form::from_potential(&us, 2).unwrap();
        let z = [c(0.25, 0.1), c(-0.3, 0.2)];
        let zs = [z[1], z[0]];
        let a = solve_at(&ctx, &form, &z).unwrap();
        let b = solve_at(&ctx, &swapped, &zs).unwrap();
        assert!((a - b).norm() <= 1e-12 * a.norm().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn report_flags_near_boundary_points() {
        let domains = vec![PlanarDomain::unit_disk()];
        let form = Form::new(vec![parse_expr("conj(z1)").unwrap()]).unwrap();
        let opts = SolveOptions {
            resolution: 32,
            ..SolveOptions::default()
        };
        let points = vec![
            vec![c(0.2, -0.1)],
            vec![c(0.0, 0.4)],
            vec![c(0.97, 0.0)], // clearance 0.03 < 2/32
        ];
        let rep = solve_report(&domains, &form, &points, &opts, &[2.0, f64::INFINITY]).unwrap();
        assert_eq!(rep.flagged_points, 1);
        assert!(rep.points[2].flagged && rep.points[2].residuals.is_empty());
        assert!(rep.residual_sup.unwrap() <= 2e-2, "{:?}", rep.residual_sup);
        assert_eq!(rep.u_norms.len(), 2);
        assert!(rep.u_norms[0].1 > 0.0);
        assert!(rep.closedness_defect.is_none());
        assert_eq!(rep.node_counts.len(), 1);
        assert!(rep.max_skipped_weight <= 1e-9 * std::f64::consts::PI);
        // Points outside the domain are a configuration error.
        let bad = vec![vec![c(1.5, 0.0)]];
        assert!(solve_report(&domains, &form, &bad, &opts, &[2.0]).is_err());
    }

    #[test]
    fn extension_defect_terms_vanish_pointwise_for_closed_data() {
        let u = parse_expr("conj(z1)*conj(z2)*conj(z3)").unwrap();
        let form = Form::from_potential(&u, 3).unwrap();
        let comps: Vec<CExpr> = (0..3).map(|j| form.component(j).clone()).collect();
        let pts = [
            [c(0.2, 0.1), c(-0.3, 0.4), c(0.5, -0.2)],
            [c(-0.6, 0.3), c(0.1, 0.1), c(-0.2, -0.5)],
        ];
        let mut complement_terms = 0;
        for term in extension_terms(&comps, 3) {
            if term.ops.iter().any(|(_, k)| *k == SliceKind::Complement) {
                complement_terms += 1;
                for z in &pts {
                    assert!(
                        term.data.eval(z).norm() <= 1e-14,
                        "defect data nonzero at {z:?}"
                    );
                }
            }
        }
        assert!(complement_terms > 0);
    }

    #[test]
    fn product_integral_matches_area_product() {
        let ctx = TransformContext::new(
            vec![PlanarDomain::unit_disk(), PlanarDomain::rectangle(0.0, 0.0, 2.0, 1.0)],
            24,
        );
        let rules = vec![ctx.plain(0).unwrap(), ctx.plain(1).unwrap()];
        let got = product_integral(&rules, |_| 1.0);
        let want = std::f64::consts::PI * 2.0;
        assert_relative_eq!(got, want, max_relative = 1e-6);
    }

    #[test]
    fn lp_norm_of_constant_form() {
        let ctx = TransformContext::new(
            vec![PlanarDomain::unit_disk(), PlanarDomain::unit_disk()],
            24,
        );
        let rules = vec![ctx.plain(0).unwrap(), ctx.plain(1).unwrap()];
        // Components (1, 0): pointwise length 1, so the L^p norm is the
        // product area to the 1/p.
        let norm = form_lp_norm(
            &rules,
            |j, _| {
                if j == 0 {
                    c(1.0, 0.0)
                } else {
                    c(0.0, 0.0)
                }
            },
            2,
            2.0,
        );
        let area = std::f64::consts::PI * std::f64::consts::PI;
        assert_relative_eq!(norm, area.sqrt(), max_relative = 1e-6);
        let inf = form_lp_norm(&rules, |_, _| c(0.6, 0.8), 2, f64::INFINITY);
        assert_relative_eq!(inf, 2.0f64.sqrt(), max_relative = 1e-9);
    }
}
