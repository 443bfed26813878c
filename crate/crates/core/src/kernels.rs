//! Integral kernels for the product-domain solution operators.
//!
//! A kernel is indexed by a rooted tree over the factor variables: a root
//! slot plus ordered groups I_1, ..., I_l, where every group carries one
//! parent pointer into the previous group (group 1 points at the root).
//! Each non-root member i contributes a factor coupling it to its group's
//! parent p through
//!     tau_{p,i}(z,w) = |z_p - w_p|^2 delta_p(w_p) + |z_i - w_i|^2 delta_i(w_i),
//! and the whole kernel is built by two extension moves from the plain
//! Cauchy kernel 1/(z_root - w_root):
//!
//! * keep-root: adjoin a new member nu to I_1,
//! * new-root: make nu the root and push the old groups down one level.
//!
//! Both moves update the pair (V, D) where V is the kernel value and
//! D = dV/d(conj w_root); the solver needs V and the bound checks need both.
//! Building blocks, writing d_x = z_x - w_x, q_x = |d_x|^2 delta_x,
//! u_x = -conj(d_x) delta_x, G_x = delta_x - conj(d_x) * (d delta_x / d conj w_x):
//!
//! * pair kernel rooted at j with member n:   S = u_j G_n / tau^2,
//! * its root derivative:                     S' = (q_n - q_j) G_n G_j / tau^3,
//! * the keep-root multiplier:                A = -q_j G_n / tau^2 = d_j S,
//! * the transfer coefficient:                P = q_j / (d_n tau).
//!
//! keep-root(nu):  V' = A V,                 D' = d_j (S' V + S D)
//! new-root(nu):   V' = d_j S_swap V + P D,  D' = d_j S'_swap V - A D
//! where the "swap" quantities are the pair kernel rooted at nu with member j.
//! All identities are locked by finite-difference tests and by the residual
//! tests in the solver module.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PlanarDomain, LIPSCHITZ_CAP};

/// Boundary-distance data of one factor at one point.
#[derive(Clone, Copy, Debug)]
pub struct FactorPoint {
    pub delta: f64,
    /// d delta / d(conj w).
    pub dbar: Complex64,
}

impl FactorPoint {
    pub fn at(domain: &PlanarDomain, w: Complex64) -> Self {
        let e = domain.distance(w);
        FactorPoint {
            delta: e.value,
            dbar: e.wirtinger,
        }
    }
}

pub fn factor_points(domains: &[PlanarDomain], w: &[Complex64]) -> Vec<FactorPoint> {
    domains
        .iter()
        .zip(w)
        .map(|(d, &p)| FactorPoint::at(d, p))
        .collect()
}

/// tau coupling of slots i and j.
pub fn tau_pair(
    zi: Complex64,
    wi: Complex64,
    delta_i: f64,
    zj: Complex64,
    wj: Complex64,
    delta_j: f64,
) -> f64 {
    (zi - wi).norm_sqr() * delta_i + (zj - wj).norm_sqr() * delta_j
}

pub fn tau_on(
    domains: &[PlanarDomain],
    z: &[Complex64],
    w: &[Complex64],
    i: usize,
    j: usize,
) -> f64 {
    tau_pair(
        z[i],
        w[i],
        domains[i].distance(w[i]).value,
        z[j],
        w[j],
        domains[j].distance(w[j]).value,
    )
}

/// Kernel value together with its derivative in conj(w_root).
#[derive(Clone, Copy, Debug, Default)]
pub struct KernelValue {
    pub value: Complex64,
    pub droot: Complex64,
}

/// All pairwise quantities of a (root j, member n) coupling.
struct PairVals {
    dj: Complex64,
    s: Complex64,        // pair kernel rooted at j
    sd: Complex64,       // its d/d(conj w_j)
    a: Complex64,        // keep-root multiplier
    s_swap: Complex64,   // pair kernel rooted at n
    sd_swap: Complex64,  // its d/d(conj w_n)
    p: Complex64,        // transfer coefficient q_j/(d_n tau)
}

const TAU_FLOOR: f64 = 1e-300;

fn pair_vals(
    zj: Complex64,
    wj: Complex64,
    fj: FactorPoint,
    zn: Complex64,
    wn: Complex64,
    fnu: FactorPoint,
) -> Option<PairVals> {
    let dj = zj - wj;
    let dn = zn - wn;
    let qj = dj.norm_sqr() * fj.delta;
    let qn = dn.norm_sqr() * fnu.delta;
    let tau = qj + qn;
    if tau < TAU_FLOOR || dn.norm_sqr() < TAU_FLOOR {
        return None;
    }
    let gj = fj.delta - dj.conj() * fj.dbar;
    let gn = fnu.delta - dn.conj() * fnu.dbar;
    let uj = -dj.conj() * fj.delta;
    let un = -dn.conj() * fnu.delta;
    let inv_tau = 1.0 / tau;
    let inv_tau2 = inv_tau * inv_tau;
    let inv_tau3 = inv_tau2 * inv_tau;
    Some(PairVals {
        dj,
        s: uj * gn * inv_tau2,
        sd: gn * gj * ((qn - qj) * inv_tau3),
        a: gn * (-qj * inv_tau2),
        s_swap: un * gj * inv_tau2,
        sd_swap: gj * gn * ((qj - qn) * inv_tau3),
        p: qj / (dn * tau),
    })
}

/// A^{nu}_{j,nu}: the keep-root multiplier attaching slot `diff` to the
/// kernel rooted at slot `other`.
pub fn a_kernel(
    domains: &[PlanarDomain],
    z: &[Complex64],
    w: &[Complex64],
    other: usize,
    diff: usize,
) -> Complex64 {
    let fj = FactorPoint::at(&domains[other], w[other]);
    let fnu = FactorPoint::at(&domains[diff], w[diff]);
    match pair_vals(z[other], w[other], fj, z[diff], w[diff], fnu) {
        Some(p) => p.a,
        None => Complex64::new(0.0, 0.0),
    }
}

/// The order-1 kernel rooted at `root` with single member `other`, plus its
/// root derivative.
pub fn s_pair(
    domains: &[PlanarDomain],
    z: &[Complex64],
    w: &[Complex64],
    root: usize,
    other: usize,
) -> KernelValue {
    let fj = FactorPoint::at(&domains[root], w[root]);
    let fnu = FactorPoint::at(&domains[other], w[other]);
    match pair_vals(z[root], w[root], fj, z[other], w[other], fnu) {
        Some(p) => KernelValue {
            value: p.s,
            droot: p.sd,
        },
        None => KernelValue::default(),
    }
}

/// One group of a kernel tree; `parent` lies in the previous group (or is
/// the root for the first group).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub parent: usize,
    pub members: Vec<usize>,
}

/// Rooted kernel tree; `groups` is the ordered list I_1, ..., I_l.  An empty
/// group list denotes the plain Cauchy kernel in the root slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelTree {
    pub root: usize,
    pub groups: Vec<Group>,
}

impl KernelTree {
    pub fn cauchy(root: usize) -> Self {
        KernelTree {
            root,
            groups: Vec::new(),
        }
    }

    /// Number of non-root variables (the k of the construction).
    pub fn order(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }

    /// Root followed by members in group order.
    pub fn vars(&self) -> Vec<usize> {
        let mut v = vec![self.root];
        for g in &self.groups {
            v.extend_from_slice(&g.members);
        }
        v
    }

    pub fn validate(&self, nvars: usize) -> Result<()> {
        let vars = self.vars();
        for &v in &vars {
            if v >= nvars {
                return Err(Error::Config(format!(
                    "tree references slot {v} but only {nvars} variables exist"
                )));
            }
        }
        let mut seen = vars.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != vars.len() {
            return Err(Error::Config("tree repeats a variable".into()));
        }
        for (s, g) in self.groups.iter().enumerate() {
            if g.members.is_empty() {
                return Err(Error::Config(format!("group {s} is empty")));
            }
            let ok = if s == 0 {
                g.parent == self.root
            } else {
                self.groups[s - 1].members.contains(&g.parent)
            };
            if !ok {
                return Err(Error::Config(format!(
                    "group {s} parent {} does not lie in the previous level",
                    g.parent
                )));
            }
        }
        Ok(())
    }

    /// Adjoin `nu` to the first group, keeping the root.
    pub fn extend_keep_root(&self, nu: usize) -> Self {
        let mut t = self.clone();
        if t.groups.is_empty() {
            t.groups.push(Group {
                parent: t.root,
                members: vec![nu],
            });
        } else {
            t.groups[0].members.push(nu);
        }
        t
    }

    /// Make `nu` the root; the old root becomes the sole first-group member
    /// and all old groups shift down one level.
    pub fn extend_new_root(&self, nu: usize) -> Self {
        let mut groups = Vec::with_capacity(self.groups.len() + 1);
        groups.push(Group {
            parent: nu,
            members: vec![self.root],
        });
        groups.extend(self.groups.iter().cloned());
        KernelTree { root: nu, groups }
    }

    /// Decompose the tree into the unique extension sequence that builds it:
    /// free (childless) first-group members peel as keep-root moves, and a
    /// singleton first group exposes a new-root move.
    pub fn compile(&self) -> Program {
        let mut tree = self.clone();
        let mut rev = Vec::with_capacity(self.order());
        while !tree.groups.is_empty() {
            let first_len = tree.groups[0].members.len();
            let protected = if tree.groups.len() >= 2 {
                Some(tree.groups[1].parent)
            } else {
                None
            };
            if first_len >= 2 || (tree.groups.len() == 1 && first_len == 1) {
                let pos = tree.groups[0]
                    .members
                    .iter()
                    .rposition(|m| Some(*m) != protected)
                    .expect("a valid tree has a childless first-group member");
                let nu = tree.groups[0].members.remove(pos);
                rev.push(ExtendOp::KeepRoot(nu));
                if tree.groups[0].members.is_empty() {
                    tree.groups.remove(0);
                }
            } else {
                // Singleton first group with deeper levels: the root was the
                // last new-root extension.
                rev.push(ExtendOp::NewRoot(tree.root));
                tree.root = tree.groups[0].members[0];
                tree.groups.remove(0);
            }
        }
        rev.reverse();
        Program {
            base_root: tree.root,
            ops: rev,
        }
    }

    /// Pointwise envelope for |kernel value|:
    ///   2^(k-1) / |w_root - z_root| * prod (delta_i + c0 |w_i - z_i|) / tau_{p,i}.
    pub fn value_bound(&self, z: &[Complex64], w: &[Complex64], data: &[FactorPoint]) -> f64 {
        let k = self.order();
        let droot = (w[self.root] - z[self.root]).norm();
        if droot == 0.0 {
            return f64::INFINITY;
        }
        let lead = if k == 0 {
            1.0
        } else {
            2f64.powi(k as i32 - 1)
        };
        lead / droot * self.member_product(z, w, data)
    }

    /// Pointwise envelope for |d(kernel)/d(conj w_root)|:
    ///   2^(k-1) * max_{i in I_1} (delta_root + c0 |w_root - z_root|) / tau_{root,i}
    ///          * prod (delta_i + c0 |w_i - z_i|) / tau_{p,i}.
    /// Defined for k >= 1.
    pub fn deriv_bound(&self, z: &[Complex64], w: &[Complex64], data: &[FactorPoint]) -> f64 {
        let k = self.order();
        assert!(k >= 1, "derivative envelope needs at least one member");
        let r = self.root;
        let numer = data[r].delta + LIPSCHITZ_CAP * (w[r] - z[r]).norm();
        let lead = 2f64.powi(k as i32 - 1);
        let mut best = 0.0f64;
        for &i in &self.groups[0].members {
            let t = tau_pair(z[r], w[r], data[r].delta, z[i], w[i], data[i].delta);
            if t > 0.0 {
                best = best.max(numer / t);
            } else {
                return f64::INFINITY;
            }
        }
        lead * best * self.member_product(z, w, data)
    }

    fn member_product(&self, z: &[Complex64], w: &[Complex64], data: &[FactorPoint]) -> f64 {
        let mut prod = 1.0;
        for g in &self.groups {
            let p = g.parent;
            for &i in &g.members {
                let t = tau_pair(z[p], w[p], data[p].delta, z[i], w[i], data[i].delta);
                if t <= 0.0 {
                    return f64::INFINITY;
                }
                prod *= (data[i].delta + LIPSCHITZ_CAP * (w[i] - z[i]).norm()) / t;
            }
        }
        prod
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtendOp {
    KeepRoot(usize),
    NewRoot(usize),
}

/// A kernel tree lowered to its extension sequence, ready for evaluation.
#[derive(Clone, Debug)]
pub struct Program {
    pub base_root: usize,
    pub ops: Vec<ExtendOp>,
}

impl Program {
    /// Evaluate (V, D) at (z, w) given per-slot boundary data for w.
    /// Singular configurations (tau underflow, coincident root) return zero;
    /// they form a null set and quadrature callers keep nodes away from them.
    pub fn eval(&self, z: &[Complex64], w: &[Complex64], data: &[FactorPoint]) -> KernelValue {
        let mut root = self.base_root;
        let d0 = z[root] - w[root];
        if d0.norm_sqr() < TAU_FLOOR {
            return KernelValue::default();
        }
        let mut v = 1.0 / d0;
        let mut d = Complex64::new(0.0, 0.0);
        for op in &self.ops {
            match *op {
                ExtendOp::KeepRoot(nu) => {
                    let pv = match pair_vals(z[root], w[root], data[root], z[nu], w[nu], data[nu])
                    {
                        Some(p) => p,
                        None => return KernelValue::default(),
                    };
                    let new_v = pv.a * v;
                    let new_d = pv.dj * (pv.sd * v + pv.s * d);
                    v = new_v;
                    d = new_d;
                }
                ExtendOp::NewRoot(nu) => {
                    let pv = match pair_vals(z[root], w[root], data[root], z[nu], w[nu], data[nu])
                    {
                        Some(p) => p,
                        None => return KernelValue::default(),
                    };
                    let new_v = pv.dj * pv.s_swap * v + pv.p * d;
                    let new_d = pv.dj * pv.sd_swap * v - pv.a * d;
                    v = new_v;
                    d = new_d;
                    root = nu;
                }
            }
        }
        KernelValue { value: v, droot: d }
    }
}

/// Terms of the order-n solution operator: one tree per summand, applied to
/// the data component of its root.  Counts follow t(n) = 3 t(n-1) + 1:
/// 1, 4, 13, 40, ...
pub fn operator_terms(n: usize) -> Vec<KernelTree> {
    assert!((1..=6).contains(&n), "operator_terms supports 1 <= n <= 6");
    let mut terms = vec![KernelTree::cauchy(0)];
    for m in 1..n {
        let mut next = terms.clone();
        next.push(KernelTree::cauchy(m));
        for t in &terms {
            next.push(t.extend_keep_root(m));
            next.push(t.extend_new_root(m));
        }
        terms = next;
    }
    terms
}

/// All structurally distinct tree shapes of order k on the canonical slots
/// {0 (root), 1, ..., k}: ordered group-size compositions with members in
/// ascending order and every admissible parent pointer.
pub fn enumerate_shapes(k: usize) -> Vec<KernelTree> {
    fn rec(
        remaining: usize,
        next_var: usize,
        prev_members: Vec<usize>,
        acc: &KernelTree,
        out: &mut Vec<KernelTree>,
    ) {
        if remaining == 0 {
            out.push(acc.clone());
            return;
        }
        for size in 1..=remaining {
            let members: Vec<usize> = (next_var..next_var + size).collect();
            for &parent in &prev_members {
                let mut t = acc.clone();
                t.groups.push(Group {
                    parent,
                    members: members.clone(),
                });
                rec(
                    remaining - size,
                    next_var + size,
                    members.clone(),
                    &t,
                    out,
                );
            }
        }
    }
    let mut out = Vec::new();
    if k == 0 {
        out.push(KernelTree::cauchy(0));
        return out;
    }
    rec(k, 1, vec![0], &KernelTree::cauchy(0), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn disks(n: usize) -> Vec<PlanarDomain> {
        vec![PlanarDomain::unit_disk(); n]
    }

    /// Interior points of the unit disk, away from the medial axis (center)
    /// and from coincidence with the paired list.
    fn sample_points(
        rng: &mut impl Rng,
        n: usize,
        avoid: Option<&[Complex64]>,
    ) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let z = c(rng.gen_range(-0.85..0.85), rng.gen_range(-0.85..0.85));
            if z.norm() > 0.8 || z.norm() < 0.15 {
                continue;
            }
            if let Some(avoid) = avoid {
                if (z - avoid[out.len()]).norm() < 1e-3 {
                    continue;
                }
            }
            out.push(z);
        }
        out
    }

    #[test]
    fn tau_direct_values() {
        let doms = disks(2);
        // Both differences vanish.
        let z = [c(0.5, 0.0), c(0.0, 0.5)];
        assert_eq!(tau_on(&doms, &z, &z, 0, 1), 0.0);
        // |0-0.5|^2*delta(0.5) + |0-0.5i|^2*delta(0.5i) = 0.25*0.5 + 0.25*0.5.
        let z0 = [c(0.0, 0.0), c(0.0, 0.0)];
        let w = [c(0.5, 0.0), c(0.0, 0.5)];
        assert_relative_eq!(tau_on(&doms, &z0, &w, 0, 1), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn pair_kernel_closed_form() {
        let doms = disks(2);
        let z = [c(0.1, 0.2), c(-0.3, 0.1)];
        let w = [c(0.5, -0.1), c(0.2, 0.4)];
        let kv = s_pair(&doms, &z, &w, 0, 1);

        let d0 = doms[0].distance(w[0]);
        let d1 = doms[1].distance(w[1]);
        let dj = z[0] - w[0];
        let dn = z[1] - w[1];
        let qj = dj.norm_sqr() * d0.value;
        let qn = dn.norm_sqr() * d1.value;
        let tau = qj + qn;
        let gj = d0.value - dj.conj() * d0.wirtinger;
        let gn = d1.value - dn.conj() * d1.wirtinger;
        let uj = -dj.conj() * d0.value;
        let s = uj * gn / (tau * tau);
        let sd = (qn - qj) * gn * gj / (tau * tau * tau);
        assert_relative_eq!(kv.value.re, s.re, epsilon = 1e-14);
        assert_relative_eq!(kv.value.im, s.im, epsilon = 1e-14);
        assert_relative_eq!(kv.droot.re, sd.re, epsilon = 1e-14);
        assert_relative_eq!(kv.droot.im, sd.im, epsilon = 1e-14);

        // The program for the k=1 tree gives the same pair.
        let tree = KernelTree::cauchy(0).extend_keep_root(1);
        let prog = tree.compile();
        let data = factor_points(&doms, &w);
        let kv2 = prog.eval(&z, &w, &data);
        // That tree's value is S / nothing... the full order-1 kernel is
        // A/(z_0 - w_0) = S; compare directly.
        assert_relative_eq!(kv2.value.re, s.re, epsilon = 1e-14);
        assert_relative_eq!(kv2.value.im, s.im, epsilon = 1e-14);
        assert_relative_eq!(kv2.droot.re, sd.re, epsilon = 1e-14);
        assert_relative_eq!(kv2.droot.im, sd.im, epsilon = 1e-14);
    }

    #[test]
    fn a_kernel_is_derivative_of_quotient() {
        // A^{nu}_{j,nu} = -(d/d conj w_nu)[q_j / tau] / (z_nu - w_nu).
        let doms = disks(2);
        let z = [c(0.0, 0.0), c(0.0, 0.0)];
        let w = [c(0.5, 0.0), c(0.0, 0.5)];
        let a = a_kernel(&doms, &z, &w, 0, 1);

        let h = 1e-6;
        let quotient = |w1: Complex64| {
            let d0 = doms[0].distance(w[0]).value;
            let d1 = doms[1].distance(w1).value;
            let qj = (z[0] - w[0]).norm_sqr() * d0;
            let tau = qj + (z[1] - w1).norm_sqr() * d1;
            qj / tau
        };
        let dx = (quotient(w[1] + c(h, 0.0)) - quotient(w[1] - c(h, 0.0))) / (2.0 * h);
        let dy = (quotient(w[1] + c(0.0, h)) - quotient(w[1] - c(0.0, h))) / (2.0 * h);
        let fd = (c(dx, 0.0) + c(0.0, 1.0) * c(dy, 0.0)) / 2.0;
        let expected = -fd / (z[1] - w[1]);
        assert_relative_eq!(a.re, expected.re, epsilon = 1e-6);
        assert_relative_eq!(a.im, expected.im, epsilon = 1e-6);
    }

    #[test]
    fn flat_order2_closed_form() {
        // Root 0 with members {1, 2} in one group:
        //   V = A^1 A^2 / (z_0 - w_0), each A over its own tau pair.
        let doms = disks(3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let z: Vec<_> = sample_points(&mut rng, 3, None);
            let w: Vec<_> = sample_points(&mut rng, 3, Some(&z));
            let tree = KernelTree::cauchy(0)
                .extend_keep_root(1)
                .extend_keep_root(2);
            let data = factor_points(&doms, &w);
            let got = tree.compile().eval(&z, &w, &data).value;
            let expected = a_kernel(&doms, &z, &w, 0, 1) * a_kernel(&doms, &z, &w, 0, 2)
                / (z[0] - w[0]);
            assert_relative_eq!(got.re, expected.re, max_relative = 1e-12, epsilon = 1e-13);
            assert_relative_eq!(got.im, expected.im, max_relative = 1e-12, epsilon = 1e-13);
        }
    }

    #[test]
    fn chain_order2_closed_form() {
        // Root 0 -> group {1} -> group {2} (parent 1).  Built as
        // base(1), keep(2), new-root(0); expanding the moves by hand:
        //   V = u_0 G_1 / tau_01^2 * A^2_{1,2}
        //     + q_1 / ((z_0 - w_0) tau_01) * S'_{1,2}.
        let doms = disks(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let z: Vec<_> = sample_points(&mut rng, 3, None);
            let w: Vec<_> = sample_points(&mut rng, 3, Some(&z));
            let chain = KernelTree {
                root: 0,
                groups: vec![
                    Group {
                        parent: 0,
                        members: vec![1],
                    },
                    Group {
                        parent: 1,
                        members: vec![2],
                    },
                ],
            };
            chain.validate(3).unwrap();
            let data = factor_points(&doms, &w);
            let got = chain.compile().eval(&z, &w, &data).value;

            let e0 = doms[0].distance(w[0]);
            let e1 = doms[1].distance(w[1]);
            let d0 = z[0] - w[0];
            let d1 = z[1] - w[1];
            let q0 = d0.norm_sqr() * e0.value;
            let q1 = d1.norm_sqr() * e1.value;
            let tau01 = q0 + q1;
            let g1 = e1.value - d1.conj() * e1.wirtinger;
            let u0 = -d0.conj() * e0.value;
            let s01 = u0 * g1 / (tau01 * tau01);
            let sd12 = s_pair(&doms, &z, &w, 1, 2).droot;
            let a12 = a_kernel(&doms, &z, &w, 1, 2);
            let expected = s01 * a12 + q1 / (d0 * tau01) * sd12;
            assert_relative_eq!(got.re, expected.re, max_relative = 1e-12, epsilon = 1e-13);
            assert_relative_eq!(got.im, expected.im, max_relative = 1e-12, epsilon = 1e-13);
        }
    }

    #[test]
    fn keep_root_moves_commute() {
        let doms = disks(3);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z: Vec<_> = sample_points(&mut rng, 3, None);
        let w: Vec<_> = sample_points(&mut rng, 3, Some(&z));
        let data = factor_points(&doms, &w);
        let p12 = Program {
            base_root: 0,
            ops: vec![ExtendOp::KeepRoot(1), ExtendOp::KeepRoot(2)],
        };
        let p21 = Program {
            base_root: 0,
            ops: vec![ExtendOp::KeepRoot(2), ExtendOp::KeepRoot(1)],
        };
        let a = p12.eval(&z, &w, &data);
        let b = p21.eval(&z, &w, &data);
        assert_relative_eq!(a.value.re, b.value.re, max_relative = 1e-13);
        assert_relative_eq!(a.value.im, b.value.im, max_relative = 1e-13);
        assert_relative_eq!(a.droot.re, b.droot.re, max_relative = 1e-13);
        assert_relative_eq!(a.droot.im, b.droot.im, max_relative = 1e-13);
    }

    #[test]
    fn droot_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for k in 1..=2usize {
            let doms = disks(k + 1);
            for tree in enumerate_shapes(k) {
                let prog = tree.compile();
                for _ in 0..20 {
                    let z: Vec<_> = sample_points(&mut rng, k + 1, None);
                    let w: Vec<_> = sample_points(&mut rng, k + 1, Some(&z));
                    let root = tree.root;
                    let h = 1e-5;
                    let eval_at = |wr: Complex64| {
                        let mut wv = w.clone();
                        wv[root] = wr;
                        let data = factor_points(&doms, &wv);
                        prog.eval(&z, &wv, &data).value
                    };
                    let dx = (eval_at(w[root] + c(h, 0.0)) - eval_at(w[root] - c(h, 0.0)))
                        / (2.0 * h);
                    let dy = (eval_at(w[root] + c(0.0, h)) - eval_at(w[root] - c(0.0, h)))
                        / (2.0 * h);
                    let fd = (dx + c(0.0, 1.0) * dy) / 2.0;
                    let data = factor_points(&doms, &w);
                    let sym = prog.eval(&z, &w, &data).droot;
                    let scale = sym.norm().max(1e-9);
                    assert!(
                        (sym - fd).norm() <= 1e-5 * scale + 1e-9,
                        "k={k} tree={tree:?} sym={sym} fd={fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn envelopes_dominate_sampled_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for k in 1..=3usize {
            let doms = disks(k + 1);
            for tree in enumerate_shapes(k) {
                let prog = tree.compile();
                for _ in 0..200 {
                    let z: Vec<_> = sample_points(&mut rng, k + 1, None);
                    let w: Vec<_> = sample_points(&mut rng, k + 1, Some(&z));
                    let data = factor_points(&doms, &w);
                    let kv = prog.eval(&z, &w, &data);
                    let vb = tree.value_bound(&z, &w, &data);
                    let db = tree.deriv_bound(&z, &w, &data);
                    assert!(
                        kv.value.norm() <= vb * (1.0 + 1e-12),
                        "value envelope violated: {tree:?}"
                    );
                    assert!(
                        kv.droot.norm() <= db * (1.0 + 1e-12),
                        "derivative envelope violated: {tree:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn term_counts_follow_recursion() {
        assert_eq!(operator_terms(1).len(), 1);
        assert_eq!(operator_terms(2).len(), 4);
        assert_eq!(operator_terms(3).len(), 13);
        assert_eq!(operator_terms(4).len(), 40);
        for n in 1..=4 {
            for t in operator_terms(n) {
                t.validate(n).unwrap();
            }
        }
        // The four order-2 terms: two Cauchy kernels and the two pair trees.
        let t2 = operator_terms(2);
        assert_eq!(t2[0], KernelTree::cauchy(0));
        assert_eq!(t2[1], KernelTree::cauchy(1));
        assert_eq!(t2[2], KernelTree::cauchy(0).extend_keep_root(1));
        assert_eq!(t2[3], KernelTree::cauchy(0).extend_new_root(1));
    }

    #[test]
    fn shape_enumeration_counts() {
        assert_eq!(enumerate_shapes(1).len(), 1);
        assert_eq!(enumerate_shapes(2).len(), 2);
        assert_eq!(enumerate_shapes(3).len(), 5);
        for k in 1..=3 {
            for t in enumerate_shapes(k) {
                t.validate(k + 1).unwrap();
                assert_eq!(t.order(), k);
            }
        }
    }

    #[test]
    fn tree_serde_round_trip() {
        let tree = KernelTree {
            root: 2,
            groups: vec![
                Group {
                    parent: 2,
                    members: vec![0, 3],
                },
                Group {
                    parent: 3,
                    members: vec![1],
                },
            ],
        };
        let json = serde_json::to_string(&tree).unwrap();
        let back: KernelTree = serde_json::from_str(&json).unwrap();
        assert_eq!(tree, back);
    }

    #[test]
    fn singular_evaluations_return_zero() {
        let doms = disks(2);
        let z = [c(0.3, 0.0), c(0.1, 0.2)];
        let w = z;
        let data = factor_points(&doms, &w);
        let tree = KernelTree::cauchy(0).extend_keep_root(1);
        let kv = tree.compile().eval(&z, &w, &data);
        assert_eq!(kv.value, c(0.0, 0.0));
        assert!(kv.value.is_finite());
    }
}
