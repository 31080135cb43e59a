//! Pointwise tensor algebra on real 3x3 tensors: symmetric / skew /
//! deviatoric decompositions, Frobenius products, the isotropic elasticity
//! tensor, and slip-system kinematics.

use crate::{Error, Result};

/// Real 3x3 tensor, the universal pointwise value type (p, chi_p, sigma, ...).
/// Component `a[i][j]` is row i, column j.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tensor3 {
    pub a: [[f64; 3]; 3],
}

impl Tensor3 {
    pub const ZERO: Tensor3 = Tensor3 { a: [[0.0; 3]; 3] };

    pub fn new(a: [[f64; 3]; 3]) -> Self {
        Tensor3 { a }
    }

    pub fn identity() -> Self {
        let mut t = Tensor3::ZERO;
        t.a[0][0] = 1.0;
        t.a[1][1] = 1.0;
        t.a[2][2] = 1.0;
        t
    }

    /// Dyadic product u (x) v.
    pub fn outer(u: [f64; 3], v: [f64; 3]) -> Self {
        let mut t = Tensor3::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                t.a[i][j] = u[i] * v[j];
            }
        }
        t
    }

    pub fn transpose(&self) -> Self {
        let mut t = Tensor3::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                t.a[i][j] = self.a[j][i];
            }
        }
        t
    }

    pub fn trace(&self) -> f64 {
        self.a[0][0] + self.a[1][1] + self.a[2][2]
    }

    /// sym(X) = (X + X^T)/2.
    pub fn sym(&self) -> Self {
        let mut t = Tensor3::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                t.a[i][j] = 0.5 * (self.a[i][j] + self.a[j][i]);
            }
        }
        t
    }

    /// skew(X) = (X - X^T)/2.
    pub fn skew(&self) -> Self {
        let mut t = Tensor3::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                t.a[i][j] = 0.5 * (self.a[i][j] - self.a[j][i]);
            }
        }
        t
    }

    /// dev(X) = X - tr(X)/3 Id.
    pub fn dev(&self) -> Self {
        let third = self.trace() / 3.0;
        let mut t = *self;
        t.a[0][0] -= third;
        t.a[1][1] -= third;
        t.a[2][2] -= third;
        t
    }

    /// Frobenius product <A, B> = tr(A B^T) = sum_ij A_ij B_ij.
    pub fn inner(&self, other: &Tensor3) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += self.a[i][j] * other.a[i][j];
            }
        }
        s
    }

    pub fn norm_sq(&self) -> f64 {
        self.inner(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut t = *self;
        for i in 0..3 {
            for j in 0..3 {
                t.a[i][j] *= s;
            }
        }
        t
    }

    pub fn add(&self, other: &Tensor3) -> Self {
        let mut t = *self;
        for i in 0..3 {
            for j in 0..3 {
                t.a[i][j] += other.a[i][j];
            }
        }
        t
    }

    pub fn sub(&self, other: &Tensor3) -> Self {
        let mut t = *self;
        for i in 0..3 {
            for j in 0..3 {
                t.a[i][j] -= other.a[i][j];
            }
        }
        t
    }

    /// self + s * other, the workhorse of the field updates.
    pub fn add_scaled(&self, other: &Tensor3, s: f64) -> Self {
        let mut t = *self;
        for i in 0..3 {
            for j in 0..3 {
                t.a[i][j] += s * other.a[i][j];
            }
        }
        t
    }

    /// Matrix-vector product X v.
    pub fn mul_vec(&self, v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = self.a[i][0] * v[0] + self.a[i][1] * v[1] + self.a[i][2] * v[2];
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Tensor3 {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.a[i][j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Tensor3 {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.a[i][j]
    }
}

/// Isotropic elastic moduli. The bulk modulus is always derived from
/// (mu, lambda) so inconsistent triples cannot be constructed.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ElasticModuli {
    pub mu: f64,
    pub lambda: f64,
}

impl ElasticModuli {
    /// Requires mu > 0 and 3 lambda + 2 mu > 0.
    pub fn new(mu: f64, lambda: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(Error::Validation(format!(
                "elastic moduli must satisfy mu > 0 and 3*lambda + 2*mu > 0; got mu = {mu}"
            )));
        }
        if !(3.0 * lambda + 2.0 * mu > 0.0) {
            return Err(Error::Validation(format!(
                "elastic moduli must satisfy mu > 0 and 3*lambda + 2*mu > 0; got 3*lambda + 2*mu = {}",
                3.0 * lambda + 2.0 * mu
            )));
        }
        Ok(ElasticModuli { mu, lambda })
    }

    /// Bulk modulus kappa = lambda + 2 mu / 3.
    pub fn kappa(&self) -> f64 {
        self.lambda + 2.0 * self.mu / 3.0
    }

    /// Positive-definiteness constant m0 = min(2 mu, 3 lambda + 2 mu) of the
    /// elasticity tensor on symmetric arguments.
    pub fn m0(&self) -> f64 {
        (2.0 * self.mu).min(3.0 * self.lambda + 2.0 * self.mu)
    }
}

/// Applies the isotropic elasticity tensor:
/// C X = 2 mu sym(X) + lambda tr(X) Id. The result is symmetric.
pub fn apply_ciso(e: &ElasticModuli, x: &Tensor3) -> Tensor3 {
    let mut out = x.sym().scale(2.0 * e.mu);
    let lt = e.lambda * x.trace();
    out.a[0][0] += lt;
    out.a[1][1] += lt;
    out.a[2][2] += lt;
    out
}

/// Inverse of [`apply_ciso`] on symmetric tensors:
/// C^{-1} S = dev(S)/(2 mu) + tr(S) Id / (3 (3 lambda + 2 mu)).
pub fn apply_ciso_inverse(e: &ElasticModuli, s: &Tensor3) -> Tensor3 {
    let mut out = s.dev().scale(1.0 / (2.0 * e.mu));
    let t = s.trace() / (3.0 * (3.0 * e.lambda + 2.0 * e.mu));
    out.a[0][0] += t;
    out.a[1][1] += t;
    out.a[2][2] += t;
    out
}

/// Slip system: orthonormal pair (l, nu) with orientation tensor
/// m = l (x) nu. Since l is perpendicular to nu, tr(m) = 0 and |m| = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SlipSystem {
    pub l: [f64; 3],
    pub nu: [f64; 3],
    pub m: Tensor3,
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl SlipSystem {
    /// Builds a slip system from a (not necessarily normalized) direction
    /// and plane normal. Fails if the pair is not orthogonal.
    pub fn new(l: [f64; 3], nu: [f64; 3]) -> Result<Self> {
        let nl = norm3(l);
        let nn = norm3(nu);
        if nl == 0.0 || nn == 0.0 {
            return Err(Error::Validation(
                "slip direction and plane normal must be nonzero".into(),
            ));
        }
        let l = [l[0] / nl, l[1] / nl, l[2] / nl];
        let nu = [nu[0] / nn, nu[1] / nn, nu[2] / nn];
        if dot3(l, nu).abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "slip direction must be orthogonal to the plane normal; <l, nu> = {}",
                dot3(l, nu)
            )));
        }
        Ok(SlipSystem {
            l,
            nu,
            m: Tensor3::outer(l, nu),
        })
    }
}

/// Resolved shear stress <Sigma, m> on a slip system.
pub fn resolved_shear(sigma: &Tensor3, s: &SlipSystem) -> f64 {
    sigma.inner(&s.m)
}

/// The 12 octahedral {111}<110> systems of an FCC crystal, normalized.
///
/// The three in-plane directions of each plane sum to zero, so the family
/// is balanced: sum_alpha m^alpha = 0.
pub fn fcc_slip_family() -> Vec<SlipSystem> {
    // (plane normal, three slip directions summing to zero)
    const TABLE: [([f64; 3], [[f64; 3]; 3]); 4] = [
        ([1.0, 1.0, 1.0], [[0.0, 1.0, -1.0], [-1.0, 0.0, 1.0], [1.0, -1.0, 0.0]]),
        ([-1.0, 1.0, 1.0], [[0.0, 1.0, -1.0], [1.0, 0.0, 1.0], [-1.0, -1.0, 0.0]]),
        ([1.0, -1.0, 1.0], [[0.0, -1.0, -1.0], [-1.0, 0.0, 1.0], [1.0, 1.0, 0.0]]),
        ([1.0, 1.0, -1.0], [[0.0, 1.0, 1.0], [-1.0, 0.0, -1.0], [1.0, -1.0, 0.0]]),
    ];
    let mut out = Vec::with_capacity(12);
    for (nu, dirs) in TABLE.iter() {
        for l in dirs.iter() {
            out.push(SlipSystem::new(*l, *nu).expect("FCC table entry violates slip invariants"));
        }
    }
    out
}

/// Assembles the plastic distortion p = sum_alpha gamma^alpha m^alpha.
/// tr(p) = 0 because every orientation tensor is trace-free.
pub fn assemble_p_from_slips(gamma: &[f64], systems: &[SlipSystem]) -> Tensor3 {
    assert_eq!(
        gamma.len(),
        systems.len(),
        "slip vector length must match the slip family"
    );
    let mut p = Tensor3::ZERO;
    for (g, s) in gamma.iter().zip(systems) {
        p = p.add_scaled(&s.m, *g);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(a: [[f64; 3]; 3]) -> Tensor3 {
        Tensor3::new(a)
    }

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn ciso_identity_input() {
        // mu = 1, lambda = 1: C Id = (2 mu + 3 lambda) Id = 5 Id
        let e = ElasticModuli::new(1.0, 1.0).unwrap();
        let out = apply_ciso(&e, &Tensor3::identity());
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 5.0 } else { 0.0 };
                assert_eq!(out.a[i][j], want);
            }
        }
    }

    #[test]
    fn ciso_kills_skew() {
        let e = ElasticModuli::new(2.0, 0.7).unwrap();
        let x = t([[0.0, 1.0, -2.0], [-1.0, 0.0, 3.0], [2.0, -3.0, 0.0]]);
        let out = apply_ciso(&e, &x);
        assert_eq!(out.norm(), 0.0);
    }

    #[test]
    fn ciso_pure_shear() {
        // mu = 1, lambda = 0, X = e1 (x) e2 -> e1 (x) e2 + e2 (x) e1
        let e = ElasticModuli::new(1.0, 0.0).unwrap();
        let x = Tensor3::outer([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        let out = apply_ciso(&e, &x);
        let want = t([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(out, want);
    }

    #[test]
    fn ciso_inverse_on_identity() {
        // inverse of C Id = 5 Id at mu = lambda = 1
        let e = ElasticModuli::new(1.0, 1.0).unwrap();
        let inv = apply_ciso_inverse(&e, &Tensor3::identity());
        for i in 0..3 {
            assert!(approx(inv.a[i][i], 0.2, 1e-15));
        }
    }

    #[test]
    fn ciso_inverse_deviatoric() {
        let e = ElasticModuli::new(1.7, 0.4).unwrap();
        let s = t([[1.0, 2.0, 0.0], [2.0, -1.5, 1.0], [0.0, 1.0, 0.5]]).dev();
        let inv = apply_ciso_inverse(&e, &s);
        let want = s.scale(1.0 / (2.0 * e.mu));
        assert!(inv.sub(&want).norm() < 1e-14);
    }

    #[test]
    fn moduli_validation() {
        assert!(ElasticModuli::new(-1.0, 1.0).is_err());
        assert!(ElasticModuli::new(1.0, -0.7).is_err()); // 3(-0.7)+2 = -0.1
        assert!(ElasticModuli::new(1.0, -0.6).is_ok()); // 3(-0.6)+2 = 0.2
    }

    #[test]
    fn resolved_shear_picks_component() {
        let s = SlipSystem::new([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap();
        let sigma = t([[0.3, -0.7, 0.1], [0.2, 0.9, -0.4], [0.0, 0.5, -1.2]]);
        assert_eq!(resolved_shear(&sigma, &s), sigma.a[0][1]);
        // <Id, m> = tr(m) = 0
        assert_eq!(resolved_shear(&Tensor3::identity(), &s), 0.0);
        // <m, m> = 1 for a unit system
        assert!(approx(resolved_shear(&s.m.clone(), &s), 1.0, 1e-15));
    }

    #[test]
    fn fcc_family_invariants() {
        let fam = fcc_slip_family();
        assert_eq!(fam.len(), 12);
        for s in &fam {
            assert!(dot3(s.l, s.nu).abs() < 1e-14);
            assert!(approx(norm3(s.l), 1.0, 1e-15));
            assert!(approx(norm3(s.nu), 1.0, 1e-15));
            assert!(s.m.trace().abs() < 1e-15);
        }
        // the family is balanced: direct summation of the orientation tensors
        let mut total = Tensor3::ZERO;
        for s in &fam {
            total = total.add(&s.m);
        }
        assert!(total.norm() < 1e-14, "sum of m^alpha = {:?}", total);
    }

    #[test]
    fn assemble_p_linearity_and_trace() {
        let fam = fcc_slip_family();
        assert_eq!(assemble_p_from_slips(&vec![0.0; 12], &fam).norm(), 0.0);

        let single = SlipSystem::new([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap();
        let p = assemble_p_from_slips(&[2.0], &[single.clone()]);
        assert_eq!(p, single.m.scale(2.0));

        let gamma: Vec<f64> = (0..12).map(|i| (i as f64 - 5.3) * 0.17).collect();
        let p = assemble_p_from_slips(&gamma, &fam);
        assert!(p.trace().abs() < 1e-14);
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor3> {
        prop::array::uniform3(prop::array::uniform3(-10.0f64..10.0)).prop_map(Tensor3::new)
    }

    proptest! {
        #[test]
        fn sym_plus_skew_is_identity(x in arb_tensor()) {
            let r = x.sym().add(&x.skew());
            for i in 0..3 { for j in 0..3 {
                prop_assert!((r.a[i][j] - x.a[i][j]).abs() < 1e-12);
            }}
        }

        #[test]
        fn dev_is_trace_free(x in arb_tensor()) {
            prop_assert!(x.dev().trace().abs() < 1e-13);
        }

        #[test]
        fn inner_matches_componentwise(x in arb_tensor(), y in arb_tensor()) {
            // <A, B> = tr(A B^T)
            let mut tr = 0.0;
            for i in 0..3 { for k in 0..3 { tr += x.a[i][k] * y.a[i][k]; } }
            prop_assert!((x.inner(&y) - tr).abs() < 1e-9);
        }

        #[test]
        fn projections_orthogonal(x in arb_tensor(), y in arb_tensor()) {
            prop_assert!(x.sym().inner(&y.skew()).abs() < 1e-9);
            prop_assert!(x.dev().inner(&Tensor3::identity()).abs() < 1e-12);
        }

        #[test]
        fn ciso_self_adjoint(x in arb_tensor(), y in arb_tensor()) {
            let e = ElasticModuli::new(1.3, 0.8).unwrap();
            let lhs = apply_ciso(&e, &x).inner(&y);
            let rhs = x.inner(&apply_ciso(&e, &y));
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }

        #[test]
        fn ciso_elliptic(x in arb_tensor()) {
            // <sym X, C sym X> >= m0 ||sym X||^2 with m0 = min(2 mu, 3 lambda + 2 mu)
            let e = ElasticModuli::new(1.3, -0.5).unwrap();
            let s = x.sym();
            let lhs = apply_ciso(&e, &s).inner(&s);
            prop_assert!(lhs >= e.m0() * s.norm_sq() - 1e-9 * (1.0 + lhs.abs()));
        }

        #[test]
        fn ciso_inverse_round_trip(x in arb_tensor()) {
            let e = ElasticModuli::new(0.9, 1.4).unwrap();
            let s = x.sym();
            let back = apply_ciso(&e, &apply_ciso_inverse(&e, &s));
            prop_assert!(back.sub(&s).norm() <= 1e-13 * (1.0 + s.norm()));
        }
    }
}
