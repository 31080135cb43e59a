//! Numerical certification of the model's analytical structure: coercivity
//! constants, Korn-type constants, norm equivalence, penalty limits,
//! uniqueness probes, and brute-force oracles for the local return maps.
//!
//! Eigenvalue estimates use shifted inverse power iteration with CG inner
//! solves. The shift only changes the iteration speed, not its limit:
//! (A + eps B) v = (lambda + eps) B v has the same eigenvectors as the
//! pencil (A, B), and the reported value is the Rayleigh quotient of the
//! unshifted pencil.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid_fields::{
    curl_h, curl_h_adjoint, grad_h, grad_h_adjoint, Grid, TensorField3, VectorField3,
};
use crate::materials::{
    cauchy_stress, eshelby_stress, local_return_map, DeltaLambda, LocalSolveConfig,
    LocalTrialState, MaterialParams, PlasticPoint, VariantId,
};
use crate::solver::{
    cg_solve, micro_gap, project_micro_subspace, run_to_final_state, InitMode, RunState, Scenario,
    SolverConfig,
};
use crate::tensor3::{apply_ciso, assemble_p_from_slips, Tensor3};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// generalized eigenvalue estimation
// ---------------------------------------------------------------------------

/// Smallest-eigenvalue estimate of a symmetric pencil (A, B).
pub struct EigenEstimate {
    pub lambda: f64,
    pub iterations: usize,
    pub rayleigh_history: Vec<f64>,
}

struct Pencil<'a> {
    dim: usize,
    apply_a: &'a dyn Fn(&[f64], &mut [f64]),
    apply_b: &'a dyn Fn(&[f64], &mut [f64]),
    project: &'a dyn Fn(&mut [f64]),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi eigenvalue iteration for tiny symmetric matrices; returns
/// (eigenvalues, column eigenvectors).
fn dense_sym_eig(a: &[f64], m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; m * m];
    for i in 0..m {
        v[i * m + i] = 1.0;
    }
    for _ in 0..64 {
        let mut off = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                off += a[i * m + j] * a[i * m + j];
            }
        }
        if off < 1e-30 {
            break;
        }
        for pi in 0..m {
            for qi in pi + 1..m {
                let apq = a[pi * m + qi];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[qi * m + qi] - a[pi * m + pi]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..m {
                    let akp = a[k * m + pi];
                    let akq = a[k * m + qi];
                    a[k * m + pi] = c * akp - s * akq;
                    a[k * m + qi] = s * akp + c * akq;
                }
                for k in 0..m {
                    let apk = a[pi * m + k];
                    let aqk = a[qi * m + k];
                    a[pi * m + k] = c * apk - s * aqk;
                    a[qi * m + k] = s * apk + c * aqk;
                }
                for k in 0..m {
                    let vkp = v[k * m + pi];
                    let vkq = v[k * m + qi];
                    v[k * m + pi] = c * vkp - s * vkq;
                    v[k * m + qi] = s * vkp + c * vkq;
                }
            }
        }
    }
    let evals: Vec<f64> = (0..m).map(|i| a[i * m + i]).collect();
    (evals, v)
}

/// Single-vector LOBPCG for the smallest eigenvalue of A z = lambda B z on
/// the range of `project`, preconditioned by B. Terminates on the
/// Rayleigh-quotient change.
fn smallest_eigenvalue(p: &Pencil, seed: u64, tol: f64, max_iters: usize) -> Result<EigenEstimate> {
    let n = p.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (p.project)(&mut x);
    let mut bx = vec![0.0; n];
    (p.apply_b)(&x, &mut bx);
    let nb = dot(&bx, &x).max(0.0).sqrt();
    if nb == 0.0 {
        return Err(Error::Verification("eigen start vector collapsed to zero".into()));
    }
    x.iter_mut().for_each(|v| *v /= nb);

    let mut ax = vec![0.0; n];
    let mut history = Vec::new();
    let mut rho = {
        (p.apply_a)(&x, &mut ax);
        (p.apply_b)(&x, &mut bx);
        dot(&ax, &x) / dot(&bx, &x)
    };
    history.push(rho);
    let scale0 = rho.abs().max(1e-30);
    let mut prev_dir: Option<Vec<f64>> = None;
    let mut iters = 0;

    for _ in 0..max_iters {
        iters += 1;
        // residual r = A x - rho B x, preconditioned by the shifted
        // operator (A + sigma B)^{-1} with sigma below the current Rayleigh
        // quotient; this keeps the solve SPD while giving shift-invert
        // spectral contrast for clustered minima
        let r: Vec<f64> = (0..n).map(|i| ax[i] - rho * bx[i]).collect();
        let sigma = (0.5 * rho).max(1e-6 * scale0);
        let mut w = vec![0.0; n];
        {
            let mut rr = r.clone();
            (p.project)(&mut rr);
            let mut av = vec![0.0; n];
            let mut bv = vec![0.0; n];
            let mut apply = |v: &[f64], out: &mut [f64]| {
                let mut vv = v.to_vec();
                (p.project)(&mut vv);
                (p.apply_a)(&vv, &mut av);
                (p.apply_b)(&vv, &mut bv);
                for i in 0..n {
                    out[i] = av[i] + sigma * bv[i];
                }
                (p.project)(out);
            };
            // loose inner tolerance: the subspace correction only needs a
            // useful direction, not an exact solve, so a capped partial
            // solve is also acceptable
            match cg_solve(&mut apply, &rr, &mut w, 1e-2, 2000, "eigen preconditioner") {
                Ok(_) => {}
                Err(Error::CgNonConvergence { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        (p.project)(&mut w);

        // Rayleigh-Ritz on span{x, w, prev_dir}
        let mut basis: Vec<Vec<f64>> = vec![x.clone(), w];
        if let Some(d) = &prev_dir {
            basis.push(d.clone());
        }
        // B-orthonormalize the basis (modified Gram-Schmidt), dropping
        // near-dependent directions
        let mut ortho: Vec<(Vec<f64>, Vec<f64>)> = Vec::new(); // (v, Bv)
        for mut v in basis {
            for (o, bo) in &ortho {
                let c = dot(bo, &v);
                for i in 0..n {
                    v[i] -= c * o[i];
                }
                let _ = o;
            }
            let mut bv = vec![0.0; n];
            (p.apply_b)(&v, &mut bv);
            let nv = dot(&bv, &v).max(0.0).sqrt();
            if nv > 1e-10 {
                v.iter_mut().for_each(|z| *z /= nv);
                bv.iter_mut().for_each(|z| *z /= nv);
                ortho.push((v, bv));
            }
        }
        let m = ortho.len();
        if m == 0 {
            break;
        }
        // dense projected pencil: B-part is the identity after the
        // orthonormalization, so a plain symmetric eig suffices
        let mut a_small = vec![0.0; m * m];
        let mut a_cols: Vec<Vec<f64>> = Vec::with_capacity(m);
        for (v, _) in &ortho {
            let mut av = vec![0.0; n];
            (p.apply_a)(v, &mut av);
            a_cols.push(av);
        }
        for i in 0..m {
            for j in 0..m {
                a_small[i * m + j] = dot(&ortho[i].0, &a_cols[j]);
            }
        }
        // symmetrize against rounding
        for i in 0..m {
            for j in i + 1..m {
                let s = 0.5 * (a_small[i * m + j] + a_small[j * m + i]);
                a_small[i * m + j] = s;
                a_small[j * m + i] = s;
            }
        }
        let (evals, evecs) = dense_sym_eig(&a_small, m);
        let (best_idx, _) = evals
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let y: Vec<f64> = (0..m).map(|i| evecs[i * m + best_idx]).collect();

        let mut x_new = vec![0.0; n];
        let mut dir = vec![0.0; n];
        for i in 0..m {
            for k in 0..n {
                x_new[k] += y[i] * ortho[i].0[k];
                if i > 0 {
                    dir[k] += y[i] * ortho[i].0[k];
                }
            }
        }
        x = x_new;
        (p.project)(&mut x);
        prev_dir = Some(dir);

        (p.apply_a)(&x, &mut ax);
        (p.apply_b)(&x, &mut bx);
        let nb = dot(&bx, &x).max(0.0).sqrt();
        if nb == 0.0 {
            break;
        }
        let inv = 1.0 / nb;
        x.iter_mut().for_each(|v| *v *= inv);
        ax.iter_mut().for_each(|v| *v *= inv);
        bx.iter_mut().for_each(|v| *v *= inv);
        let rho_new = dot(&ax, &x) / dot(&bx, &x);
        history.push(rho_new);
        let drho = (rho_new - rho).abs();
        rho = rho_new;
        if drho <= tol * rho.abs().max(1e-9 * scale0) {
            break;
        }
    }
    Ok(EigenEstimate { lambda: rho, iterations: iters, rayleigh_history: history })
}

// ---------------------------------------------------------------------------
// Korn-type constant
// ---------------------------------------------------------------------------

/// Estimated best constant in ||X||^2 <= C_h (||sym X||^2 + ||Curl X||^2)
/// over the discrete tangential-BC space.
#[derive(Debug, Clone, serde::Serialize)]
pub struct KornReport {
    pub dims: [usize; 3],
    pub gamma_d: Vec<String>,
    /// Smallest eigenvalue of (sym'sym + Curl'Curl, Id).
    pub lambda_min: f64,
    /// 1/lambda_min; infinite when the zero mode is present.
    pub c_h: f64,
    pub iterations: usize,
}

/// Estimates the Korn constant on H0(Curl; Gamma_D, R^{3x3}) (full tensors,
/// tangential trace only). With empty Gamma_D the constant skew field is a
/// zero-energy mode and lambda_min collapses to ~0.
pub fn estimate_korn_constant(grid: &Grid, seed: u64) -> Result<KornReport> {
    let n = grid.node_count() * 9;
    let project = |x: &mut [f64]| {
        let mut f = unpack_tensor_vec(grid, x);
        crate::grid_fields::project_tangential_bc(grid, &mut f);
        pack_tensor_into(&f, x);
    };
    let apply_a = |x: &[f64], out: &mut [f64]| {
        let f = unpack_tensor_vec(grid, x);
        let c = curl_h(grid, &f);
        let mut r = curl_h_adjoint(grid, &c);
        for (i, t) in r.data.iter_mut().enumerate() {
            *t = t.add(&f.data[i].sym());
        }
        pack_tensor_into(&r, out);
    };
    let apply_b = |x: &[f64], out: &mut [f64]| {
        out.copy_from_slice(x);
    };
    let est = smallest_eigenvalue(
        &Pencil { dim: n, apply_a: &apply_a, apply_b: &apply_b, project: &project },
        seed,
        1e-8,
        200,
    )?;
    Ok(KornReport {
        dims: grid.dims,
        gamma_d: grid.gamma_d.names().iter().map(|s| s.to_string()).collect(),
        lambda_min: est.lambda,
        c_h: if est.lambda > 1e-300 { 1.0 / est.lambda } else { f64::INFINITY },
        iterations: est.iterations,
    })
}

fn unpack_tensor_vec(grid: &Grid, x: &[f64]) -> TensorField3 {
    let mut f = TensorField3::zero(grid);
    for (n, t) in f.data.iter_mut().enumerate() {
        for i in 0..3 {
            t.a[i].copy_from_slice(&x[9 * n + 3 * i..9 * n + 3 * i + 3]);
        }
    }
    f
}

fn pack_tensor_into(f: &TensorField3, out: &mut [f64]) {
    for (n, t) in f.data.iter().enumerate() {
        for i in 0..3 {
            out[9 * n + 3 * i..9 * n + 3 * i + 3].copy_from_slice(&t.a[i]);
        }
    }
}

fn unpack_vec3(grid: &Grid, x: &[f64]) -> VectorField3 {
    let mut f = VectorField3::zero(grid);
    for (i, v) in f.data.iter_mut().enumerate() {
        v.copy_from_slice(&x[3 * i..3 * i + 3]);
    }
    f
}

fn pack_vec3_into(f: &VectorField3, out: &mut [f64]) {
    for (i, v) in f.data.iter().enumerate() {
        out[3 * i..3 * i + 3].copy_from_slice(v);
    }
}

// ---------------------------------------------------------------------------
// coercivity of the governing bilinear form
// ---------------------------------------------------------------------------

/// Discrete coercivity estimate: the smallest Rayleigh quotient of the
/// variant's bilinear form over the discrete space (kinematic variants) or
/// the cone (isotropic variants, reduced by beta = |q| pointwise).
#[derive(Debug, Clone, serde::Serialize)]
pub struct CoercivityReport {
    pub variant: VariantId,
    pub dims: [usize; 3],
    pub c_min: f64,
    pub iterations: usize,
}

/// Per-node layout of the stacked variable z = (v, q, X).
struct CoercivitySpace {
    q_dim: usize,
}

impl CoercivitySpace {
    fn new(variant: VariantId, params: &MaterialParams) -> Self {
        let q_dim = match variant {
            VariantId::ScIso => params.n_slip(),
            // full tensor q for SC_KIN (Lemma-level space), symmetric
            // deviatoric for the polycrystal variants (projection enforced)
            VariantId::ScKin | VariantId::PcIso | VariantId::PcKin => 9,
            VariantId::RmElastic => 0,
        };
        CoercivitySpace { q_dim }
    }
}

/// Estimates the coercivity constant c_min of a(z,z)/||z||_Z^2.
///
/// Isotropic variants minimize over the cone W = {|q| <= beta}; since a is
/// increasing in beta, the minimizing beta is |q| pointwise, which folds
/// the cone into a quadratic eigenproblem whose Z-norm carries 2||q||^2.
pub fn estimate_coercivity(
    variant: VariantId,
    params: &MaterialParams,
    grid: &Grid,
    seed: u64,
) -> Result<CoercivityReport> {
    if variant == VariantId::RmElastic {
        return Err(Error::Validation(
            "coercivity estimation targets the plasticity variants".into(),
        ));
    }
    let space = CoercivitySpace::new(variant, params);
    let nn = grid.node_count();
    let nv = 3 * nn;
    let nq = space.q_dim * nn;
    let nx = 9 * nn;
    let dim = nv + nq + nx;
    let mu = params.elastic.mu;
    let iso = variant.is_isotropic_hardening();
    let beta_factor = if iso { 2.0 } else { 1.0 };

    // q-block helpers: to/from the tensor at one node
    let q_tensor = |x: &[f64], node: usize| -> Tensor3 {
        match variant {
            VariantId::ScIso => {
                let base = nv + node * space.q_dim;
                assemble_p_from_slips(&x[base..base + space.q_dim], &params.slip_systems)
            }
            _ => {
                let base = nv + node * 9;
                let mut t = Tensor3::ZERO;
                for i in 0..3 {
                    t.a[i].copy_from_slice(&x[base + 3 * i..base + 3 * i + 3]);
                }
                t
            }
        }
    };

    let project = |x: &mut [f64]| {
        // v: zero on Gamma_D
        let mut v = unpack_vec3(grid, &x[..nv]);
        grid.for_each_node(|c, idx| {
            if grid.on_gamma_d(c) {
                v.data[idx] = [0.0; 3];
            }
        });
        pack_vec3_into(&v, &mut x[..nv]);
        // q: slips are unconstrained; tensor q projected onto its space
        match variant {
            VariantId::ScIso => {}
            VariantId::ScKin => {
                for node in 0..nn {
                    let base = nv + node * 9;
                    let mut t = Tensor3::ZERO;
                    for i in 0..3 {
                        t.a[i].copy_from_slice(&x[base + 3 * i..base + 3 * i + 3]);
                    }
                    let t = t.dev();
                    for i in 0..3 {
                        x[base + 3 * i..base + 3 * i + 3].copy_from_slice(&t.a[i]);
                    }
                }
            }
            VariantId::PcIso | VariantId::PcKin => {
                for node in 0..nn {
                    let base = nv + node * 9;
                    let mut t = Tensor3::ZERO;
                    for i in 0..3 {
                        t.a[i].copy_from_slice(&x[base + 3 * i..base + 3 * i + 3]);
                    }
                    let t = t.sym().dev();
                    for i in 0..3 {
                        x[base + 3 * i..base + 3 * i + 3].copy_from_slice(&t.a[i]);
                    }
                }
            }
            VariantId::RmElastic => unreachable!(),
        }
        // X: tangential BC + trace-free
        let mut f = unpack_tensor_vec(grid, &x[nv + nq..]);
        project_micro_subspace(grid, &mut f);
        pack_tensor_into(&f, &mut x[nv + nq..]);
    };

    let apply_a = |x: &[f64], out: &mut [f64]| {
        let v = unpack_vec3(grid, &x[..nv]);
        let xf = unpack_tensor_vec(grid, &x[nv + nq..]);
        let gv = grad_h(grid, &v);
        let cx = curl_h(grid, &xf);

        // elastic residual r = C sym(grad v - q-tensor)
        let mut r = TensorField3::zero(grid);
        let mut micro = TensorField3::zero(grid);
        for node in 0..nn {
            let qt = q_tensor(x, node);
            let e = gv.data[node].sym().sub(&qt.sym());
            r.data[node] = apply_ciso(&params.elastic, &e);
            micro.data[node] = if variant.is_single_crystal() {
                xf.data[node].sub(&qt)
            } else {
                xf.data[node].sym().sub(&qt)
            };
        }

        // v rows: G^T r
        let av = grad_h_adjoint(grid, &r);
        pack_vec3_into(&av, &mut out[..nv]);

        // q rows: -r - mu H_chi micro + hardening
        for node in 0..nn {
            let mut aq = r.data[node].scale(-1.0).add_scaled(&micro.data[node], -mu * params.h_chi);
            match variant {
                VariantId::ScIso => {
                    let base = nv + node * space.q_dim;
                    for (a, sys) in params.slip_systems.iter().enumerate() {
                        out[base + a] =
                            aq.inner(&sys.m) + mu * params.k2 * x[base + a];
                    }
                }
                VariantId::ScKin => {
                    let base = nv + node * 9;
                    let qt = q_tensor(x, node);
                    aq = aq.add_scaled(&qt.sym(), mu * params.k1);
                    for i in 0..3 {
                        out[base + 3 * i..base + 3 * i + 3].copy_from_slice(&aq.a[i]);
                    }
                }
                VariantId::PcIso | VariantId::PcKin => {
                    let base = nv + node * 9;
                    let qt = q_tensor(x, node);
                    let hard = if variant == VariantId::PcIso { params.k2 } else { params.k1 };
                    aq = aq.add_scaled(&qt, mu * hard);
                    for i in 0..3 {
                        out[base + 3 * i..base + 3 * i + 3].copy_from_slice(&aq.a[i]);
                    }
                }
                VariantId::RmElastic => unreachable!(),
            }
        }

        // X rows: mu H_chi micro (already symmetric for PC) + mu L_c^2 Curl' Curl X
        let mut axf = curl_h_adjoint(grid, &cx);
        for (node, t) in axf.data.iter_mut().enumerate() {
            *t = t
                .scale(mu * params.l_c * params.l_c)
                .add_scaled(&micro.data[node], mu * params.h_chi);
        }
        pack_tensor_into(&axf, &mut out[nv + nq..]);
    };

    let apply_b = |x: &[f64], out: &mut [f64]| {
        // ||z||_Z^2 = ||grad v||^2 + (1 or 2)||q||^2 + ||X||^2 + ||Curl X||^2
        let v = unpack_vec3(grid, &x[..nv]);
        let gv = grad_h(grid, &v);
        let bv = grad_h_adjoint(grid, &gv);
        pack_vec3_into(&bv, &mut out[..nv]);
        for i in nv..nv + nq {
            out[i] = beta_factor * x[i];
        }
        let xf = unpack_tensor_vec(grid, &x[nv + nq..]);
        let cx = curl_h(grid, &xf);
        let mut bx = curl_h_adjoint(grid, &cx);
        for (node, t) in bx.data.iter_mut().enumerate() {
            *t = t.add(&xf.data[node]);
        }
        pack_tensor_into(&bx, &mut out[nv + nq..]);
    };

    let est = smallest_eigenvalue(
        &Pencil { dim, apply_a: &apply_a, apply_b: &apply_b, project: &project },
        seed,
        1e-8,
        200,
    )?;
    Ok(CoercivityReport {
        variant,
        dims: grid.dims,
        c_min: est.lambda,
        iterations: est.iterations,
    })
}

// ---------------------------------------------------------------------------
// norm equivalence (Lemma-level check)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct NormEquivalenceReport {
    pub dims: [usize; 3],
    pub samples: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// Smallest eigenvalue of (sym'sym + Curl'Curl) on the trace-free BC
    /// space; positive iff ||.||_* = 0 forces the fields to vanish.
    pub vanishing_lambda: f64,
    pub vanishing_ok: bool,
}

/// Samples the ratio ||(q,X)||_*^2 / ||(q,X)||_{PxQ}^2 with
/// ||(q,X)||_*^2 = ||q - X||^2 + ||sym q||^2 + ||Curl X||^2 over random
/// admissible pairs, and certifies the vanishing property through the
/// Korn-type eigenvalue on the same space.
pub fn check_norm_equivalence(grid: &Grid, samples: usize, seed: u64) -> Result<NormEquivalenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = grid.weight();
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio: f64 = 0.0;
    for _ in 0..samples {
        let mut q = TensorField3::zero(grid);
        for t in q.data.iter_mut() {
            for i in 0..3 {
                for j in 0..3 {
                    t.a[i][j] = rng.gen_range(-1.0..1.0);
                }
            }
            *t = t.dev();
        }
        let mut x = TensorField3::zero(grid);
        for t in x.data.iter_mut() {
            for i in 0..3 {
                for j in 0..3 {
                    t.a[i][j] = rng.gen_range(-1.0..1.0);
                }
            }
        }
        project_micro_subspace(grid, &mut x);
        let cx = curl_h(grid, &x);
        let mut star = 0.0;
        let mut plain = 0.0;
        for idx in 0..grid.node_count() {
            star += w
                * (q.data[idx].sub(&x.data[idx]).norm_sq()
                    + q.data[idx].sym().norm_sq()
                    + cx.data[idx].norm_sq());
            plain += w * (q.data[idx].norm_sq() + x.data[idx].norm_sq() + cx.data[idx].norm_sq());
        }
        if plain > 0.0 {
            let ratio = star / plain;
            min_ratio = min_ratio.min(ratio);
            max_ratio = max_ratio.max(ratio);
        }
    }

    // vanishing property: ||q - X|| = 0, ||sym q|| = 0, ||Curl X|| = 0
    // forces q = X, sym X = 0, Curl X = 0, and the Korn-type eigenvalue on
    // the trace-free BC space decides whether such X must vanish.
    let n = grid.node_count() * 9;
    let project = |x: &mut [f64]| {
        let mut f = unpack_tensor_vec(grid, x);
        project_micro_subspace(grid, &mut f);
        pack_tensor_into(&f, x);
    };
    let apply_a = |x: &[f64], out: &mut [f64]| {
        let f = unpack_tensor_vec(grid, x);
        let c = curl_h(grid, &f);
        let mut r = curl_h_adjoint(grid, &c);
        for (i, t) in r.data.iter_mut().enumerate() {
            *t = t.add(&f.data[i].sym());
        }
        pack_tensor_into(&r, out);
    };
    let apply_b = |x: &[f64], out: &mut [f64]| out.copy_from_slice(x);
    let est = smallest_eigenvalue(
        &Pencil { dim: n, apply_a: &apply_a, apply_b: &apply_b, project: &project },
        seed ^ 0x5eed,
        1e-8,
        200,
    )?;

    Ok(NormEquivalenceReport {
        dims: grid.dims,
        samples,
        min_ratio,
        max_ratio,
        vanishing_lambda: est.lambda,
        vanishing_ok: est.lambda > 1e-8,
    })
}

// ---------------------------------------------------------------------------
// penalty sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct PenaltyPoint {
    pub h_chi: f64,
    /// ||p - chi_p|| (SC) or ||eps_p - sym chi_p|| (PC) at final load.
    pub gap: f64,
}

/// Runs the scenario once per H_chi value and records the micro gap at the
/// final load level.
pub fn penalty_sweep(
    scenario: &Scenario,
    h_chi_values: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<PenaltyPoint>> {
    let mut out = Vec::with_capacity(h_chi_values.len());
    for &h in h_chi_values {
        let mut sc = scenario.clone();
        sc.params.h_chi = h;
        let (state, _) = run_to_final_state(&sc, cfg, InitMode::WarmStart)?;
        out.push(PenaltyPoint { h_chi: h, gap: micro_gap(&sc, &state) });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// uniqueness probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct UniquenessReport {
    pub variant: VariantId,
    pub hardening_constant: f64,
    /// Max over steps and fields of the relative L2 discrepancy between the
    /// warm-started and the randomly initialized runs.
    pub max_rel_discrepancy: f64,
    pub per_step: Vec<f64>,
    /// True when the variant's hardening constant is positive and the
    /// discrepancy bound is asserted; with zero hardening the probe only
    /// reports.
    pub asserted: bool,
}

fn state_discrepancy(grid: &Grid, params: &MaterialParams, a: &RunState, b: &RunState) -> f64 {
    let rel = |d: f64, n: f64| d / n.max(1e-12);
    let mut du = a.u.clone();
    for (i, v) in du.data.iter_mut().enumerate() {
        for k in 0..3 {
            v[k] -= b.u.data[i][k];
        }
    }
    let mut dchi = a.chi.clone();
    for (i, t) in dchi.data.iter_mut().enumerate() {
        *t = t.sub(&b.chi.data[i]);
    }
    let pa = a.plastic.p_field(grid, params);
    let mut dp = pa.clone();
    let pb = b.plastic.p_field(grid, params);
    for (i, t) in dp.data.iter_mut().enumerate() {
        *t = t.sub(&pb.data[i]);
    }
    let mut out = rel(
        crate::grid_fields::norm_l2_vec(grid, &du),
        crate::grid_fields::norm_l2_vec(grid, &a.u),
    );
    out = out.max(rel(
        crate::grid_fields::norm_l2(grid, &dchi),
        crate::grid_fields::norm_l2(grid, &a.chi),
    ));
    out = out.max(rel(
        crate::grid_fields::norm_l2(grid, &dp),
        crate::grid_fields::norm_l2(grid, &pa),
    ));
    out.max(rel(a.plastic.delta_norm_l2(&b.plastic, grid), a.plastic.norm_l2(grid)))
}

/// Runs the scenario twice with different inner-iteration initializations
/// (warm start vs seeded random admissible start) and reports the maximal
/// per-step field discrepancy.
pub fn uniqueness_probe(scenario: &Scenario, cfg: &SolverConfig, seed: u64) -> Result<UniquenessReport> {
    use crate::materials::CrystalKinetics;
    let kinetics = if scenario.variant.is_single_crystal() {
        Some(CrystalKinetics::new(scenario.variant, &scenario.params))
    } else {
        None
    };
    scenario.validate()?;

    let mut per_step = Vec::new();
    let mut state_a = RunState::zero(scenario);
    let mut state_b = RunState::zero(scenario);
    for step in 1..=scenario.n_steps() {
        let (next_a, _) = crate::solver::incremental_step(
            scenario,
            cfg,
            &state_a,
            step,
            InitMode::WarmStart,
            kinetics.as_ref(),
        )?;
        let (next_b, _) = crate::solver::incremental_step(
            scenario,
            cfg,
            &state_b,
            step,
            InitMode::SeededRandom(seed),
            kinetics.as_ref(),
        )?;
        per_step.push(state_discrepancy(&scenario.grid, &scenario.params, &next_a, &next_b));
        state_a = next_a;
        state_b = next_b;
    }
    let max_rel = per_step.iter().fold(0.0f64, |m, d| m.max(*d));
    let hard = scenario.variant.hardening_constant(&scenario.params);
    Ok(UniquenessReport {
        variant: scenario.variant,
        hardening_constant: hard,
        max_rel_discrepancy: max_rel,
        per_step,
        asserted: hard > 0.0,
    })
}

// ---------------------------------------------------------------------------
// pointwise brute-force oracle
// ---------------------------------------------------------------------------

/// Result of a brute-force local minimization.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub delta: DeltaLambda,
    pub objective: f64,
    /// Final grid spacing of the search.
    pub resolution: f64,
}

/// The local incremental objective: free energy at the updated state plus
/// the dissipation of the increment, at frozen grad u and chi_p. Evaluated
/// from the energy definition, independent of the return-map algebra.
fn local_objective(
    variant: VariantId,
    m: &MaterialParams,
    trial: &LocalTrialState,
    delta: &[f64],
) -> f64 {
    let mu = m.elastic.mu;
    match (&trial.prev, variant) {
        (PlasticPoint::Crystal { gamma, eta }, _) => {
            let mut p = Tensor3::ZERO;
            let mut hard = 0.0;
            let mut diss = 0.0;
            for (a, sys) in m.slip_systems.iter().enumerate() {
                let g = gamma[a] + delta[a];
                p = p.add_scaled(&sys.m, g);
                if variant == VariantId::ScIso {
                    let e = eta[a] + delta[a].abs();
                    hard += 0.5 * mu * m.k2 * e * e;
                }
                diss += m.sigma0 * delta[a].abs();
            }
            if variant == VariantId::ScKin {
                hard = 0.5 * mu * m.k1 * p.sym().norm_sq();
            }
            let eps_e = trial.grad_u.sym().sub(&p.sym());
            let elastic = 0.5 * apply_ciso(&m.elastic, &eps_e).inner(&eps_e);
            let micro = 0.5 * mu * m.h_chi * p.sub(&trial.chi_p).norm_sq();
            elastic + micro + hard + diss
        }
        (PlasticPoint::Poly { eps_p, eta_p }, _) => {
            // radial parametrization along the trial direction
            let t = delta[0];
            let sigma_tr = cauchy_stress(m, &trial.grad_u, eps_p);
            let se = eshelby_stress(variant, m, &sigma_tr, &trial.chi_p, &trial.prev)
                .expect("plasticity variant");
            let dev = se.dev();
            let n_dir = if dev.norm() > 0.0 { dev.scale(1.0 / dev.norm()) } else { dev };
            let eps = eps_p.add_scaled(&n_dir, t);
            let eps_e = trial.grad_u.sym().sub(&eps);
            let elastic = 0.5 * apply_ciso(&m.elastic, &eps_e).inner(&eps_e);
            let micro = 0.5 * mu * m.h_chi * eps.sub(&trial.chi_p.sym()).norm_sq();
            let hard = if variant == VariantId::PcIso {
                let e = eta_p + t.abs();
                0.5 * mu * m.k2 * e * e
            } else {
                0.5 * mu * m.k1 * eps.norm_sq()
            };
            elastic + micro + hard + m.sigma0 * t.abs()
        }
        _ => panic!("oracle: unsupported state kind"),
    }
}

/// Brute-force grid search with two refinement passes minimizing the local
/// incremental potential. Polycrystal problems reduce to 1D in the radial
/// multiplier; single-crystal searches run over the (at most 3) slip
/// increments.
pub fn pointwise_oracle(
    variant: VariantId,
    m: &MaterialParams,
    trial: &LocalTrialState,
    box_half: f64,
) -> Result<OracleResult> {
    let k = match (&trial.prev, variant) {
        (PlasticPoint::Crystal { gamma, .. }, VariantId::ScIso | VariantId::ScKin) => gamma.len(),
        (PlasticPoint::Poly { .. }, VariantId::PcIso | VariantId::PcKin) => 1,
        _ => return Err(Error::Validation("oracle: state kind does not match variant".into())),
    };
    if k > 3 {
        return Err(Error::Validation(format!(
            "oracle restricted to <= 3 active scalar unknowns, got {k}"
        )));
    }
    let points_per_dim = if k == 1 { 161 } else { 101 };
    let (lo0, hi0) = match variant {
        VariantId::PcIso | VariantId::PcKin => (0.0, box_half),
        _ => (-box_half, box_half),
    };

    let mut lo = vec![lo0; k];
    let mut hi = vec![hi0; k];
    let mut best = vec![0.0; k];
    let mut best_j = f64::INFINITY;
    let mut spacing = 0.0;
    for _pass in 0..3 {
        let n = points_per_dim;
        spacing = (hi[0] - lo[0]) / (n - 1) as f64;
        let mut idx = vec![0usize; k];
        let mut delta = vec![0.0; k];
        loop {
            for d in 0..k {
                let s = (hi[d] - lo[d]) / (n - 1) as f64;
                delta[d] = lo[d] + idx[d] as f64 * s;
            }
            let j = local_objective(variant, m, trial, &delta);
            if j < best_j {
                best_j = j;
                best.copy_from_slice(&delta);
            }
            // odometer
            let mut d = 0;
            loop {
                idx[d] += 1;
                if idx[d] < n {
                    break;
                }
                idx[d] = 0;
                d += 1;
                if d == k {
                    break;
                }
            }
            if d == k {
                break;
            }
        }
        for d in 0..k {
            let s = (hi[d] - lo[d]) / (n - 1) as f64;
            lo[d] = best[d] - 2.0 * s;
            hi[d] = best[d] + 2.0 * s;
            if matches!(variant, VariantId::PcIso | VariantId::PcKin) {
                lo[d] = lo[d].max(0.0);
            }
        }
    }
    let delta = match variant {
        VariantId::PcIso | VariantId::PcKin => DeltaLambda::Scalar(best[0]),
        _ => DeltaLambda::PerSystem(best),
    };
    Ok(OracleResult { delta, objective: best_j, resolution: spacing })
}

/// Oracle-vs-return-map comparison over randomized trial states.
#[derive(Debug, Clone, serde::Serialize)]
pub struct OracleComparisonReport {
    pub variant: VariantId,
    pub trials: usize,
    pub max_abs_diff: f64,
    pub max_kkt_phi: f64,
    pub max_kkt_complementarity: f64,
    pub plastic_trials: usize,
}

/// Builds random local trial states (a mix of elastic and plastic) and
/// compares the return map against the brute-force oracle.
pub fn run_oracle_comparison(
    variant: VariantId,
    base: &MaterialParams,
    trials: usize,
    seed: u64,
) -> Result<OracleComparisonReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fcc = crate::tensor3::fcc_slip_family();
    let mut max_diff: f64 = 0.0;
    let mut max_phi = f64::NEG_INFINITY;
    let mut max_comp: f64 = 0.0;
    let mut plastic_trials = 0;
    let cfg = LocalSolveConfig::default();

    for _ in 0..trials {
        let mut m = base.clone();
        let is_sc = variant.is_single_crystal();
        if is_sc {
            let k = rng.gen_range(1..=3usize);
            let mut systems = Vec::with_capacity(k);
            let mut used = Vec::new();
            while systems.len() < k {
                let i = rng.gen_range(0..fcc.len());
                if !used.contains(&i) {
                    used.push(i);
                    systems.push(fcc[i].clone());
                }
            }
            m.slip_systems = systems;
        } else {
            m.slip_systems = Vec::new();
        }

        let n_slip = m.n_slip();
        let scale = m.sigma0 / m.elastic.mu * rng.gen_range(0.2..6.0);
        let mut grad_u = Tensor3::ZERO;
        let mut chi = Tensor3::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                grad_u.a[i][j] = scale * rng.gen_range(-1.0..1.0);
                chi.a[i][j] = 0.5 * scale * rng.gen_range(-1.0..1.0);
            }
        }
        let prev = if is_sc {
            let gamma: Vec<f64> = (0..n_slip).map(|_| 0.3 * scale * rng.gen_range(-1.0..1.0)).collect();
            let eta: Vec<f64> = gamma.iter().map(|g| g.abs() * rng.gen_range(1.0..1.5)).collect();
            PlasticPoint::Crystal { gamma, eta }
        } else {
            let mut e = Tensor3::ZERO;
            for i in 0..3 {
                for j in 0..3 {
                    e.a[i][j] = 0.3 * scale * rng.gen_range(-1.0..1.0);
                }
            }
            let e = e.sym().dev();
            PlasticPoint::Poly { eps_p: e, eta_p: e.norm() * rng.gen_range(1.0..1.5) }
        };
        let trial = LocalTrialState { grad_u, chi_p: chi, prev };

        let up = local_return_map(variant, &m, &trial, &cfg)?;
        let oracle = pointwise_oracle(variant, &m, &trial, 2.0)?;
        let diff = match (&up.delta, &oracle.delta) {
            (DeltaLambda::Scalar(a), DeltaLambda::Scalar(b)) => (a - b).abs(),
            (DeltaLambda::PerSystem(a), DeltaLambda::PerSystem(b)) => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max),
            _ => unreachable!(),
        };
        max_diff = max_diff.max(diff);
        max_phi = max_phi.max(up.kkt_phi);
        max_comp = max_comp.max(up.kkt_complementarity);
        if up.delta.max_abs() > 0.0 {
            plastic_trials += 1;
        }
    }
    Ok(OracleComparisonReport {
        variant,
        trials,
        max_abs_diff: max_diff,
        max_kkt_phi: max_phi,
        max_kkt_complementarity: max_comp,
        plastic_trials,
    })
}

// ---------------------------------------------------------------------------
// relaxed micromorphic stiff limit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct StiffLimitPoint {
    pub scale: f64,
    /// Relative L2 displacement discrepancy against the limit elastic solve.
    pub discrepancy: f64,
}

/// Scales (mu_e, mu_c, lambda_e) by each factor and compares the RM
/// displacement with the linear elastic solution at moduli
/// (mu_micro, lambda_micro).
pub fn rm_stiff_limit_check(
    scenario: &Scenario,
    scales: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<StiffLimitPoint>> {
    if scenario.variant != VariantId::RmElastic {
        return Err(Error::Validation("stiff-limit check needs an RM_ELASTIC scenario".into()));
    }
    let rm = scenario
        .params
        .rm
        .ok_or_else(|| Error::Validation("missing RM moduli".into()))?;
    let s_final = *scenario.load_curve.last().unwrap();

    // limit: plain elasticity with the micro moduli
    let mut limit_scenario = scenario.clone();
    limit_scenario.variant = VariantId::PcIso;
    limit_scenario.params.elastic =
        crate::tensor3::ElasticModuli::new(rm.mu_micro, rm.lambda_micro)?;
    limit_scenario.params.sigma0 = 1.0; // unused by the pure displacement solve
    let zero_plastic =
        crate::solver::PlasticField::zero(VariantId::PcIso, &scenario.grid, 0);
    let (u_limit, _) =
        crate::solver::solve_displacement(&limit_scenario, &zero_plastic, s_final, cfg, None)?;
    let norm_limit = crate::grid_fields::norm_l2_vec(&scenario.grid, &u_limit).max(1e-300);

    let mut out = Vec::with_capacity(scales.len());
    for &t in scales {
        let mut sc = scenario.clone();
        let mut rmt = rm;
        rmt.mu_e = rm.mu_e * t;
        rmt.mu_c = rm.mu_c * t;
        rmt.lambda_e = rm.lambda_e * t;
        sc.params.rm = Some(rmt);
        let (u, _) = crate::solver::solve_rm_coupled(&sc, cfg, s_final, None)?;
        let mut du = u.clone();
        for (i, v) in du.data.iter_mut().enumerate() {
            for d in 0..3 {
                v[d] -= u_limit.data[i][d];
            }
        }
        out.push(StiffLimitPoint {
            scale: t,
            discrepancy: crate::grid_fields::norm_l2_vec(&scenario.grid, &du) / norm_limit,
        });
    }
    Ok(out)
}


// ---------------------------------------------------------------------------
// incremental variational inequality spot check
// ---------------------------------------------------------------------------

/// Samples admissible test directions z = w+ + pert (pert supported on the
/// free dofs, with the cone-minimal hardening test rate for the isotropic
/// variants) and checks the incremental VI of the converged step:
///     a(w+, z - w+) - l(z - w+) + j(z - w_n) - j(w+ - w_n) >= -tol.
/// Returns the most negative slack found (0 when every sample satisfies
/// the inequality outright).
pub fn vi_spot_check(
    scenario: &Scenario,
    state_n: &RunState,
    state_next: &RunState,
    s_level: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let grid = &scenario.grid;
    let params = &scenario.params;
    let mu = params.elastic.mu;
    let w = grid.weight();
    let is_sc = scenario.variant.is_single_crystal();
    let n_slip = params.n_slip();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let f = scenario.body_force_field(s_level);
    let g_u = grad_h(grid, &state_next.u);
    let eps_p_next = state_next.plastic.eps_p_field(grid, params);
    let p_next = state_next.plastic.p_field(grid, params);

    let c_chi = curl_h(grid, &state_next.chi);

    // elastic stress of the converged state, reused by every sample
    let mut sig = TensorField3::zero(grid);
    for idx in 0..grid.node_count() {
        sig.data[idx] =
            apply_ciso(&params.elastic, &g_u.data[idx].sym().sub(&eps_p_next.data[idx]));
    }

    let mut worst: f64 = 0.0;
    for _ in 0..n_samples {
        let amp = rng.gen_range(0.001..0.1);
        // displacement test direction, zero on Gamma_D
        let mut v = VectorField3::zero(grid);
        for vv in v.data.iter_mut() {
            for d in 0..3 {
                vv[d] = amp * rng.gen_range(-1.0..1.0);
            }
        }
        grid.for_each_node(|c, idx| {
            if grid.on_gamma_d(c) {
                v.data[idx] = [0.0; 3];
            }
        });
        // micro test direction in the chi_p subspace
        let mut xf = TensorField3::zero(grid);
        for t in xf.data.iter_mut() {
            for i in 0..3 {
                for j in 0..3 {
                    t.a[i][j] = amp * rng.gen_range(-1.0..1.0);
                }
            }
        }
        project_micro_subspace(grid, &mut xf);
        // plastic test rate: per-slip scalars (SC) or a sym-dev tensor (PC)
        let q_slips: Vec<f64> = if is_sc {
            (0..grid.node_count() * n_slip)
                .map(|_| amp * rng.gen_range(-1.0..1.0))
                .collect()
        } else {
            Vec::new()
        };
        let mut q_tensor = TensorField3::zero(grid);
        for (idx, t) in q_tensor.data.iter_mut().enumerate() {
            if is_sc {
                *t = assemble_p_from_slips(
                    &q_slips[idx * n_slip..(idx + 1) * n_slip],
                    &params.slip_systems,
                );
            } else {
                let mut r = Tensor3::ZERO;
                for i in 0..3 {
                    for j in 0..3 {
                        r.a[i][j] = amp * rng.gen_range(-1.0..1.0);
                    }
                }
                *t = r.sym().dev();
            }
        }

        let gv = grad_h(grid, &v);
        let cxf = curl_h(grid, &xf);
        let mut slack = 0.0;
        for idx in 0..grid.node_count() {
            // a(w+, pert): elastic, micro, defect blocks
            let pert_e = gv.data[idx].sym().sub(&q_tensor.data[idx].sym());
            slack += w * sig.data[idx].inner(&pert_e);
            let (micro_next, micro_pert) = if is_sc {
                (
                    state_next.chi.data[idx].sub(&p_next.data[idx]),
                    xf.data[idx].sub(&q_tensor.data[idx]),
                )
            } else {
                (
                    state_next.chi.data[idx].sym().sub(&eps_p_next.data[idx]),
                    xf.data[idx].sym().sub(&q_tensor.data[idx]),
                )
            };
            slack += w * mu * params.h_chi * micro_next.inner(&micro_pert);
            slack += w * mu * params.l_c * params.l_c * c_chi.data[idx].inner(&cxf.data[idx]);
            if !scenario.variant.is_isotropic_hardening() {
                slack += w * mu * params.k1 * p_next.data[idx].sym().inner(&q_tensor.data[idx].sym());
            }
            // -l(pert)
            slack -= w
                * (f.data[idx][0] * v.data[idx][0]
                    + f.data[idx][1] * v.data[idx][1]
                    + f.data[idx][2] * v.data[idx][2]);
        }

        // dissipation functionals and the isotropic hardening pairing with
        // the cone-minimal test hardening rate beta_z = |q_z|
        match (&state_n.plastic, &state_next.plastic) {
            (
                crate::solver::PlasticField::Poly { eps_p: p1, .. },
                crate::solver::PlasticField::Poly { eps_p: p2, eta: e2 },
            ) => {
                for idx in 0..grid.node_count() {
                    let dp = p2[idx].sub(&p1[idx]);
                    let zq = dp.add(&q_tensor.data[idx]);
                    slack += w * params.sigma0 * (zq.norm() - dp.norm());
                    if scenario.variant == VariantId::PcIso {
                        slack += w * mu * params.k2 * e2[idx] * (zq.norm() - dp.norm());
                    }
                }
            }
            (
                crate::solver::PlasticField::Crystal { gamma: g1, .. },
                crate::solver::PlasticField::Crystal { gamma: g2, eta: e2, .. },
            ) => {
                for idx in 0..grid.node_count() {
                    for a in 0..n_slip {
                        let dg = g2[idx * n_slip + a] - g1[idx * n_slip + a];
                        let zq = dg + q_slips[idx * n_slip + a];
                        slack += w * params.sigma0 * (zq.abs() - dg.abs());
                        if scenario.variant == VariantId::ScIso {
                            slack += w * mu * params.k2 * e2[idx * n_slip + a] * (zq.abs() - dg.abs());
                        }
                    }
                }
            }
            _ => {}
        }
        worst = worst.min(slack);
    }
    Ok(worst)
}
