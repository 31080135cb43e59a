//! Quasistatic time-incremental solution of the coupled system:
//! equilibrium, microbalance, and plastic flow, via alternating
//! minimization of the incremental energy.
//!
//! Each load step minimizes a(w,w)/2 - l(w) + j(w - w_n) by cycling exact
//! block solves in the fixed order u -> chi_p -> plastic state. The two
//! linear blocks use conjugate gradients on projected subspaces; the
//! plastic block applies the pointwise return maps. At a converged step
//! the discrete variational-inequality equality
//!     a(w+, dw) + D(dw) = l(dw) + R(d lift)
//! holds, which yields the per-step energy audit
//!     dPsi + dD + a(dw,dw)/2 - dW = 0
//! with dW the end-of-step force and reaction work.

use rayon::prelude::*;

use crate::grid_fields::{
    curl_h, curl_h_adjoint, grad_h, grad_h_adjoint, norm_l2, norm_l2_vec, Grid, TensorField3,
    VectorField3,
};
use crate::materials::{
    cauchy_stress, crystal_return_map, eshelby_stress, free_energy_parts, poly_return_map,
    CrystalKinetics, EnergyParts, EnergyPoint, LocalSolveConfig, LocalTrialState, LocalUpdate,
    MaterialParams, PlasticPoint, VariantId,
};
use crate::tensor3::{apply_ciso, Tensor3};
use crate::{Error, Result};

/// Unit shape of the prescribed displacement on Gamma_D; the applied value
/// is shape(x) times the scalar load level.
#[derive(Debug, Clone, PartialEq)]
pub enum DirichletShape {
    Zero,
    /// u = (gamma_bar * z, 0, 0): tangential shear ramp on z-faces.
    SimpleShear { gamma_bar: f64 },
    /// u = A x (manufactured affine data).
    Affine { a: Tensor3 },
}

impl DirichletShape {
    pub fn value(&self, pos: [f64; 3]) -> [f64; 3] {
        match self {
            DirichletShape::Zero => [0.0; 3],
            DirichletShape::SimpleShear { gamma_bar } => [gamma_bar * pos[2], 0.0, 0.0],
            DirichletShape::Affine { a } => a.mul_vec(pos),
        }
    }
}

/// A complete problem description: grid, variant, material, loading.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub grid: Grid,
    pub variant: VariantId,
    pub params: MaterialParams,
    /// Body force amplitude f_0; the applied force is f_0 * s(t).
    pub body_force: [f64; 3],
    /// Scalar load curve including the initial level; s(0) must be 0.
    pub load_curve: Vec<f64>,
    pub dirichlet: DirichletShape,
}

impl Scenario {
    /// Full validation; returns accepted-with-warning notes.
    pub fn validate(&self) -> Result<Vec<String>> {
        let warnings = self.params.validate(self.variant)?;
        if self.load_curve.is_empty() || self.load_curve[0] != 0.0 {
            return Err(Error::Validation(
                "load curve must start at 0 (initial condition w(0) = 0)".into(),
            ));
        }
        if self.grid.gamma_d.is_empty() {
            return Err(Error::Validation(
                "the solver requires a nonempty Gamma_D (the Korn-type inequality fails on the empty set)"
                    .into(),
            ));
        }
        Ok(warnings)
    }

    pub fn n_steps(&self) -> usize {
        self.load_curve.len() - 1
    }

    /// Prescribed displacement field at a load level (zero off Gamma_D).
    pub fn dirichlet_field(&self, s: f64) -> VectorField3 {
        let mut lift = VectorField3::zero(&self.grid);
        self.grid.for_each_node(|c, idx| {
            if self.grid.on_gamma_d(c) {
                let v = self.dirichlet.value(self.grid.position(c));
                lift.data[idx] = [s * v[0], s * v[1], s * v[2]];
            }
        });
        lift
    }

    pub fn body_force_field(&self, s: f64) -> VectorField3 {
        let f = [
            self.body_force[0] * s,
            self.body_force[1] * s,
            self.body_force[2] * s,
        ];
        let mut out = VectorField3::zero(&self.grid);
        for v in out.data.iter_mut() {
            *v = f;
        }
        out
    }
}

/// Iterative-solver tolerances and limits.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SolverConfig {
    /// Relative combined change of (u, chi_p, plastic) that ends a step.
    pub tol_outer: f64,
    /// Relative CG residual tolerance.
    pub tol_cg: f64,
    pub max_outer_iters: usize,
    pub max_cg_iters: usize,
    /// Max Gauss-Seidel sweeps of the local crystal return.
    pub max_local_iters: usize,
    /// Tikhonov term on the chi_p solve (polycrystal skew control).
    pub reg_eps: f64,
    /// Abort the run on a non-converged step instead of continuing.
    pub abort_on_nonconvergence: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol_outer: 1e-8,
            tol_cg: 1e-12,
            max_outer_iters: 20_000,
            max_cg_iters: 50_000,
            max_local_iters: 200,
            reg_eps: 0.0,
            abort_on_nonconvergence: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_outer > 0.0 && self.tol_cg > 0.0) {
            return Err(Error::Validation("solver tolerances must be positive".into()));
        }
        if self.reg_eps < 0.0 {
            return Err(Error::Validation("reg_eps must be >= 0".into()));
        }
        Ok(())
    }

    pub fn local(&self) -> LocalSolveConfig {
        LocalSolveConfig {
            tol: 1e-12,
            max_sweeps: self.max_local_iters,
        }
    }
}

/// Nodal plastic state of a whole run.
#[derive(Debug, Clone, PartialEq)]
pub enum PlasticField {
    Crystal {
        n_slip: usize,
        /// gamma[node * n_slip + alpha]
        gamma: Vec<f64>,
        eta: Vec<f64>,
    },
    Poly {
        eps_p: Vec<Tensor3>,
        eta: Vec<f64>,
    },
    /// RM_ELASTIC: no plastic state.
    None,
}

impl PlasticField {
    pub fn zero(variant: VariantId, grid: &Grid, n_slip: usize) -> Self {
        let n = grid.node_count();
        match variant {
            VariantId::ScIso | VariantId::ScKin => PlasticField::Crystal {
                n_slip,
                gamma: vec![0.0; n * n_slip],
                eta: vec![0.0; n * n_slip],
            },
            VariantId::PcIso | VariantId::PcKin => PlasticField::Poly {
                eps_p: vec![Tensor3::ZERO; n],
                eta: vec![0.0; n],
            },
            VariantId::RmElastic => PlasticField::None,
        }
    }

    pub fn point(&self, idx: usize) -> PlasticPoint {
        match self {
            PlasticField::Crystal { n_slip, gamma, eta } => PlasticPoint::Crystal {
                gamma: gamma[idx * n_slip..(idx + 1) * n_slip].to_vec(),
                eta: eta[idx * n_slip..(idx + 1) * n_slip].to_vec(),
            },
            PlasticField::Poly { eps_p, eta } => PlasticPoint::Poly {
                eps_p: eps_p[idx],
                eta_p: eta[idx],
            },
            PlasticField::None => PlasticPoint::None,
        }
    }

    pub fn set_point(&mut self, idx: usize, p: PlasticPoint) {
        match (self, p) {
            (PlasticField::Crystal { n_slip, gamma, eta }, PlasticPoint::Crystal { gamma: g, eta: e }) => {
                gamma[idx * *n_slip..(idx + 1) * *n_slip].copy_from_slice(&g);
                eta[idx * *n_slip..(idx + 1) * *n_slip].copy_from_slice(&e);
            }
            (PlasticField::Poly { eps_p, eta }, PlasticPoint::Poly { eps_p: e, eta_p }) => {
                eps_p[idx] = e;
                eta[idx] = eta_p;
            }
            (PlasticField::None, PlasticPoint::None) => {}
            _ => panic!("plastic state kind mismatch"),
        }
    }

    /// Plastic distortion p as a nodal tensor field (PC: the symmetric
    /// plastic strain itself).
    pub fn p_field(&self, grid: &Grid, params: &MaterialParams) -> TensorField3 {
        let mut out = TensorField3::zero(grid);
        match self {
            PlasticField::Crystal { n_slip, gamma, .. } => {
                for idx in 0..grid.node_count() {
                    out.data[idx] = crate::tensor3::assemble_p_from_slips(
                        &gamma[idx * n_slip..(idx + 1) * n_slip],
                        &params.slip_systems,
                    );
                }
            }
            PlasticField::Poly { eps_p, .. } => out.data.copy_from_slice(eps_p),
            PlasticField::None => {}
        }
        out
    }

    /// Symmetric plastic strain field.
    pub fn eps_p_field(&self, grid: &Grid, params: &MaterialParams) -> TensorField3 {
        let mut out = self.p_field(grid, params);
        for t in out.data.iter_mut() {
            *t = t.sym();
        }
        out
    }

    pub fn max_eta(&self) -> f64 {
        match self {
            PlasticField::Crystal { eta, .. } | PlasticField::Poly { eta, .. } => {
                eta.iter().fold(0.0f64, |m, e| m.max(*e))
            }
            PlasticField::None => 0.0,
        }
    }

    /// L2 norm of the raw state vector (slips+eta or eps_p+eta), h^3-weighted.
    pub fn norm_l2(&self, grid: &Grid) -> f64 {
        let w = grid.weight();
        let s = match self {
            PlasticField::Crystal { gamma, eta, .. } => {
                gamma.iter().map(|x| x * x).sum::<f64>() + eta.iter().map(|x| x * x).sum::<f64>()
            }
            PlasticField::Poly { eps_p, eta } => {
                eps_p.iter().map(|t| t.norm_sq()).sum::<f64>()
                    + eta.iter().map(|x| x * x).sum::<f64>()
            }
            PlasticField::None => 0.0,
        };
        (w * s).sqrt()
    }

    pub fn delta_norm_l2(&self, other: &PlasticField, grid: &Grid) -> f64 {
        let w = grid.weight();
        let s = match (self, other) {
            (
                PlasticField::Crystal { gamma: g1, eta: e1, .. },
                PlasticField::Crystal { gamma: g2, eta: e2, .. },
            ) => {
                g1.iter().zip(g2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                    + e1.iter().zip(e2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }
            (PlasticField::Poly { eps_p: p1, eta: e1 }, PlasticField::Poly { eps_p: p2, eta: e2 }) => {
                p1.iter().zip(p2).map(|(a, b)| a.sub(b).norm_sq()).sum::<f64>()
                    + e1.iter().zip(e2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }
            (PlasticField::None, PlasticField::None) => 0.0,
            _ => panic!("plastic state kind mismatch"),
        };
        (w * s).sqrt()
    }
}

/// Full discrete state of a run at one load level.
#[derive(Debug, Clone)]
pub struct RunState {
    pub u: VectorField3,
    pub chi: TensorField3,
    pub plastic: PlasticField,
}

impl RunState {
    pub fn zero(scenario: &Scenario) -> Self {
        RunState {
            u: VectorField3::zero(&scenario.grid),
            chi: TensorField3::zero(&scenario.grid),
            plastic: PlasticField::zero(
                scenario.variant,
                &scenario.grid,
                scenario.params.n_slip(),
            ),
        }
    }
}

/// Per-step record for the run report.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StepResult {
    pub step: usize,
    pub load_level: f64,
    pub converged: bool,
    pub outer_iters: usize,
    /// Final combined relative change of (u, chi_p, plastic).
    pub residual: f64,
    pub residual_history: Vec<f64>,
    /// Incremental objective after each accepted cycle; nonincreasing.
    pub objective_history: Vec<f64>,
    pub energy: EnergyParts,
    pub energy_total: f64,
    /// sigma0-weighted plastic increment measure (rate-independent dissipation).
    pub dissipation_increment: f64,
    /// a(dw, dw)/2: transition dissipation of the incremental minimization.
    pub transition_dissipation: f64,
    /// End-of-step external work: body-force work plus reaction work on the
    /// prescribed displacement increment.
    pub external_work_increment: f64,
    /// dPsi + dD + dD_trans - dW; zero at a converged step up to solver tolerance.
    pub energy_audit_residual: f64,
    /// Audit residual relative to the largest participating term.
    pub energy_audit_relative: f64,
    /// sum over nodes of <Sigma_E, dp> + g deta; nonnegative by the
    /// dissipation inequality.
    pub dissipation_pairing: f64,
    pub max_eta: f64,
    pub plastic_active_nodes: usize,
    pub max_kkt_phi: f64,
    pub max_kkt_complementarity: f64,
    pub cg_iters_displacement: usize,
    pub cg_iters_micro: usize,
}

/// Whole-run report.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunReport {
    pub variant: VariantId,
    pub grid_dims: [usize; 3],
    pub grid_h: f64,
    pub gamma_d: Vec<String>,
    pub warnings: Vec<String>,
    pub steps: Vec<StepResult>,
    pub completed: bool,
    pub failure: Option<String>,
    /// ||p - chi_p|| (SC) or ||eps_p - sym chi_p|| (PC) at the final state.
    pub final_micro_gap: f64,
    pub total_dissipation: f64,
}

/// How the inner iteration of each step is initialized.
#[derive(Debug, Clone, Copy)]
pub enum InitMode {
    /// Start from the previous step's fields.
    WarmStart,
    /// Start from a seeded random admissible state (uniqueness probe).
    SeededRandom(u64),
}

// ---------------------------------------------------------------------------
// conjugate gradients on projected subspaces
// ---------------------------------------------------------------------------

pub struct CgOutcome {
    pub iters: usize,
    pub relative_residual: f64,
}

/// Plain CG for SPD operators given as closures over flat vectors. The
/// caller guarantees that `apply` maps the admissible subspace into itself
/// and that `b` and `x` lie in it.
pub fn cg_solve(
    apply: &mut dyn FnMut(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    tol_rel: f64,
    max_iters: usize,
    context: &'static str,
) -> Result<CgOutcome> {
    let n = b.len();
    let norm_b = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_b == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgOutcome { iters: 0, relative_residual: 0.0 });
    }
    let mut ax = vec![0.0; n];
    apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let target = tol_rel * norm_b;
    if rr.sqrt() <= target {
        return Ok(CgOutcome { iters: 0, relative_residual: rr.sqrt() / norm_b });
    }
    let mut ap = vec![0.0; n];
    for it in 1..=max_iters {
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            // numerically singular direction; report as non-convergence
            return Err(Error::CgNonConvergence {
                context,
                iters: it,
                residual: rr.sqrt() / norm_b,
            });
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        if rr_new.sqrt() <= target {
            return Ok(CgOutcome { iters: it, relative_residual: rr_new.sqrt() / norm_b });
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(Error::CgNonConvergence {
        context,
        iters: max_iters,
        residual: rr.sqrt() / norm_b,
    })
}

fn pack_vec(f: &VectorField3) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.data.len() * 3);
    for v in &f.data {
        out.extend_from_slice(v);
    }
    out
}

fn unpack_vec(grid: &Grid, x: &[f64]) -> VectorField3 {
    let mut f = VectorField3::zero(grid);
    for (i, v) in f.data.iter_mut().enumerate() {
        v.copy_from_slice(&x[3 * i..3 * i + 3]);
    }
    f
}

fn pack_tensor(f: &TensorField3) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.data.len() * 9);
    for t in &f.data {
        for i in 0..3 {
            out.extend_from_slice(&t.a[i]);
        }
    }
    out
}

fn unpack_tensor(grid: &Grid, x: &[f64]) -> TensorField3 {
    let mut f = TensorField3::zero(grid);
    for (n, t) in f.data.iter_mut().enumerate() {
        for i in 0..3 {
            t.a[i].copy_from_slice(&x[9 * n + 3 * i..9 * n + 3 * i + 3]);
        }
    }
    f
}

/// Zeroes the displacement components on Gamma_D nodes.
fn project_u_bc(grid: &Grid, u: &mut VectorField3) {
    grid.for_each_node(|c, idx| {
        if grid.on_gamma_d(c) {
            u.data[idx] = [0.0; 3];
        }
    });
}

/// Orthogonal projector onto the chi_p subspace of the plasticity solves:
/// tangential trace zero on Gamma_D and pointwise trace-free.
pub fn project_micro_subspace(grid: &Grid, x: &mut TensorField3) {
    grid.for_each_node(|c, idx| {
        let axes = grid.gamma_d_axes(c);
        let n_axes = axes.iter().filter(|&&b| b).count();
        let t = &mut x.data[idx];
        match n_axes {
            0 => *t = t.dev(),
            1 => {
                let a = axes.iter().position(|&b| b).unwrap();
                for i in 0..3 {
                    for m in 0..3 {
                        if m != a || i == a {
                            // in-face columns zeroed by the tangential BC;
                            // the remaining diagonal entry dies to tr = 0
                            if !(m == a && i != a) {
                                t.a[i][m] = 0.0;
                            }
                        }
                    }
                }
            }
            _ => *t = Tensor3::ZERO,
        }
    });
}

/// Tangential-BC projector without the trace constraint (RM_ELASTIC).
fn project_micro_bc_only(grid: &Grid, x: &mut TensorField3) {
    crate::grid_fields::project_tangential_bc(grid, x);
}

// ---------------------------------------------------------------------------
// block solves
// ---------------------------------------------------------------------------

/// Solves the discrete weak equilibrium at fixed plastic state:
/// <C(sym grad u - eps_p), sym grad v> = <f, v> for all v vanishing on
/// Gamma_D, with u = s * shape on Gamma_D nodes.
pub fn solve_displacement(
    scenario: &Scenario,
    plastic: &PlasticField,
    s_level: f64,
    cfg: &SolverConfig,
    init: Option<&VectorField3>,
) -> Result<(VectorField3, CgOutcome)> {
    let grid = &scenario.grid;
    let params = &scenario.params;
    let lift = scenario.dirichlet_field(s_level);
    let f = scenario.body_force_field(s_level);
    let eps_p = plastic.eps_p_field(grid, params);

    let apply_full = |u: &VectorField3| -> VectorField3 {
        let g = grad_h(grid, u);
        let mut s = TensorField3::zero(grid);
        for (i, t) in g.data.iter().enumerate() {
            s.data[i] = apply_ciso(&params.elastic, t);
        }
        grad_h_adjoint(grid, &s)
    };

    // rhs = f + G^T C eps_p - A(lift), restricted to free components
    let mut ce = TensorField3::zero(grid);
    for (i, t) in eps_p.data.iter().enumerate() {
        ce.data[i] = apply_ciso(&params.elastic, t);
    }
    let mut rhs = grad_h_adjoint(grid, &ce);
    for (i, v) in rhs.data.iter_mut().enumerate() {
        for d in 0..3 {
            v[d] += f.data[i][d];
        }
    }
    let a_lift = apply_full(&lift);
    for (i, v) in rhs.data.iter_mut().enumerate() {
        for d in 0..3 {
            v[d] -= a_lift.data[i][d];
        }
    }
    project_u_bc(grid, &mut rhs);

    let mut x0 = match init {
        Some(u) => {
            let mut d = u.clone();
            for (i, v) in d.data.iter_mut().enumerate() {
                for k in 0..3 {
                    v[k] -= lift.data[i][k];
                }
            }
            d
        }
        None => VectorField3::zero(grid),
    };
    project_u_bc(grid, &mut x0);

    let mut apply = |xs: &[f64], out: &mut [f64]| {
        let mut u = unpack_vec(grid, xs);
        project_u_bc(grid, &mut u);
        let mut au = apply_full(&u);
        project_u_bc(grid, &mut au);
        out.copy_from_slice(&pack_vec(&au));
    };

    let b = pack_vec(&rhs);
    let mut x = pack_vec(&x0);
    let outcome = cg_solve(&mut apply, &b, &mut x, cfg.tol_cg, cfg.max_cg_iters, "displacement solve")?;
    let mut u = unpack_vec(grid, &x);
    project_u_bc(grid, &mut u);
    for (i, v) in u.data.iter_mut().enumerate() {
        for d in 0..3 {
            v[d] += lift.data[i][d];
        }
    }
    Ok((u, outcome))
}

/// Solves the discrete weak microbalance at fixed plastic state. SC:
/// mu L_c^2 <curl chi, curl X> + mu H_chi <chi - p, X> = 0; PC uses the
/// symmetric coupling plus the optional Tikhonov term. Test fields X
/// satisfy the tangential BC and are trace-free.
pub fn solve_microdistortion(
    scenario: &Scenario,
    plastic: &PlasticField,
    cfg: &SolverConfig,
    init: Option<&TensorField3>,
) -> Result<(TensorField3, CgOutcome)> {
    let grid = &scenario.grid;
    let params = &scenario.params;
    let mu = params.elastic.mu;
    let variant = scenario.variant;
    let is_sc = variant.is_single_crystal();
    let p_field = plastic.p_field(grid, params);

    if params.l_c == 0.0 {
        if is_sc {
            // the microbalance degenerates to the algebraic identity chi_p = p
            return Ok((p_field, CgOutcome { iters: 0, relative_residual: 0.0 }));
        }
        if cfg.reg_eps == 0.0 {
            return Err(Error::Validation(
                "PC microdistortion solve with L_c = 0 is singular (skew chi_p uncontrolled); set reg_eps > 0"
                    .into(),
            ));
        }
    }

    let curl_coeff = mu * params.l_c * params.l_c;
    let micro_coeff = mu * params.h_chi;

    let apply_op = |chi: &TensorField3| -> TensorField3 {
        let c = curl_h(grid, chi);
        let mut out = curl_h_adjoint(grid, &c);
        for t in out.data.iter_mut() {
            *t = t.scale(curl_coeff);
        }
        for (i, t) in out.data.iter_mut().enumerate() {
            if is_sc {
                *t = t.add_scaled(&chi.data[i], micro_coeff);
            } else {
                *t = t.add_scaled(&chi.data[i].sym(), micro_coeff);
            }
            if cfg.reg_eps > 0.0 {
                *t = t.add_scaled(&chi.data[i], cfg.reg_eps);
            }
        }
        out
    };

    // rhs: mu H_chi p (SC) or mu H_chi eps_p (PC, already symmetric)
    let mut rhs = TensorField3::zero(grid);
    for (i, t) in rhs.data.iter_mut().enumerate() {
        *t = if is_sc {
            p_field.data[i].scale(micro_coeff)
        } else {
            p_field.data[i].sym().scale(micro_coeff)
        };
    }
    project_micro_subspace(grid, &mut rhs);

    let mut x0 = init.cloned().unwrap_or_else(|| TensorField3::zero(grid));
    project_micro_subspace(grid, &mut x0);

    let mut apply = |xs: &[f64], out: &mut [f64]| {
        let mut chi = unpack_tensor(grid, xs);
        project_micro_subspace(grid, &mut chi);
        let mut achi = apply_op(&chi);
        project_micro_subspace(grid, &mut achi);
        out.copy_from_slice(&pack_tensor(&achi));
    };

    let b = pack_tensor(&rhs);
    let mut x = pack_tensor(&x0);
    let outcome = match cg_solve(&mut apply, &b, &mut x, cfg.tol_cg, cfg.max_cg_iters, "microdistortion solve") {
        Ok(o) => o,
        Err(Error::CgNonConvergence { iters, residual, .. })
            if variant.is_polycrystal() && cfg.reg_eps == 0.0 =>
        {
            return Err(Error::Solver(format!(
                "microdistortion solve stalled after {iters} iterations (residual {residual:.3e}); \
                 the discrete operator is nearly singular on this grid — set reg_eps > 0 (e.g. 1e-10 * mu * H_chi)"
            )));
        }
        Err(e) => return Err(e),
    };
    let mut chi = unpack_tensor(grid, &x);
    project_micro_subspace(grid, &mut chi);
    Ok((chi, outcome))
}

/// Diagnostics of one plastic sweep.
#[derive(Debug, Clone, Default)]
pub struct SweepDiag {
    pub max_kkt_phi: f64,
    pub max_kkt_complementarity: f64,
    pub active_nodes: usize,
    pub max_sweeps: usize,
}

/// Applies the local return map in every node using the trial state built
/// from u and chi_p; the previous state is the converged state of the last
/// load step. Nodes are independent; results are deterministic.
pub fn plastic_update_sweep(
    scenario: &Scenario,
    u: &VectorField3,
    chi: &TensorField3,
    prev: &PlasticField,
    cfg: &SolverConfig,
    kinetics: Option<&CrystalKinetics>,
) -> Result<(PlasticField, SweepDiag)> {
    let grid = &scenario.grid;
    let params = &scenario.params;
    let variant = scenario.variant;
    let g_u = grad_h(grid, u);
    let local_cfg = cfg.local();

    let updates: Result<Vec<LocalUpdate>> = (0..grid.node_count())
        .into_par_iter()
        .map(|idx| {
            let trial = LocalTrialState {
                grad_u: g_u.data[idx],
                chi_p: chi.data[idx],
                prev: prev.point(idx),
            };
            match variant {
                VariantId::PcIso | VariantId::PcKin => poly_return_map(variant, params, &trial),
                VariantId::ScIso | VariantId::ScKin => {
                    let kin = kinetics.expect("crystal kinetics required for SC sweep");
                    crystal_return_map(params, &trial, kin, &local_cfg, grid.coords(idx))
                }
                VariantId::RmElastic => Err(Error::Validation("RM_ELASTIC has no plastic sweep".into())),
            }
        })
        .collect();
    let updates = updates?;

    let mut out = prev.clone();
    let mut diag = SweepDiag {
        max_kkt_phi: f64::NEG_INFINITY,
        ..Default::default()
    };
    for (idx, up) in updates.into_iter().enumerate() {
        diag.max_kkt_phi = diag.max_kkt_phi.max(up.kkt_phi);
        diag.max_kkt_complementarity = diag.max_kkt_complementarity.max(up.kkt_complementarity);
        diag.max_sweeps = diag.max_sweeps.max(up.sweeps);
        if up.delta.max_abs() > 0.0 {
            diag.active_nodes += 1;
        }
        out.set_point(idx, up.state);
    }
    Ok((out, diag))
}

// ---------------------------------------------------------------------------
// energies and the audit
// ---------------------------------------------------------------------------

/// Total free energy of a state, split into its contributions.
pub fn total_energy(scenario: &Scenario, state: &RunState) -> EnergyParts {
    let grid = &scenario.grid;
    let g_u = grad_h(grid, &state.u);
    let c_chi = curl_h(grid, &state.chi);
    let w = grid.weight();
    let mut acc = EnergyParts::default();
    for idx in 0..grid.node_count() {
        let pt = state.plastic.point(idx);
        let parts = free_energy_parts(
            scenario.variant,
            &scenario.params,
            &EnergyPoint {
                grad_u: g_u.data[idx],
                chi_p: state.chi.data[idx],
                curl_chi_p: c_chi.data[idx],
                plastic: &pt,
            },
        )
        .expect("state kind matches variant");
        acc.elastic += w * parts.elastic;
        acc.micro += w * parts.micro;
        acc.defect += w * parts.defect;
        acc.hardening += w * parts.hardening;
    }
    acc
}

/// a(dw, dw) for the increment between two states (the quadratic part of
/// the incremental energy evaluated at the difference).
fn bilinear_a_of_delta(scenario: &Scenario, prev: &RunState, next: &RunState) -> f64 {
    let grid = &scenario.grid;
    let params = &scenario.params;
    let mu = params.elastic.mu;
    let w = grid.weight();
    let mut du = next.u.clone();
    for (i, v) in du.data.iter_mut().enumerate() {
        for d in 0..3 {
            v[d] -= prev.u.data[i][d];
        }
    }
    let mut dchi = next.chi.clone();
    for (i, t) in dchi.data.iter_mut().enumerate() {
        *t = t.sub(&prev.chi.data[i]);
    }
    let g_du = grad_h(grid, &du);
    let c_dchi = curl_h(grid, &dchi);

    let mut acc = 0.0;
    match scenario.variant {
        VariantId::RmElastic => {
            let rm = params.rm.as_ref().expect("validated");
            for idx in 0..grid.node_count() {
                let e = g_du.data[idx].sub(&dchi.data[idx]);
                let chi = dchi.data[idx];
                acc += w
                    * 2.0
                    * (rm.mu_e * e.sym().norm_sq()
                        + rm.mu_c * e.skew().norm_sq()
                        + 0.5 * rm.lambda_e * e.trace() * e.trace()
                        + rm.mu_micro * chi.sym().norm_sq()
                        + 0.5 * rm.lambda_micro * chi.trace() * chi.trace()
                        + rm.mu_e * 0.5 * params.l_c * params.l_c * c_dchi.data[idx].norm_sq());
            }
        }
        _ => {
            let dp = delta_p_field(scenario, prev, next);
            let deta_sq = delta_eta_norm_sq(&prev.plastic, &next.plastic);
            for idx in 0..grid.node_count() {
                let ee = g_du.data[idx].sym().sub(&dp.data[idx].sym());
                acc += w * apply_ciso(&params.elastic, &ee).inner(&ee);
                let micro = if scenario.variant.is_single_crystal() {
                    dchi.data[idx].sub(&dp.data[idx]).norm_sq()
                } else {
                    dchi.data[idx].sym().sub(&dp.data[idx]).norm_sq()
                };
                acc += w * mu * params.h_chi * micro;
                acc += w * mu * params.l_c * params.l_c * c_dchi.data[idx].norm_sq();
                if !scenario.variant.is_isotropic_hardening() {
                    acc += w * mu * params.k1 * dp.data[idx].sym().norm_sq();
                }
            }
            if scenario.variant.is_isotropic_hardening() {
                acc += w * mu * params.k2 * deta_sq;
            }
        }
    }
    acc
}

fn delta_p_field(scenario: &Scenario, prev: &RunState, next: &RunState) -> TensorField3 {
    let grid = &scenario.grid;
    let p1 = prev.plastic.p_field(grid, &scenario.params);
    let mut p2 = next.plastic.p_field(grid, &scenario.params);
    for (i, t) in p2.data.iter_mut().enumerate() {
        *t = t.sub(&p1.data[i]);
    }
    p2
}

fn delta_eta_norm_sq(prev: &PlasticField, next: &PlasticField) -> f64 {
    match (prev, next) {
        (PlasticField::Crystal { eta: e1, .. }, PlasticField::Crystal { eta: e2, .. })
        | (PlasticField::Poly { eta: e1, .. }, PlasticField::Poly { eta: e2, .. }) => {
            e1.iter().zip(e2).map(|(a, b)| (a - b) * (a - b)).sum()
        }
        _ => 0.0,
    }
}

/// sigma0-weighted plastic increment measure: the rate-independent
/// dissipation of the step.
fn dissipation_increment(scenario: &Scenario, prev: &PlasticField, next: &PlasticField) -> f64 {
    let w = scenario.grid.weight();
    let s0 = scenario.params.sigma0;
    match (prev, next) {
        (PlasticField::Crystal { gamma: g1, .. }, PlasticField::Crystal { gamma: g2, .. }) => {
            w * s0 * g1.iter().zip(g2).map(|(a, b)| (b - a).abs()).sum::<f64>()
        }
        (PlasticField::Poly { eps_p: p1, .. }, PlasticField::Poly { eps_p: p2, .. }) => {
            w * s0
                * p1.iter()
                    .zip(p2)
                    .map(|(a, b)| b.sub(a).norm())
                    .sum::<f64>()
        }
        _ => 0.0,
    }
}

/// <Sigma_E, dp> + g * deta summed over nodes at the end-of-step state.
fn dissipation_pairing(scenario: &Scenario, prev: &RunState, next: &RunState) -> f64 {
    let grid = &scenario.grid;
    let params = &scenario.params;
    let mu = params.elastic.mu;
    if scenario.variant == VariantId::RmElastic {
        return 0.0;
    }
    let g_u = grad_h(grid, &next.u);
    let w = grid.weight();
    let mut acc = 0.0;
    for idx in 0..grid.node_count() {
        let pt = next.plastic.point(idx);
        let eps_p = pt.eps_p(&params.slip_systems);
        let sigma = cauchy_stress(params, &g_u.data[idx], &eps_p);
        let se = eshelby_stress(scenario.variant, params, &sigma, &next.chi.data[idx], &pt)
            .expect("plasticity variant");
        match (&prev.plastic.point(idx), &pt) {
            (
                PlasticPoint::Crystal { gamma: g1, eta: e1 },
                PlasticPoint::Crystal { gamma: g2, eta: e2 },
            ) => {
                for (a, sys) in params.slip_systems.iter().enumerate() {
                    let tau = se.inner(&sys.m);
                    let g = if scenario.variant == VariantId::ScIso {
                        -mu * params.k2 * e2[a]
                    } else {
                        0.0
                    };
                    acc += w * (tau * (g2[a] - g1[a]) + g * (e2[a] - e1[a]));
                }
            }
            (
                PlasticPoint::Poly { eps_p: p1, eta_p: n1 },
                PlasticPoint::Poly { eps_p: p2, eta_p: n2 },
            ) => {
                let g = if scenario.variant == VariantId::PcIso {
                    -mu * params.k2 * n2
                } else {
                    0.0
                };
                acc += w * (se.inner(&p2.sub(p1)) + g * (n2 - n1));
            }
            _ => {}
        }
    }
    acc
}

/// External work of the step: end-of-step body force paired with the
/// displacement increment plus end-of-step reactions paired with the
/// prescribed displacement increment.
fn external_work_increment(
    scenario: &Scenario,
    prev: &RunState,
    next: &RunState,
    s_prev: f64,
    s_next: f64,
) -> f64 {
    let grid = &scenario.grid;
    let params = &scenario.params;
    let f = scenario.body_force_field(s_next);
    let w = grid.weight();

    let mut du = next.u.clone();
    for (i, v) in du.data.iter_mut().enumerate() {
        for d in 0..3 {
            v[d] -= prev.u.data[i][d];
        }
    }
    let mut work = 0.0;
    for (i, v) in du.data.iter().enumerate() {
        work += w * (f.data[i][0] * v[0] + f.data[i][1] * v[1] + f.data[i][2] * v[2]);
    }

    // reaction work: R+(dlift) = a(w+, dlift) - l+(dlift)
    let lift_prev = scenario.dirichlet_field(s_prev);
    let lift_next = scenario.dirichlet_field(s_next);
    let mut dlift = lift_next;
    for (i, v) in dlift.data.iter_mut().enumerate() {
        for d in 0..3 {
            v[d] -= lift_prev.data[i][d];
        }
    }
    let g_dlift = grad_h(grid, &dlift);
    let g_u = grad_h(grid, &next.u);
    let mut reaction = 0.0;
    match scenario.variant {
        VariantId::RmElastic => {
            let rm = params.rm.as_ref().expect("validated");
            for idx in 0..grid.node_count() {
                let e = g_u.data[idx].sub(&next.chi.data[idx]);
                let stress = e
                    .sym()
                    .scale(2.0 * rm.mu_e)
                    .add(&e.skew().scale(2.0 * rm.mu_c))
                    .add(&Tensor3::identity().scale(rm.lambda_e * e.trace()));
                reaction += w * stress.inner(&g_dlift.data[idx]);
            }
        }
        _ => {
            let eps_p = next.plastic.eps_p_field(grid, params);
            for idx in 0..grid.node_count() {
                let sigma = cauchy_stress(params, &g_u.data[idx], &eps_p.data[idx]);
                reaction += w * sigma.inner(&g_dlift.data[idx].sym());
            }
        }
    }
    for (i, v) in dlift.data.iter().enumerate() {
        reaction -= w * (f.data[i][0] * v[0] + f.data[i][1] * v[1] + f.data[i][2] * v[2]);
    }
    work + reaction
}

// ---------------------------------------------------------------------------
// the incremental step and the quasistatic driver
// ---------------------------------------------------------------------------

fn seeded_perturbation(scenario: &Scenario, seed: u64, lift: &VectorField3) -> (VectorField3, TensorField3) {
    use rand::{Rng, SeedableRng};
    let grid = &scenario.grid;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let scale = 0.1
        * (norm_l2_vec(grid, lift).max(1e-3)
            / (grid.node_count() as f64 * grid.weight()).sqrt());
    let mut u = VectorField3::zero(grid);
    for v in u.data.iter_mut() {
        for d in 0..3 {
            v[d] = scale * rng.gen_range(-1.0..1.0);
        }
    }
    project_u_bc(grid, &mut u);
    for (i, v) in u.data.iter_mut().enumerate() {
        for d in 0..3 {
            v[d] += lift.data[i][d];
        }
    }
    let mut chi = TensorField3::zero(grid);
    for t in chi.data.iter_mut() {
        for i in 0..3 {
            for j in 0..3 {
                t.a[i][j] = scale * rng.gen_range(-1.0..1.0);
            }
        }
    }
    if scenario.variant == VariantId::RmElastic {
        project_micro_bc_only(grid, &mut chi);
    } else {
        project_micro_subspace(grid, &mut chi);
    }
    (u, chi)
}

/// Anderson mixing over the plastic fixed-point map P -> sweep(solves(P)).
/// Proposals combine the stored iterates to kill the slow penalty-coupling
/// modes; the caller safeguards them with the incremental objective.
struct AndersonMixer {
    depth: usize,
    xs: Vec<Vec<f64>>,
    rs: Vec<Vec<f64>>,
}

impl AndersonMixer {
    fn new(depth: usize) -> Self {
        AndersonMixer { depth, xs: Vec::new(), rs: Vec::new() }
    }

    fn push(&mut self, x: Vec<f64>, r: Vec<f64>) {
        self.xs.push(x);
        self.rs.push(r);
        if self.xs.len() > self.depth + 1 {
            self.xs.remove(0);
            self.rs.remove(0);
        }
    }

    fn clear(&mut self) {
        self.xs.clear();
        self.rs.clear();
    }

    /// Type-II Anderson proposal; None until two residuals are stored.
    fn propose(&self) -> Option<Vec<f64>> {
        let k = self.xs.len();
        if k < 2 {
            return None;
        }
        let m = k - 1;
        let n = self.xs[0].len();
        // columns dR_j = r_{j+1} - r_j, dX_j = x_{j+1} - x_j
        let mut drs = Vec::with_capacity(m);
        let mut dxs = Vec::with_capacity(m);
        for j in 0..m {
            let dr: Vec<f64> = self.rs[j + 1].iter().zip(&self.rs[j]).map(|(a, b)| a - b).collect();
            let dx: Vec<f64> = self.xs[j + 1].iter().zip(&self.xs[j]).map(|(a, b)| a - b).collect();
            drs.push(dr);
            dxs.push(dx);
        }
        // normal equations (dR' dR) g = dR' r_k with a small Tikhonov term
        let rk = &self.rs[k - 1];
        let mut a = vec![0.0; m * m];
        let mut b = vec![0.0; m];
        let mut scale = 0.0f64;
        for i in 0..m {
            for j in 0..m {
                let v: f64 = drs[i].iter().zip(&drs[j]).map(|(x, y)| x * y).sum();
                a[i * m + j] = v;
                if i == j {
                    scale = scale.max(v);
                }
            }
            b[i] = drs[i].iter().zip(rk).map(|(x, y)| x * y).sum();
        }
        if scale == 0.0 {
            return None;
        }
        for i in 0..m {
            a[i * m + i] += 1e-12 * scale;
        }
        let g = solve_small_spd(&mut a, &b, m)?;
        // x_next = x_k + r_k - (dX + dR) g
        let xk = &self.xs[k - 1];
        let mut out: Vec<f64> = xk.iter().zip(rk).map(|(x, r)| x + r).collect();
        for j in 0..m {
            for i in 0..n {
                out[i] -= g[j] * (dxs[j][i] + drs[j][i]);
            }
        }
        Some(out)
    }
}

/// Dense Cholesky solve of a small SPD system (in-place on `a`).
fn solve_small_spd(a: &mut [f64], b: &[f64], m: usize) -> Option<Vec<f64>> {
    // Cholesky factorization
    for i in 0..m {
        for j in 0..=i {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= a[i * m + k] * a[j * m + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                a[i * m + i] = s.sqrt();
            } else {
                a[i * m + j] = s / a[j * m + j];
            }
        }
    }
    let mut y = b.to_vec();
    for i in 0..m {
        for k in 0..i {
            y[i] -= a[i * m + k] * y[k];
        }
        y[i] /= a[i * m + i];
    }
    for i in (0..m).rev() {
        for k in i + 1..m {
            y[i] -= a[k * m + i] * y[k];
        }
        y[i] /= a[i * m + i];
    }
    Some(y)
}

/// Flattens the primary plastic unknowns (slips or plastic strains) into a
/// mixing vector; eta is recomputed from the admissibility relation.
fn plastic_to_vec(p: &PlasticField) -> Vec<f64> {
    match p {
        PlasticField::Crystal { gamma, .. } => gamma.clone(),
        PlasticField::Poly { eps_p, .. } => {
            let mut out = Vec::with_capacity(eps_p.len() * 9);
            for t in eps_p {
                for i in 0..3 {
                    out.extend_from_slice(&t.a[i]);
                }
            }
            out
        }
        PlasticField::None => Vec::new(),
    }
}

/// Rebuilds an admissible plastic field from a mixing vector:
/// eta = eta_n + |increment| pointwise, eps_p projected symmetric-deviatoric.
fn plastic_from_vec(base_n: &PlasticField, x: &[f64]) -> PlasticField {
    match base_n {
        PlasticField::Crystal { n_slip, gamma: g_n, eta: e_n } => {
            let gamma = x.to_vec();
            let eta: Vec<f64> = gamma
                .iter()
                .zip(g_n)
                .zip(e_n)
                .map(|((g, gn), en)| en + (g - gn).abs())
                .collect();
            PlasticField::Crystal { n_slip: *n_slip, gamma, eta }
        }
        PlasticField::Poly { eps_p: p_n, eta: e_n } => {
            let n = p_n.len();
            let mut eps_p = Vec::with_capacity(n);
            let mut eta = Vec::with_capacity(n);
            for idx in 0..n {
                let mut t = Tensor3::ZERO;
                for i in 0..3 {
                    t.a[i].copy_from_slice(&x[9 * idx + 3 * i..9 * idx + 3 * i + 3]);
                }
                let t = t.sym().dev();
                eta.push(e_n[idx] + t.sub(&p_n[idx]).norm());
                eps_p.push(t);
            }
            PlasticField::Poly { eps_p, eta }
        }
        PlasticField::None => PlasticField::None,
    }
}

/// Incremental objective of the step: free energy plus the dissipation of
/// the increment minus the body-force work. The Dirichlet data is a fixed
/// constraint within a step, so constants drop out of the comparison.
fn incremental_objective(
    scenario: &Scenario,
    state: &RunState,
    plastic_n: &PlasticField,
    s_level: f64,
) -> f64 {
    let grid = &scenario.grid;
    let f = scenario.body_force_field(s_level);
    let w = grid.weight();
    let mut load = 0.0;
    for (i, v) in state.u.data.iter().enumerate() {
        load += w * (f.data[i][0] * v[0] + f.data[i][1] * v[1] + f.data[i][2] * v[2]);
    }
    total_energy(scenario, state).total()
        + dissipation_increment(scenario, plastic_n, &state.plastic) - load
}

/// One quasistatic load increment: alternate the three block solves until
/// the combined relative change drops below tol_outer, then restore the
/// linear balances and audit the energy identity. Anderson extrapolation
/// accelerates the plastic fixed point; candidates are accepted only when
/// the incremental objective does not increase, so the accepted iterate
/// sequence keeps the alternating-minimization monotonicity.
pub fn incremental_step(
    scenario: &Scenario,
    cfg: &SolverConfig,
    state_n: &RunState,
    step: usize,
    init: InitMode,
    kinetics: Option<&CrystalKinetics>,
) -> Result<(RunState, StepResult)> {
    let grid = &scenario.grid;
    let s_prev = scenario.load_curve[step - 1];
    let s = scenario.load_curve[step];

    if scenario.variant == VariantId::RmElastic {
        return rm_elastic_step(scenario, cfg, state_n, step, init);
    }

    let lift = scenario.dirichlet_field(s);
    let (mut u, mut chi) = match init {
        InitMode::WarmStart => {
            let mut u = state_n.u.clone();
            grid.for_each_node(|c, idx| {
                if grid.on_gamma_d(c) {
                    u.data[idx] = lift.data[idx];
                }
            });
            (u, state_n.chi.clone())
        }
        InitMode::SeededRandom(seed) => seeded_perturbation(scenario, seed.wrapping_add(step as u64), &lift),
    };
    // accepted (plain) iterate and the working start of the next cycle
    let mut plastic = state_n.plastic.clone();
    let mut plastic_start = plastic.clone();

    let mut history = Vec::new();
    let mut objective_history = Vec::new();
    let mut converged = false;
    let mut outer = 0;
    let mut cg_u = 0;
    let mut cg_chi = 0;
    let mut diag = SweepDiag::default();
    let mut mixer = AndersonMixer::new(5);
    let mut best_objective = f64::INFINITY;
    let mut accelerated = false;
    while outer < cfg.max_outer_iters {
        outer += 1;
        let (u_new, out_u) = solve_displacement(scenario, &plastic_start, s, cfg, Some(&u))?;
        let (chi_new, out_chi) = solve_microdistortion(scenario, &plastic_start, cfg, Some(&chi))?;
        let (plastic_new, d) =
            plastic_update_sweep(scenario, &u_new, &chi_new, &state_n.plastic, cfg, kinetics)?;
        cg_u = out_u.iters;
        cg_chi = out_chi.iters;

        let candidate = RunState { u: u_new, chi: chi_new, plastic: plastic_new };
        let objective = incremental_objective(scenario, &candidate, &state_n.plastic, s);
        if accelerated && objective > best_objective + 1e-12 * best_objective.abs().max(1e-300) {
            // the extrapolated start made the cycle worse: reject it and
            // redo the cycle from the last accepted plain iterate
            mixer.clear();
            plastic_start = plastic.clone();
            accelerated = false;
            outer -= 1;
            continue;
        }
        best_objective = best_objective.min(objective);
        objective_history.push(objective);
        diag = d;

        let denom_u = norm_l2_vec(grid, &candidate.u).max(1e-12);
        let mut du = candidate.u.clone();
        for (i, v) in du.data.iter_mut().enumerate() {
            for k in 0..3 {
                v[k] -= u.data[i][k];
            }
        }
        let denom_chi = norm_l2(grid, &candidate.chi).max(1e-12);
        let mut dchi = candidate.chi.clone();
        for (i, t) in dchi.data.iter_mut().enumerate() {
            *t = t.sub(&chi.data[i]);
        }
        let denom_p = candidate.plastic.norm_l2(grid).max(1e-12);
        let change = (norm_l2_vec(grid, &du) / denom_u)
            .max(norm_l2(grid, &dchi) / denom_chi)
            .max(candidate.plastic.delta_norm_l2(&plastic, grid) / denom_p);
        history.push(change);

        // record the fixed-point residual of the map P_start -> P_sweep
        let x_vec = plastic_to_vec(&plastic_start);
        let fx_vec = plastic_to_vec(&candidate.plastic);
        let r_vec: Vec<f64> = fx_vec.iter().zip(&x_vec).map(|(a, b)| a - b).collect();
        mixer.push(x_vec, r_vec);

        u = candidate.u;
        chi = candidate.chi;
        plastic = candidate.plastic;
        if change <= cfg.tol_outer {
            converged = true;
            break;
        }
        match mixer.propose() {
            Some(x_next) => {
                plastic_start = plastic_from_vec(&state_n.plastic, &x_next);
                accelerated = true;
            }
            None => {
                plastic_start = plastic.clone();
                accelerated = false;
            }
        }
    }

    // restore the linear balances at the final plastic state
    let (u_fin, out_u) = solve_displacement(scenario, &plastic, s, cfg, Some(&u))?;
    let (chi_fin, out_chi) = solve_microdistortion(scenario, &plastic, cfg, Some(&chi))?;
    cg_u += out_u.iters;
    cg_chi += out_chi.iters;
    let next = RunState { u: u_fin, chi: chi_fin, plastic };

    let prev_energy = total_energy(scenario, state_n);
    let next_energy = total_energy(scenario, &next);
    let d_psi = next_energy.total() - prev_energy.total();
    let d_diss = dissipation_increment(scenario, &state_n.plastic, &next.plastic);
    let trans = 0.5 * bilinear_a_of_delta(scenario, state_n, &next);
    let d_work = external_work_increment(scenario, state_n, &next, s_prev, s);
    let audit = d_psi + d_diss + trans - d_work;
    let audit_scale = d_psi
        .abs()
        .max(d_diss.abs())
        .max(trans.abs())
        .max(d_work.abs())
        .max(1e-300);
    let pairing = dissipation_pairing(scenario, state_n, &next);

    let result = StepResult {
        step,
        load_level: s,
        converged,
        outer_iters: outer,
        residual: history.last().copied().unwrap_or(0.0),
        residual_history: history,
        objective_history,
        energy: next_energy,
        energy_total: next_energy.total(),
        dissipation_increment: d_diss,
        transition_dissipation: trans,
        external_work_increment: d_work,
        energy_audit_residual: audit,
        energy_audit_relative: audit.abs() / audit_scale,
        dissipation_pairing: pairing,
        max_eta: next.plastic.max_eta(),
        plastic_active_nodes: diag.active_nodes,
        max_kkt_phi: diag.max_kkt_phi,
        max_kkt_complementarity: diag.max_kkt_complementarity,
        cg_iters_displacement: cg_u,
        cg_iters_micro: cg_chi,
    };
    Ok((next, result))
}

/// RM_ELASTIC step: one coupled linear solve of the two-field minimization.
fn rm_elastic_step(
    scenario: &Scenario,
    cfg: &SolverConfig,
    state_n: &RunState,
    step: usize,
    init: InitMode,
) -> Result<(RunState, StepResult)> {
    let s_prev = scenario.load_curve[step - 1];
    let s = scenario.load_curve[step];
    let (u, chi) = solve_rm_coupled(scenario, cfg, s, match init {
        InitMode::WarmStart => Some((&state_n.u, &state_n.chi)),
        InitMode::SeededRandom(_) => None,
    })?;
    let next = RunState { u, chi, plastic: PlasticField::None };

    let prev_energy = total_energy(scenario, state_n);
    let next_energy = total_energy(scenario, &next);
    let d_psi = next_energy.total() - prev_energy.total();
    let trans = 0.5 * bilinear_a_of_delta(scenario, state_n, &next);
    let d_work = external_work_increment(scenario, state_n, &next, s_prev, s);
    let audit = d_psi + trans - d_work;
    let audit_scale = d_psi.abs().max(trans.abs()).max(d_work.abs()).max(1e-300);

    let result = StepResult {
        step,
        load_level: s,
        converged: true,
        outer_iters: 1,
        residual: 0.0,
        residual_history: vec![],
        objective_history: vec![],
        energy: next_energy,
        energy_total: next_energy.total(),
        dissipation_increment: 0.0,
        transition_dissipation: trans,
        external_work_increment: d_work,
        energy_audit_residual: audit,
        energy_audit_relative: audit.abs() / audit_scale,
        dissipation_pairing: 0.0,
        max_eta: 0.0,
        plastic_active_nodes: 0,
        max_kkt_phi: f64::NEG_INFINITY,
        max_kkt_complementarity: 0.0,
        cg_iters_displacement: 0,
        cg_iters_micro: 0,
    };
    Ok((next, result))
}

/// Coupled (u, chi_p) solve of the relaxed micromorphic elastic model.
pub fn solve_rm_coupled(
    scenario: &Scenario,
    cfg: &SolverConfig,
    s_level: f64,
    init: Option<(&VectorField3, &TensorField3)>,
) -> Result<(VectorField3, TensorField3)> {
    let grid = &scenario.grid;
    let params = &scenario.params;
    let rm = params
        .rm
        .as_ref()
        .ok_or_else(|| Error::Validation("RM_ELASTIC requires RM moduli".into()))?;
    let lift = scenario.dirichlet_field(s_level);
    let f = scenario.body_force_field(s_level);
    let nu = grid.node_count() * 3;
    let nchi = grid.node_count() * 9;
    let curl_coeff = rm.mu_e * params.l_c * params.l_c;

    // relative stress of e = grad u - chi
    let rel_stress = |e: &Tensor3| -> Tensor3 {
        e.sym()
            .scale(2.0 * rm.mu_e)
            .add(&e.skew().scale(2.0 * rm.mu_c))
            .add(&Tensor3::identity().scale(rm.lambda_e * e.trace()))
    };
    let micro_stress = |chi: &Tensor3| -> Tensor3 {
        chi.sym()
            .scale(2.0 * rm.mu_micro)
            .add(&Tensor3::identity().scale(rm.lambda_micro * chi.trace()))
    };

    let apply_full = |u: &VectorField3, chi: &TensorField3| -> (VectorField3, TensorField3) {
        let g = grad_h(grid, u);
        let mut rel = TensorField3::zero(grid);
        for idx in 0..grid.node_count() {
            rel.data[idx] = rel_stress(&g.data[idx].sub(&chi.data[idx]));
        }
        let fu = grad_h_adjoint(grid, &rel);
        let c = curl_h(grid, chi);
        let mut fchi = curl_h_adjoint(grid, &c);
        for (idx, t) in fchi.data.iter_mut().enumerate() {
            *t = t
                .scale(curl_coeff)
                .sub(&rel.data[idx])
                .add(&micro_stress(&chi.data[idx]));
        }
        (fu, fchi)
    };

    // rhs = [f; 0] - A(lift, 0) restricted to free dofs
    let (alu, alchi) = apply_full(&lift, &TensorField3::zero(grid));
    let mut rhs_u = f.clone();
    for (i, v) in rhs_u.data.iter_mut().enumerate() {
        for d in 0..3 {
            v[d] -= alu.data[i][d];
        }
    }
    project_u_bc(grid, &mut rhs_u);
    let mut rhs_chi = TensorField3::zero(grid);
    for (i, t) in rhs_chi.data.iter_mut().enumerate() {
        *t = t.sub(&alchi.data[i]);
    }
    project_micro_bc_only(grid, &mut rhs_chi);

    let mut b = vec![0.0; nu + nchi];
    b[..nu].copy_from_slice(&pack_vec(&rhs_u));
    b[nu..].copy_from_slice(&pack_tensor(&rhs_chi));

    let mut x = vec![0.0; nu + nchi];
    if let Some((u0, chi0)) = init {
        let mut du = u0.clone();
        for (i, v) in du.data.iter_mut().enumerate() {
            for d in 0..3 {
                v[d] -= lift.data[i][d];
            }
        }
        project_u_bc(grid, &mut du);
        let mut c0 = chi0.clone();
        project_micro_bc_only(grid, &mut c0);
        x[..nu].copy_from_slice(&pack_vec(&du));
        x[nu..].copy_from_slice(&pack_tensor(&c0));
    }

    let mut apply = |xs: &[f64], out: &mut [f64]| {
        let mut u = unpack_vec(grid, &xs[..nu]);
        project_u_bc(grid, &mut u);
        let mut chi = unpack_tensor(grid, &xs[nu..]);
        project_micro_bc_only(grid, &mut chi);
        let (mut fu, mut fchi) = apply_full(&u, &chi);
        project_u_bc(grid, &mut fu);
        project_micro_bc_only(grid, &mut fchi);
        out[..nu].copy_from_slice(&pack_vec(&fu));
        out[nu..].copy_from_slice(&pack_tensor(&fchi));
    };
    cg_solve(&mut apply, &b, &mut x, cfg.tol_cg, cfg.max_cg_iters, "rm coupled solve")?;

    let mut u = unpack_vec(grid, &x[..nu]);
    project_u_bc(grid, &mut u);
    for (i, v) in u.data.iter_mut().enumerate() {
        for d in 0..3 {
            v[d] += lift.data[i][d];
        }
    }
    let mut chi = unpack_tensor(grid, &x[nu..]);
    project_micro_bc_only(grid, &mut chi);
    Ok((u, chi))
}

/// Runs all load steps from w(0) = 0. On a failed step the partial report
/// is returned with `completed = false` and the failure recorded.
pub fn run_quasistatic(
    scenario: &Scenario,
    cfg: &SolverConfig,
    init: InitMode,
    mut observer: Option<&mut dyn FnMut(usize, &RunState, &StepResult)>,
) -> Result<RunReport> {
    let warnings = scenario.validate()?;
    cfg.validate()?;
    let kinetics = if scenario.variant.is_single_crystal() {
        Some(CrystalKinetics::new(scenario.variant, &scenario.params))
    } else {
        None
    };

    let mut state = RunState::zero(scenario);
    let mut steps = Vec::new();
    let mut failure = None;
    for step in 1..=scenario.n_steps() {
        match incremental_step(scenario, cfg, &state, step, init, kinetics.as_ref()) {
            Ok((next, result)) => {
                let non_converged = !result.converged;
                if let Some(obs) = observer.as_deref_mut() {
                    obs(step, &next, &result);
                }
                state = next;
                steps.push(result);
                if non_converged && cfg.abort_on_nonconvergence {
                    failure = Some(format!(
                        "step {step} did not converge within {} outer iterations",
                        cfg.max_outer_iters
                    ));
                    break;
                }
            }
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
    }

    let final_gap = micro_gap(scenario, &state);
    let total_dissipation = steps.iter().map(|s| s.dissipation_increment).sum();
    Ok(RunReport {
        variant: scenario.variant,
        grid_dims: scenario.grid.dims,
        grid_h: scenario.grid.h,
        gamma_d: scenario.grid.gamma_d.names().iter().map(|s| s.to_string()).collect(),
        warnings,
        steps,
        completed: failure.is_none(),
        failure,
        final_micro_gap: final_gap,
        total_dissipation,
    })
}

/// L2 gap between the plastic variable and its micromorphic counterpart:
/// ||p - chi_p|| (SC) or ||eps_p - sym chi_p|| (PC).
pub fn micro_gap(scenario: &Scenario, state: &RunState) -> f64 {
    let grid = &scenario.grid;
    if scenario.variant == VariantId::RmElastic {
        return 0.0;
    }
    let p = state.plastic.p_field(grid, &scenario.params);
    let w = grid.weight();
    let mut acc = 0.0;
    for idx in 0..grid.node_count() {
        let gap = if scenario.variant.is_single_crystal() {
            p.data[idx].sub(&state.chi.data[idx]).norm_sq()
        } else {
            p.data[idx].sub(&state.chi.data[idx].sym()).norm_sq()
        };
        acc += w * gap;
    }
    acc.sqrt()
}

/// Final state of a full run (convenience for the verification layer).
pub fn run_to_final_state(
    scenario: &Scenario,
    cfg: &SolverConfig,
    init: InitMode,
) -> Result<(RunState, RunReport)> {
    let warnings = scenario.validate()?;
    cfg.validate()?;
    let kinetics = if scenario.variant.is_single_crystal() {
        Some(CrystalKinetics::new(scenario.variant, &scenario.params))
    } else {
        None
    };
    let mut state = RunState::zero(scenario);
    let mut steps = Vec::new();
    for step in 1..=scenario.n_steps() {
        let (next, result) = incremental_step(scenario, cfg, &state, step, init, kinetics.as_ref())?;
        if !result.converged && cfg.abort_on_nonconvergence {
            return Err(Error::Solver(format!("step {step} did not converge")));
        }
        state = next;
        steps.push(result);
    }
    let final_gap = micro_gap(scenario, &state);
    let total_dissipation = steps.iter().map(|s| s.dissipation_increment).sum();
    let report = RunReport {
        variant: scenario.variant,
        grid_dims: scenario.grid.dims,
        grid_h: scenario.grid.h,
        gamma_d: scenario.grid.gamma_d.names().iter().map(|s| s.to_string()).collect(),
        warnings,
        steps,
        completed: true,
        failure: None,
        final_micro_gap: final_gap,
        total_dissipation,
    };
    Ok((state, report))
}
