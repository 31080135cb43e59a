//! Constitutive layer: free-energy densities, stresses, yield functions,
//! dissipation functions, and the pointwise return maps for the five model
//! variants.
//!
//! All quantities are nondimensional; mu is the stress scale and every
//! energy coefficient is mu times a dimensionless constant (mu*H_chi,
//! mu*k1, mu*k2, mu*L_c^2).

use crate::tensor3::{apply_ciso, ElasticModuli, SlipSystem, Tensor3};
use crate::{Error, Result};

/// The five model variants. Every solver and verification path dispatches
/// on this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum VariantId {
    /// Single crystal, isotropic hardening (per-system yield radius grows).
    #[serde(rename = "SC_ISO")]
    ScIso,
    /// Single crystal, linear kinematic hardening (back-stress -mu k1 sym p).
    #[serde(rename = "SC_KIN")]
    ScKin,
    /// Polycrystal, isotropic hardening (symmetric coupling, yield on dev Sigma_E).
    #[serde(rename = "PC_ISO")]
    PcIso,
    /// Polycrystal, linear kinematic hardening.
    #[serde(rename = "PC_KIN")]
    PcKin,
    /// Relaxed micromorphic purely elastic two-field model.
    #[serde(rename = "RM_ELASTIC")]
    RmElastic,
}

impl VariantId {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "SC_ISO" => Some(VariantId::ScIso),
            "SC_KIN" => Some(VariantId::ScKin),
            "PC_ISO" => Some(VariantId::PcIso),
            "PC_KIN" => Some(VariantId::PcKin),
            "RM_ELASTIC" => Some(VariantId::RmElastic),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            VariantId::ScIso => "SC_ISO",
            VariantId::ScKin => "SC_KIN",
            VariantId::PcIso => "PC_ISO",
            VariantId::PcKin => "PC_KIN",
            VariantId::RmElastic => "RM_ELASTIC",
        }
    }

    pub fn is_single_crystal(&self) -> bool {
        matches!(self, VariantId::ScIso | VariantId::ScKin)
    }

    pub fn is_polycrystal(&self) -> bool {
        matches!(self, VariantId::PcIso | VariantId::PcKin)
    }

    pub fn is_isotropic_hardening(&self) -> bool {
        matches!(self, VariantId::ScIso | VariantId::PcIso)
    }

    /// The hardening constant whose positivity backs the variant's
    /// uniqueness guarantee (k2 for isotropic, k1 for kinematic variants).
    pub fn hardening_constant(&self, p: &MaterialParams) -> f64 {
        if self.is_isotropic_hardening() {
            p.k2
        } else {
            p.k1
        }
    }
}

impl std::fmt::Display for VariantId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Extra moduli of the relaxed micromorphic elastic model.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RmModuli {
    pub mu_e: f64,
    pub lambda_e: f64,
    /// Cosserat couple modulus; may be zero.
    pub mu_c: f64,
    pub mu_micro: f64,
    pub lambda_micro: f64,
}

impl RmModuli {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_e > 0.0 && 2.0 * self.mu_e + 3.0 * self.lambda_e > 0.0) {
            return Err(Error::Validation(format!(
                "relaxed micromorphic moduli require mu_e > 0 and 2*mu_e + 3*lambda_e > 0; got mu_e = {}, 2*mu_e + 3*lambda_e = {}",
                self.mu_e,
                2.0 * self.mu_e + 3.0 * self.lambda_e
            )));
        }
        if self.mu_c < 0.0 {
            return Err(Error::Validation(format!("mu_c must be >= 0, got {}", self.mu_c)));
        }
        if !(self.mu_micro > 0.0 && 3.0 * self.lambda_micro + 2.0 * self.mu_micro > 0.0) {
            return Err(Error::Validation(format!(
                "micro moduli require mu_micro > 0 and 3*lambda_micro + 2*mu_micro > 0; got mu_micro = {}, 3*lambda_micro + 2*mu_micro = {}",
                self.mu_micro,
                3.0 * self.lambda_micro + 2.0 * self.mu_micro
            )));
        }
        Ok(())
    }
}

/// Material parameter set shared by all variants.
#[derive(Debug, Clone)]
pub struct MaterialParams {
    pub elastic: ElasticModuli,
    /// Penalty constant coupling the plastic variable to chi_p; positive.
    pub h_chi: f64,
    /// Energetic length scale of the defect (Curl) energy; nonnegative.
    pub l_c: f64,
    /// Kinematic hardening constant.
    pub k1: f64,
    /// Isotropic hardening constant.
    pub k2: f64,
    /// Initial yield stress.
    pub sigma0: f64,
    /// Slip systems (single-crystal variants only).
    pub slip_systems: Vec<SlipSystem>,
    /// Relaxed micromorphic moduli (RM_ELASTIC only).
    pub rm: Option<RmModuli>,
}

impl MaterialParams {
    /// Validates the parameter set for a variant. Returns warnings for
    /// accepted-but-degenerate regimes (perfect plasticity).
    pub fn validate(&self, variant: VariantId) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if self.l_c < 0.0 {
            return Err(Error::Validation(format!("L_c must be >= 0, got {}", self.l_c)));
        }
        if variant == VariantId::RmElastic {
            let rm = self.rm.as_ref().ok_or_else(|| {
                Error::Validation("RM_ELASTIC requires mu_e, lambda_e, mu_c, mu_micro, lambda_micro".into())
            })?;
            rm.validate()?;
            return Ok(warnings);
        }
        if !(self.h_chi > 0.0) {
            return Err(Error::Validation(format!(
                "H_chi must be a positive penalty constant, got {}",
                self.h_chi
            )));
        }
        if !(self.sigma0 > 0.0) {
            return Err(Error::Validation(format!("sigma0 must be > 0, got {}", self.sigma0)));
        }
        if self.k1 < 0.0 || self.k2 < 0.0 {
            return Err(Error::Validation(format!(
                "hardening constants must be >= 0, got k1 = {}, k2 = {}",
                self.k1, self.k2
            )));
        }
        if variant.is_single_crystal() && self.slip_systems.is_empty() {
            return Err(Error::Validation(
                "single-crystal variants need a nonempty slip system family".into(),
            ));
        }
        if variant.hardening_constant(self) == 0.0 {
            let which = if variant.is_isotropic_hardening() { "k2" } else { "k1" };
            warnings.push(format!(
                "{} = 0: perfect plasticity; uniqueness of the displacement (and slips) is not guaranteed and slip-band discontinuities become possible",
                which
            ));
        }
        Ok(warnings)
    }

    pub fn n_slip(&self) -> usize {
        self.slip_systems.len()
    }
}

/// Per-point plastic state: slips and hardening for single-crystal
/// variants, plastic strain and accumulated strain for polycrystal
/// variants.
#[derive(Debug, Clone, PartialEq)]
pub enum PlasticPoint {
    Crystal { gamma: Vec<f64>, eta: Vec<f64> },
    Poly { eps_p: Tensor3, eta_p: f64 },
    /// RM_ELASTIC carries no plastic state.
    None,
}

impl PlasticPoint {
    pub fn zero(variant: VariantId, n_slip: usize) -> Self {
        match variant {
            VariantId::ScIso | VariantId::ScKin => PlasticPoint::Crystal {
                gamma: vec![0.0; n_slip],
                eta: vec![0.0; n_slip],
            },
            VariantId::PcIso | VariantId::PcKin => PlasticPoint::Poly {
                eps_p: Tensor3::ZERO,
                eta_p: 0.0,
            },
            VariantId::RmElastic => PlasticPoint::None,
        }
    }

    /// Plastic distortion p (SC: sum of slips, already trace-free;
    /// PC: the symmetric plastic strain).
    pub fn distortion(&self, systems: &[SlipSystem]) -> Tensor3 {
        match self {
            PlasticPoint::Crystal { gamma, .. } => {
                crate::tensor3::assemble_p_from_slips(gamma, systems)
            }
            PlasticPoint::Poly { eps_p, .. } => *eps_p,
            PlasticPoint::None => Tensor3::ZERO,
        }
    }

    pub fn eps_p(&self, systems: &[SlipSystem]) -> Tensor3 {
        self.distortion(systems).sym()
    }
}

/// Frozen pointwise data entering a local plastic update.
#[derive(Debug, Clone)]
pub struct LocalTrialState {
    /// Full displacement gradient at the point.
    pub grad_u: Tensor3,
    /// Micro-distortion at the point.
    pub chi_p: Tensor3,
    /// Converged plastic state of the previous increment.
    pub prev: PlasticPoint,
}

/// Pointwise state for energy evaluation.
#[derive(Debug, Clone)]
pub struct EnergyPoint<'a> {
    pub grad_u: Tensor3,
    pub chi_p: Tensor3,
    pub curl_chi_p: Tensor3,
    pub plastic: &'a PlasticPoint,
}

/// Additively separated free-energy contributions.
#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct EnergyParts {
    pub elastic: f64,
    pub micro: f64,
    pub defect: f64,
    pub hardening: f64,
}

impl EnergyParts {
    pub fn total(&self) -> f64 {
        self.elastic + self.micro + self.defect + self.hardening
    }
}

/// Free-energy density split into its four contributions. For RM_ELASTIC
/// the relative/micro split of Eq.-level terms is reported as
/// elastic = relative-deformation terms, micro = micro-strain terms.
pub fn free_energy_parts(
    variant: VariantId,
    m: &MaterialParams,
    s: &EnergyPoint,
) -> Result<EnergyParts> {
    let mu = m.elastic.mu;
    match (variant, s.plastic) {
        (VariantId::ScIso, PlasticPoint::Crystal { eta, .. })
        | (VariantId::ScKin, PlasticPoint::Crystal { eta, .. }) => {
            let p = s.plastic.distortion(&m.slip_systems);
            // elastic strain sym(grad u - p); the trace of p is zero
            let eps_e = s.grad_u.sym().sub(&p.sym());
            let elastic = 0.5 * apply_ciso(&m.elastic, &eps_e).inner(&eps_e);
            let micro = 0.5 * mu * m.h_chi * p.sub(&s.chi_p).norm_sq();
            let defect = 0.5 * mu * m.l_c * m.l_c * s.curl_chi_p.norm_sq();
            let hardening = if variant == VariantId::ScIso {
                0.5 * mu * m.k2 * eta.iter().map(|e| e * e).sum::<f64>()
            } else {
                0.5 * mu * m.k1 * p.sym().norm_sq()
            };
            Ok(EnergyParts { elastic, micro, defect, hardening })
        }
        (VariantId::PcIso, PlasticPoint::Poly { eps_p, eta_p })
        | (VariantId::PcKin, PlasticPoint::Poly { eps_p, eta_p }) => {
            let eps_e = s.grad_u.sym().sub(eps_p);
            let elastic = 0.5 * apply_ciso(&m.elastic, &eps_e).inner(&eps_e);
            let micro = 0.5 * mu * m.h_chi * eps_p.sub(&s.chi_p.sym()).norm_sq();
            let defect = 0.5 * mu * m.l_c * m.l_c * s.curl_chi_p.norm_sq();
            let hardening = if variant == VariantId::PcIso {
                0.5 * mu * m.k2 * eta_p * eta_p
            } else {
                0.5 * mu * m.k1 * eps_p.norm_sq()
            };
            Ok(EnergyParts { elastic, micro, defect, hardening })
        }
        (VariantId::RmElastic, PlasticPoint::None) => {
            let rm = m
                .rm
                .as_ref()
                .ok_or_else(|| Error::Validation("RM_ELASTIC energy needs RM moduli".into()))?;
            let e = s.grad_u.sub(&s.chi_p);
            let relative = rm.mu_e * e.sym().norm_sq()
                + rm.mu_c * e.skew().norm_sq()
                + 0.5 * rm.lambda_e * e.trace() * e.trace();
            let micro = rm.mu_micro * s.chi_p.sym().norm_sq()
                + 0.5 * rm.lambda_micro * s.chi_p.trace() * s.chi_p.trace();
            let defect = rm.mu_e * 0.5 * m.l_c * m.l_c * s.curl_chi_p.norm_sq();
            Ok(EnergyParts { elastic: relative, micro, defect, hardening: 0.0 })
        }
        _ => Err(Error::Validation(format!(
            "plastic state kind does not match variant {variant}"
        ))),
    }
}

/// Free-energy density Psi >= 0.
pub fn free_energy_density(variant: VariantId, m: &MaterialParams, s: &EnergyPoint) -> Result<f64> {
    Ok(free_energy_parts(variant, m, s)?.total())
}

/// Relaxed micromorphic elastic energy density (Eq.-level pointwise form).
pub fn rm_elastic_energy_terms(
    m: &MaterialParams,
    grad_u: &Tensor3,
    chi_p: &Tensor3,
    curl_chi_p: &Tensor3,
) -> f64 {
    let none = PlasticPoint::None;
    free_energy_parts(
        VariantId::RmElastic,
        m,
        &EnergyPoint {
            grad_u: *grad_u,
            chi_p: *chi_p,
            curl_chi_p: *curl_chi_p,
            plastic: &none,
        },
    )
    .expect("RM moduli validated at construction")
    .total()
}

/// Cauchy stress sigma = C(sym grad u - eps_p); symmetric. The plastic
/// strain must be trace-free.
pub fn cauchy_stress(m: &MaterialParams, grad_u: &Tensor3, eps_p: &Tensor3) -> Tensor3 {
    apply_ciso(&m.elastic, &grad_u.sym().sub(eps_p))
}

/// Eshelby-type stress driving plastic flow.
///
/// SC: Sigma_E = sigma + mu H_chi (chi_p - p), plus -mu k1 sym p for SC_KIN.
/// PC: Sigma_E = sigma + mu H_chi (sym chi_p - eps_p), plus -mu k1 eps_p for PC_KIN.
pub fn eshelby_stress(
    variant: VariantId,
    m: &MaterialParams,
    sigma: &Tensor3,
    chi_p: &Tensor3,
    plastic: &PlasticPoint,
) -> Result<Tensor3> {
    let mu = m.elastic.mu;
    match variant {
        VariantId::ScIso | VariantId::ScKin => {
            let p = plastic.distortion(&m.slip_systems);
            let mut s = sigma.add(&chi_p.sub(&p).scale(mu * m.h_chi));
            if variant == VariantId::ScKin {
                s = s.add_scaled(&p.sym(), -mu * m.k1);
            }
            Ok(s)
        }
        VariantId::PcIso | VariantId::PcKin => {
            let eps_p = match plastic {
                PlasticPoint::Poly { eps_p, .. } => *eps_p,
                _ => return Err(Error::Validation("PC variant expects Poly state".into())),
            };
            let mut s = sigma.add(&chi_p.sym().sub(&eps_p).scale(mu * m.h_chi));
            if variant == VariantId::PcKin {
                s = s.add_scaled(&eps_p, -mu * m.k1);
            }
            Ok(s)
        }
        VariantId::RmElastic => Err(Error::Validation(
            "RM_ELASTIC has no plastic flow and no Eshelby stress".into(),
        )),
    }
}

/// Yield function value(s) at a stress state.
#[derive(Debug, Clone, PartialEq)]
pub enum YieldValue {
    /// One value per slip system (single-crystal variants).
    PerSystem(Vec<f64>),
    /// Single tensorial yield value (polycrystal variants).
    Scalar(f64),
}

/// Evaluates the yield function.
///
/// SC_ISO: phi^a = |tau_E^a| + g^a - sigma0 with g^a = -mu k2 eta^a.
/// SC_KIN: phi^a = |tau_E^a| - sigma0 (back-stress already inside Sigma_E).
/// PC_ISO: phi = ||dev Sigma_E|| + g - sigma0 with g = -mu k2 eta_p.
/// PC_KIN: phi = ||dev Sigma_E|| - sigma0.
pub fn yield_function(
    variant: VariantId,
    m: &MaterialParams,
    sigma_e: &Tensor3,
    plastic: &PlasticPoint,
) -> Result<YieldValue> {
    let mu = m.elastic.mu;
    match variant {
        VariantId::ScIso | VariantId::ScKin => {
            let eta = match plastic {
                PlasticPoint::Crystal { eta, .. } => eta,
                _ => return Err(Error::Validation("SC variant expects Crystal state".into())),
            };
            let phis = m
                .slip_systems
                .iter()
                .enumerate()
                .map(|(a, s)| {
                    let tau = sigma_e.inner(&s.m);
                    let g = if variant == VariantId::ScIso { -mu * m.k2 * eta[a] } else { 0.0 };
                    tau.abs() + g - m.sigma0
                })
                .collect();
            Ok(YieldValue::PerSystem(phis))
        }
        VariantId::PcIso | VariantId::PcKin => {
            let g = match (variant, plastic) {
                (VariantId::PcIso, PlasticPoint::Poly { eta_p, .. }) => -mu * m.k2 * eta_p,
                (VariantId::PcKin, _) => 0.0,
                _ => return Err(Error::Validation("PC variant expects Poly state".into())),
            };
            Ok(YieldValue::Scalar(sigma_e.dev().norm() + g - m.sigma0))
        }
        VariantId::RmElastic => Err(Error::Validation("RM_ELASTIC has no yield function".into())),
    }
}

/// One-homogeneous dissipation; the indicator extension of the admissible
/// cone is an explicit marker, never a floating-point infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dissipation {
    Finite(f64),
    /// Rate outside the cone |q| <= beta of the isotropic variants.
    Inadmissible,
}

/// Plastic rate paired with its hardening rate.
#[derive(Debug, Clone)]
pub enum PlasticRate {
    Slips { q: Vec<f64>, beta: Vec<f64> },
    Tensor { q: Tensor3, beta: f64 },
}

/// Dissipation density D(rate).
///
/// SC_ISO: sum_a sigma0 |q^a| if |q^a| <= beta^a for all a, else inadmissible.
/// PC_ISO: sigma0 ||q|| if ||q|| <= beta, else inadmissible.
/// Kinematic variants: sigma0 * (sum_a |q^a| per system for slips,
/// Frobenius norm for tensor rates); no cone.
pub fn dissipation_density(variant: VariantId, m: &MaterialParams, rate: &PlasticRate) -> Dissipation {
    match (variant, rate) {
        (VariantId::ScIso, PlasticRate::Slips { q, beta }) => {
            if q.iter().zip(beta).any(|(qa, ba)| qa.abs() > *ba) {
                Dissipation::Inadmissible
            } else {
                Dissipation::Finite(m.sigma0 * q.iter().map(|qa| qa.abs()).sum::<f64>())
            }
        }
        (VariantId::ScKin, PlasticRate::Slips { q, .. }) => {
            Dissipation::Finite(m.sigma0 * q.iter().map(|qa| qa.abs()).sum::<f64>())
        }
        (VariantId::ScKin, PlasticRate::Tensor { q, .. })
        | (VariantId::PcKin, PlasticRate::Tensor { q, .. }) => {
            Dissipation::Finite(m.sigma0 * q.norm())
        }
        (VariantId::PcIso, PlasticRate::Tensor { q, beta }) => {
            if q.norm() > *beta {
                Dissipation::Inadmissible
            } else {
                Dissipation::Finite(m.sigma0 * q.norm())
            }
        }
        _ => panic!("dissipation_density: rate kind does not match variant {variant}"),
    }
}

/// Tolerances of the local plastic solve.
#[derive(Debug, Clone, Copy)]
pub struct LocalSolveConfig {
    /// Fixed-point tolerance on the max slip change per sweep.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LocalSolveConfig {
    fn default() -> Self {
        LocalSolveConfig { tol: 1e-12, max_sweeps: 200 }
    }
}

/// Increment diagnostics of a local update.
#[derive(Debug, Clone)]
pub enum DeltaLambda {
    /// Signed slip increments per system; lambda^a = |delta gamma^a|.
    PerSystem(Vec<f64>),
    /// Radial plastic multiplier.
    Scalar(f64),
}

impl DeltaLambda {
    pub fn max_abs(&self) -> f64 {
        match self {
            DeltaLambda::PerSystem(v) => v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
            DeltaLambda::Scalar(s) => s.abs(),
        }
    }
}

/// Result of one pointwise return map.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub state: PlasticPoint,
    pub delta: DeltaLambda,
    pub sweeps: usize,
    /// max_a phi^a (SC) or phi (PC) at the returned state; <= 0 up to tolerance.
    pub kkt_phi: f64,
    /// max |lambda * phi| complementarity residual.
    pub kkt_complementarity: f64,
}

/// Precomputed slip-system interaction data for the single-crystal sweeps.
///
/// K_ab = <C sym m^b + mu H_chi m^b (+ mu k1 sym m^b), m^a> is the exact
/// sensitivity of tau_E^a to gamma^b at frozen (grad u, chi_p).
#[derive(Debug, Clone)]
pub struct CrystalKinetics {
    pub variant: VariantId,
    pub k: Vec<f64>,
    pub n: usize,
    /// Diagonal quadratic coefficient of the 1D scalar updates
    /// (K_aa plus mu k2 for isotropic hardening).
    pub c_diag: Vec<f64>,
}

impl CrystalKinetics {
    pub fn new(variant: VariantId, m: &MaterialParams) -> Self {
        assert!(variant.is_single_crystal());
        let mu = m.elastic.mu;
        let n = m.n_slip();
        let mut k = vec![0.0; n * n];
        for (b, sb) in m.slip_systems.iter().enumerate() {
            let mut mb = apply_ciso(&m.elastic, &sb.m.sym()).add(&sb.m.scale(mu * m.h_chi));
            if variant == VariantId::ScKin {
                mb = mb.add(&sb.m.sym().scale(mu * m.k1));
            }
            for (a, sa) in m.slip_systems.iter().enumerate() {
                k[a * n + b] = mb.inner(&sa.m);
            }
        }
        let c_diag = (0..n)
            .map(|a| k[a * n + a] + if variant == VariantId::ScIso { mu * m.k2 } else { 0.0 })
            .collect();
        CrystalKinetics { variant, k, n, c_diag }
    }
}

/// Soft-threshold: the exact minimizer of c/2 d^2 - t d + r |d|.
#[inline]
fn shrink(t: f64, r: f64, c: f64) -> f64 {
    if t > r {
        (t - r) / c
    } else if t < -r {
        (t + r) / c
    } else {
        0.0
    }
}

/// Minimizer of the pointwise incremental potential at frozen grad u and
/// chi_p; rate-independent, so only the increment enters.
///
/// PC variants use the closed-form radial return (the algebra is gated on
/// the brute-force oracle in `verify`); SC variants run Gauss-Seidel
/// sweeps of exact scalar coordinate minimizations over the slip systems.
pub fn local_return_map(
    variant: VariantId,
    m: &MaterialParams,
    trial: &LocalTrialState,
    cfg: &LocalSolveConfig,
) -> Result<LocalUpdate> {
    match variant {
        VariantId::PcIso | VariantId::PcKin => poly_return_map(variant, m, trial),
        VariantId::ScIso | VariantId::ScKin => {
            let kin = CrystalKinetics::new(variant, m);
            crystal_return_map(m, trial, &kin, cfg, [0, 0, 0])
        }
        VariantId::RmElastic => Err(Error::Validation("RM_ELASTIC has no return map".into())),
    }
}

/// Polycrystal radial return. With
/// f_trial = ||dev Sigma_E^trial|| - mu k2 eta_n - sigma0 (ISO; k2 term
/// absent for KIN), flow occurs iff f_trial > 0 and then
/// delta_lambda = f_trial / (2 mu + mu H_chi + mu k2|k1).
pub fn poly_return_map(
    variant: VariantId,
    m: &MaterialParams,
    trial: &LocalTrialState,
) -> Result<LocalUpdate> {
    let mu = m.elastic.mu;
    let (eps_p_n, eta_n) = match &trial.prev {
        PlasticPoint::Poly { eps_p, eta_p } => (*eps_p, *eta_p),
        _ => return Err(Error::Validation("PC return map expects Poly state".into())),
    };
    let sigma_tr = cauchy_stress(m, &trial.grad_u, &eps_p_n);
    let sigma_e_tr = eshelby_stress(variant, m, &sigma_tr, &trial.chi_p, &trial.prev)?;
    let dev = sigma_e_tr.dev();
    let dev_norm = dev.norm();
    let (hard, radius) = match variant {
        VariantId::PcIso => (mu * m.k2, m.sigma0 + mu * m.k2 * eta_n),
        VariantId::PcKin => (mu * m.k1, m.sigma0),
        _ => unreachable!(),
    };
    let f_trial = dev_norm - radius;
    if f_trial <= 0.0 {
        return Ok(LocalUpdate {
            state: trial.prev.clone(),
            delta: DeltaLambda::Scalar(0.0),
            sweeps: 0,
            kkt_phi: f_trial,
            kkt_complementarity: 0.0,
        });
    }
    // sigma0 > 0 makes a vanishing deviator with positive overstress impossible
    debug_assert!(dev_norm > 0.0);
    let denom = 2.0 * mu + mu * m.h_chi + hard;
    let dl = f_trial / denom;
    let n_dir = dev.scale(1.0 / dev_norm);
    let eps_p = eps_p_n.add_scaled(&n_dir, dl);
    let eta_p = eta_n + dl;
    let state = PlasticPoint::Poly { eps_p, eta_p };
    // post-state KKT residual
    let trial_post = LocalTrialState { grad_u: trial.grad_u, chi_p: trial.chi_p, prev: state.clone() };
    let sigma_post = cauchy_stress(m, &trial_post.grad_u, &eps_p);
    let sigma_e_post = eshelby_stress(variant, m, &sigma_post, &trial.chi_p, &state)?;
    let phi_post = match yield_function(variant, m, &sigma_e_post, &state)? {
        YieldValue::Scalar(v) => v,
        _ => unreachable!(),
    };
    Ok(LocalUpdate {
        state,
        delta: DeltaLambda::Scalar(dl),
        sweeps: 1,
        kkt_phi: phi_post,
        kkt_complementarity: (dl * phi_post).abs(),
    })
}

/// Single-crystal return: Gauss-Seidel over systems, each scalar update the
/// exact 1D minimizer in the total increment from the step-start state.
/// Ties at yield resolve in fixed system order (load-path-dependent
/// tie-breaking, deliberately deterministic).
pub fn crystal_return_map(
    m: &MaterialParams,
    trial: &LocalTrialState,
    kin: &CrystalKinetics,
    cfg: &LocalSolveConfig,
    node: [usize; 3],
) -> Result<LocalUpdate> {
    let mu = m.elastic.mu;
    let n = kin.n;
    let (gamma_n, eta_n) = match &trial.prev {
        PlasticPoint::Crystal { gamma, eta } => (gamma.clone(), eta.clone()),
        _ => return Err(Error::Validation("SC return map expects Crystal state".into())),
    };
    // tau0^a = <C sym grad u + mu H_chi chi, m^a>
    let b0 = apply_ciso(&m.elastic, &trial.grad_u).add(&trial.chi_p.scale(mu * m.h_chi));
    let tau0: Vec<f64> = m.slip_systems.iter().map(|s| b0.inner(&s.m)).collect();

    let mut gamma = gamma_n.clone();
    // tau_cur^a = tau0^a - sum_b K_ab gamma^b
    let mut tau: Vec<f64> = (0..n)
        .map(|a| {
            let mut t = tau0[a];
            for b in 0..n {
                t -= kin.k[a * n + b] * gamma[b];
            }
            t
        })
        .collect();

    // the sweep stops on the slip fixed point and on the KKT residuals
    // themselves (yield and complementarity), so the post-state complies
    // with the 1e-10 * sigma0 contract independent of the interaction-
    // matrix scale
    let phi_tol = 2.5e-11 * m.sigma0;
    let comp_tol = 2.5e-11 * m.sigma0 * m.sigma0;
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut max_change = 0.0f64;
        let mut max_phi = f64::NEG_INFINITY;
        let mut max_comp = 0.0f64;
        for a in 0..n {
            let kaa = kin.k[a * n + a];
            // trial stress with this system reset to its step-start value
            let tau_tr = tau[a] + kaa * (gamma[a] - gamma_n[a]);
            let radius = m.sigma0
                + if kin.variant == VariantId::ScIso { mu * m.k2 * eta_n[a] } else { 0.0 };
            let delta = shrink(tau_tr, radius, kin.c_diag[a]);
            let new_gamma = gamma_n[a] + delta;
            let change = new_gamma - gamma[a];
            if change != 0.0 {
                for b in 0..n {
                    tau[b] -= kin.k[b * n + a] * change;
                }
                gamma[a] = new_gamma;
                max_change = max_change.max(change.abs());
            }
        }
        for a in 0..n {
            let dg = gamma[a] - gamma_n[a];
            let radius = m.sigma0
                + if kin.variant == VariantId::ScIso {
                    mu * m.k2 * (eta_n[a] + dg.abs())
                } else {
                    0.0
                };
            let phi = tau[a].abs() - radius;
            max_phi = max_phi.max(phi);
            max_comp = max_comp.max((dg * phi).abs());
        }
        if max_change <= cfg.tol && max_phi <= phi_tol && max_comp <= comp_tol {
            break;
        }
        if sweeps >= cfg.max_sweeps {
            return Err(Error::LocalNonConvergence { node, residual: max_change.max(max_phi) });
        }
    }

    let delta: Vec<f64> = (0..n).map(|a| gamma[a] - gamma_n[a]).collect();
    let eta: Vec<f64> = (0..n).map(|a| eta_n[a] + delta[a].abs()).collect();
    // KKT residuals at the converged state
    let mut kkt_phi = f64::NEG_INFINITY;
    let mut kkt_comp = 0.0f64;
    for a in 0..n {
        let radius = m.sigma0 + if kin.variant == VariantId::ScIso { mu * m.k2 * eta[a] } else { 0.0 };
        let phi = tau[a].abs() - radius;
        kkt_phi = kkt_phi.max(phi);
        kkt_comp = kkt_comp.max((delta[a] * phi).abs());
    }
    Ok(LocalUpdate {
        state: PlasticPoint::Crystal { gamma, eta },
        delta: DeltaLambda::PerSystem(delta),
        sweeps,
        kkt_phi,
        kkt_complementarity: kkt_comp,
    })
}
