//! Integration checks of the solver against the model structure: patch
//! tests, degenerate limits, balance identities on converged states, and
//! the variational-inequality spot check.

use microcurl::cli_io::parse_config;
use microcurl::grid_fields::{
    curl_h, curl_h_adjoint, div_h, grad_h, norm_l2, norm_l2_vec, GammaD, Grid, TensorField3,
    VectorField3,
};
use microcurl::materials::{
    cauchy_stress, eshelby_stress, local_return_map, LocalSolveConfig, LocalTrialState,
    MaterialParams, PlasticPoint, RmModuli, VariantId,
};
use microcurl::solver::{
    incremental_step, plastic_update_sweep, run_quasistatic, run_to_final_state,
    solve_displacement, solve_microdistortion, DirichletShape, InitMode, PlasticField, RunState,
    Scenario, SolverConfig,
};
use microcurl::tensor3::{ElasticModuli, Tensor3};
use microcurl::verify;

fn pc_scenario(n: usize, gamma_d: &str, steps: usize) -> Scenario {
    let text = format!(
        "[variant]\nmodel = PC_ISO\n[grid]\nn = {n}\nh = 0.25\ngamma_d = {gamma_d}\n\
         [material]\nh_chi = 100.0\nl_c = 0.1\nk2 = 0.5\nsigma0 = 0.1\n\
         [load]\nscenario = shear_layer\nsteps = {steps}\namplitude = 0.2\n"
    );
    parse_config(&text).unwrap().scenario
}

fn tight_cfg() -> SolverConfig {
    SolverConfig {
        tol_outer: 1e-10,
        tol_cg: 1e-12,
        ..SolverConfig::default()
    }
}

#[test]
fn displacement_zero_problem_gives_zero() {
    let scenario = pc_scenario(5, "zmin,zmax", 2);
    let plastic = PlasticField::zero(VariantId::PcIso, &scenario.grid, 0);
    let (u, out) = solve_displacement(&scenario, &plastic, 0.0, &tight_cfg(), None).unwrap();
    assert_eq!(norm_l2_vec(&scenario.grid, &u), 0.0);
    assert_eq!(out.iters, 0);
}

#[test]
fn displacement_patch_test_affine() {
    // affine Dirichlet data on all faces, f = 0, zero plastic state:
    // the affine field is recovered to linear-solver accuracy
    let a = Tensor3::new([[0.3, 0.4, -0.2], [0.1, -0.25, 0.5], [0.2, 0.15, 0.1]]).scale(0.01);
    let grid = Grid::cube(7, 0.125, GammaD::parse("all").unwrap()).unwrap();
    let scenario = Scenario {
        grid,
        variant: VariantId::PcIso,
        params: MaterialParams {
            elastic: ElasticModuli::new(1.0, 1.0).unwrap(),
            h_chi: 100.0,
            l_c: 0.1,
            k1: 0.0,
            k2: 0.5,
            sigma0: 1e6,
            slip_systems: Vec::new(),
            rm: None,
        },
        body_force: [0.0; 3],
        load_curve: vec![0.0, 1.0],
        dirichlet: DirichletShape::Affine { a },
    };
    let plastic = PlasticField::zero(VariantId::PcIso, &scenario.grid, 0);
    let mut cfg = tight_cfg();
    cfg.tol_cg = 1e-14;
    let (u, _) = solve_displacement(&scenario, &plastic, 1.0, &cfg, None).unwrap();
    let exact = VectorField3::from_fn(&scenario.grid, |x| a.mul_vec(x));
    let mut du = u.clone();
    for (i, v) in du.data.iter_mut().enumerate() {
        for d in 0..3 {
            v[d] -= exact.data[i][d];
        }
    }
    let err = norm_l2_vec(&scenario.grid, &du) / norm_l2_vec(&scenario.grid, &exact);
    assert!(err < 1e-12, "patch test error {err:e}");
}

#[test]
fn displacement_cg_residual_contract() {
    // the returned field satisfies the discrete weak equilibrium to tol_cg
    let scenario = pc_scenario(5, "zmin,zmax", 2);
    let grid = &scenario.grid;
    let mut plastic = PlasticField::zero(VariantId::PcIso, grid, 0);
    if let PlasticField::Poly { eps_p, .. } = &mut plastic {
        for (i, t) in eps_p.iter_mut().enumerate() {
            let s = (i % 7) as f64 * 0.003;
            *t = Tensor3::outer([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).sym().scale(s).dev();
        }
    }
    let cfg = tight_cfg();
    let (u, _) = solve_displacement(&scenario, &plastic, 0.7, &cfg, None).unwrap();

    // residual of the free equations: G^T C (G u - eps_p) - f on free dofs
    let eps_p = plastic.eps_p_field(grid, &scenario.params);
    let g_u = grad_h(grid, &u);
    let mut stress = TensorField3::zero(grid);
    for i in 0..grid.node_count() {
        stress.data[i] =
            microcurl::tensor3::apply_ciso(&scenario.params.elastic, &g_u.data[i].sym().sub(&eps_p.data[i]));
    }
    let mut res = microcurl::grid_fields::grad_h_adjoint(grid, &stress);
    let f = scenario.body_force_field(0.7);
    grid.for_each_node(|c, idx| {
        for d in 0..3 {
            res.data[idx][d] -= f.data[idx][d];
        }
        if grid.on_gamma_d(c) {
            res.data[idx] = [0.0; 3];
        }
    });
    let rnorm = norm_l2_vec(grid, &res);
    assert!(rnorm <= 1e-10, "equilibrium residual {rnorm:e}");
}

#[test]
fn microdistortion_zero_and_degenerate_cases() {
    // p = 0 -> chi = 0 (unique solution of the homogeneous SPD system)
    let scenario = pc_scenario(5, "zmin,zmax", 2);
    let plastic = PlasticField::zero(VariantId::PcIso, &scenario.grid, 0);
    let (chi, _) = solve_microdistortion(&scenario, &plastic, &tight_cfg(), None).unwrap();
    assert_eq!(norm_l2(&scenario.grid, &chi), 0.0);

    // SC with L_c = 0: chi_p = p exactly (algebraic degeneration)
    let text = "[variant]\nmodel = SC_ISO\n[grid]\nn = 5\nh = 0.25\ngamma_d = zmin,zmax\n\
                [material]\nh_chi = 30.0\nl_c = 0.0\nk2 = 0.5\nsigma0 = 0.1\n\
                [load]\nscenario = shear_layer\nsteps = 2\namplitude = 0.1\n";
    let sc = parse_config(text).unwrap().scenario;
    let mut plastic = PlasticField::zero(VariantId::ScIso, &sc.grid, 12);
    if let PlasticField::Crystal { gamma, .. } = &mut plastic {
        for (i, g) in gamma.iter_mut().enumerate() {
            *g = ((i % 5) as f64 - 2.0) * 0.01;
        }
    }
    let (chi, _) = solve_microdistortion(&sc, &plastic, &tight_cfg(), None).unwrap();
    let p = plastic.p_field(&sc.grid, &sc.params);
    let mut diff = chi.clone();
    for (i, t) in diff.data.iter_mut().enumerate() {
        *t = t.sub(&p.data[i]);
    }
    assert_eq!(norm_l2(&sc.grid, &diff), 0.0, "L_c = 0 must give chi_p = p exactly");

    // PC with L_c = 0 and reg_eps = 0: singular, must advise reg_eps
    let mut pc0 = pc_scenario(5, "zmin,zmax", 2);
    pc0.params.l_c = 0.0;
    let err = solve_microdistortion(&pc0, &PlasticField::zero(VariantId::PcIso, &pc0.grid, 0), &tight_cfg(), None);
    match err {
        Err(e) => assert!(e.to_string().contains("reg_eps"), "unexpected message: {e}"),
        Ok(_) => panic!("PC with L_c = 0 and reg_eps = 0 must error"),
    }
}

#[test]
fn microdistortion_penalty_monotonicity() {
    // constant p compatible with the BCs on a grid with Gamma_D = one face:
    // the gap ||chi - p|| decreases monotonically as H_chi grows
    let text = "[variant]\nmodel = SC_ISO\n[grid]\nn = 5\nh = 0.25\ngamma_d = xmin\n\
                [material]\nh_chi = 1.0\nl_c = 0.3\nk2 = 0.5\nsigma0 = 0.1\n\
                [load]\nscenario = uniaxial\nsteps = 2\n";
    let base = parse_config(text).unwrap().scenario;
    // a single-system slip field that is nonzero in the interior only, so
    // the tangential BC does not clash with the target
    let mut plastic = PlasticField::zero(VariantId::ScIso, &base.grid, 12);
    if let PlasticField::Crystal { gamma, .. } = &mut plastic {
        base.grid.for_each_node(|c, idx| {
            let interior = (1..4).contains(&c[0]) && (1..4).contains(&c[1]) && (1..4).contains(&c[2]);
            if interior {
                gamma[idx * 12] = 0.05;
            }
        });
    }
    let mut last_gap = f64::INFINITY;
    for h_chi in [1.0, 10.0, 100.0, 1000.0] {
        let mut sc = base.clone();
        sc.params.h_chi = h_chi;
        let (chi, _) = solve_microdistortion(&sc, &plastic, &tight_cfg(), None).unwrap();
        let p = plastic.p_field(&sc.grid, &sc.params);
        let mut diff = chi.clone();
        for (i, t) in diff.data.iter_mut().enumerate() {
            *t = t.sub(&p.data[i]);
        }
        let gap = norm_l2(&sc.grid, &diff);
        assert!(gap < last_gap, "gap must decrease with H_chi: {gap:e} vs {last_gap:e}");
        last_gap = gap;
    }
}

#[test]
fn sweep_below_yield_is_identity_and_matches_local_map() {
    let scenario = pc_scenario(4, "zmin,zmax", 2);
    let grid = &scenario.grid;
    let prev = PlasticField::zero(VariantId::PcIso, grid, 0);
    // small displacement: everywhere below yield
    let u = VectorField3::from_fn(grid, |x| [0.002 * x[2], 0.0, 0.0]);
    let chi = TensorField3::zero(grid);
    let (next, diag) = plastic_update_sweep(&scenario, &u, &chi, &prev, &tight_cfg(), None).unwrap();
    assert_eq!(next, prev, "below yield the state must not change");
    assert_eq!(diag.active_nodes, 0);

    // beyond yield: the sweep at a node reproduces the pointwise return map
    let u = VectorField3::from_fn(grid, |x| [0.3 * x[2], 0.0, 0.0]);
    let (next, _) = plastic_update_sweep(&scenario, &u, &chi, &prev, &tight_cfg(), None).unwrap();
    let g_u = grad_h(grid, &u);
    for idx in [0usize, 7, grid.node_count() / 2] {
        let trial = LocalTrialState {
            grad_u: g_u.data[idx],
            chi_p: chi.data[idx],
            prev: prev.point(idx),
        };
        let up = local_return_map(VariantId::PcIso, &scenario.params, &trial, &LocalSolveConfig::default())
            .unwrap();
        assert_eq!(next.point(idx), up.state, "sweep must reduce to the local map at node {idx}");
    }
}

#[test]
fn sweep_pointwise_dissipation_nonnegative() {
    let scenario = pc_scenario(4, "zmin,zmax", 2);
    let grid = &scenario.grid;
    let prev = PlasticField::zero(VariantId::PcIso, grid, 0);
    let u = VectorField3::from_fn(grid, |x| [0.25 * x[2], 0.01 * x[0], -0.02 * x[1]]);
    let chi = TensorField3::zero(grid);
    let (next, _) = plastic_update_sweep(&scenario, &u, &chi, &prev, &tight_cfg(), None).unwrap();
    let g_u = grad_h(grid, &u);
    let mu = scenario.params.elastic.mu;
    for idx in 0..grid.node_count() {
        let pt = next.point(idx);
        let (eps_p, eta_p, d_eps, d_eta) = match (&pt, &prev.point(idx)) {
            (PlasticPoint::Poly { eps_p, eta_p }, PlasticPoint::Poly { eps_p: e0, eta_p: n0 }) => {
                (*eps_p, *eta_p, eps_p.sub(e0), eta_p - n0)
            }
            _ => unreachable!(),
        };
        let sigma = cauchy_stress(&scenario.params, &g_u.data[idx], &eps_p);
        let se = eshelby_stress(VariantId::PcIso, &scenario.params, &sigma, &chi.data[idx], &pt).unwrap();
        let g = -mu * scenario.params.k2 * eta_p;
        let pairing = se.inner(&d_eps) + g * d_eta;
        assert!(pairing >= -1e-12, "node {idx}: dissipation pairing {pairing:e}");
    }
}

#[test]
fn zero_load_step_is_identity_in_one_iteration() {
    let mut scenario = pc_scenario(4, "zmin,zmax", 3);
    scenario.load_curve = vec![0.0, 0.0];
    let state0 = RunState::zero(&scenario);
    let (next, result) =
        incremental_step(&scenario, &tight_cfg(), &state0, 1, InitMode::WarmStart, None).unwrap();
    assert_eq!(result.outer_iters, 1);
    assert_eq!(norm_l2_vec(&scenario.grid, &next.u), 0.0);
    assert_eq!(norm_l2(&scenario.grid, &next.chi), 0.0);
    assert_eq!(next.plastic, state0.plastic);
}

#[test]
fn elastic_regime_scales_linearly() {
    // far below yield the response is linear in the load level
    let mut scenario = pc_scenario(5, "zmin,zmax", 2);
    scenario.params.sigma0 = 1e6;
    scenario.load_curve = vec![0.0, 0.5, 1.0];
    let cfg = tight_cfg();
    let kin = None;
    let s0 = RunState::zero(&scenario);
    let (s1, r1) = incremental_step(&scenario, &cfg, &s0, 1, InitMode::WarmStart, kin).unwrap();
    let (s2, r2) = incremental_step(&scenario, &cfg, &s1, 2, InitMode::WarmStart, kin).unwrap();
    assert_eq!(r1.plastic_active_nodes, 0);
    assert_eq!(r2.plastic_active_nodes, 0);
    assert_eq!(s2.plastic, PlasticField::zero(VariantId::PcIso, &scenario.grid, 0));
    let mut diff = s2.u.clone();
    for (i, v) in diff.data.iter_mut().enumerate() {
        for d in 0..3 {
            v[d] -= 2.0 * s1.u.data[i][d];
        }
    }
    let rel = norm_l2_vec(&scenario.grid, &diff) / norm_l2_vec(&scenario.grid, &s2.u);
    assert!(rel < 1e-9, "u must scale linearly below yield, got {rel:e}");
}

#[test]
fn elastic_limit_consistency_large_yield_stress() {
    // sigma0 -> large reproduces pure linear elasticity
    let mut scenario = pc_scenario(5, "zmin,zmax", 4);
    scenario.params.sigma0 = 1e9;
    let (state, report) = run_to_final_state(&scenario, &tight_cfg(), InitMode::WarmStart).unwrap();
    assert_eq!(state.plastic, PlasticField::zero(VariantId::PcIso, &scenario.grid, 0));
    for s in &report.steps {
        assert_eq!(s.plastic_active_nodes, 0);
        assert_eq!(s.dissipation_increment, 0.0);
        assert!(s.energy_audit_relative < 1e-10);
    }
}

#[test]
fn zero_load_curve_gives_zero_trajectory() {
    let mut scenario = pc_scenario(4, "zmin,zmax", 3);
    scenario.load_curve = vec![0.0; 4];
    let (state, report) = run_to_final_state(&scenario, &tight_cfg(), InitMode::WarmStart).unwrap();
    assert!(report.completed);
    assert_eq!(norm_l2_vec(&scenario.grid, &state.u), 0.0);
    assert_eq!(norm_l2(&scenario.grid, &state.chi), 0.0);
    assert_eq!(state.plastic, PlasticField::zero(VariantId::PcIso, &scenario.grid, 0));
}

#[test]
fn eta_monotone_and_objective_nonincreasing_across_run() {
    let scenario = pc_scenario(5, "zmin,zmax", 6);
    let mut max_etas = Vec::new();
    let mut observer = |_step: usize, state: &RunState, result: &microcurl::solver::StepResult| {
        max_etas.push(state.plastic.max_eta());
        // alternating-minimization monotonicity of the accepted cycles
        for w in result.objective_history.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-12 * w[0].abs().max(1e-300),
                "objective increased within a step: {} -> {}",
                w[0],
                w[1]
            );
        }
    };
    let report = run_quasistatic(&scenario, &tight_cfg(), InitMode::WarmStart, Some(&mut observer)).unwrap();
    assert!(report.completed);
    for w in max_etas.windows(2) {
        assert!(w[1] >= w[0] - 1e-15, "max eta must be nondecreasing: {} -> {}", w[0], w[1]);
    }
    // eta fields are nonnegative by construction of the return maps
    assert!(max_etas.last().unwrap() > &0.0, "scenario must actually yield");
}

#[test]
fn converged_state_satisfies_bianchi_and_microbalance_identity() {
    let scenario = pc_scenario(6, "zmin,zmax", 4);
    let cfg = tight_cfg();
    let (state, _) = run_to_final_state(&scenario, &cfg, InitMode::WarmStart).unwrap();
    let grid = &scenario.grid;

    // discrete Bianchi identity on the converged micro-distortion
    let dc = div_h(grid, &curl_h(grid, &state.chi));
    let scale = 1.0 + norm_l2(grid, &state.chi) / (grid.h * grid.h);
    let bianchi = norm_l2_vec(grid, &dc);
    assert!(
        bianchi <= 1e-11 * scale,
        "Bianchi residual {bianchi:e} vs scale {scale:e}"
    );

    // Sigma_E - sigma = -mu L_c^2 curl_h_adjoint(curl_h chi_p) on the free
    // dofs of the micro solve, within solver tolerance
    let params = &scenario.params;
    let mu = params.elastic.mu;
    let p = state.plastic.p_field(grid, params);
    let mut lhs = TensorField3::zero(grid);
    for idx in 0..grid.node_count() {
        // PC coupling: Sigma_E - sigma = mu H_chi (sym chi - eps_p)
        lhs.data[idx] = state.chi.data[idx].sym().sub(&p.data[idx]).scale(mu * params.h_chi);
    }
    let cc = curl_h_adjoint(grid, &curl_h(grid, &state.chi));
    let mut residual = TensorField3::zero(grid);
    for idx in 0..grid.node_count() {
        residual.data[idx] = lhs.data[idx].add_scaled(&cc.data[idx], mu * params.l_c * params.l_c);
    }
    microcurl::solver::project_micro_subspace(grid, &mut residual);
    let r = norm_l2(grid, &residual) / norm_l2(grid, &lhs).max(1e-300);
    assert!(r <= 1e-8, "microbalance identity residual {r:e}");
}

#[test]
fn variational_inequality_spot_check() {
    for (model, n) in [("PC_ISO", 5usize), ("SC_ISO", 4)] {
        let text = format!(
            "[variant]\nmodel = {model}\n[grid]\nn = {n}\nh = 0.25\ngamma_d = zmin,zmax\n\
             [material]\nh_chi = 50.0\nl_c = 0.1\nk2 = 0.5\nsigma0 = 0.1\n\
             [load]\nscenario = shear_layer\nsteps = 3\namplitude = 0.2\n\
             [solver]\ntol_outer = 1e-11\ntol_cg = 1e-13\n"
        );
        let parsed = parse_config(&text).unwrap();
        let scenario = parsed.scenario;
        let cfg = parsed.solver;
        let kin = if scenario.variant.is_single_crystal() {
            Some(microcurl::materials::CrystalKinetics::new(scenario.variant, &scenario.params))
        } else {
            None
        };
        let mut state = RunState::zero(&scenario);
        for step in 1..=scenario.n_steps() {
            let (next, result) =
                incremental_step(&scenario, &cfg, &state, step, InitMode::WarmStart, kin.as_ref()).unwrap();
            assert!(result.converged);
            let worst = verify::vi_spot_check(
                &scenario,
                &state,
                &next,
                scenario.load_curve[step],
                25,
                step as u64,
            )
            .unwrap();
            // slack must not be more negative than the solver tolerance scale
            assert!(
                worst >= -1e-8,
                "{model} step {step}: VI violated with slack {worst:e}"
            );
            state = next;
        }
    }
}

#[test]
fn run_is_deterministic() {
    let scenario = pc_scenario(4, "zmin,zmax", 3);
    let cfg = tight_cfg();
    let a = run_quasistatic(&scenario, &cfg, InitMode::WarmStart, None).unwrap();
    let b = run_quasistatic(&scenario, &cfg, InitMode::WarmStart, None).unwrap();
    let ja = microcurl::cli_io::report_json(&a);
    let jb = microcurl::cli_io::report_json(&b);
    assert_eq!(ja, jb, "identical runs must produce bitwise-identical reports");
}

#[test]
fn sc_kin_uniaxial_runs_and_audits() {
    let text = "[variant]\nmodel = SC_KIN\n[grid]\nn = 5\nh = 0.25\ngamma_d = zmin,zmax\n\
                [material]\nh_chi = 50.0\nl_c = 0.1\nk1 = 0.5\nsigma0 = 0.1\n\
                [load]\nscenario = shear_layer\nsteps = 5\namplitude = 0.25\n\
                [solver]\ntol_outer = 1e-10\ntol_cg = 1e-12\n";
    let parsed = parse_config(text).unwrap();
    let (state, report) = run_to_final_state(&parsed.scenario, &parsed.solver, InitMode::WarmStart).unwrap();
    assert!(report.completed);
    let any_plastic = report.steps.iter().any(|s| s.plastic_active_nodes > 0);
    assert!(any_plastic, "SC_KIN shear must yield");
    for s in &report.steps {
        assert!(s.energy_audit_relative <= 1e-8, "step {}: audit {:e}", s.step, s.energy_audit_relative);
        assert!(s.dissipation_pairing >= -1e-12);
    }
    assert!(state.plastic.max_eta() > 0.0);
}

#[test]
fn rm_energy_degenerate_micro_moduli() {
    // mu_micro = lambda_micro = 0, L_c = 0, mu_c > 0: the energy is a pure
    // relative-deformation form with minimum 0 at chi_p = grad u
    let m = MaterialParams {
        elastic: ElasticModuli::new(1.0, 1.0).unwrap(),
        h_chi: 1.0,
        l_c: 0.0,
        k1: 0.0,
        k2: 0.0,
        sigma0: 1.0,
        slip_systems: Vec::new(),
        rm: Some(RmModuli {
            mu_e: 1.0,
            lambda_e: 0.3,
            mu_c: 0.7,
            mu_micro: 0.0,
            lambda_micro: 0.0,
        }),
    };
    let g = Tensor3::new([[0.2, -0.4, 0.1], [0.5, 0.3, -0.2], [0.0, 0.1, -0.5]]);
    let at_grad = microcurl::materials::rm_elastic_energy_terms(&m, &g, &g, &Tensor3::ZERO);
    assert_eq!(at_grad, 0.0);
    let off = microcurl::materials::rm_elastic_energy_terms(
        &m,
        &g,
        &g.add(&Tensor3::identity().scale(0.1)),
        &Tensor3::ZERO,
    );
    assert!(off > 0.0, "energy must be positive away from chi = grad u");
}

#[test]
fn verify_invariants_hardening_and_gamma_d_monotonicity() {
    // lowering the hardening constant never increases c_min
    let gd = GammaD::parse("zmin,zmax").unwrap();
    let grid = Grid::cube(4, 1.0 / 3.0, gd).unwrap();
    let mk = |k2: f64| MaterialParams {
        elastic: ElasticModuli::new(1.0, 1.0).unwrap(),
        h_chi: 100.0,
        l_c: 0.1,
        k1: 0.0,
        k2,
        sigma0: 0.1,
        slip_systems: Vec::new(),
        rm: None,
    };
    let hi = verify::estimate_coercivity(VariantId::PcIso, &mk(0.5), &grid, 42).unwrap();
    let lo = verify::estimate_coercivity(VariantId::PcIso, &mk(0.1), &grid, 42).unwrap();
    assert!(
        lo.c_min <= hi.c_min * (1.0 + 1e-6),
        "lowering k2 must not increase c_min: {:e} vs {:e}",
        lo.c_min,
        hi.c_min
    );

    // adding faces to Gamma_D shrinks the space, so the Korn eigenvalue
    // cannot decrease
    let g_one = Grid::cube(5, 0.25, GammaD::parse("xmin").unwrap()).unwrap();
    let g_two = Grid::cube(5, 0.25, GammaD::parse("xmin,xmax").unwrap()).unwrap();
    let r_one = verify::estimate_korn_constant(&g_one, 42).unwrap();
    let r_two = verify::estimate_korn_constant(&g_two, 42).unwrap();
    assert!(
        r_two.lambda_min >= r_one.lambda_min * (1.0 - 1e-6),
        "larger Gamma_D must not lower the Korn eigenvalue: {:e} vs {:e}",
        r_two.lambda_min,
        r_one.lambda_min
    );
}

#[test]
fn nonconverged_step_is_flagged_per_config() {
    let mut scenario = pc_scenario(4, "zmin,zmax", 2);
    scenario.load_curve = vec![0.0, 1.0];
    let mut cfg = tight_cfg();
    cfg.max_outer_iters = 1; // the plastic step cannot settle in one cycle

    cfg.abort_on_nonconvergence = false;
    let report = run_quasistatic(&scenario, &cfg, InitMode::WarmStart, None).unwrap();
    assert!(report.completed, "run continues past flagged steps when configured to");
    assert!(report.steps.iter().any(|s| !s.converged));

    cfg.abort_on_nonconvergence = true;
    let report = run_quasistatic(&scenario, &cfg, InitMode::WarmStart, None).unwrap();
    assert!(!report.completed);
    assert!(report.failure.as_deref().unwrap_or("").contains("did not converge"));
}

#[test]
fn rm_elastic_run_path() {
    let text = "[variant]\nmodel = RM_ELASTIC\n[grid]\nn = 6\nh = 0.2\ngamma_d = xmin\n\
                [material]\nl_c = 0.1\nmu_e = 1.0\nlambda_e = 1.0\nmu_c = 1.0\n\
                mu_micro = 1.0\nlambda_micro = 1.0\n\
                [load]\nscenario = uniaxial\nsteps = 2\namplitude = 0.5\n\
                [solver]\ntol_cg = 1e-12\n";
    let parsed = parse_config(text).unwrap();
    let (state, report) = run_to_final_state(&parsed.scenario, &parsed.solver, InitMode::WarmStart).unwrap();
    assert!(report.completed);
    assert!(norm_l2_vec(&parsed.scenario.grid, &state.u) > 0.0);
    assert!(norm_l2(&parsed.scenario.grid, &state.chi) > 0.0);
    for s in &report.steps {
        assert_eq!(s.dissipation_increment, 0.0);
        assert!(s.energy_audit_relative < 1e-9, "RM audit {:e}", s.energy_audit_relative);
    }
}

#[test]
fn uniqueness_probe_reports_without_asserting_at_zero_hardening() {
    // perfect plasticity (k2 = 0) below yield: the probe runs and reports
    // but does not assert
    let text = "[variant]\nmodel = PC_ISO\n[grid]\nn = 4\nh = 0.25\ngamma_d = zmin,zmax\n\
                [material]\nh_chi = 50.0\nl_c = 0.1\nk2 = 0.0\nsigma0 = 10.0\n\
                [load]\nscenario = shear_layer\nsteps = 2\namplitude = 0.05\n\
                [solver]\ntol_outer = 1e-10\n";
    let parsed = parse_config(text).unwrap();
    let rep = verify::uniqueness_probe(&parsed.scenario, &parsed.solver, 11).unwrap();
    assert!(!rep.asserted);
    assert_eq!(rep.hardening_constant, 0.0);
    assert!(rep.max_rel_discrepancy.is_finite());
}

#[test]
fn nonempty_gamma_d_required_by_solver() {
    let text = "[variant]\nmodel = PC_ISO\n[grid]\nn = 4\ngamma_d = none\n\
                [material]\nsigma0 = 0.1\nk2 = 0.5\n[load]\nscenario = none\nfx = 0.1\n";
    let scenario = parse_config(text).unwrap().scenario;
    let err = run_quasistatic(&scenario, &SolverConfig::default(), InitMode::WarmStart, None);
    assert!(err.is_err(), "empty Gamma_D must be rejected by the solver");
}
