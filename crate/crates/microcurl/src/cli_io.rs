//! Command-line entry point, configuration parsing, the bundled scenario
//! library, and the output writers.
//!
//! Config files are plain sectioned key = value text ('#' starts a
//! comment). Unknown sections or keys are rejected with line numbers, and
//! no partially-constructed scenario ever reaches the solver.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::grid_fields::{GammaD, Grid};
use crate::materials::{MaterialParams, RmModuli, VariantId};
use crate::solver::{
    run_quasistatic, DirichletShape, InitMode, PlasticField, RunState, Scenario, SolverConfig,
};
use crate::tensor3::{fcc_slip_family, ElasticModuli, Tensor3};
use crate::verify;
use crate::{ConfigIssue, Error, Result};

/// Output options from the [output] section.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    /// Export field CSVs every this many steps (0: final step only).
    pub snapshot_every: usize,
    pub dir: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { snapshot_every: 0, dir: None }
    }
}

/// Fully validated configuration.
#[derive(Debug, Clone)]
pub struct ParsedConfig {
    pub scenario: Scenario,
    pub solver: SolverConfig,
    pub output: OutputConfig,
    /// Accepted-with-warning records (e.g. perfect plasticity).
    pub warnings: Vec<String>,
}

/// Name of the bundled load scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadScenario {
    ShearLayer,
    Uniaxial,
    ElasticPatch,
    None,
}

impl LoadScenario {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "shear_layer" => Some(LoadScenario::ShearLayer),
            "uniaxial" => Some(LoadScenario::Uniaxial),
            "elastic_patch" => Some(LoadScenario::ElasticPatch),
            "none" => Some(LoadScenario::None),
            _ => None,
        }
    }

    fn default_gamma_d(&self) -> GammaD {
        match self {
            LoadScenario::ShearLayer => GammaD::parse("zmin,zmax").unwrap(),
            LoadScenario::Uniaxial => GammaD::parse("xmin").unwrap(),
            LoadScenario::ElasticPatch => GammaD::parse("all").unwrap(),
            LoadScenario::None => GammaD::EMPTY,
        }
    }

    fn default_amplitude(&self) -> f64 {
        match self {
            LoadScenario::ShearLayer => 0.02,
            LoadScenario::Uniaxial => 0.1,
            LoadScenario::ElasticPatch => 0.01,
            LoadScenario::None => 1.0,
        }
    }
}

/// Affine data of the elastic patch test (amplitude-scaled).
pub fn patch_affine_matrix() -> Tensor3 {
    Tensor3::new([
        [0.30, 0.40, -0.20],
        [0.10, -0.25, 0.50],
        [0.20, 0.15, 0.10],
    ])
}

// ---------------------------------------------------------------------------
// config parsing
// ---------------------------------------------------------------------------

struct RawEntry {
    line: usize,
    value: String,
    used: std::cell::Cell<bool>,
}

struct RawConfig {
    // (section, key) -> entry
    entries: std::collections::BTreeMap<(String, String), RawEntry>,
    issues: Vec<ConfigIssue>,
}

impl RawConfig {
    fn parse(text: &str) -> Self {
        let mut entries = std::collections::BTreeMap::new();
        let mut issues = Vec::new();
        let mut section = String::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw_line.find('#') {
                Some(p) => &raw_line[..p],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    issues.push(ConfigIssue {
                        line: line_no,
                        message: format!("malformed section header '{line}'"),
                    });
                    continue;
                }
                section = line[1..line.len() - 1].trim().to_string();
                const SECTIONS: [&str; 6] =
                    ["grid", "material", "variant", "load", "solver", "output"];
                if !SECTIONS.contains(&section.as_str()) {
                    issues.push(ConfigIssue {
                        line: line_no,
                        message: format!(
                            "unknown section [{section}] (expected one of {SECTIONS:?})"
                        ),
                    });
                }
                continue;
            }
            let Some(eq) = line.find('=') else {
                issues.push(ConfigIssue {
                    line: line_no,
                    message: format!("expected 'key = value', got '{line}'"),
                });
                continue;
            };
            if section.is_empty() {
                issues.push(ConfigIssue {
                    line: line_no,
                    message: "key outside of any [section]".into(),
                });
                continue;
            }
            let key = line[..eq].trim().to_string();
            let value = line[eq + 1..].trim().to_string();
            let prev = entries.insert(
                (section.clone(), key.clone()),
                RawEntry { line: line_no, value, used: std::cell::Cell::new(false) },
            );
            if prev.is_some() {
                issues.push(ConfigIssue {
                    line: line_no,
                    message: format!("duplicate key '{key}' in [{section}]"),
                });
            }
        }
        RawConfig { entries, issues }
    }

    fn get(&self, section: &str, key: &str) -> Option<&RawEntry> {
        let e = self.entries.get(&(section.to_string(), key.to_string()));
        if let Some(e) = e {
            e.used.set(true);
        }
        e
    }

    fn has_section(&self, section: &str) -> bool {
        self.entries.keys().any(|(s, _)| s == section)
    }

    fn f64_or(&self, section: &str, key: &str, default: f64, issues: &mut Vec<ConfigIssue>) -> f64 {
        match self.get(section, key) {
            None => default,
            Some(e) => match e.value.parse::<f64>() {
                Ok(v) => v,
                Err(_) => {
                    issues.push(ConfigIssue {
                        line: e.line,
                        message: format!("'{key}' must be a number, got '{}'", e.value),
                    });
                    default
                }
            },
        }
    }

    fn usize_or(
        &self,
        section: &str,
        key: &str,
        default: usize,
        issues: &mut Vec<ConfigIssue>,
    ) -> usize {
        match self.get(section, key) {
            None => default,
            Some(e) => match e.value.parse::<usize>() {
                Ok(v) => v,
                Err(_) => {
                    issues.push(ConfigIssue {
                        line: e.line,
                        message: format!("'{key}' must be a nonnegative integer, got '{}'", e.value),
                    });
                    default
                }
            },
        }
    }

    fn bool_or(&self, section: &str, key: &str, default: bool, issues: &mut Vec<ConfigIssue>) -> bool {
        match self.get(section, key) {
            None => default,
            Some(e) => match e.value.as_str() {
                "true" | "1" | "yes" => true,
                "false" | "0" | "no" => false,
                other => {
                    issues.push(ConfigIssue {
                        line: e.line,
                        message: format!("'{key}' must be true/false, got '{other}'"),
                    });
                    default
                }
            },
        }
    }

    fn unused_issues(&self) -> Vec<ConfigIssue> {
        self.entries
            .iter()
            .filter(|(_, e)| !e.used.get())
            .map(|((s, k), e)| ConfigIssue {
                line: e.line,
                message: format!("unknown key '{k}' in [{s}]"),
            })
            .collect()
    }
}

/// Parses and fully validates a config file. Either every invariant holds
/// in the returned objects or the complete list of line-tagged errors
/// comes back.
pub fn parse_config(text: &str) -> Result<ParsedConfig> {
    let raw = RawConfig::parse(text);
    let mut issues = raw.issues.clone();

    // [variant] (required)
    let variant = match raw.get("variant", "model") {
        Some(e) => match VariantId::parse(&e.value) {
            Some(v) => Some(v),
            None => {
                issues.push(ConfigIssue {
                    line: e.line,
                    message: format!(
                        "unknown variant '{}' (expected SC_ISO, SC_KIN, PC_ISO, PC_KIN or RM_ELASTIC)",
                        e.value
                    ),
                });
                None
            }
        },
        None => {
            issues.push(ConfigIssue {
                line: 0,
                message: "missing required section [variant] with key 'model'".into(),
            });
            None
        }
    };

    // [load]
    let load_scenario = match raw.get("load", "scenario") {
        Some(e) => match LoadScenario::parse(&e.value) {
            Some(s) => s,
            None => {
                issues.push(ConfigIssue {
                    line: e.line,
                    message: format!(
                        "unknown scenario '{}' (expected shear_layer, uniaxial, elastic_patch or none)",
                        e.value
                    ),
                });
                LoadScenario::ShearLayer
            }
        },
        None => LoadScenario::ShearLayer,
    };
    let steps = raw.usize_or("load", "steps", 10, &mut issues);
    let amplitude = raw.f64_or("load", "amplitude", load_scenario.default_amplitude(), &mut issues);
    let fx = raw.f64_or("load", "fx", 0.0, &mut issues);
    let fy = raw.f64_or("load", "fy", 0.0, &mut issues);
    let fz = raw.f64_or("load", "fz", 0.0, &mut issues);
    let load_curve: Vec<f64> = match raw.get("load", "values") {
        Some(e) => {
            let mut vals = Vec::new();
            let mut ok = true;
            for part in e.value.split(',') {
                match part.trim().parse::<f64>() {
                    Ok(v) => vals.push(v),
                    Err(_) => {
                        issues.push(ConfigIssue {
                            line: e.line,
                            message: format!("'values' must be a comma-separated list of numbers, got '{}'", part),
                        });
                        ok = false;
                        break;
                    }
                }
            }
            if ok && (vals.is_empty() || vals[0] != 0.0) {
                issues.push(ConfigIssue {
                    line: e.line,
                    message: "'values' must start at 0 (initial condition w(0) = 0)".into(),
                });
            }
            vals
        }
        None => (0..=steps).map(|k| k as f64 / steps.max(1) as f64).collect(),
    };

    // [grid]
    let (n_default, h_default) = (8usize, 0.125f64);
    let dims = if raw.get("grid", "n").is_some() {
        let n = raw.usize_or("grid", "n", n_default, &mut issues);
        [n, n, n]
    } else {
        [
            raw.usize_or("grid", "nx", n_default, &mut issues),
            raw.usize_or("grid", "ny", n_default, &mut issues),
            raw.usize_or("grid", "nz", n_default, &mut issues),
        ]
    };
    let h = raw.f64_or("grid", "h", h_default, &mut issues);
    let gamma_d = match raw.get("grid", "gamma_d") {
        Some(e) => match GammaD::parse(&e.value) {
            Ok(g) => g,
            Err(msg) => {
                issues.push(ConfigIssue { line: e.line, message: msg });
                load_scenario.default_gamma_d()
            }
        },
        None => load_scenario.default_gamma_d(),
    };

    // [material]
    if !raw.has_section("material") {
        issues.push(ConfigIssue {
            line: 0,
            message: "missing required section [material]".into(),
        });
    }
    let mu = raw.f64_or("material", "mu", 1.0, &mut issues);
    let lambda = raw.f64_or("material", "lambda", 1.0, &mut issues);
    let h_chi = raw.f64_or("material", "h_chi", 100.0, &mut issues);
    let l_c = raw.f64_or("material", "l_c", 0.1, &mut issues);
    let k1 = raw.f64_or("material", "k1", 0.0, &mut issues);
    let k2 = raw.f64_or("material", "k2", 0.0, &mut issues);
    let sigma0_entry = raw.get("material", "sigma0").map(|e| (e.line, e.value.clone()));
    let sigma0 = raw.f64_or("material", "sigma0", 0.0, &mut issues);
    let mu_e = raw.f64_or("material", "mu_e", 1.0, &mut issues);
    let lambda_e = raw.f64_or("material", "lambda_e", 1.0, &mut issues);
    let mu_c = raw.f64_or("material", "mu_c", 1.0, &mut issues);
    let mu_micro = raw.f64_or("material", "mu_micro", 1.0, &mut issues);
    let lambda_micro = raw.f64_or("material", "lambda_micro", 1.0, &mut issues);

    // [solver]
    let solver = SolverConfig {
        tol_outer: raw.f64_or("solver", "tol_outer", 1e-8, &mut issues),
        tol_cg: raw.f64_or("solver", "tol_cg", 1e-12, &mut issues),
        max_outer_iters: raw.usize_or("solver", "max_outer_iters", 20_000, &mut issues),
        max_cg_iters: raw.usize_or("solver", "max_cg_iters", 50_000, &mut issues),
        max_local_iters: raw.usize_or("solver", "max_local_iters", 200, &mut issues),
        reg_eps: raw.f64_or("solver", "reg_eps", 0.0, &mut issues),
        abort_on_nonconvergence: raw.bool_or("solver", "abort_on_nonconvergence", true, &mut issues),
    };

    // [output]
    let output = OutputConfig {
        snapshot_every: raw.usize_or("output", "snapshot_every", 0, &mut issues),
        dir: raw.get("output", "dir").map(|e| PathBuf::from(&e.value)),
    };

    issues.extend(raw.unused_issues());
    if !issues.is_empty() {
        issues.sort_by_key(|i| i.line);
        return Err(Error::Config(issues));
    }
    let variant = variant.expect("variant checked above");

    // assemble and validate the domain objects; map validation failures
    // onto the sigma0/mu source lines where possible
    let elastic = ElasticModuli::new(mu, lambda).map_err(|e| {
        Error::Config(vec![ConfigIssue { line: 0, message: e.to_string() }])
    })?;
    let params = MaterialParams {
        elastic,
        h_chi,
        l_c,
        k1,
        k2,
        sigma0,
        slip_systems: if variant.is_single_crystal() { fcc_slip_family() } else { Vec::new() },
        rm: if variant == VariantId::RmElastic {
            Some(RmModuli { mu_e, lambda_e, mu_c, mu_micro, lambda_micro })
        } else {
            None
        },
    };
    if variant != VariantId::RmElastic && sigma0_entry.is_none() {
        return Err(Error::Config(vec![ConfigIssue {
            line: 0,
            message: "missing required key 'sigma0' in [material]".into(),
        }]));
    }

    let grid = Grid::new(dims, h, gamma_d)
        .map_err(|e| Error::Config(vec![ConfigIssue { line: 0, message: e.to_string() }]))?;

    let dirichlet = match load_scenario {
        LoadScenario::ShearLayer => DirichletShape::SimpleShear { gamma_bar: amplitude },
        LoadScenario::Uniaxial | LoadScenario::None => DirichletShape::Zero,
        LoadScenario::ElasticPatch => {
            DirichletShape::Affine { a: patch_affine_matrix().scale(amplitude) }
        }
    };
    let body_force = match load_scenario {
        LoadScenario::Uniaxial => {
            if fx == 0.0 && fy == 0.0 && fz == 0.0 {
                [amplitude, 0.0, 0.0]
            } else {
                [fx, fy, fz]
            }
        }
        _ => [fx, fy, fz],
    };

    let scenario = Scenario { grid, variant, params, body_force, load_curve, dirichlet };
    let warnings = scenario.params.validate(variant).map_err(|e| {
        Error::Config(vec![ConfigIssue { line: 0, message: e.to_string() }])
    })?;
    solver.validate()?;
    Ok(ParsedConfig { scenario, solver, output, warnings })
}

/// Canonical serialization; parse(serialize(parse(t))) is semantically
/// identical to parse(t).
pub fn serialize_config(cfg: &ParsedConfig) -> String {
    let s = &cfg.scenario;
    let mut out = String::new();
    let _ = writeln!(out, "[variant]");
    let _ = writeln!(out, "model = {}", s.variant.name());
    let _ = writeln!(out, "\n[grid]");
    let _ = writeln!(out, "nx = {}", s.grid.dims[0]);
    let _ = writeln!(out, "ny = {}", s.grid.dims[1]);
    let _ = writeln!(out, "nz = {}", s.grid.dims[2]);
    let _ = writeln!(out, "h = {}", s.grid.h);
    let names = s.grid.gamma_d.names();
    let _ = writeln!(
        out,
        "gamma_d = {}",
        if names.is_empty() { "none".to_string() } else { names.join(",") }
    );
    let _ = writeln!(out, "\n[material]");
    let _ = writeln!(out, "mu = {}", s.params.elastic.mu);
    let _ = writeln!(out, "lambda = {}", s.params.elastic.lambda);
    let _ = writeln!(out, "h_chi = {}", s.params.h_chi);
    let _ = writeln!(out, "l_c = {}", s.params.l_c);
    let _ = writeln!(out, "k1 = {}", s.params.k1);
    let _ = writeln!(out, "k2 = {}", s.params.k2);
    let _ = writeln!(out, "sigma0 = {}", s.params.sigma0);
    if let Some(rm) = &s.params.rm {
        let _ = writeln!(out, "mu_e = {}", rm.mu_e);
        let _ = writeln!(out, "lambda_e = {}", rm.lambda_e);
        let _ = writeln!(out, "mu_c = {}", rm.mu_c);
        let _ = writeln!(out, "mu_micro = {}", rm.mu_micro);
        let _ = writeln!(out, "lambda_micro = {}", rm.lambda_micro);
    }
    let _ = writeln!(out, "\n[load]");
    let scenario_name = match (&s.dirichlet, s.body_force) {
        (DirichletShape::SimpleShear { .. }, _) => "shear_layer",
        (DirichletShape::Affine { .. }, _) => "elastic_patch",
        (DirichletShape::Zero, [0.0, 0.0, 0.0]) => "none",
        (DirichletShape::Zero, _) => "uniaxial",
    };
    let _ = writeln!(out, "scenario = {scenario_name}");
    match &s.dirichlet {
        DirichletShape::SimpleShear { gamma_bar } => {
            let _ = writeln!(out, "amplitude = {gamma_bar}");
        }
        DirichletShape::Affine { a } => {
            let _ = writeln!(out, "amplitude = {}", a.a[0][0] / patch_affine_matrix().a[0][0]);
        }
        DirichletShape::Zero => {}
    }
    let _ = writeln!(out, "fx = {}", s.body_force[0]);
    let _ = writeln!(out, "fy = {}", s.body_force[1]);
    let _ = writeln!(out, "fz = {}", s.body_force[2]);
    let values: Vec<String> = s.load_curve.iter().map(|v| format!("{v}")).collect();
    let _ = writeln!(out, "values = {}", values.join(","));
    let _ = writeln!(out, "\n[solver]");
    let _ = writeln!(out, "tol_outer = {}", cfg.solver.tol_outer);
    let _ = writeln!(out, "tol_cg = {}", cfg.solver.tol_cg);
    let _ = writeln!(out, "max_outer_iters = {}", cfg.solver.max_outer_iters);
    let _ = writeln!(out, "max_cg_iters = {}", cfg.solver.max_cg_iters);
    let _ = writeln!(out, "max_local_iters = {}", cfg.solver.max_local_iters);
    let _ = writeln!(out, "reg_eps = {}", cfg.solver.reg_eps);
    let _ = writeln!(out, "abort_on_nonconvergence = {}", cfg.solver.abort_on_nonconvergence);
    let _ = writeln!(out, "\n[output]");
    let _ = writeln!(out, "snapshot_every = {}", cfg.output.snapshot_every);
    if let Some(d) = &cfg.output.dir {
        let _ = writeln!(out, "dir = {}", d.display());
    }
    out
}

/// Bundled scenario configs, also committed under `configs/`.
pub fn builtin_config(name: &str) -> Option<&'static str> {
    match name {
        "shear_layer" => Some(include_str!("../configs/shear_layer.cfg")),
        "uniaxial" => Some(include_str!("../configs/uniaxial.cfg")),
        "elastic_patch" => Some(include_str!("../configs/elastic_patch.cfg")),
        "rm_elastic" => Some(include_str!("../configs/rm_elastic.cfg")),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// output writers
// ---------------------------------------------------------------------------

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.display().to_string(), source }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(contents.as_bytes()).map_err(io_err(path))
}

fn csv_tensor_field(
    grid: &Grid,
    prefix: &str,
    data: impl Fn(usize) -> Tensor3,
) -> String {
    let mut out = String::from("x,y,z");
    for i in 1..=3 {
        for j in 1..=3 {
            let _ = write!(out, ",{prefix}{i}{j}");
        }
    }
    out.push('\n');
    grid.for_each_node(|c, idx| {
        let p = grid.position(c);
        let t = data(idx);
        let _ = write!(out, "{},{},{}", p[0], p[1], p[2]);
        for i in 0..3 {
            for j in 0..3 {
                let _ = write!(out, ",{}", t.a[i][j]);
            }
        }
        out.push('\n');
    });
    out
}

/// Writes one CSV per field for a step: nodal displacement, micro-
/// distortion, plastic distortion and hardening variables, rows in
/// lexicographic node order.
pub fn export_fields(
    scenario: &Scenario,
    state: &RunState,
    dir: &Path,
    step: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let grid = &scenario.grid;

    // displacement
    let mut u_csv = String::from("x,y,z,u1,u2,u3\n");
    grid.for_each_node(|c, idx| {
        let p = grid.position(c);
        let v = state.u.data[idx];
        let _ = writeln!(u_csv, "{},{},{},{},{},{}", p[0], p[1], p[2], v[0], v[1], v[2]);
    });
    write_file(&dir.join(format!("u_step{step:04}.csv")), &u_csv)?;

    // micro-distortion
    let chi_csv = csv_tensor_field(grid, "chi", |idx| state.chi.data[idx]);
    write_file(&dir.join(format!("chi_step{step:04}.csv")), &chi_csv)?;

    if scenario.variant == VariantId::RmElastic {
        return Ok(());
    }

    // plastic distortion (PC: the symmetric plastic strain)
    let p_field = state.plastic.p_field(grid, &scenario.params);
    let p_csv = csv_tensor_field(grid, "p", |idx| p_field.data[idx]);
    write_file(&dir.join(format!("p_step{step:04}.csv")), &p_csv)?;

    match &state.plastic {
        PlasticField::Poly { eta, .. } => {
            let mut eta_csv = String::from("x,y,z,eta\n");
            grid.for_each_node(|c, idx| {
                let p = grid.position(c);
                let _ = writeln!(eta_csv, "{},{},{},{}", p[0], p[1], p[2], eta[idx]);
            });
            write_file(&dir.join(format!("eta_step{step:04}.csv")), &eta_csv)?;
        }
        PlasticField::Crystal { n_slip, gamma, eta } => {
            let mut eta_csv = String::from("x,y,z");
            let mut gamma_csv = String::from("x,y,z");
            for a in 1..=*n_slip {
                let _ = write!(eta_csv, ",eta{a}");
                let _ = write!(gamma_csv, ",gamma{a}");
            }
            eta_csv.push('\n');
            gamma_csv.push('\n');
            grid.for_each_node(|c, idx| {
                let p = grid.position(c);
                let _ = write!(eta_csv, "{},{},{}", p[0], p[1], p[2]);
                let _ = write!(gamma_csv, "{},{},{}", p[0], p[1], p[2]);
                for a in 0..*n_slip {
                    let _ = write!(eta_csv, ",{}", eta[idx * n_slip + a]);
                    let _ = write!(gamma_csv, ",{}", gamma[idx * n_slip + a]);
                }
                eta_csv.push('\n');
                gamma_csv.push('\n');
            });
            write_file(&dir.join(format!("eta_step{step:04}.csv")), &eta_csv)?;
            write_file(&dir.join(format!("gamma_step{step:04}.csv")), &gamma_csv)?;
        }
        PlasticField::None => {}
    }
    Ok(())
}

/// Serializes a report as deterministic pretty JSON.
pub fn report_json<T: serde::Serialize>(report: &T) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serialization");
    s.push('\n');
    s
}

// ---------------------------------------------------------------------------
// CLI
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "microcurl",
    about = "Quasistatic solver and verification laboratory for microcurl gradient plasticity"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a quasistatic scenario and write report.json plus field CSVs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; falls back to the config's [output] dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Numerical certifications of the analytical structure.
    Verify {
        #[command(subcommand)]
        what: VerifyWhat,
    },
    /// Parameter sweeps.
    Sweep {
        #[command(subcommand)]
        what: SweepWhat,
    },
    /// Solution probes.
    Probe {
        #[command(subcommand)]
        what: ProbeWhat,
    },
    /// Return-map vs brute-force-oracle comparison for one variant.
    PointTest {
        #[arg(long)]
        variant: String,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum VerifyWhat {
    /// Coercivity constant of the governing bilinear form.
    Coercivity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Korn-type constant for incompatible tensor fields.
    Korn {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Norm equivalence of the kinematic-hardening product space.
    NormEquivalence {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SweepWhat {
    /// Penalty sweep over H_chi values; records the micro gap.
    Hchi {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "10,20,40,80")]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ProbeWhat {
    /// Two differently initialized runs must agree when hardening > 0.
    Uniqueness {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn load_config(path: &Path) -> Result<ParsedConfig> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text)
}

fn print_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

/// Entry point behind `main`; returns the process exit code.
/// 0: success, 1: validation error, 2: solver failure, 3: verification
/// assertion failure.
pub fn run_command(argv: &[String]) -> i32 {
    if let Ok(threads) = std::env::var("MICROCURL_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            // ignore failure: the global pool may already exist in-process
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version with success exit codes
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run { config, out } => cmd_run(&config, out.as_deref()),
        Cmd::Verify { what } => match what {
            VerifyWhat::Coercivity { config, out } => cmd_verify_coercivity(&config, out.as_deref()),
            VerifyWhat::Korn { config, out } => cmd_verify_korn(&config, out.as_deref()),
            VerifyWhat::NormEquivalence { config, out } => {
                cmd_verify_norm_equivalence(&config, out.as_deref())
            }
        },
        Cmd::Sweep { what } => match what {
            SweepWhat::Hchi { config, values, out } => cmd_sweep_hchi(&config, &values, out.as_deref()),
        },
        Cmd::Probe { what } => match what {
            ProbeWhat::Uniqueness { config, seed } => cmd_probe_uniqueness(&config, seed),
        },
        Cmd::PointTest { variant, trials, seed } => cmd_point_test(&variant, trials, seed),
    }
}

fn cmd_run(config: &Path, out_dir: Option<&Path>) -> Result<()> {
    let start = std::time::Instant::now();
    let parsed = load_config(config)?;
    print_warnings(&parsed.warnings);
    let out = match (out_dir, &parsed.output.dir) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(d)) => d.clone(),
        (None, None) => {
            return Err(Error::Validation(
                "no output directory: pass --out or set [output] dir in the config".into(),
            ))
        }
    };
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;

    let every = parsed.output.snapshot_every;
    let n_steps = parsed.scenario.n_steps();
    let scenario = parsed.scenario.clone();
    let out_clone = out.clone();
    let mut export_error: Option<Error> = None;
    let mut observer = |step: usize, state: &RunState, _result: &crate::solver::StepResult| {
        let last = step == n_steps;
        if (every > 0 && step % every == 0) || last {
            if export_error.is_none() {
                if let Err(e) = export_fields(&scenario, state, &out_clone, step) {
                    export_error = Some(e);
                }
            }
        }
    };
    let report = run_quasistatic(
        &parsed.scenario,
        &parsed.solver,
        InitMode::WarmStart,
        Some(&mut observer),
    )?;
    if let Some(e) = export_error {
        return Err(e);
    }
    write_file(&out.join("report.json"), &report_json(&report))?;
    // wall-clock goes to a sidecar so that report.json stays bitwise
    // deterministic for identical config + seed
    write_file(
        &out.join("timing.txt"),
        &format!("wall_clock_seconds = {:.3}\n", start.elapsed().as_secs_f64()),
    )?;
    println!(
        "run: {} steps, completed = {}, final micro gap = {:e}",
        report.steps.len(),
        report.completed,
        report.final_micro_gap
    );
    if !report.completed {
        return Err(Error::Solver(report.failure.unwrap_or_else(|| "run aborted".into())));
    }
    Ok(())
}

fn cmd_verify_coercivity(config: &Path, out: Option<&Path>) -> Result<()> {
    let parsed = load_config(config)?;
    print_warnings(&parsed.warnings);
    let s = &parsed.scenario;
    if s.variant == VariantId::RmElastic {
        return Err(Error::Validation(
            "coercivity verification targets the plasticity variants".into(),
        ));
    }
    let report = verify::estimate_coercivity(s.variant, &s.params, &s.grid, 42)?;
    println!(
        "coercivity: variant = {}, grid = {:?}, c_min = {:e} ({} iterations)",
        report.variant, report.dims, report.c_min, report.iterations
    );
    if let Some(p) = out {
        write_file(p, &report_json(&report))?;
    }
    let hardening = s.variant.hardening_constant(&s.params);
    if hardening > 0.0 && report.c_min <= 1e-10 {
        return Err(Error::Verification(format!(
            "c_min = {:e} is not positive although the hardening constant is {} > 0",
            report.c_min, hardening
        )));
    }
    Ok(())
}

fn cmd_verify_korn(config: &Path, out: Option<&Path>) -> Result<()> {
    let parsed = load_config(config)?;
    let grid = &parsed.scenario.grid;
    let report = verify::estimate_korn_constant(grid, 42)?;
    println!(
        "korn: grid = {:?}, gamma_d = {:?}, lambda_min = {:e}, C_h = {:e}",
        report.dims, report.gamma_d, report.lambda_min, report.c_h
    );
    if let Some(p) = out {
        write_file(p, &report_json(&report))?;
    }
    if grid.gamma_d.is_empty() {
        return Err(Error::Verification(format!(
            "Gamma_D is empty: constant skew fields X in so(3) have sym X = 0 and Curl X = 0, \
             a zero-energy mode; the estimator found lambda_min = {:e}",
            report.lambda_min
        )));
    }
    if report.lambda_min <= 1e-10 {
        return Err(Error::Verification(format!(
            "Korn eigenvalue collapsed (lambda_min = {:e}) although Gamma_D = {:?} is nonempty",
            report.lambda_min, report.gamma_d
        )));
    }
    Ok(())
}

fn cmd_verify_norm_equivalence(config: &Path, out: Option<&Path>) -> Result<()> {
    let parsed = load_config(config)?;
    let grid = &parsed.scenario.grid;
    let report = verify::check_norm_equivalence(grid, 1000, 42)?;
    println!(
        "norm equivalence: grid = {:?}, ratio in [{:e}, {:e}], vanishing lambda = {:e}",
        report.dims, report.min_ratio, report.max_ratio, report.vanishing_lambda
    );
    if let Some(p) = out {
        write_file(p, &report_json(&report))?;
    }
    if !(report.min_ratio > 1e-10 && report.max_ratio.is_finite() && report.vanishing_ok) {
        return Err(Error::Verification(format!(
            "norm equivalence failed: min ratio {:e}, max ratio {:e}, vanishing ok = {}",
            report.min_ratio, report.max_ratio, report.vanishing_ok
        )));
    }
    Ok(())
}

fn cmd_sweep_hchi(config: &Path, values: &str, out: Option<&Path>) -> Result<()> {
    let parsed = load_config(config)?;
    print_warnings(&parsed.warnings);
    let mut list = Vec::new();
    for part in values.split(',') {
        list.push(part.trim().parse::<f64>().map_err(|_| {
            Error::Validation(format!("--values must be comma-separated numbers, got '{part}'"))
        })?);
    }
    let points = verify::penalty_sweep(&parsed.scenario, &list, &parsed.solver)?;
    println!("h_chi,gap");
    for p in &points {
        println!("{},{}", p.h_chi, p.gap);
    }
    if let Some(path) = out {
        let mut csv = String::from("h_chi,gap\n");
        for p in &points {
            let _ = writeln!(csv, "{},{}", p.h_chi, p.gap);
        }
        write_file(path, &csv)?;
    }
    for w in points.windows(2) {
        if !(w[1].gap < w[0].gap) {
            return Err(Error::Verification(format!(
                "penalty gap is not strictly decreasing: gap({}) = {:e}, gap({}) = {:e}",
                w[0].h_chi, w[0].gap, w[1].h_chi, w[1].gap
            )));
        }
    }
    Ok(())
}

fn cmd_probe_uniqueness(config: &Path, seed: u64) -> Result<()> {
    let parsed = load_config(config)?;
    print_warnings(&parsed.warnings);
    let report = verify::uniqueness_probe(&parsed.scenario, &parsed.solver, seed)?;
    println!(
        "uniqueness probe: variant = {}, hardening = {}, max relative discrepancy = {:e}",
        report.variant, report.hardening_constant, report.max_rel_discrepancy
    );
    if report.asserted && report.max_rel_discrepancy > 1e-6 {
        return Err(Error::Verification(format!(
            "differently initialized runs disagree by {:e} > 1e-6 with positive hardening",
            report.max_rel_discrepancy
        )));
    }
    if !report.asserted {
        println!("hardening constant is zero (perfect plasticity): discrepancy reported, not asserted");
    }
    Ok(())
}

fn cmd_point_test(variant: &str, trials: usize, seed: u64) -> Result<()> {
    let variant = VariantId::parse(variant)
        .ok_or_else(|| Error::Validation(format!("unknown variant '{variant}'")))?;
    if variant == VariantId::RmElastic {
        return Err(Error::Validation("RM_ELASTIC has no return map to test".into()));
    }
    let params = MaterialParams {
        elastic: ElasticModuli::new(1.0, 1.0).expect("valid"),
        h_chi: 50.0,
        l_c: 0.1,
        k1: 0.5,
        k2: 0.5,
        sigma0: 0.1,
        slip_systems: Vec::new(), // filled per trial for SC variants
        rm: None,
    };
    let report = verify::run_oracle_comparison(variant, &params, trials, seed)?;
    println!(
        "point-test {}: {} trials ({} plastic), max |dl_return - dl_oracle| = {:e}",
        report.variant, report.trials, report.plastic_trials, report.max_abs_diff
    );
    println!(
        "KKT: max phi = {:e}, max complementarity = {:e}",
        report.max_kkt_phi, report.max_kkt_complementarity
    );
    if report.max_abs_diff > 1e-4 {
        return Err(Error::Verification(format!(
            "return map deviates from the oracle by {:e} > 1e-4",
            report.max_abs_diff
        )));
    }
    if report.max_kkt_phi > 1e-10 * params.sigma0 {
        return Err(Error::Verification(format!(
            "KKT yield residual {:e} exceeds 1e-10 * sigma0",
            report.max_kkt_phi
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config(
            "[variant]\nmodel = PC_ISO\n[grid]\nn = 8\n[material]\nsigma0 = 0.1\n",
        )
        .unwrap();
        assert_eq!(cfg.scenario.params.h_chi, 100.0);
        assert_eq!(cfg.scenario.params.l_c, 0.1);
        assert_eq!(cfg.solver.tol_outer, 1e-8);
        assert_eq!(cfg.scenario.grid.dims, [8, 8, 8]);
        // perfect plasticity warning (k2 defaults to 0 for PC_ISO)
        assert!(cfg.warnings.iter().any(|w| w.contains("perfect plasticity")));
    }

    #[test]
    fn invalid_moduli_cites_lame_condition() {
        let err = parse_config(
            "[variant]\nmodel = PC_ISO\n[material]\nmu = -1\nsigma0 = 0.1\n",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mu > 0"), "message was: {msg}");
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err = parse_config(
            "[variant]\nmodel = PC_ISO\n[material]\nsigma0 = 0.1\nbogus = 3\n",
        )
        .unwrap_err();
        match err {
            Error::Config(issues) => {
                assert!(issues.iter().any(|i| i.line == 5 && i.message.contains("bogus")));
            }
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn config_round_trip_is_semantically_identical() {
        let text = "[variant]\nmodel = SC_ISO\n[grid]\nn = 6\nh = 0.25\ngamma_d = zmin,zmax\n\
                    [material]\nsigma0 = 0.2\nk2 = 0.5\nh_chi = 40\n[load]\nscenario = shear_layer\n\
                    steps = 5\namplitude = 0.03\n";
        let a = parse_config(text).unwrap();
        let b = parse_config(&serialize_config(&a)).unwrap();
        assert_eq!(a.scenario.grid, b.scenario.grid);
        assert_eq!(a.scenario.variant, b.scenario.variant);
        assert_eq!(a.scenario.params.h_chi, b.scenario.params.h_chi);
        assert_eq!(a.scenario.params.sigma0, b.scenario.params.sigma0);
        assert_eq!(a.scenario.load_curve, b.scenario.load_curve);
        assert_eq!(a.scenario.dirichlet, b.scenario.dirichlet);
        assert_eq!(a.scenario.body_force, b.scenario.body_force);
        assert_eq!(a.solver.tol_outer, b.solver.tol_outer);
    }

    #[test]
    fn builtin_configs_parse() {
        for name in ["shear_layer", "uniaxial", "elastic_patch", "rm_elastic"] {
            let text = builtin_config(name).unwrap();
            let parsed = parse_config(text);
            assert!(parsed.is_ok(), "builtin {name} failed: {:?}", parsed.err());
        }
    }

    #[test]
    fn missing_variant_section_rejected() {
        let err = parse_config("[material]\nsigma0 = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("[variant]"));
    }
}
