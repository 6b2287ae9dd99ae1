//! Subcommand runners. Each one solves, then writes its artifacts in one
//! single-threaded pass at the end.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};
use slabscat::assembly::Incident;
use slabscat::io::{csv_line, fmt_f64, header, write_text};
use slabscat::modes::{check_nonresonance, eigen_sequence, modes_to_csv};
use slabscat::optimize::{self, history_to_csv, DesignProblem};
use slabscat::scatter::{sweep, sweep_to_csv, Scatterer, SolveOptions, SweepRow};
use slabscat::sensitivity::{
    energy_gradient, fd_check, gradient_homogeneous, gradient_order, gradient_to_csv, solve_linearized,
    GradientPath,
};
use slabscat::structure::{
    inclusion_mask, raster_to_csv, rasterize, rasterize_fractional, read_raster_pair, AdmissibleEnvelope,
    CellGeometry, Coefficient, CoefficientField, Perturbation,
};
use slabscat::{harmonics, Error};

use crate::config::{DirectionSpec, EnvelopeSpec, Region, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Solve,
    Sweep,
    Grad,
    Linearize,
    Modes,
    Certify,
    Optimize,
    Fdcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Sweep => "sweep",
            Command::Grad => "grad",
            Command::Linearize => "linearize",
            Command::Modes => "modes",
            Command::Certify => "certify",
            Command::Optimize => "optimize",
            Command::Fdcheck => "fdcheck",
        }
    }
}

/// What a run produced, for the provenance record.
#[derive(Debug, Default)]
pub struct Report {
    pub artifacts: Vec<String>,
    pub balance_defects: Vec<f64>,
    /// Set when the run ended in a certified refusal.
    pub refusal: Option<String>,
    pub summary: serde_json::Map<String, Value>,
}

pub struct Output {
    dir: PathBuf,
    pub report: Report,
}

impl Output {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            report: Report::default(),
        }
    }

    fn write(&mut self, name: &str, text: &str) -> slabscat::Result<()> {
        write_text(&self.dir.join(name), text)?;
        self.report.artifacts.push(name.to_string());
        Ok(())
    }

    fn write_json(&mut self, name: &str, v: &Value) -> slabscat::Result<()> {
        let text = serde_json::to_string_pretty(v).map_err(|e| Error::Parse(e.to_string()))? + "\n";
        self.write(name, &text)
    }
}

pub fn build_scatterer(cfg: &RunConfig) -> slabscat::Result<Scatterer> {
    let g = &cfg.geometry;
    let geom = CellGeometry::new(g.z_minus, g.z_plus, g.nx, g.nz)?;
    let s = &cfg.structure;
    let field = match &s.raster {
        Some((eps, tau)) => read_raster_pair(&geom, eps, tau)?,
        None if s.fractional => rasterize_fractional(&geom, s.background, &s.inclusions)?,
        None => rasterize(&geom, s.background, &s.inclusions)?,
    };
    let mut sc = Scatterer::new(geom, field, cfg.eps0, cfg.tau0)?;
    if let Some(m) = g.m_max {
        if 2 * m >= g.nx {
            return Err(Error::Aliasing { m_max: m, nx: g.nx });
        }
        sc.m_max = m;
    }
    Ok(sc)
}

fn solve_options(cfg: &RunConfig) -> SolveOptions {
    SolveOptions {
        tolerance: cfg.solver.tolerance,
        refinement_steps: cfg.solver.refinement_steps,
        estimate_condition: cfg.solver.condition,
    }
}

fn incident(cfg: &RunConfig) -> Incident {
    let inc = &cfg.incident;
    if inc.from_left {
        Incident::from_left(inc.order).scaled(inc.amplitude)
    } else {
        Incident::from_right(inc.order, inc.amplitude)
    }
}

fn single_point(cfg: &RunConfig, cmd: Command) -> slabscat::Result<(f64, f64)> {
    if cfg.omegas.len() != 1 || cfg.kappas.len() != 1 {
        return Err(Error::InvalidParameter(format!(
            "{} needs a single omega and kappa (use sweep for grids)",
            cmd.name()
        )));
    }
    Ok((cfg.omegas[0], cfg.kappas[0]))
}

fn region_mask(cfg: &RunConfig, geom: &CellGeometry, region: &Region) -> slabscat::Result<Vec<bool>> {
    let n = geom.n_cells();
    match region {
        Region::All => Ok(vec![true; n]),
        Region::Inclusions => {
            if cfg.structure.inclusions.is_empty() {
                return Err(Error::InvalidParameter("region \"inclusions\" needs inclusions".into()));
            }
            let mut mask = vec![false; n];
            for inc in &cfg.structure.inclusions {
                for (m, b) in mask.iter_mut().zip(inclusion_mask(geom, inc)) {
                    *m |= b;
                }
            }
            Ok(mask)
        }
        Region::Rect { lo, hi } => Ok((0..n)
            .map(|c| {
                let (i, k) = geom.cell_of(c);
                let (x, z) = geom.cell_center(i, k);
                x >= lo.0 && x <= hi.0 && z >= lo.1 && z <= hi.1
            })
            .collect()),
    }
}

fn envelope(
    cfg: &RunConfig,
    geom: &CellGeometry,
    field: &CoefficientField,
    spec: &EnvelopeSpec,
) -> slabscat::Result<AdmissibleEnvelope> {
    match spec {
        EnvelopeSpec::Degenerate => Ok(AdmissibleEnvelope::degenerate(field)),
        EnvelopeSpec::Relative { rel, region } => {
            AdmissibleEnvelope::relative_band(field, &region_mask(cfg, geom, region)?, *rel)
        }
        EnvelopeSpec::Bounds { eps, tau } => AdmissibleEnvelope::uniform(geom, *eps, *tau),
    }
}

/// Perturbation direction for `linearize` and `fdcheck`; random ones come from the run seed.
pub fn direction(cfg: &RunConfig, n: usize) -> slabscat::Result<Perturbation> {
    Ok(match cfg.sensitivity.direction {
        DirectionSpec::Random { eps_only } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let d_eps: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let d_tau: Vec<f64> = (0..n)
                .map(|_| if eps_only { 0.0 } else { rng.gen_range(-1.0..=1.0) })
                .collect();
            Perturbation { d_eps, d_tau }
        }
        DirectionSpec::UniformEps => Perturbation::eps_only(vec![1.0; n]),
        DirectionSpec::UniformTau => Perturbation::tau_only(vec![1.0; n]),
        DirectionSpec::Cell { index, coefficient } => {
            if index >= n {
                return Err(Error::InvalidParameter(format!("direction cell {index} outside 0..{n}")));
            }
            Perturbation::cell_indicator(n, index, coefficient == Coefficient::Tau)
        }
    })
}

fn c_json(c: num_complex::Complex64) -> Value {
    json!([c.re, c.im])
}

pub fn dispatch(cmd: Command, cfg: &RunConfig, out: &mut Output) -> slabscat::Result<()> {
    let sc = build_scatterer(cfg)?;
    out.report.summary.insert("m_max".into(), json!(sc.m_max));
    match cmd {
        Command::Solve | Command::Sweep => run_sweep(cmd, cfg, &sc, out),
        Command::Grad => run_grad(cfg, &sc, out),
        Command::Linearize => run_linearize(cfg, &sc, out),
        Command::Modes => run_modes(cfg, &sc, out),
        Command::Certify => run_certify(cfg, &sc, out),
        Command::Optimize => run_optimize(cfg, &sc, out),
        Command::Fdcheck => run_fdcheck(cfg, &sc, out),
    }
}

fn run_sweep(cmd: Command, cfg: &RunConfig, sc: &Scatterer, out: &mut Output) -> slabscat::Result<()> {
    if cmd == Command::Solve {
        single_point(cfg, cmd)?;
    }
    let rows: Vec<SweepRow> = sweep(sc, &incident(cfg), &cfg.omegas, &cfg.kappas, &solve_options(cfg));
    let mut failed = 0;
    for r in &rows {
        match &r.result {
            Ok(s) => out.report.balance_defects.push(s.balance_defect),
            Err(e) => {
                failed += 1;
                log::warn!("omega {} kappa {}: {e}", r.omega, r.kappa);
            }
        }
    }
    let name = if cmd == Command::Solve { "solve.csv" } else { "sweep.csv" };
    out.write(name, &sweep_to_csv(&rows, cfg.orders.then_some(sc.m_max)))?;
    out.report.summary.insert("points".into(), json!(rows.len()));
    out.report.summary.insert("failed_points".into(), json!(failed));
    if cmd == Command::Solve {
        match &rows[0].result {
            Ok(s) => {
                out.report
                    .summary
                    .insert("transmittance".into(), json!(s.transmitted_flux / s.incident_flux));
                out.report.summary.insert("condition".into(), json!(s.condition));
            }
            Err(e) => return Err(Error::InvalidParameter(e.clone())),
        }
    }
    Ok(())
}

fn gradient_path(cfg: &RunConfig) -> GradientPath {
    if cfg.sensitivity.continuum {
        GradientPath::Continuum(cfg.sensitivity.quadrature)
    } else {
        GradientPath::Discrete
    }
}

fn run_grad(cfg: &RunConfig, sc: &Scatterer, out: &mut Output) -> slabscat::Result<()> {
    let (omega, kappa) = single_point(cfg, Command::Grad)?;
    let ctx = sc.context(omega, kappa)?;
    let opts = solve_options(cfg);
    let path = gradient_path(cfg);
    let (primal, grad) = energy_gradient(sc, &ctx, &incident(cfg), path, &opts)?;
    out.report.balance_defects.push(slabscat::scatter::energy_balance(&primal));
    let geom = sc.geom;
    out.write("grad.csv", &gradient_to_csv(&geom, &grad))?;

    let per_inclusion = gradient_homogeneous(&grad, &geom, &cfg.structure.inclusions)?;
    let mut summary = json!({
        "path": match path {
            GradientPath::Discrete => "discrete".to_string(),
            GradientPath::Continuum(q) => format!("continuum:{}", format!("{q:?}").to_lowercase()),
        },
        "energy": grad.energy,
        "incident_flux": primal.incident_flux,
        "transmittance": primal.transmittance(),
        "per_inclusion": per_inclusion,
    });
    if cfg.orders {
        let fast = SolveOptions {
            estimate_condition: false,
            ..opts
        };
        let props = harmonics::orders_in(&harmonics::classify_orders(&ctx), harmonics::HarmonicClass::Propagating);
        let orders = props
            .par_iter()
            .map(|&m| gradient_order(sc, &primal, m, cfg.sensitivity.quadrature, &fast))
            .collect::<slabscat::Result<Vec<_>>>()?;
        let mut csv = header("slabscat-grad-orders", &[("nx", geom.nx.to_string()), ("nz", geom.nz.to_string())]);
        csv.push_str("m,i,j,g_eps_re,g_eps_im,g_tau_re,g_tau_im\n");
        for o in &orders {
            for c in 0..geom.n_cells() {
                let (i, k) = geom.cell_of(c);
                csv.push_str(&csv_line([
                    o.m.to_string(),
                    i.to_string(),
                    k.to_string(),
                    fmt_f64(o.g_eps[c].re),
                    fmt_f64(o.g_eps[c].im),
                    fmt_f64(o.g_tau[c].re),
                    fmt_f64(o.g_tau[c].im),
                ]));
            }
        }
        out.write("grad_orders.csv", &csv)?;
        summary["orders"] = orders
            .iter()
            .map(|o| json!({"m": o.m, "eta": o.eta, "b_m": c_json(o.b_m), "c_norm": c_json(o.c_norm)}))
            .collect();
    }
    out.write_json("grad.json", &summary)?;
    out.report.summary.insert("energy".into(), json!(grad.energy));
    Ok(())
}

fn run_linearize(cfg: &RunConfig, sc: &Scatterer, out: &mut Output) -> slabscat::Result<()> {
    let (omega, kappa) = single_point(cfg, Command::Linearize)?;
    let ctx = sc.context(omega, kappa)?;
    let opts = solve_options(cfg);
    let primal = sc.solve(&ctx, &incident(cfg), &opts)?;
    out.report.balance_defects.push(slabscat::scatter::energy_balance(&primal));
    let dir = direction(cfg, sc.geom.n_cells())?;
    let lin = solve_linearized(sc, &primal, &dir, &SolveOptions { estimate_condition: false, ..opts })?;
    let sys = sc.system(&ctx)?;
    let mesh = &sys.mesh;
    let geom = sc.geom;
    let mut csv = header(
        "slabscat-linearize v1",
        &[("nx", geom.nx.to_string()), ("nz", geom.nz.to_string())],
    );
    csv.push_str("i,k,x1,x3,u_re,u_im,du_re,du_im\n");
    for k in 0..=geom.nz {
        for i in 0..geom.nx {
            let d = mesh.dof(i, k);
            let (x1, x3) = mesh.node_position(i, k);
            csv.push_str(&csv_line([
                i.to_string(),
                k.to_string(),
                fmt_f64(x1),
                fmt_f64(x3),
                fmt_f64(primal.u[d].re),
                fmt_f64(primal.u[d].im),
                fmt_f64(lin.u0[d].re),
                fmt_f64(lin.u0[d].im),
            ]));
        }
    }
    out.write("linearize.csv", &csv)?;
    let norm = sys.h1_norm(&lin.u0);
    out.write_json(
        "linearize.json",
        &json!({"h1_norm": norm, "primal_h1_norm": sys.h1_norm(&primal.u), "seed": cfg.seed}),
    )?;
    out.report.summary.insert("h1_norm".into(), json!(norm));
    Ok(())
}

fn run_modes(cfg: &RunConfig, sc: &Scatterer, out: &mut Output) -> slabscat::Result<()> {
    let e = &cfg.eigen;
    let seqs = cfg
        .kappas
        .par_iter()
        .map(|&k| eigen_sequence(sc, k, e.count, e.omega_max, e.method))
        .collect::<slabscat::Result<Vec<_>>>()?;
    out.write("modes.csv", &modes_to_csv(&seqs, cfg.kappa_sweep))?;
    let guided: usize = seqs.iter().map(|s| s.guided.iter().filter(|&&g| g).count()).sum();
    out.report.summary.insert("guided_modes".into(), json!(guided));
    Ok(())
}

fn certify_window(cfg: &RunConfig) -> (f64, f64) {
    cfg.eigen.omega_range.unwrap_or_else(|| {
        let lo = cfg.omegas.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = cfg.omegas.iter().copied().fold(0.0, f64::max);
        (lo, hi)
    })
}

/// Certifies that the whole window is free of eigenvalues for every structure
/// in the envelope, at each configured `κ`.
fn run_certify(cfg: &RunConfig, sc: &Scatterer, out: &mut Output) -> slabscat::Result<()> {
    let env = envelope(cfg, &sc.geom, &sc.field, &cfg.eigen.envelope)?;
    let (lo, hi) = certify_window(cfg);
    let j = cfg.eigen.j;
    let results = cfg
        .kappas
        .par_iter()
        .map(|&k| match check_nonresonance(sc, &env, k, (lo, hi), j, cfg.eigen.method) {
            Ok(c) => Ok((k, c.lower, c.upper)),
            Err(Error::NotCertified { lower, upper, .. }) => Ok((k, lower, upper)),
            Err(e) => Err(e),
        })
        .collect::<slabscat::Result<Vec<_>>>()?;
    let mut entries = vec![];
    let mut refused = vec![];
    for &(k, lower, upper) in &results {
        let covers = lower < lo && hi < upper;
        if !covers {
            refused.push(format!(
                "kappa {k}: certified interval ({lower}, {upper}) does not cover [{lo}, {hi}]"
            ));
        }
        entries.push(json!({
            "kappa": k,
            "j": j,
            "lower": lower,
            "upper": upper,
            "certified": covers,
        }));
    }
    out.write_json(
        "certificate.json",
        &json!({"omega_range": [lo, hi], "certified": refused.is_empty(), "kappas": entries}),
    )?;
    if !refused.is_empty() {
        out.report.refusal = Some(refused.join("; "));
    }
    Ok(())
}

fn run_optimize(cfg: &RunConfig, sc: &Scatterer, out: &mut Output) -> slabscat::Result<()> {
    let d = &cfg.design;
    let geom = sc.geom;
    let frequencies: Vec<(f64, f64)> = cfg
        .omegas
        .iter()
        .flat_map(|&w| cfg.kappas.iter().map(move |&k| (w, k)))
        .collect();
    let problem = DesignProblem {
        objective: d.objective.clone(),
        frequencies,
        incident: incident(cfg),
        design_region: region_mask(cfg, &geom, &d.region)?,
        envelope: envelope(cfg, &geom, &sc.field, &d.envelope)?,
        step: d.step,
        max_iters: d.max_iters,
        tolerance: d.tolerance,
        optimize_tau: d.optimize_tau,
        certification: d.certification,
        eigen_method: cfg.eigen.method,
    };
    match optimize::run(&problem, sc, &sc.field, &solve_options(cfg)) {
        Ok(outcome) => {
            out.write("history.csv", &history_to_csv(&outcome.history))?;
            out.write("design_eps.csv", &raster_to_csv(&outcome.field, Coefficient::Eps))?;
            out.write("design_tau.csv", &raster_to_csv(&outcome.field, Coefficient::Tau))?;
            out.report
                .balance_defects
                .extend(outcome.history.iter().map(|h| h.balance_defect_max));
            let last = outcome.history.last().expect("history has the initial design");
            out.write_json(
                "optimize.json",
                &json!({
                    "termination": format!("{:?}", outcome.termination),
                    "iterations": last.iter,
                    "initial_objective": outcome.history[0].objective,
                    "final_objective": last.objective,
                    "certificates": outcome.certificates,
                }),
            )?;
            out.report.summary.insert("final_objective".into(), json!(last.objective));
            Ok(())
        }
        Err(Error::Aborted { iter, reason, field }) => {
            out.write("aborted_eps.csv", &raster_to_csv(&field, Coefficient::Eps))?;
            out.write("aborted_tau.csv", &raster_to_csv(&field, Coefficient::Tau))?;
            out.report.refusal = Some(format!("aborted at iteration {iter}: {reason}"));
            Ok(())
        }
        Err(e @ Error::NotCertified { .. }) => {
            out.report.refusal = Some(e.to_string());
            Ok(())
        }
        Err(e) => Err(e),
    }
}

fn run_fdcheck(cfg: &RunConfig, sc: &Scatterer, out: &mut Output) -> slabscat::Result<()> {
    let (omega, kappa) = single_point(cfg, Command::Fdcheck)?;
    let ctx = sc.context(omega, kappa)?;
    let dir = direction(cfg, sc.geom.n_cells())?;
    let s = &cfg.sensitivity;
    let report = fd_check(sc, &ctx, &incident(cfg), &dir, s.functional, &s.steps, None, &solve_options(cfg))?;
    let mut v = report.to_json();
    v["seed"] = json!(cfg.seed);
    out.write_json("fdcheck.json", &v)?;
    out.report.summary.insert("rel_error".into(), json!(report.rel_error));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_str;

    fn cfg(extra: &str) -> RunConfig {
        let text = format!(
            r#"{{
            "geometry": {{"z_minus": 0, "z_plus": 1, "nx": 16, "nz": 8}},
            "exterior": {{"eps0": 1, "tau0": 1}},
            "structure": {{"inclusions": [{{"id": 3, "shape": {{"kind": "rect", "lo": [1, 0.25], "hi": [3, 0.75]}}, "eps": 4, "tau": 1}}]}},
            "bloch": {{"omega": 0.7, "kappa": 0.1}}{extra}
        }}"#
        );
        parse_str(&text, Path::new(".")).unwrap()
    }

    #[test]
    fn random_direction_follows_the_seed() {
        let a = cfg(r#", "seed": 5"#);
        let b = cfg(r#", "seed": 6"#);
        let da = direction(&a, 40).unwrap();
        assert_eq!(da, direction(&a, 40).unwrap());
        assert_ne!(da, direction(&b, 40).unwrap());
        assert!(da.d_eps.iter().chain(&da.d_tau).all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn inclusion_region_marks_only_inclusion_cells() {
        let c = cfg("");
        let sc = build_scatterer(&c).unwrap();
        let mask = region_mask(&c, &sc.geom, &Region::Inclusions).unwrap();
        for (cell, &m) in mask.iter().enumerate() {
            assert_eq!(m, sc.field.eps[cell] == 4.0);
        }
    }

    #[test]
    fn cell_direction_out_of_range_is_an_error() {
        let c = cfg(r#", "sensitivity": {"direction": {"kind": "cell", "index": 999}}"#);
        assert!(direction(&c, 128).is_err());
    }

    #[test]
    fn certify_window_defaults_to_frequency_span() {
        let c = cfg("");
        assert_eq!(certify_window(&c), (0.7, 0.7));
    }
}
