use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slabscat"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env_remove("SLABSCAT_THREADS")
        .output()
        .unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn data_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

// the z-mesh resolves the wave well enough for discrete dispersion to stay below 1e-8
const EMPTY_SLAB: &str = r#"{
    "geometry": {"z_minus": 0, "z_plus": 1, "nx": 16, "nz": 64},
    "exterior": {"eps0": 1, "tau0": 1},
    "structure": {"background": {"eps": 1, "tau": 1}},
    "bloch": {"omega": 1.3, "kappa": 0.0}
}"#;

const GRATING: &str = r#"{
    "geometry": {"z_minus": 0, "z_plus": 1, "nx": 24, "nz": 8},
    "exterior": {"eps0": 1, "tau0": 1},
    "structure": {
        "background": {"eps": 1.5, "tau": 1},
        "inclusions": [{"id": 1, "shape": {"kind": "disk", "center": [3.1, 0.5], "radius": 0.35}, "eps": 4, "tau": 1.2}]
    },
    "bloch": {"omega": 0.9, "kappa": 0.15},
    "sensitivity": {"direction": {"kind": "random"}},
    "seed": 11
}"#;

#[test]
fn empty_slab_transmits_everything() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), EMPTY_SLAB);
    let out = tmp.path().join("out");
    let o = run("solve", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("solve.csv")).unwrap();
    assert!(csv.starts_with("# slabscat-sweep"));
    assert!(csv.contains("omega,kappa,incident_flux,reflected_flux,transmitted_flux,balance_defect,residual\n"));
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 1);
    let inc: f64 = rows[0][2].parse().unwrap();
    let tr: f64 = rows[0][4].parse().unwrap();
    assert!((tr / inc - 1.0).abs() < 1e-8, "T = {}", tr / inc);
    let prov = read_json(&out.join("run.json"));
    assert_eq!(prov["status"], "ok");
    assert_eq!(prov["config_sha256"].as_str().unwrap().len(), 64);
    assert!(prov["wall_time_s"].as_f64().unwrap() >= 0.0);
}

#[test]
fn orders_flag_appends_amplitude_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &EMPTY_SLAB.replace("\"nz\": 64}", "\"nz\": 64, \"m_max\": 2}"));
    let out = tmp.path().join("out");
    let o = run("solve", &cfg, &out, &["--orders"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("solve.csv")).unwrap();
    assert!(csv.contains("a_-2_re,a_-2_im,b_-2_re,b_-2_im"));
    assert_eq!(data_rows(&csv)[0].len(), 7 + 4 * 5);
}

#[test]
fn config_violations_are_all_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &EMPTY_SLAB
            .replace("\"eps0\": 1", "\"eps0\": 0")
            .replace("\"nz\": 64}", "\"nz\": 64, \"bogus\": 1}"),
    );
    let out = tmp.path().join("out");
    let o = run("solve", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("$.exterior.eps0") && err.contains("positive"), "{err}");
    assert!(err.contains("$.geometry.bogus: unknown key"), "{err}");
    let prov = read_json(&out.join("run.json"));
    assert_eq!(prov["status"], "invalid_config");
    assert_eq!(prov["errors"].as_array().unwrap().len(), 2);
}

#[test]
fn kappa_outside_the_zone_is_reduced() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &EMPTY_SLAB.replace("\"kappa\": 0.0", "\"kappa\": 0.75"));
    let out = tmp.path().join("out");
    assert_eq!(run("solve", &cfg, &out, &[]).status.code(), Some(0));
    let rows = data_rows(&std::fs::read_to_string(out.join("solve.csv")).unwrap());
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), -0.25);
    let prov = read_json(&out.join("run.json"));
    assert!(prov["warnings"][0].as_str().unwrap().contains("reduced"));
}

#[test]
fn grad_then_fdcheck_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), GRATING);
    let out = tmp.path().join("out");
    let g = run("grad", &cfg, &out, &[]);
    assert_eq!(g.status.code(), Some(0), "{}", String::from_utf8_lossy(&g.stderr));
    let csv = std::fs::read_to_string(out.join("grad.csv")).unwrap();
    assert!(csv.starts_with("# slabscat-grad nx=24 nz=8\ni,j,g_eps,g_tau\n"));
    assert_eq!(data_rows(&csv).len(), 24 * 8);
    let grad = read_json(&out.join("grad.json"));
    assert_eq!(grad["per_inclusion"][0]["id"], 1);

    let f = run("fdcheck", &cfg, &out, &[]);
    assert_eq!(f.status.code(), Some(0), "{}", String::from_utf8_lossy(&f.stderr));
    let rep = read_json(&out.join("fdcheck.json"));
    for key in ["steps", "fd_values", "extrapolated", "adjoint_value", "rel_error", "fitted_order"] {
        assert!(rep.get(key).is_some(), "missing {key}");
    }
    let rel = rep["rel_error"].as_f64().unwrap();
    assert!(rel <= 1e-6, "rel_error {rel}");
}

#[test]
fn grad_orders_dump_per_order_densities() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &GRATING.replace("\"omega\": 0.9", "\"omega\": 1.4"));
    let out = tmp.path().join("out");
    let g = run("grad", &cfg, &out, &["--orders"]);
    assert_eq!(g.status.code(), Some(0), "{}", String::from_utf8_lossy(&g.stderr));
    let grad = read_json(&out.join("grad.json"));
    let orders = grad["orders"].as_array().unwrap();
    assert!(orders.len() >= 2, "{orders:?}");
    let csv = std::fs::read_to_string(out.join("grad_orders.csv")).unwrap();
    assert_eq!(data_rows(&csv).len(), orders.len() * 24 * 8);
}

/// A thick dielectric slab guides modes below the light line; a window
/// straddling the first one cannot be certified.
#[test]
fn certify_refuses_a_window_around_an_eigenvalue() {
    let tmp = tempfile::tempdir().unwrap();
    let base = r#"{
        "geometry": {"z_minus": 0, "z_plus": 1, "nx": 8, "nz": 8},
        "exterior": {"eps0": 1, "tau0": 1},
        "structure": {"background": {"eps": 6, "tau": 1}},
        "bloch": {"omega": 0.2, "kappa": 0.3},
        "eigen": {"count": 1, "j": 0, "envelope": {"kind": "degenerate"}}
    }"#;
    let cfg = write_config(tmp.path(), base);
    let out = tmp.path().join("modes");
    let m = run("modes", &cfg, &out, &[]);
    assert_eq!(m.status.code(), Some(0), "{}", String::from_utf8_lossy(&m.stderr));
    let modes = std::fs::read_to_string(out.join("modes.csv")).unwrap();
    assert!(modes.starts_with("# slabscat-modes v1\nj,omega_j,guided,max_prop_trace\n"));
    let w1: f64 = data_rows(&modes)[0][1].parse().unwrap();
    assert!(w1 > 0.0 && w1 < 0.3, "omega_1 = {w1}");

    let straddle = base.replace(
        "\"j\": 0,",
        &format!("\"j\": 0, \"omega_range\": [{}, {}],", 0.9 * w1, 1.1 * w1),
    );
    let cfg = write_config(tmp.path(), &straddle);
    let out = tmp.path().join("cert");
    let c = run("certify", &cfg, &out, &[]);
    assert_eq!(c.status.code(), Some(2), "{}", String::from_utf8_lossy(&c.stderr));
    let cert = read_json(&out.join("certificate.json"));
    assert_eq!(cert["certified"], false);
    let upper = cert["kappas"][0]["upper"].as_f64().unwrap();
    assert!((upper - w1).abs() < 1e-8 * w1, "{upper} vs {w1}");
    assert!(String::from_utf8_lossy(&c.stderr).contains("does not cover"));
    assert_eq!(read_json(&out.join("run.json"))["status"], "refused");

    let below = base.replace(
        "\"j\": 0,",
        &format!("\"j\": 0, \"omega_range\": [{}, {}],", 0.5 * w1, 0.9 * w1),
    );
    let cfg = write_config(tmp.path(), &below);
    let out = tmp.path().join("ok");
    assert_eq!(run("certify", &cfg, &out, &[]).status.code(), Some(0));
    assert_eq!(read_json(&out.join("certificate.json"))["certified"], true);
}

#[test]
fn sweep_outputs_are_byte_identical_across_runs_and_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &GRATING.replace(
            "\"omega\": 0.9, \"kappa\": 0.15",
            "\"omega_sweep\": {\"lo\": 0.5, \"hi\": 1.5, \"n\": 6}, \"kappa_sweep\": {\"lo\": 0, \"hi\": 0.3, \"n\": 2}",
        ),
    );
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(run("sweep", &cfg, &a, &["--threads", "1", "--orders"]).status.code(), Some(0));
    assert_eq!(run("sweep", &cfg, &b, &["--threads", "3", "--orders"]).status.code(), Some(0));
    let sa = std::fs::read(a.join("sweep.csv")).unwrap();
    assert_eq!(sa, std::fs::read(b.join("sweep.csv")).unwrap());
    assert_eq!(data_rows(&String::from_utf8(sa).unwrap()).len(), 12);
    assert_eq!(read_json(&a.join("run.json"))["threads"], 1);
    assert_eq!(read_json(&b.join("run.json"))["threads"], 3);
}

#[test]
fn linearize_and_fdcheck_field_follow_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), GRATING);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    assert_eq!(run("linearize", &cfg, &a, &[]).status.code(), Some(0));
    assert_eq!(run("linearize", &cfg, &b, &[]).status.code(), Some(0));
    assert_eq!(run("linearize", &cfg, &c, &["--seed", "12"]).status.code(), Some(0));
    let la = std::fs::read(a.join("linearize.csv")).unwrap();
    assert!(la.starts_with(b"# slabscat-linearize v1"));
    assert_eq!(la, std::fs::read(b.join("linearize.csv")).unwrap());
    assert_ne!(la, std::fs::read(c.join("linearize.csv")).unwrap());
    assert_eq!(read_json(&c.join("run.json"))["seed"], 12);
}

#[test]
fn optimize_improves_transmission_and_writes_rasters() {
    let tmp = tempfile::tempdir().unwrap();
    let text = r#"{
        "geometry": {"z_minus": 0, "z_plus": 1, "nx": 8, "nz": 16},
        "exterior": {"eps0": 1, "tau0": 1},
        "structure": {"background": {"eps": 4, "tau": 1}},
        "bloch": {"omega": 0.6},
        "design": {"objective": "maximize", "envelope": {"kind": "bounds", "eps": [1, 6], "tau": [1, 1]}, "max_iters": 5}
    }"#;
    let cfg = write_config(tmp.path(), text);
    let out = tmp.path().join("out");
    let o = run("optimize", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let hist = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(hist.starts_with("# slabscat-optimize v1\niter,objective,step,grad_norm,balance_defect_max\n"));
    let rows = data_rows(&hist);
    let first: f64 = rows[0][1].parse().unwrap();
    let last: f64 = rows.last().unwrap()[1].parse().unwrap();
    assert!(last > first, "{first} -> {last}");
    let eps = std::fs::read_to_string(out.join("design_eps.csv")).unwrap();
    assert!(eps.starts_with("# slabscat-raster nx=8 nz=16 field=eps"));
    let summary = read_json(&out.join("optimize.json"));
    assert!(summary["final_objective"].as_f64().unwrap() > first);
}

#[test]
fn solve_rejects_a_sweep_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &EMPTY_SLAB.replace("\"omega\": 1.3", "\"omega_sweep\": {\"lo\": 1, \"hi\": 2, \"n\": 2}"),
    );
    let out = tmp.path().join("out");
    let o = run("solve", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("single omega"));
    assert_eq!(read_json(&out.join("run.json"))["status"], "error");
}

#[test]
fn raster_structures_load_relative_to_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let mut eps = String::from("# slabscat-raster nx=4 nz=2 field=eps\n");
    let mut tau = String::from("# slabscat-raster nx=4 nz=2 field=tau\n");
    for _ in 0..2 {
        eps.push_str("1,2,3,4\n");
        tau.push_str("1,1,1,1\n");
    }
    std::fs::write(tmp.path().join("e.csv"), eps).unwrap();
    std::fs::write(tmp.path().join("t.csv"), tau).unwrap();
    let text = EMPTY_SLAB
        .replace("\"nx\": 16, \"nz\": 64", "\"nx\": 4, \"nz\": 2")
        .replace(
            "{\"background\": {\"eps\": 1, \"tau\": 1}}",
            "{\"raster\": {\"eps\": \"e.csv\", \"tau\": \"t.csv\"}}",
        )
        .replace("1.3", "0.4");
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("out");
    let o = run("solve", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let prov = read_json(&out.join("run.json"));
    assert!(prov["balance_defect_max"].as_f64().unwrap() < 1e-10);
}
