//! Strict JSON run configuration.
//!
//! Every violation is collected (with its JSON path) before anything is
//! reported, and keys not in the schema are errors.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde_json::{Map, Value};
use slabscat::harmonics::reduce_kappa;
use slabscat::modes::EigenMethod;
use slabscat::optimize::{Certification, Objective};
use slabscat::sensitivity::{Functional, Quadrature, DEFAULT_STEPS};
use slabscat::structure::{Background, Coefficient, Inclusion, Shape};

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub z_minus: f64,
    pub z_plus: f64,
    pub nx: usize,
    pub nz: usize,
    pub m_max: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureSpec {
    pub background: Background,
    pub inclusions: Vec<Inclusion>,
    /// `(eps, tau)` raster CSVs, resolved against the config directory.
    pub raster: Option<(PathBuf, PathBuf)>,
    pub fractional: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncidentSpec {
    pub from_left: bool,
    pub order: i64,
    pub amplitude: Complex64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DirectionSpec {
    /// Seeded uniform values in `[-1, 1]`; `τ` too unless `eps_only`.
    Random { eps_only: bool },
    UniformEps,
    UniformTau,
    Cell { index: usize, coefficient: Coefficient },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivitySpec {
    pub continuum: bool,
    pub quadrature: Quadrature,
    pub functional: Functional,
    pub steps: Vec<f64>,
    pub direction: DirectionSpec,
}

impl Default for SensitivitySpec {
    fn default() -> Self {
        Self {
            continuum: false,
            quadrature: Quadrature::Midpoint,
            functional: Functional::Energy,
            steps: DEFAULT_STEPS.to_vec(),
            direction: DirectionSpec::Random { eps_only: false },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    All,
    Inclusions,
    Rect { lo: (f64, f64), hi: (f64, f64) },
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvelopeSpec {
    /// Only the structure itself.
    Degenerate,
    /// `±rel` about the structure on a region.
    Relative { rel: f64, region: Region },
    Bounds { eps: (f64, f64), tau: (f64, f64) },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenSpec {
    pub count: usize,
    pub omega_max: Option<f64>,
    pub method: EigenMethod,
    pub j: usize,
    /// Window to certify; defaults to the span of the configured frequencies.
    pub omega_range: Option<(f64, f64)>,
    pub envelope: EnvelopeSpec,
}

impl Default for EigenSpec {
    fn default() -> Self {
        Self {
            count: 4,
            omega_max: None,
            method: EigenMethod::Auto,
            j: 1,
            omega_range: None,
            envelope: EnvelopeSpec::Degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    pub objective: Objective,
    pub region: Region,
    pub envelope: EnvelopeSpec,
    pub step: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub optimize_tau: bool,
    pub certification: Certification,
}

impl Default for DesignSpec {
    fn default() -> Self {
        Self {
            objective: Objective::Maximize,
            region: Region::All,
            envelope: EnvelopeSpec::Relative {
                rel: 0.1,
                region: Region::All,
            },
            step: 1.0,
            max_iters: 100,
            tolerance: 1e-8,
            optimize_tau: false,
            certification: Certification::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSpec {
    pub tolerance: f64,
    pub refinement_steps: usize,
    pub condition: bool,
    pub threads: Option<usize>,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            refinement_steps: 2,
            condition: true,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub geometry: Geometry,
    pub eps0: f64,
    pub tau0: f64,
    pub structure: StructureSpec,
    pub omegas: Vec<f64>,
    pub kappas: Vec<f64>,
    pub omega_sweep: bool,
    pub kappa_sweep: bool,
    pub incident: IncidentSpec,
    pub sensitivity: SensitivitySpec,
    pub eigen: EigenSpec,
    pub design: DesignSpec,
    pub solver: SolverSpec,
    pub out_dir: Option<PathBuf>,
    pub orders: bool,
    pub seed: u64,
    /// Non-fatal notes raised while parsing (e.g. Brillouin reduction).
    pub warnings: Vec<String>,
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig, Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_str(&text, &base)
}

pub fn parse_str(text: &str, base: &Path) -> Result<RunConfig, Vec<String>> {
    let value: Value = serde_json::from_str(text).map_err(|e| vec![format!("invalid JSON: {e}")])?;
    let mut p = Parser {
        errors: vec![],
        warnings: vec![],
    };
    let cfg = p.root(&value, base);
    match cfg {
        Some(c) if p.errors.is_empty() => Ok(RunConfig {
            warnings: p.warnings,
            ..c
        }),
        _ => Err(p.errors),
    }
}

struct Parser {
    errors: Vec<String>,
    warnings: Vec<String>,
}

/// One JSON object being read; remembers which keys were consumed.
struct Obj<'a> {
    map: &'a Map<String, Value>,
    path: String,
    used: BTreeSet<&'static str>,
}

impl Parser {
    fn err(&mut self, path: &str, msg: impl std::fmt::Display) {
        self.errors.push(format!("{path}: {msg}"));
    }

    fn obj<'a>(&mut self, v: &'a Value, path: &str) -> Option<Obj<'a>> {
        match v.as_object() {
            Some(map) => Some(Obj {
                map,
                path: path.to_string(),
                used: BTreeSet::new(),
            }),
            None => {
                self.err(path, "expected an object");
                None
            }
        }
    }

    fn finish(&mut self, o: Obj) {
        for k in o.map.keys() {
            if !o.used.contains(k.as_str()) {
                self.err(&format!("{}.{k}", o.path), "unknown key");
            }
        }
    }

    fn get<'a>(&mut self, o: &mut Obj<'a>, key: &'static str, required: bool) -> Option<&'a Value> {
        o.used.insert(key);
        let v = o.map.get(key);
        if v.is_none() && required {
            self.err(&format!("{}.{key}", o.path), "missing required key");
        }
        v
    }

    fn num(&mut self, v: &Value, path: &str) -> Option<f64> {
        match v.as_f64() {
            Some(x) if x.is_finite() => Some(x),
            _ => {
                self.err(path, "expected a finite number");
                None
            }
        }
    }

    fn f64_key(&mut self, o: &mut Obj, key: &'static str, required: bool) -> Option<f64> {
        let v = self.get(o, key, required)?;
        let path = format!("{}.{key}", o.path);
        self.num(v, &path)
    }

    fn positive(&mut self, o: &mut Obj, key: &'static str, required: bool, why: &str) -> Option<f64> {
        let x = self.f64_key(o, key, required)?;
        if x > 0.0 {
            Some(x)
        } else {
            self.err(&format!("{}.{key}", o.path), format!("must be positive ({why}), got {x}"));
            None
        }
    }

    fn usize_key(&mut self, o: &mut Obj, key: &'static str, required: bool) -> Option<usize> {
        let v = self.get(o, key, required)?;
        match v.as_u64() {
            Some(n) => Some(n as usize),
            None => {
                self.err(&format!("{}.{key}", o.path), "expected a nonnegative integer");
                None
            }
        }
    }

    fn bool_key(&mut self, o: &mut Obj, key: &'static str) -> Option<bool> {
        let v = self.get(o, key, false)?;
        match v.as_bool() {
            Some(b) => Some(b),
            None => {
                self.err(&format!("{}.{key}", o.path), "expected true or false");
                None
            }
        }
    }

    fn str_key<'a>(&mut self, o: &mut Obj<'a>, key: &'static str, required: bool) -> Option<&'a str> {
        let v = self.get(o, key, required)?;
        match v.as_str() {
            Some(s) => Some(s),
            None => {
                self.err(&format!("{}.{key}", o.path), "expected a string");
                None
            }
        }
    }

    fn pair(&mut self, v: &Value, path: &str) -> Option<(f64, f64)> {
        match v.as_array() {
            Some(a) if a.len() == 2 => {
                let x = self.num(&a[0], &format!("{path}[0]"));
                let y = self.num(&a[1], &format!("{path}[1]"));
                Some((x?, y?))
            }
            _ => {
                self.err(path, "expected a two-element array");
                None
            }
        }
    }

    fn pair_key(&mut self, o: &mut Obj, key: &'static str, required: bool) -> Option<(f64, f64)> {
        let v = self.get(o, key, required)?;
        let path = format!("{}.{key}", o.path);
        self.pair(v, &path)
    }

    fn list_key(&mut self, o: &mut Obj, key: &'static str) -> Option<Vec<f64>> {
        let v = self.get(o, key, false)?;
        let path = format!("{}.{key}", o.path);
        match v.as_array() {
            Some(a) => {
                let vals: Vec<Option<f64>> = a
                    .iter()
                    .enumerate()
                    .map(|(k, x)| self.num(x, &format!("{path}[{k}]")))
                    .collect();
                vals.into_iter().collect()
            }
            None => {
                self.err(&path, "expected an array of numbers");
                None
            }
        }
    }

    fn root(&mut self, v: &Value, base: &Path) -> Option<RunConfig> {
        let mut o = self.obj(v, "$")?;
        let geometry = self.get(&mut o, "geometry", true).and_then(|v| self.geometry(v));
        let exterior = self.get(&mut o, "exterior", true).and_then(|v| self.exterior(v));
        let structure = self.get(&mut o, "structure", true).and_then(|v| self.structure(v, base));
        let bloch = self.get(&mut o, "bloch", true).and_then(|v| self.bloch(v));
        let incident = match self.get(&mut o, "incident", false) {
            Some(v) => self.incident(v),
            None => Some(IncidentSpec {
                from_left: true,
                order: 0,
                amplitude: Complex64::new(1.0, 0.0),
            }),
        };
        let sensitivity = match self.get(&mut o, "sensitivity", false) {
            Some(v) => self.sensitivity(v),
            None => Some(SensitivitySpec::default()),
        };
        let eigen = match self.get(&mut o, "eigen", false) {
            Some(v) => self.eigen(v),
            None => Some(EigenSpec::default()),
        };
        let design = match self.get(&mut o, "design", false) {
            Some(v) => self.design(v),
            None => Some(DesignSpec::default()),
        };
        let solver = match self.get(&mut o, "solver", false) {
            Some(v) => self.solver(v),
            None => Some(SolverSpec::default()),
        };
        let output = match self.get(&mut o, "output", false) {
            Some(v) => self.output(v),
            None => Some((None, false)),
        };
        let seed = match self.get(&mut o, "seed", false) {
            Some(v) => match v.as_u64() {
                Some(s) => Some(s),
                None => {
                    self.err("$.seed", "expected a nonnegative 64-bit integer");
                    None
                }
            },
            None => Some(0),
        };
        self.finish(o);

        let geometry = geometry?;
        let (eps0, tau0) = exterior?;
        let (omegas, kappas, omega_sweep, kappa_sweep) = bloch?;
        let (out_dir, orders) = output?;
        let design = design?;
        if let Objective::MatchSpectrum { targets, .. } = &design.objective {
            if targets.len() != omegas.len() * kappas.len() {
                self.err(
                    "$.design.objective.match.targets",
                    format!("needs one target per (omega, kappa) point, {} expected", omegas.len() * kappas.len()),
                );
            }
        }
        Some(RunConfig {
            geometry,
            eps0,
            tau0,
            structure: structure?,
            omegas,
            kappas,
            omega_sweep,
            kappa_sweep,
            incident: incident?,
            sensitivity: sensitivity?,
            eigen: eigen?,
            design,
            solver: solver?,
            out_dir,
            orders,
            seed: seed?,
            warnings: vec![],
        })
    }

    fn geometry(&mut self, v: &Value) -> Option<Geometry> {
        let mut o = self.obj(v, "$.geometry")?;
        let z_minus = self.f64_key(&mut o, "z_minus", true);
        let z_plus = self.f64_key(&mut o, "z_plus", true);
        let nx = self.usize_key(&mut o, "nx", true);
        let nz = self.usize_key(&mut o, "nz", true);
        let m_max = if o.map.contains_key("m_max") {
            Some(self.usize_key(&mut o, "m_max", false)?)
        } else {
            o.used.insert("m_max");
            None
        };
        self.finish(o);
        if let (Some(a), Some(b)) = (z_minus, z_plus) {
            if b <= a {
                self.err("$.geometry", format!("z_plus ({b}) must exceed z_minus ({a})"));
            }
        }
        for (name, n) in [("nx", nx), ("nz", nz)] {
            if n == Some(0) {
                self.err(&format!("$.geometry.{name}"), "must be at least 1");
            }
        }
        if let (Some(nx), Some(m)) = (nx, m_max) {
            if 2 * m >= nx {
                self.err("$.geometry.m_max", format!("{m} aliases on {nx} boundary nodes (need 2 m_max < nx)"));
            }
        }
        Some(Geometry {
            z_minus: z_minus?,
            z_plus: z_plus?,
            nx: nx.filter(|&n| n > 0)?,
            nz: nz.filter(|&n| n > 0)?,
            m_max,
        })
    }

    fn exterior(&mut self, v: &Value) -> Option<(f64, f64)> {
        let mut o = self.obj(v, "$.exterior")?;
        let why = "coefficients are bounded below by a positive constant";
        let eps0 = self.positive(&mut o, "eps0", true, why);
        let tau0 = self.positive(&mut o, "tau0", true, why);
        self.finish(o);
        Some((eps0?, tau0?))
    }

    fn coefficients(&mut self, o: &mut Obj) -> (Option<f64>, Option<f64>) {
        let why = "coefficients are bounded below by a positive constant";
        (self.positive(o, "eps", true, why), self.positive(o, "tau", true, why))
    }

    fn structure(&mut self, v: &Value, base: &Path) -> Option<StructureSpec> {
        let mut o = self.obj(v, "$.structure")?;
        let background = match self.get(&mut o, "background", false) {
            Some(v) => self.obj(v, "$.structure.background").and_then(|mut b| {
                let (eps, tau) = self.coefficients(&mut b);
                self.finish(b);
                Some(Background { eps: eps?, tau: tau? })
            }),
            None => Some(Background { eps: 1.0, tau: 1.0 }),
        };
        let inclusions = match self.get(&mut o, "inclusions", false) {
            Some(Value::Array(items)) => {
                let parsed: Vec<Option<Inclusion>> = items
                    .iter()
                    .enumerate()
                    .map(|(k, item)| self.inclusion(item, &format!("$.structure.inclusions[{k}]")))
                    .collect();
                parsed.into_iter().collect()
            }
            Some(_) => {
                self.err("$.structure.inclusions", "expected an array");
                None
            }
            None => Some(vec![]),
        };
        let raster = match self.get(&mut o, "raster", false) {
            Some(v) => self.obj(v, "$.structure.raster").and_then(|mut r| {
                let eps = self.str_key(&mut r, "eps", true);
                let tau = self.str_key(&mut r, "tau", true);
                self.finish(r);
                Some(Some((base.join(eps?), base.join(tau?))))
            }),
            None => Some(None),
        };
        let fractional = self.bool_key(&mut o, "fractional").unwrap_or(false);
        self.finish(o);
        let inclusions = inclusions?;
        let raster = raster?;
        if raster.is_some() && !inclusions.is_empty() {
            self.err("$.structure", "give either inclusions or a raster, not both");
        }
        Some(StructureSpec {
            background: background?,
            inclusions,
            raster,
            fractional,
        })
    }

    fn inclusion(&mut self, v: &Value, path: &str) -> Option<Inclusion> {
        let mut o = self.obj(v, path)?;
        let id = match self.get(&mut o, "id", true) {
            Some(v) => match v.as_i64() {
                Some(i) => Some(i),
                None => {
                    self.err(&format!("{path}.id"), "expected an integer");
                    None
                }
            },
            None => None,
        };
        let (eps, tau) = self.coefficients(&mut o);
        let shape = self.get(&mut o, "shape", true).and_then(|s| self.shape(s, &format!("{path}.shape")));
        self.finish(o);
        Some(Inclusion {
            id: id?,
            shape: shape?,
            eps: eps?,
            tau: tau?,
        })
    }

    fn shape(&mut self, v: &Value, path: &str) -> Option<Shape> {
        let mut o = self.obj(v, path)?;
        let kind = self.str_key(&mut o, "kind", true);
        let shape = match kind {
            Some("disk") => {
                let center = self.pair_key(&mut o, "center", true);
                let radius = self.positive(&mut o, "radius", true, "a disk needs a radius");
                Some(Shape::Disk {
                    center: center?,
                    radius: radius?,
                })
            }
            Some("rect") => {
                let lo = self.pair_key(&mut o, "lo", true);
                let hi = self.pair_key(&mut o, "hi", true);
                let (lo, hi) = (lo?, hi?);
                if hi.0 <= lo.0 || hi.1 <= lo.1 {
                    self.err(path, "rect needs hi > lo in both coordinates");
                    return None;
                }
                Some(Shape::Rect { lo, hi })
            }
            Some(other) => {
                self.err(&format!("{path}.kind"), format!("unknown shape {other:?} (disk or rect)"));
                None
            }
            None => None,
        };
        self.finish(o);
        shape
    }

    fn sweep(&mut self, v: &Value, path: &str) -> Option<Vec<f64>> {
        let mut o = self.obj(v, path)?;
        let lo = self.f64_key(&mut o, "lo", true);
        let hi = self.f64_key(&mut o, "hi", true);
        let n = self.usize_key(&mut o, "n", true);
        self.finish(o);
        let (lo, hi, n) = (lo?, hi?, n?);
        if n == 0 {
            self.err(&format!("{path}.n"), "must be at least 1");
            return None;
        }
        if hi < lo {
            self.err(path, "hi must not be below lo");
            return None;
        }
        Some(if n == 1 {
            vec![lo]
        } else {
            (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
        })
    }

    fn bloch(&mut self, v: &Value) -> Option<(Vec<f64>, Vec<f64>, bool, bool)> {
        let mut o = self.obj(v, "$.bloch")?;
        let omega = self.get(&mut o, "omega", false);
        let omega_sweep = self.get(&mut o, "omega_sweep", false);
        let kappa = self.get(&mut o, "kappa", false);
        let kappa_sweep = self.get(&mut o, "kappa_sweep", false);
        self.finish(o);
        let omegas = match (omega, omega_sweep) {
            (Some(w), None) => self.num(w, "$.bloch.omega").map(|w| vec![w]),
            (None, Some(s)) => self.sweep(s, "$.bloch.omega_sweep"),
            (Some(_), Some(_)) => {
                self.err("$.bloch", "give omega or omega_sweep, not both");
                None
            }
            (None, None) => {
                self.err("$.bloch", "missing omega or omega_sweep");
                None
            }
        };
        if let Some(ws) = &omegas {
            if ws.iter().any(|w| *w <= 0.0) {
                self.err("$.bloch", "frequencies must be positive");
            }
        }
        let kappas = match (kappa, kappa_sweep) {
            (Some(k), None) => self.num(k, "$.bloch.kappa").map(|k| vec![k]),
            (None, Some(s)) => self.sweep(s, "$.bloch.kappa_sweep"),
            (None, None) => Some(vec![0.0]),
            (Some(_), Some(_)) => {
                self.err("$.bloch", "give kappa or kappa_sweep, not both");
                None
            }
        };
        let kappas = kappas.map(|ks| {
            ks.into_iter()
                .map(|k| {
                    let r = reduce_kappa(k);
                    if r != k {
                        self.warnings.push(format!("kappa {k} reduced to {r} in [-1/2, 1/2)"));
                    }
                    r
                })
                .collect::<Vec<_>>()
        });
        Some((omegas?, kappas?, omega_sweep.is_some(), kappa_sweep.is_some()))
    }

    fn incident(&mut self, v: &Value) -> Option<IncidentSpec> {
        let mut o = self.obj(v, "$.incident")?;
        let side = self.str_key(&mut o, "side", false).unwrap_or("left");
        let order = match self.get(&mut o, "order", false) {
            Some(v) => match v.as_i64() {
                Some(m) => Some(m),
                None => {
                    self.err("$.incident.order", "expected an integer");
                    None
                }
            },
            None => Some(0),
        };
        let amplitude = match self.get(&mut o, "amplitude", false) {
            Some(v) => self.pair(v, "$.incident.amplitude").map(|(re, im)| Complex64::new(re, im)),
            None => Some(Complex64::new(1.0, 0.0)),
        };
        self.finish(o);
        let from_left = match side {
            "left" => Some(true),
            "right" => Some(false),
            other => {
                self.err("$.incident.side", format!("expected \"left\" or \"right\", got {other:?}"));
                None
            }
        };
        Some(IncidentSpec {
            from_left: from_left?,
            order: order?,
            amplitude: amplitude?,
        })
    }

    fn sensitivity(&mut self, v: &Value) -> Option<SensitivitySpec> {
        let mut o = self.obj(v, "$.sensitivity")?;
        let d = SensitivitySpec::default();
        let continuum = match self.str_key(&mut o, "path", false) {
            None | Some("discrete") => Some(false),
            Some("continuum") => Some(true),
            Some(other) => {
                self.err("$.sensitivity.path", format!("expected discrete or continuum, got {other:?}"));
                None
            }
        };
        let quadrature = match self.str_key(&mut o, "quadrature", false) {
            None | Some("midpoint") => Some(Quadrature::Midpoint),
            Some("element") => Some(Quadrature::Element),
            Some(other) => {
                self.err("$.sensitivity.quadrature", format!("expected midpoint or element, got {other:?}"));
                None
            }
        };
        let functional = match self.get(&mut o, "functional", false) {
            None => Some(Functional::Energy),
            Some(Value::String(s)) if s == "energy" => Some(Functional::Energy),
            Some(Value::String(s)) if s == "field" => Some(Functional::Field),
            Some(Value::Object(m)) if m.len() == 1 && m.get("order").and_then(Value::as_i64).is_some() => {
                Some(Functional::Order(m["order"].as_i64().unwrap_or_default()))
            }
            Some(_) => {
                self.err("$.sensitivity.functional", "expected \"energy\", \"field\" or {\"order\": m}");
                None
            }
        };
        let steps = match self.list_key(&mut o, "steps") {
            Some(s) if s.len() >= 2 && s.iter().all(|h| *h > 0.0) => Some(s),
            Some(_) => {
                self.err("$.sensitivity.steps", "need at least two positive steps");
                None
            }
            None if o.map.contains_key("steps") => None,
            None => Some(d.steps),
        };
        let direction = match self.get(&mut o, "direction", false) {
            None => Some(d.direction),
            Some(v) => self.direction(v),
        };
        self.finish(o);
        Some(SensitivitySpec {
            continuum: continuum?,
            quadrature: quadrature?,
            functional: functional?,
            steps: steps?,
            direction: direction?,
        })
    }

    fn direction(&mut self, v: &Value) -> Option<DirectionSpec> {
        let path = "$.sensitivity.direction";
        let mut o = self.obj(v, path)?;
        let kind = self.str_key(&mut o, "kind", true);
        let out = match kind {
            Some("random") => Some(DirectionSpec::Random {
                eps_only: self.bool_key(&mut o, "eps_only").unwrap_or(false),
            }),
            Some("uniform_eps") => Some(DirectionSpec::UniformEps),
            Some("uniform_tau") => Some(DirectionSpec::UniformTau),
            Some("cell") => {
                let index = self.usize_key(&mut o, "index", true);
                let coefficient = match self.str_key(&mut o, "coefficient", false) {
                    None | Some("eps") => Some(Coefficient::Eps),
                    Some("tau") => Some(Coefficient::Tau),
                    Some(other) => {
                        self.err(&format!("{path}.coefficient"), format!("expected eps or tau, got {other:?}"));
                        None
                    }
                };
                Some(DirectionSpec::Cell {
                    index: index?,
                    coefficient: coefficient?,
                })
            }
            Some(other) => {
                self.err(
                    &format!("{path}.kind"),
                    format!("unknown direction {other:?} (random, uniform_eps, uniform_tau, cell)"),
                );
                None
            }
            None => None,
        };
        self.finish(o);
        out
    }

    fn region(&mut self, v: &Value, path: &str) -> Option<Region> {
        match v {
            Value::String(s) if s == "all" => Some(Region::All),
            Value::String(s) if s == "inclusions" => Some(Region::Inclusions),
            Value::Object(_) => {
                let mut o = self.obj(v, path)?;
                let lo = self.pair_key(&mut o, "lo", true);
                let hi = self.pair_key(&mut o, "hi", true);
                self.finish(o);
                Some(Region::Rect { lo: lo?, hi: hi? })
            }
            _ => {
                self.err(path, "expected \"all\", \"inclusions\" or {\"lo\": [x, z], \"hi\": [x, z]}");
                None
            }
        }
    }

    fn envelope(&mut self, v: &Value, path: &str) -> Option<EnvelopeSpec> {
        let mut o = self.obj(v, path)?;
        let kind = self.str_key(&mut o, "kind", true);
        let out = match kind {
            Some("degenerate") => Some(EnvelopeSpec::Degenerate),
            Some("relative") => {
                let rel = self.f64_key(&mut o, "rel", true);
                let region = match self.get(&mut o, "region", false) {
                    Some(r) => self.region(r, &format!("{path}.region")),
                    None => Some(Region::All),
                };
                match rel {
                    Some(r) if !(0.0..1.0).contains(&r) => {
                        self.err(&format!("{path}.rel"), "must lie in [0, 1)");
                        None
                    }
                    _ => Some(EnvelopeSpec::Relative {
                        rel: rel?,
                        region: region?,
                    }),
                }
            }
            Some("bounds") => {
                let eps = self.pair_key(&mut o, "eps", true);
                let tau = self.pair_key(&mut o, "tau", true);
                for (name, b) in [("eps", eps), ("tau", tau)] {
                    if let Some((lo, hi)) = b {
                        if !(lo > 0.0 && hi >= lo) {
                            self.err(&format!("{path}.{name}"), "bounds need 0 < lo <= hi");
                        }
                    }
                }
                Some(EnvelopeSpec::Bounds { eps: eps?, tau: tau? })
            }
            Some(other) => {
                self.err(&format!("{path}.kind"), format!("unknown envelope {other:?} (degenerate, relative, bounds)"));
                None
            }
            None => None,
        };
        self.finish(o);
        out
    }

    fn method(&mut self, s: Option<&str>, path: &str) -> Option<EigenMethod> {
        match s {
            None | Some("auto") => Some(EigenMethod::Auto),
            Some("dense") => Some(EigenMethod::Dense),
            Some("subspace") => Some(EigenMethod::Subspace),
            Some(other) => {
                self.err(path, format!("expected auto, dense or subspace, got {other:?}"));
                None
            }
        }
    }

    fn eigen(&mut self, v: &Value) -> Option<EigenSpec> {
        let mut o = self.obj(v, "$.eigen")?;
        let d = EigenSpec::default();
        let count = self.usize_key(&mut o, "count", false).unwrap_or(d.count);
        let omega_max = self.f64_key(&mut o, "omega_max", false);
        let method = self.str_key(&mut o, "method", false);
        let method = self.method(method, "$.eigen.method");
        let j = self.usize_key(&mut o, "j", false).unwrap_or(d.j);
        let omega_range = if o.map.contains_key("omega_range") {
            self.pair_key(&mut o, "omega_range", false).map(Some)
        } else {
            o.used.insert("omega_range");
            Some(d.omega_range)
        };
        let envelope = match self.get(&mut o, "envelope", false) {
            Some(e) => self.envelope(e, "$.eigen.envelope"),
            None => Some(EnvelopeSpec::Degenerate),
        };
        self.finish(o);
        if count == 0 {
            self.err("$.eigen.count", "must be at least 1");
        }
        if let Some(Some((lo, hi))) = omega_range {
            if !(lo >= 0.0 && hi >= lo) {
                self.err("$.eigen.omega_range", "needs 0 <= lo <= hi");
            }
        }
        Some(EigenSpec {
            count,
            omega_max,
            method: method?,
            j,
            omega_range: omega_range?,
            envelope: envelope?,
        })
    }

    fn design(&mut self, v: &Value) -> Option<DesignSpec> {
        let mut o = self.obj(v, "$.design")?;
        let d = DesignSpec::default();
        let objective = match self.get(&mut o, "objective", false) {
            None => Some(d.objective),
            Some(Value::String(s)) if s == "maximize" => Some(Objective::Maximize),
            Some(Value::String(s)) if s == "minimize" => Some(Objective::Minimize),
            Some(v @ Value::Object(_)) => self.obj(v, "$.design.objective").and_then(|mut m| {
                let targets = self.list_key(&mut m, "targets");
                if !m.map.contains_key("targets") {
                    self.err("$.design.objective.targets", "missing required key");
                }
                let weights = self.list_key(&mut m, "weights");
                self.finish(m);
                let targets = targets?;
                let weights = weights.unwrap_or_else(|| vec![1.0; targets.len()]);
                if weights.len() != targets.len() {
                    self.err("$.design.objective.weights", "needs one weight per target");
                }
                Some(Objective::MatchSpectrum { targets, weights })
            }),
            Some(_) => {
                self.err("$.design.objective", "expected \"maximize\", \"minimize\" or {\"targets\": [...]}");
                None
            }
        };
        let region = match self.get(&mut o, "region", false) {
            Some(r) => self.region(r, "$.design.region"),
            None => Some(d.region),
        };
        let envelope = match self.get(&mut o, "envelope", false) {
            Some(e) => self.envelope(e, "$.design.envelope"),
            None => Some(d.envelope),
        };
        let step = if o.map.contains_key("step") {
            self.positive(&mut o, "step", false, "a line search needs a step")
        } else {
            o.used.insert("step");
            Some(d.step)
        };
        let max_iters = self.usize_key(&mut o, "max_iters", false).unwrap_or(d.max_iters);
        let tolerance = self.f64_key(&mut o, "tolerance", false).unwrap_or(d.tolerance);
        let optimize_tau = self.bool_key(&mut o, "optimize_tau").unwrap_or(false);
        let certification = match self.str_key(&mut o, "certify", false) {
            None | Some("none") => Some(Certification::None),
            Some("envelope") => Some(Certification::Envelope),
            Some("every_iterate") => Some(Certification::EveryIterate),
            Some(other) => {
                self.err("$.design.certify", format!("expected none, envelope or every_iterate, got {other:?}"));
                None
            }
        };
        self.finish(o);
        Some(DesignSpec {
            objective: objective?,
            region: region?,
            envelope: envelope?,
            step: step?,
            max_iters,
            tolerance,
            optimize_tau,
            certification: certification?,
        })
    }

    fn solver(&mut self, v: &Value) -> Option<SolverSpec> {
        let mut o = self.obj(v, "$.solver")?;
        let d = SolverSpec::default();
        let tolerance = if o.map.contains_key("tolerance") {
            self.positive(&mut o, "tolerance", false, "a residual bound")
        } else {
            o.used.insert("tolerance");
            Some(d.tolerance)
        };
        let refinement_steps = self.usize_key(&mut o, "refinement_steps", false).unwrap_or(d.refinement_steps);
        let condition = self.bool_key(&mut o, "condition").unwrap_or(d.condition);
        let threads = self.usize_key(&mut o, "threads", false);
        self.finish(o);
        Some(SolverSpec {
            tolerance: tolerance?,
            refinement_steps,
            condition,
            threads,
        })
    }

    fn output(&mut self, v: &Value) -> Option<(Option<PathBuf>, bool)> {
        let mut o = self.obj(v, "$.output")?;
        let dir = self.str_key(&mut o, "directory", false).map(PathBuf::from);
        let orders = self.bool_key(&mut o, "orders").unwrap_or(false);
        self.finish(o);
        Some((dir, orders))
    }
}
