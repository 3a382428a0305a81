//! Scenario definitions and their on-disk format.
//!
//! Scenarios live in flat sectioned key-value files: `[section]` headers,
//! `key = value` lines, `#`/`;` comments, and repeated keys for table
//! rows (curvature samples, friction breakpoints, obstacles, tire
//! anchors). Every field has a documented default; parsing resolves all
//! defaults so a scenario can be echoed back out in full and re-parsed to
//! an identical value.

use nalgebra::{Vector3, Vector6};
use thiserror::Error;

use crate::constraints::FrictionProfile;
use crate::planner::{PlannerConfig, PlannerMode};
use crate::track::Track;
use crate::vehicle::{State, TireCoeffs, TireTable, VehicleParams};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A disc obstacle that appears at a fixed time and stays put.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObstacleEvent {
    pub t_appear: f64,
    pub s: f64,
    pub d: f64,
    pub radius: f64,
}

/// Fully resolved scenario: geometry, ground-truth friction, events,
/// initial state, vehicle, planner configuration and the list of planner
/// variants to compare.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub track: Track<f64>,
    pub profile: FrictionProfile<f64>,
    pub events: Vec<ObstacleEvent>,
    pub x0: State<f64>,
    pub duration: f64,
    pub seed: u64,
    pub params: VehicleParams<f64>,
    pub cfg: PlannerConfig<f64>,
    /// Additional planner modes to run side by side.
    pub compare: Vec<PlannerMode<f64>>,
}

pub fn parse_mode(s: &str) -> Result<PlannerMode<f64>, String> {
    let (tag, mu) = match s.split_once(':') {
        Some((tag, mu_str)) => {
            let mu: f64 = mu_str
                .trim()
                .parse()
                .map_err(|_| format!("bad friction value in mode '{s}'"))?;
            (tag.trim(), Some(mu))
        }
        None => (s.trim(), None),
    };
    match (tag, mu) {
        ("ta", None) => Ok(PlannerMode::TractionAdaptive),
        ("na", Some(mu)) => Ok(PlannerMode::NonAdaptive { mu_sta: mu }),
        ("sa", Some(mu)) => Ok(PlannerMode::SamplingAugmented { mu_sta: mu }),
        ("rti", Some(mu)) => Ok(PlannerMode::RtiBaseline { mu_sta: mu }),
        ("na" | "sa" | "rti", None) => {
            Err(format!("mode '{tag}' needs a static friction value, e.g. '{tag}:0.8'"))
        }
        ("ta", Some(_)) => Err("mode 'ta' takes no static friction value".into()),
        _ => Err(format!("unknown mode '{s}' (expected ta, na:MU, sa:MU, rti:MU)")),
    }
}

pub fn mode_label(mode: &PlannerMode<f64>) -> String {
    match mode {
        PlannerMode::TractionAdaptive => "ta".to_string(),
        PlannerMode::NonAdaptive { mu_sta } => format!("na:{mu_sta:?}"),
        PlannerMode::SamplingAugmented { mu_sta } => format!("sa:{mu_sta:?}"),
        PlannerMode::RtiBaseline { mu_sta } => format!("rti:{mu_sta:?}"),
    }
}

struct Entry {
    section: String,
    key: String,
    value: String,
    line: usize,
}

fn tokenize(path: &str, text: &str) -> Result<Vec<Entry>, ScenarioError> {
    let mut entries = Vec::new();
    let mut section = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = match raw.find(['#', ';']) {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let stripped = stripped.trim();
        if stripped.is_empty() {
            continue;
        }
        if let Some(rest) = stripped.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ScenarioError::Parse {
                path: path.into(),
                line,
                msg: "unterminated section header".into(),
            })?;
            section = name.trim().to_lowercase();
            continue;
        }
        let (key, value) = stripped.split_once('=').ok_or_else(|| ScenarioError::Parse {
            path: path.into(),
            line,
            msg: format!("expected 'key = value', got '{stripped}'"),
        })?;
        if section.is_empty() {
            return Err(ScenarioError::Parse {
                path: path.into(),
                line,
                msg: "key outside of any [section]".into(),
            });
        }
        entries.push(Entry {
            section: section.clone(),
            key: key.trim().to_lowercase(),
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(entries)
}

struct Reader<'a> {
    path: &'a str,
    entries: &'a [Entry],
    used: Vec<bool>,
}

impl<'a> Reader<'a> {
    fn new(path: &'a str, entries: &'a [Entry]) -> Self {
        Self {
            path,
            entries,
            used: vec![false; entries.len()],
        }
    }

    fn err(&self, line: usize, msg: String) -> ScenarioError {
        ScenarioError::Parse {
            path: self.path.into(),
            line,
            msg,
        }
    }

    fn take_all(&mut self, section: &str, key: &str) -> Vec<(usize, String)> {
        let mut out = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.section == section && e.key == key {
                self.used[i] = true;
                out.push((e.line, e.value.clone()));
            }
        }
        out
    }

    fn scalar(&mut self, section: &str, key: &str) -> Result<Option<(usize, String)>, ScenarioError> {
        let mut all = self.take_all(section, key);
        if all.len() > 1 {
            let line = all[1].0;
            return Err(self.err(line, format!("[{section}] {key} given more than once")));
        }
        Ok(all.pop())
    }

    fn f64_or(&mut self, section: &str, key: &str, default: f64) -> Result<f64, ScenarioError> {
        match self.scalar(section, key)? {
            Some((line, v)) => v
                .parse()
                .map_err(|_| self.err(line, format!("[{section}] {key}: '{v}' is not a number"))),
            None => Ok(default),
        }
    }

    fn u64_or(&mut self, section: &str, key: &str, default: u64) -> Result<u64, ScenarioError> {
        match self.scalar(section, key)? {
            Some((line, v)) => v
                .parse()
                .map_err(|_| self.err(line, format!("[{section}] {key}: '{v}' is not an integer"))),
            None => Ok(default),
        }
    }

    fn usize_or(&mut self, section: &str, key: &str, default: usize) -> Result<usize, ScenarioError> {
        Ok(self.u64_or(section, key, default as u64)? as usize)
    }

    fn string_or(&mut self, section: &str, key: &str, default: &str) -> Result<String, ScenarioError> {
        Ok(self
            .scalar(section, key)?
            .map(|(_, v)| v)
            .unwrap_or_else(|| default.to_string()))
    }

    fn numbers(&self, line: usize, value: &str, n: usize, what: &str) -> Result<Vec<f64>, ScenarioError> {
        let parts: Vec<&str> = value.split(',').map(str::trim).collect();
        if parts.len() != n {
            return Err(self.err(
                line,
                format!("{what}: expected {n} comma-separated values, got {}", parts.len()),
            ));
        }
        parts
            .iter()
            .map(|p| {
                p.parse()
                    .map_err(|_| self.err(line, format!("{what}: '{p}' is not a number")))
            })
            .collect()
    }

    fn unused(&self) -> Option<&Entry> {
        self.entries
            .iter()
            .zip(&self.used)
            .find(|(_, used)| !**used)
            .map(|(e, _)| e)
    }
}

/// Parse and fully validate a scenario file.
pub fn parse_scenario_file(path: &std::path::Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario_str(&path.display().to_string(), &text)
}

pub fn parse_scenario_str(path: &str, text: &str) -> Result<Scenario, ScenarioError> {
    let entries = tokenize(path, text)?;
    let mut r = Reader::new(path, &entries);
    let invalid = |msg: String| ScenarioError::Invalid {
        path: path.into(),
        msg,
    };

    // [vehicle]
    let defaults = VehicleParams::<f64>::heavy_truck();
    let m = r.f64_or("vehicle", "m", defaults.m)?;
    let iz = r.f64_or("vehicle", "iz", defaults.iz)?;
    let h = r.f64_or("vehicle", "h", defaults.h)?;
    let lf = r.f64_or("vehicle", "lf", defaults.lf)?;
    let lr = r.f64_or("vehicle", "lr", defaults.lr)?;
    let g = r.f64_or("vehicle", "g", defaults.g)?;
    let drive_force_max = r.f64_or("vehicle", "drive_force_max", 0.5 * m * g)?;
    let tire_rows = r.take_all("vehicle", "tire");
    let tire_table = if tire_rows.is_empty() {
        defaults.tire_table.clone()
    } else {
        let mut rows = Vec::new();
        for (line, value) in &tire_rows {
            let v = r.numbers(*line, value, 5, "[vehicle] tire row")?;
            rows.push((
                v[0],
                TireCoeffs {
                    b: v[1],
                    c: v[2],
                    d_scale: v[3],
                    e: v[4],
                },
            ));
        }
        TireTable::new(rows)
    };
    let params = VehicleParams {
        m,
        iz,
        h,
        lf,
        lr,
        g,
        tire_table,
        drive_force_max,
    };
    params.validate().map_err(invalid)?;

    // [track]
    let lane_width = r.f64_or("track", "lane_width", 4.5)?;
    let length = r.f64_or("track", "length", 200.0)?;
    let curvature_rows = r.take_all("track", "curvature");
    let mut curvature = Vec::new();
    if curvature_rows.is_empty() {
        curvature.push((0.0, 0.0));
    } else {
        for (line, value) in &curvature_rows {
            let v = r.numbers(*line, value, 2, "[track] curvature row")?;
            curvature.push((v[0], v[1]));
        }
    }
    let track = Track::from_curvature(&curvature, length, lane_width).map_err(invalid)?;

    // [friction]
    let mu_rows = r.take_all("friction", "mu");
    let mut breakpoints = Vec::new();
    if mu_rows.is_empty() {
        breakpoints.push((0.0, 0.8));
    } else {
        for (line, value) in &mu_rows {
            let v = r.numbers(*line, value, 2, "[friction] mu row")?;
            breakpoints.push((v[0], v[1]));
        }
    }
    let profile = FrictionProfile::new(breakpoints)
        .map_err(|e| invalid(format!("[friction] {e}")))?;
    let mu_max_table = params.tire_table.mu_max();
    for &(_, mu) in profile.breakpoints() {
        if mu > mu_max_table {
            return Err(invalid(format!(
                "[friction] mu {mu} exceeds the tire table range (max {mu_max_table})"
            )));
        }
    }

    // [obstacles]
    let mut events = Vec::new();
    for (line, value) in &r.take_all("obstacles", "obstacle") {
        let v = r.numbers(*line, value, 4, "[obstacles] obstacle row")?;
        if v[3] <= 0.0 {
            return Err(r.err(*line, "obstacle radius must be positive".into()));
        }
        if v[0] < 0.0 {
            return Err(r.err(*line, "obstacle appearance time must be >= 0".into()));
        }
        events.push(ObstacleEvent {
            t_appear: v[0],
            s: v[1],
            d: v[2],
            radius: v[3],
        });
    }

    // [init]
    let x0 = State {
        s: r.f64_or("init", "s", 0.0)?,
        d: r.f64_or("init", "d", 0.0)?,
        dpsi: r.f64_or("init", "dpsi", 0.0)?,
        yaw_rate: r.f64_or("init", "yawrate", 0.0)?,
        vx: r.f64_or("init", "vx", 8.0)?,
        vy: r.f64_or("init", "vy", 0.0)?,
    };
    if x0.vx <= 0.0 {
        return Err(invalid("[init] vx must be positive".into()));
    }

    // [run]
    let name = r.string_or(
        "run",
        "name",
        std::path::Path::new(path)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("scenario"),
    )?;
    let duration = r.f64_or("run", "duration", 10.0)?;
    let seed = r.u64_or("run", "seed", 1)?;
    if duration <= 0.0 {
        return Err(invalid("[run] duration must be positive".into()));
    }

    // [planner]
    let mode_str = r.string_or("planner", "mode", "ta")?;
    let mode = parse_mode(&mode_str).map_err(invalid)?;
    let mut cfg = PlannerConfig::new(mode, x0.vx);
    cfg.n = r.usize_or("planner", "n", cfg.n)?;
    cfg.ts = r.f64_or("planner", "ts", cfg.ts)?;
    cfg.lambda = r.f64_or("planner", "lambda", cfg.lambda)?;
    cfg.n_facets = r.usize_or("planner", "n_facets", cfg.n_facets)?;
    cfg.d_ref = r.f64_or("planner", "d_ref", cfg.d_ref)?;
    cfg.vx_ref = r.f64_or("planner", "vx_ref", x0.vx)?;
    if let Some((line, v)) = r.scalar("planner", "q")? {
        let vals = r.numbers(line, &v, 6, "[planner] q")?;
        cfg.q_diag = Vector6::from_iterator(vals);
    }
    if let Some((line, v)) = r.scalar("planner", "qn")? {
        let vals = r.numbers(line, &v, 6, "[planner] qn")?;
        cfg.qn_diag = Vector6::from_iterator(vals);
    } else {
        cfg.qn_diag = cfg.q_diag * 10.0;
    }
    if let Some((line, v)) = r.scalar("planner", "r")? {
        let vals = r.numbers(line, &v, 3, "[planner] r")?;
        cfg.r_diag = Vector3::from_iterator(vals);
    }
    cfg.sel_tolerance = r.f64_or("planner", "sel_tolerance", cfg.sel_tolerance)?;
    cfg.state_params.r_margin = r.f64_or("planner", "r_margin", cfg.state_params.r_margin)?;
    cfg.state_params.hard_margin =
        r.f64_or("planner", "hard_margin", cfg.state_params.hard_margin)?;
    cfg.state_params.vx_min = r.f64_or("planner", "vx_min", cfg.state_params.vx_min)?;
    cfg.state_params.vx_max = r.f64_or("planner", "vx_max", cfg.state_params.vx_max)?;
    cfg.state_params.lane_weight =
        r.f64_or("planner", "lane_weight", cfg.state_params.lane_weight)?;
    cfg.state_params.obstacle_weight =
        r.f64_or("planner", "obstacle_weight", cfg.state_params.obstacle_weight)?;
    cfg.state_params.velocity_weight =
        r.f64_or("planner", "velocity_weight", cfg.state_params.velocity_weight)?;
    cfg.samples.n_d = r.usize_or("planner", "n_d", cfg.samples.n_d)?;
    cfg.samples.n_v = r.usize_or("planner", "n_v", cfg.samples.n_v)?;
    cfg.samples.d_band = r.f64_or("planner", "d_band", cfg.samples.d_band)?;
    cfg.samples.vx_floor_frac =
        r.f64_or("planner", "vx_floor_frac", cfg.samples.vx_floor_frac)?;
    cfg.samples.vx_min_sample =
        r.f64_or("planner", "vx_min_sample", cfg.samples.vx_min_sample)?;
    cfg.validate().map_err(invalid)?;

    // [compare]
    let mut compare = Vec::new();
    for (line, value) in &r.take_all("compare", "config") {
        let mode = parse_mode(value).map_err(|e| r.err(*line, e))?;
        compare.push(mode);
    }

    if let Some(entry) = r.unused() {
        return Err(ScenarioError::Parse {
            path: path.into(),
            line: entry.line,
            msg: format!("unknown key '[{}] {}'", entry.section, entry.key),
        });
    }

    // Events must sit on friction the tire table covers and inside the
    // extended track.
    for ev in &events {
        if ev.s < 0.0 || ev.s > track.length() {
            return Err(invalid(format!(
                "obstacle at s = {} outside the track [0, {}]",
                ev.s,
                track.length()
            )));
        }
    }

    Ok(Scenario {
        name,
        track,
        profile,
        events,
        x0,
        duration,
        seed,
        params,
        cfg,
        compare,
    })
}

/// Write the fully resolved scenario back out in the config format.
/// Floating point values print in round-trip form, so parsing the echo
/// reproduces the scenario exactly.
pub fn echo_scenario(sc: &Scenario) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let w = &mut out;
    writeln!(w, "# resolved scenario configuration").unwrap();
    writeln!(w, "[run]").unwrap();
    writeln!(w, "name = {}", sc.name).unwrap();
    writeln!(w, "duration = {:?}", sc.duration).unwrap();
    writeln!(w, "seed = {}", sc.seed).unwrap();
    writeln!(w, "\n[track]").unwrap();
    writeln!(w, "lane_width = {:?}", sc.track.lane_width).unwrap();
    writeln!(w, "length = {:?}", sc.track.length()).unwrap();
    let mut s_cursor = 0.0;
    // Re-emit curvature rows by sampling segment starts.
    for (s, kappa) in curvature_rows_of(&sc.track) {
        writeln!(w, "curvature = {s:?}, {kappa:?}").unwrap();
        s_cursor = s;
    }
    let _ = s_cursor;
    writeln!(w, "\n[friction]").unwrap();
    for &(s, mu) in sc.profile.breakpoints() {
        writeln!(w, "mu = {s:?}, {mu:?}").unwrap();
    }
    if !sc.events.is_empty() {
        writeln!(w, "\n[obstacles]").unwrap();
        for ev in &sc.events {
            writeln!(
                w,
                "obstacle = {:?}, {:?}, {:?}, {:?}",
                ev.t_appear, ev.s, ev.d, ev.radius
            )
            .unwrap();
        }
    }
    writeln!(w, "\n[init]").unwrap();
    writeln!(w, "s = {:?}", sc.x0.s).unwrap();
    writeln!(w, "d = {:?}", sc.x0.d).unwrap();
    writeln!(w, "dpsi = {:?}", sc.x0.dpsi).unwrap();
    writeln!(w, "yawrate = {:?}", sc.x0.yaw_rate).unwrap();
    writeln!(w, "vx = {:?}", sc.x0.vx).unwrap();
    writeln!(w, "vy = {:?}", sc.x0.vy).unwrap();
    writeln!(w, "\n[vehicle]").unwrap();
    writeln!(w, "m = {:?}", sc.params.m).unwrap();
    writeln!(w, "iz = {:?}", sc.params.iz).unwrap();
    writeln!(w, "h = {:?}", sc.params.h).unwrap();
    writeln!(w, "lf = {:?}", sc.params.lf).unwrap();
    writeln!(w, "lr = {:?}", sc.params.lr).unwrap();
    writeln!(w, "g = {:?}", sc.params.g).unwrap();
    writeln!(w, "drive_force_max = {:?}", sc.params.drive_force_max).unwrap();
    for (mu, c) in sc.params.tire_table.rows() {
        writeln!(
            w,
            "tire = {:?}, {:?}, {:?}, {:?}, {:?}",
            mu, c.b, c.c, c.d_scale, c.e
        )
        .unwrap();
    }
    let cfg = &sc.cfg;
    writeln!(w, "\n[planner]").unwrap();
    writeln!(w, "mode = {}", mode_label(&cfg.mode)).unwrap();
    writeln!(w, "n = {}", cfg.n).unwrap();
    writeln!(w, "ts = {:?}", cfg.ts).unwrap();
    writeln!(w, "lambda = {:?}", cfg.lambda).unwrap();
    writeln!(w, "n_facets = {}", cfg.n_facets).unwrap();
    writeln!(w, "d_ref = {:?}", cfg.d_ref).unwrap();
    writeln!(w, "vx_ref = {:?}", cfg.vx_ref).unwrap();
    let q = &cfg.q_diag;
    writeln!(
        w,
        "q = {:?}, {:?}, {:?}, {:?}, {:?}, {:?}",
        q[0], q[1], q[2], q[3], q[4], q[5]
    )
    .unwrap();
    let qn = &cfg.qn_diag;
    writeln!(
        w,
        "qn = {:?}, {:?}, {:?}, {:?}, {:?}, {:?}",
        qn[0], qn[1], qn[2], qn[3], qn[4], qn[5]
    )
    .unwrap();
    writeln!(
        w,
        "r = {:?}, {:?}, {:?}",
        cfg.r_diag[0], cfg.r_diag[1], cfg.r_diag[2]
    )
    .unwrap();
    writeln!(w, "sel_tolerance = {:?}", cfg.sel_tolerance).unwrap();
    writeln!(w, "r_margin = {:?}", cfg.state_params.r_margin).unwrap();
    writeln!(w, "hard_margin = {:?}", cfg.state_params.hard_margin).unwrap();
    writeln!(w, "vx_min = {:?}", cfg.state_params.vx_min).unwrap();
    writeln!(w, "vx_max = {:?}", cfg.state_params.vx_max).unwrap();
    writeln!(w, "lane_weight = {:?}", cfg.state_params.lane_weight).unwrap();
    writeln!(w, "obstacle_weight = {:?}", cfg.state_params.obstacle_weight).unwrap();
    writeln!(w, "velocity_weight = {:?}", cfg.state_params.velocity_weight).unwrap();
    writeln!(w, "n_d = {}", cfg.samples.n_d).unwrap();
    writeln!(w, "n_v = {}", cfg.samples.n_v).unwrap();
    writeln!(w, "d_band = {:?}", cfg.samples.d_band).unwrap();
    writeln!(w, "vx_floor_frac = {:?}", cfg.samples.vx_floor_frac).unwrap();
    writeln!(w, "vx_min_sample = {:?}", cfg.samples.vx_min_sample).unwrap();
    if !sc.compare.is_empty() {
        writeln!(w, "\n[compare]").unwrap();
        for mode in &sc.compare {
            writeln!(w, "config = {}", mode_label(mode)).unwrap();
        }
    }
    out
}

fn curvature_rows_of(track: &Track<f64>) -> Vec<(f64, f64)> {
    track.curvature_rows()
}
