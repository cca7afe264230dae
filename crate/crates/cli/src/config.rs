//! Run configuration: flat `key=value` files layered with `LRPOST_*`
//! environment variables and command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use lrpost::discretize::{build_grid, OperatorKind, TimeGrid};
use lrpost::hessian::{
    CovarianceSpec, LayoutKind, ParameterMode, Patch, PriorPreset, ProblemSpec, SensorLayout, MIN_SIDE_3X3,
};
use lrpost::lowrank::TruncationPolicy;

use crate::CliError;

/// Prefix for environment overrides, e.g. `LRPOST_N_SIDE=63`.
pub const ENV_PREFIX: &str = "LRPOST_";

/// Canonical keys in manifest order.
pub const KEYS: &[&str] = &[
    "problem",
    "mode",
    "n_side",
    "n_t",
    "t_final",
    "nu",
    "wind",
    "beta_ratio",
    "prior",
    "sensors",
    "eps0",
    "eps_eig",
    "m_a",
    "check_every",
    "restart",
    "solver",
    "n_eigs",
    "seed",
    "out",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Problem {
    Heat,
    ConvDiff,
    SteadyPoisson,
}

impl FromStr for Problem {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "heat" => Ok(Problem::Heat),
            "convdiff" => Ok(Problem::ConvDiff),
            "steady-poisson" => Ok(Problem::SteadyPoisson),
            _ => Err(CliError::Config(format!("unknown problem '{s}' (heat, convdiff, steady-poisson)"))),
        }
    }
}

impl Problem {
    fn name(self) -> &'static str {
        match self {
            Problem::Heat => "heat",
            Problem::ConvDiff => "convdiff",
            Problem::SteadyPoisson => "steady-poisson",
        }
    }
}

fn mode_name(m: ParameterMode) -> &'static str {
    match m {
        ParameterMode::InitialCondition => "ic",
        ParameterMode::DistributedSource => "ds",
        ParameterMode::SteadyPoisson => "steady",
    }
}

fn parse_mode(s: &str) -> Result<Option<ParameterMode>, CliError> {
    match s {
        "auto" => Ok(None),
        "ic" => Ok(Some(ParameterMode::InitialCondition)),
        "ds" => Ok(Some(ParameterMode::DistributedSource)),
        "steady" => Ok(Some(ParameterMode::SteadyPoisson)),
        _ => Err(CliError::Config(format!("unknown mode '{s}' (auto, ic, ds, steady)"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sensors {
    /// Every dof observed.
    Full,
    /// Nothing observed.
    Empty,
    Grid3x3,
    Custom(Vec<Patch>),
}

impl FromStr for Sensors {
    type Err = CliError;
    /// `none`/`full`, `empty`, `grid3x3`, or `x,y,side;x,y,side;…`.
    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "none" | "full" => return Ok(Sensors::Full),
            "empty" => return Ok(Sensors::Empty),
            "grid3x3" => return Ok(Sensors::Grid3x3),
            _ => {}
        }
        let mut patches = Vec::new();
        for item in s.split(';').filter(|t| !t.trim().is_empty()) {
            let nums: Vec<f64> = item
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| CliError::Config(format!("bad sensor patch '{item}', expected x,y,side")))?;
            let [x, y, side] = nums[..] else {
                return Err(CliError::Config(format!("bad sensor patch '{item}', expected x,y,side")));
            };
            patches.push(Patch { center: [x, y], side });
        }
        if patches.is_empty() {
            return Err(CliError::Config(format!("unknown sensors '{s}'")));
        }
        Ok(Sensors::Custom(patches))
    }
}

impl Sensors {
    fn text(&self) -> String {
        match self {
            Sensors::Full => "none".into(),
            Sensors::Empty => "empty".into(),
            Sensors::Grid3x3 => "grid3x3".into(),
            Sensors::Custom(p) => p
                .iter()
                .map(|p| format!("{},{},{}", p.center[0], p.center[1], p.side))
                .collect::<Vec<_>>()
                .join(";"),
        }
    }
}

fn parse_prior(s: &str) -> Result<PriorPreset, CliError> {
    let bad = || CliError::Config(format!("bad prior '{s}', expected scalar:<gamma> or beta:<beta_prior>"));
    let (kind, value) = s.split_once(':').ok_or_else(bad)?;
    let value: f64 = value.parse().map_err(|_| bad())?;
    match kind {
        "scalar" => Ok(PriorPreset::Scalar(value)),
        "beta" => Ok(PriorPreset::Beta(value)),
        _ => Err(bad()),
    }
}

fn prior_text(p: PriorPreset) -> String {
    match p {
        PriorPreset::Scalar(g) => format!("scalar:{g:e}"),
        PriorPreset::Beta(b) => format!("beta:{b:e}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Sweep,
    Krylov,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: Problem,
    /// `None` picks the natural mode of the problem.
    pub mode: Option<ParameterMode>,
    pub n_side: usize,
    pub n_t: usize,
    pub t_final: f64,
    pub nu: f64,
    pub wind: [f64; 2],
    pub beta_ratio: f64,
    pub prior: PriorPreset,
    pub sensors: Sensors,
    pub eps0: f64,
    pub eps_eig: f64,
    pub m_a: usize,
    pub check_every: usize,
    pub restart: bool,
    pub solver: Solver,
    pub n_eigs: usize,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            problem: Problem::Heat,
            mode: None,
            n_side: 31,
            n_t: 30,
            t_final: 1.0,
            nu: 1e-2,
            wind: [0.0, 1.0],
            beta_ratio: 1e4,
            prior: PriorPreset::Scalar(10.0),
            sensors: Sensors::Grid3x3,
            eps0: 1e-8,
            eps_eig: 1e-1,
            m_a: 200,
            check_every: 10,
            restart: false,
            solver: Solver::Sweep,
            n_eigs: 10,
            seed: None,
            out: PathBuf::from("out"),
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("bad value '{v}' for {key}")))
}

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key=value", no + 1)))?;
        let k = k.trim().replace('-', "_");
        if !KEYS.contains(&k.as_str()) {
            return Err(CliError::Config(format!("line {}: unknown key '{k}'", no + 1)));
        }
        map.insert(k, v.trim().to_string());
    }
    Ok(map)
}

/// `LRPOST_*` variables mapped to canonical keys; unknown names are errors.
pub fn env_layer<I: IntoIterator<Item = (String, String)>>(vars: I) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (name, value) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let key = rest.to_ascii_lowercase();
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::Config(format!("unknown environment override {name}")));
        }
        map.insert(key, value);
    }
    Ok(map)
}

impl RunConfig {
    /// Applies layers in order; later layers win.
    pub fn from_layers(layers: &[BTreeMap<String, String>]) -> Result<Self, CliError> {
        let mut merged = BTreeMap::new();
        for layer in layers {
            for (k, v) in layer {
                merged.insert(k.clone(), v.clone());
            }
        }
        let mut c = RunConfig::default();
        for (k, v) in &merged {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        match key {
            "problem" => self.problem = v.parse()?,
            "mode" => self.mode = parse_mode(v)?,
            "n_side" => self.n_side = num(key, v)?,
            "n_t" => self.n_t = num(key, v)?,
            "t_final" => self.t_final = num(key, v)?,
            "nu" => self.nu = num(key, v)?,
            "wind" => {
                let parts: Vec<f64> = v.split(',').map(|t| num(key, t)).collect::<Result<_, _>>()?;
                let [a, b] = parts[..] else {
                    return Err(CliError::Config(format!("wind needs two components, got '{v}'")));
                };
                self.wind = [a, b];
            }
            "beta_ratio" => self.beta_ratio = num(key, v)?,
            "prior" => self.prior = parse_prior(v)?,
            "sensors" => self.sensors = v.parse()?,
            "eps0" => self.eps0 = num(key, v)?,
            "eps_eig" => self.eps_eig = num(key, v)?,
            "m_a" => self.m_a = num(key, v)?,
            "check_every" => self.check_every = num(key, v)?,
            "restart" => self.restart = num(key, v)?,
            "solver" => {
                self.solver = match v {
                    "sweep" => Solver::Sweep,
                    "krylov" => Solver::Krylov,
                    _ => return Err(CliError::Config(format!("unknown solver '{v}' (sweep, krylov)"))),
                }
            }
            "n_eigs" => self.n_eigs = num(key, v)?,
            "seed" => self.seed = if v == "none" { None } else { Some(num(key, v)?) },
            "out" => self.out = PathBuf::from(v),
            _ => return Err(CliError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "problem" => self.problem.name().into(),
            "mode" => self.mode.map_or("auto".into(), |m| mode_name(m).into()),
            "n_side" => self.n_side.to_string(),
            "n_t" => self.n_t.to_string(),
            "t_final" => format!("{:e}", self.t_final),
            "nu" => format!("{:e}", self.nu),
            "wind" => format!("{:e},{:e}", self.wind[0], self.wind[1]),
            "beta_ratio" => format!("{:e}", self.beta_ratio),
            "prior" => prior_text(self.prior),
            "sensors" => self.sensors.text(),
            "eps0" => format!("{:e}", self.eps0),
            "eps_eig" => format!("{:e}", self.eps_eig),
            "m_a" => self.m_a.to_string(),
            "check_every" => self.check_every.to_string(),
            "restart" => self.restart.to_string(),
            "solver" => match self.solver {
                Solver::Sweep => "sweep".into(),
                Solver::Krylov => "krylov".into(),
            },
            "n_eigs" => self.n_eigs.to_string(),
            "seed" => self.seed.map_or("none".into(), |s| s.to_string()),
            "out" => self.out.display().to_string(),
            _ => return None,
        })
    }

    /// Every key with its resolved value; parsing it back gives `self`.
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).expect("canonical key"));
        }
        s
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("t_final", self.t_final),
            ("beta_ratio", self.beta_ratio),
            ("eps_eig", self.eps_eig),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.m_a == 0 || self.n_t == 0 || self.n_side == 0 || self.check_every == 0 || self.n_eigs == 0 {
            return Err(CliError::Config("n_side, n_t, m_a, check_every and n_eigs must be at least 1".into()));
        }
        TruncationPolicy::new(self.eps0)?;
        match (self.problem, self.mode) {
            (Problem::SteadyPoisson, None | Some(ParameterMode::SteadyPoisson)) => {}
            (Problem::SteadyPoisson, Some(m)) => {
                return Err(CliError::Config(format!("steady-poisson does not support mode {}", mode_name(m))))
            }
            (_, Some(ParameterMode::SteadyPoisson)) => {
                return Err(CliError::Config("mode steady needs problem=steady-poisson".into()))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn resolved_mode(&self) -> ParameterMode {
        match (self.problem, self.mode) {
            (Problem::SteadyPoisson, _) => ParameterMode::SteadyPoisson,
            (_, Some(m)) => m,
            (_, None) => ParameterMode::InitialCondition,
        }
    }

    pub fn policy(&self) -> Result<TruncationPolicy, CliError> {
        Ok(TruncationPolicy::new(self.eps0)?)
    }

    /// The problem description plus any notes on adjustments made to it
    /// (a 3×3 layout on a grid too coarse to resolve it becomes full
    /// observation).
    pub fn problem_spec(&self) -> Result<(ProblemSpec, Vec<String>), CliError> {
        let grid = build_grid(self.n_side)?;
        let mut notes = Vec::new();
        let sensors = match &self.sensors {
            Sensors::Full => SensorLayout::full(&grid),
            Sensors::Empty => SensorLayout::empty(&grid),
            Sensors::Grid3x3 if self.n_side < MIN_SIDE_3X3 => {
                notes.push(format!(
                    "n_side={} cannot resolve the 3x3 sensor patches; using full observation",
                    self.n_side
                ));
                SensorLayout::full(&grid)
            }
            Sensors::Grid3x3 => SensorLayout::grid3x3(&grid)?,
            Sensors::Custom(p) => SensorLayout::from_patches(&grid, p.clone())?,
        };
        debug_assert!(sensors.kind() != LayoutKind::Patches || sensors.count() > 0);
        let operator = match self.problem {
            Problem::ConvDiff => OperatorKind::ConvDiff {
                nu: self.nu,
                wind: self.wind,
            },
            _ => OperatorKind::Heat,
        };
        let mode = self.resolved_mode();
        let time = if mode == ParameterMode::SteadyPoisson {
            TimeGrid::new(1, self.t_final)?
        } else {
            TimeGrid::new(self.n_t, self.t_final)?
        };
        let cov = CovarianceSpec::from_preset(self.prior, self.beta_ratio, &grid)?;
        Ok((
            ProblemSpec {
                grid,
                time,
                operator,
                sensors,
                cov,
                mode,
            },
            notes,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults() {
        let c = RunConfig::from_layers(&[]).unwrap();
        assert_eq!(c.eps0, 1e-8);
        assert_eq!(c.eps_eig, 1e-1);
        assert_eq!(c.beta_ratio, 1e4);
        assert_eq!(c.t_final, 1.0);
        assert_eq!(c.sensors, Sensors::Grid3x3);
        assert_eq!(c.resolved_mode(), ParameterMode::InitialCondition);
    }

    #[test]
    fn later_layers_win() {
        let file = layer(&[("n_side", "15"), ("n_t", "8")]);
        let env = layer(&[("n_side", "7")]);
        let flags = layer(&[("n_t", "4")]);
        let c = RunConfig::from_layers(&[file, env, flags]).unwrap();
        assert_eq!((c.n_side, c.n_t), (7, 4));
    }

    #[test]
    fn manifest_round_trip() {
        let mut c = RunConfig::default();
        c.problem = Problem::ConvDiff;
        c.nu = 1e-3;
        c.wind = [0.25, -1.0];
        c.sensors = "0.25,0.25,0.0625;0.75,0.5,0.125".parse().unwrap();
        c.prior = PriorPreset::Beta(0.5);
        c.seed = Some(42);
        c.eps0 = 1e-10;
        let back = RunConfig::from_layers(&[parse_kv(&c.to_manifest()).unwrap()]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn env_names() {
        let env = env_layer(vec![
            ("LRPOST_N_SIDE".to_string(), "9".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
        ])
        .unwrap();
        assert_eq!(env.get("n_side").map(String::as_str), Some("9"));
        assert!(env_layer(vec![("LRPOST_BOGUS".to_string(), "1".to_string())]).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_kv("n_side").is_err());
        assert!(parse_kv("colour=red").is_err());
        assert!(RunConfig::from_layers(&[layer(&[("eps0", "1.5")])]).is_err());
        assert!(RunConfig::from_layers(&[layer(&[("eps_eig", "0")])]).is_err());
        assert!(RunConfig::from_layers(&[layer(&[("sensors", "0.5,0.5")])]).is_err());
        assert!(RunConfig::from_layers(&[layer(&[("problem", "wave")])]).is_err());
        assert!(RunConfig::from_layers(&[layer(&[("mode", "steady")])]).is_err());
        assert!(RunConfig::from_layers(&[layer(&[("problem", "steady-poisson"), ("mode", "ds")])]).is_err());
    }

    #[test]
    fn comments_and_dashes() {
        let m = parse_kv("# header\nn-side = 15  # trailing\n\neps_eig=1e-3\n").unwrap();
        assert_eq!(m.get("n_side").map(String::as_str), Some("15"));
        assert_eq!(m.get("eps_eig").map(String::as_str), Some("1e-3"));
    }

    #[test]
    fn coarse_grid_degrades_to_full() {
        let c = RunConfig::from_layers(&[layer(&[("n_side", "7"), ("n_t", "5")])]).unwrap();
        let (spec, notes) = c.problem_spec().unwrap();
        assert!(spec.sensors.is_full());
        assert_eq!(notes.len(), 1);
        let c = RunConfig::from_layers(&[layer(&[("n_side", "31")])]).unwrap();
        let (spec, notes) = c.problem_spec().unwrap();
        assert_eq!(spec.sensors.count(), 36);
        assert!(notes.is_empty());
    }
}
