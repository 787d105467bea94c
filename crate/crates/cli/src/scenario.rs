//! Scenario files: TOML surface syntax (or the JSON copy embedded in a
//! report), dotted-key overrides and consistency validation.

use std::fmt;
use std::path::Path;

use longrun_core::hjb_pde::Grid;
use longrun_core::model::{Field, MarketParams, ModelSpec, StateModel, WishartParams};
use longrun_core::spd::SpdMatrix;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub const BUNDLED: [(&str, &str); 2] = [
    ("benchmark_d1.toml", include_str!("../scenarios/benchmark_d1.toml")),
    ("counterexample_d2.toml", include_str!("../scenarios/counterexample_d2.toml")),
];

#[derive(Debug)]
pub enum ScenarioError {
    Io(String),
    Parse { line: usize, column: usize, message: String },
    Invalid(String),
    Model(longrun_core::Error),
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::Io(m) => write!(f, "{m}"),
            ScenarioError::Parse { line, column, message } => {
                write!(f, "parse error at line {line}, column {column}: {message}")
            }
            ScenarioError::Invalid(m) => write!(f, "invalid scenario: {m}"),
            ScenarioError::Model(e) => write!(f, "model construction failed: {e}"),
        }
    }
}

type Res<T> = std::result::Result<T, ScenarioError>;

fn invalid<T>(msg: impl Into<String>) -> Res<T> {
    Err(ScenarioError::Invalid(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Check,
    Riccati,
    Pde,
    Simulate,
    Counterexample,
    Report,
}

/// Flat row-major array or nested rows.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixInput {
    Scalar(f64),
    Flat(Vec<f64>),
    Nested(Vec<Vec<f64>>),
}

impl MatrixInput {
    pub fn to_matrix(&self, name: &str, rows: usize, cols: usize) -> Res<DMatrix<f64>> {
        match self {
            MatrixInput::Scalar(v) if rows * cols == 1 => Ok(DMatrix::from_element(1, 1, *v)),
            MatrixInput::Scalar(_) => invalid(format!("{name}: expected {rows}x{cols}, got a scalar")),
            MatrixInput::Flat(v) => {
                if v.len() != rows * cols {
                    return invalid(format!("{name}: expected {rows}x{cols} ({} entries), got {} entries", rows * cols, v.len()));
                }
                Ok(DMatrix::from_row_slice(rows, cols, v))
            }
            MatrixInput::Nested(r) => {
                let got_cols = r.first().map_or(0, Vec::len);
                if r.iter().any(|row| row.len() != got_cols) {
                    return invalid(format!("{name}: ragged rows"));
                }
                if r.len() == rows && got_cols == cols {
                    return Ok(DMatrix::from_fn(rows, cols, |i, j| r[i][j]));
                }
                invalid(format!("{name}: expected {rows}x{cols}, got {}x{got_cols}", r.len()))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaggedProvider {
    pub provider: String,
    pub value: MatrixInput,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amp: Option<f64>,
}

/// A market coefficient: a plain array is a constant.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Provider {
    Plain(MatrixInput),
    Tagged(TaggedProvider),
}

impl Provider {
    fn resolve(&self, name: &str, rows: usize, cols: usize) -> Res<Field> {
        let t = match self {
            Provider::Plain(m) => return Ok(Field::Constant(m.to_matrix(name, rows, cols)?)),
            Provider::Tagged(t) => t,
        };
        let base = t.value.to_matrix(name, rows, cols)?;
        let amp = || t.amp.ok_or_else(|| ScenarioError::Invalid(format!("{name}: provider `{}` needs `amp`", t.provider)));
        match t.provider.as_str() {
            "constant" => Ok(Field::Constant(base)),
            "saturating" => Ok(Field::Saturating { base, amp: amp()? }),
            "decaying" => Ok(Field::Decaying { base, amp: amp()? }),
            other => invalid(format!(
                "{name}: unknown provider `{other}`; built-ins: {}",
                Field::BUILTINS.join(", ")
            )),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub r0: f64,
    pub r1: MatrixInput,
    pub zeta: Provider,
    pub nu: Provider,
    pub rho: Provider,
    #[serde(rename = "corrC", default, skip_serializing_if = "Option::is_none")]
    pub corr_c: Option<Provider>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub n: usize,
    pub p: f64,
    #[serde(rename = "K")]
    pub k: MatrixInput,
    #[serde(rename = "L")]
    pub l: MatrixInput,
    #[serde(rename = "Lambda")]
    pub lambda: MatrixInput,
    pub market: MarketSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    D1,
    D2,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<Axis>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<Axis>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<Axis>,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub dt: f64,
    pub snapshots: Vec<f64>,
    pub delta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub box_lo: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub box_hi: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
}

impl Default for PdeSection {
    fn default() -> Self {
        PdeSection {
            mode: None,
            x: None,
            z: None,
            c: None,
            horizon: 50.0,
            dt: 0.01,
            snapshots: vec![5.0, 10.0, 20.0, 40.0],
            delta: 1.0,
            box_lo: None,
            box_hi: None,
            theta: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiccatiSection {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub dt: f64,
}

impl Default for RiccatiSection {
    fn default() -> Self {
        RiccatiSection { horizon: 10.0, dt: 1e-3 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    #[serde(rename = "nPaths")]
    pub n_paths: usize,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub t_window: f64,
    #[serde(rename = "T_list")]
    pub t_list: Vec<f64>,
    #[serde(rename = "masterSeed")]
    pub master_seed: u64,
    /// Perturbation size for the supermartingale test.
    pub perturbation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<MatrixInput>,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            n_paths: 20_000,
            dt: 1e-3,
            horizon: 1.0,
            t_window: 1.0,
            t_list: vec![2.0, 5.0, 10.0, 20.0],
            master_seed: 1,
            perturbation: 0.2,
            x0: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub tasks: Vec<Task>,
    pub model: ModelSection,
    #[serde(default)]
    pub pde: PdeSection,
    #[serde(default)]
    pub riccati: RiccatiSection,
    #[serde(default)]
    pub sim: SimSection,
}

/// Validated scenario ready to run.
pub struct Built {
    pub spec: ModelSpec,
    pub x0: SpdMatrix,
    pub grid: Option<Grid>,
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let start = before.rfind('\n').map_or(0, |i| i + 1);
    (line, before[start..].chars().count() + 1)
}

fn toml_error(src: &str, e: toml::de::Error) -> ScenarioError {
    let (line, column) = e.span().map_or((0, 0), |s| line_col(src, s.start));
    ScenarioError::Parse {
        line,
        column,
        message: e.message().trim().to_string(),
    }
}

pub fn read_source(path: &Path) -> Res<String> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) => {
            let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
            match BUNDLED.iter().find(|(n, _)| *n == name || n.trim_end_matches(".toml") == name) {
                Some((_, src)) => Ok(src.to_string()),
                None => Err(ScenarioError::Io(format!(
                    "cannot read {}: {e}; bundled scenarios: {}",
                    path.display(),
                    BUNDLED.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
                ))),
            }
        }
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Res<()> {
    let Some((key, raw)) = item.split_once('=') else {
        return invalid(format!("override `{item}`: expected key=value"));
    };
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return invalid(format!("override `{key}`: `{part}` is not a section")),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses a scenario (TOML, or JSON when the path ends in `.json`) and
/// applies `key=value` overrides.
pub fn load(path: &Path, overrides: &[String]) -> Res<Scenario> {
    let src = read_source(path)?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if !is_json && overrides.is_empty() {
        return toml::from_str::<Scenario>(&src).map_err(|e| toml_error(&src, e));
    }
    let mut table: toml::Table = if is_json {
        serde_json::from_str(&src).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?
    } else {
        toml::from_str(&src).map_err(|e| toml_error(&src, e))?
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    Scenario::deserialize(toml::Value::Table(table)).map_err(|e| ScenarioError::Invalid(e.message().trim().to_string()))
}

impl Scenario {
    pub fn mode(&self) -> Mode {
        self.pde.mode.unwrap_or(if self.model.d == 2 { Mode::D2 } else { Mode::D1 })
    }

    pub fn box_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let (lo, hi) = match self.mode() {
            Mode::D1 => (vec![0.5], vec![5.0]),
            Mode::D2 => (vec![0.5, 0.5, -0.5], vec![5.0, 5.0, 0.5]),
        };
        (self.pde.box_lo.clone().unwrap_or(lo), self.pde.box_hi.clone().unwrap_or(hi))
    }

    fn build_grid(&self) -> Res<Grid> {
        let grid = match self.mode() {
            Mode::D1 => match self.pde.x {
                Some(a) => Grid::d1(a.lo, a.hi, a.n),
                None => Ok(Grid::default_d1()),
            },
            Mode::D2 => {
                let def = [(0.05, 6.0, 48), (0.05, 6.0, 48), (-0.9, 0.9, 24)];
                let pick = |a: Option<Axis>, k: usize| a.map_or(def[k], |a| (a.lo, a.hi, a.n));
                Grid::d2(pick(self.pde.x, 0), pick(self.pde.z, 1), pick(self.pde.c, 2))
            }
        };
        grid.map_err(|e| ScenarioError::Invalid(format!("pde grid: {e}")))
    }

    /// Consistency checks and model assembly; no computation.
    pub fn build(&self) -> Res<Built> {
        let m = &self.model;
        let (d, n) = (m.d, m.n);
        if d == 0 || n == 0 {
            return invalid("model.d and model.n must be positive");
        }
        let k = m.k.to_matrix("model.K", d, d)?;
        let l = m.l.to_matrix("model.L", d, d)?;
        let lambda = m.lambda.to_matrix("model.Lambda", d, d)?;
        let mk = &m.market;
        let r1 = mk.r1.to_matrix("model.market.r1", d, d)?;
        let zeta = mk.zeta.resolve("model.market.zeta", n, d)?;
        let nu = mk.nu.resolve("model.market.nu", n, 1)?;
        let rho = mk.rho.resolve("model.market.rho", d, 1)?;
        let corr = mk.corr_c.as_ref().map(|c| c.resolve("model.market.corrC", d, d)).transpose()?;
        let w = WishartParams::new(k, l, lambda).map_err(ScenarioError::Model)?;
        let mut market = MarketParams::wishart(d, mk.r0, r1, zeta, nu, rho).map_err(ScenarioError::Model)?;
        if let Some(c) = corr {
            market.corr_c = c;
        }
        let spec = ModelSpec::new(StateModel::Wishart(w), market, m.p).map_err(ScenarioError::Model)?;

        let x0 = match &self.sim.x0 {
            Some(x) => SpdMatrix::from_matrix(&x.to_matrix("sim.x0", d, d)?)
                .map_err(|e| ScenarioError::Invalid(format!("sim.x0: {e}")))?,
            None => SpdMatrix::identity(d),
        };
        let s = &self.sim;
        if s.n_paths == 0 || !(s.dt > 0.0) || !(s.horizon > 0.0) || !(s.t_window > 0.0) {
            return invalid("sim: nPaths, dt, T and t_window must be positive");
        }
        if s.t_list.iter().any(|t| !(*t > 0.0)) {
            return invalid("sim.T_list: horizons must be positive");
        }
        if !(self.riccati.horizon > 0.0 && self.riccati.dt > 0.0) {
            return invalid("riccati: T and dt must be positive");
        }

        let grid = if self.tasks.contains(&Task::Pde) {
            let p = &self.pde;
            let want = match self.mode() {
                Mode::D1 => 1,
                Mode::D2 => 2,
            };
            if want != d {
                return invalid(format!("pde.mode: grid mode needs d = {want}, model has d = {d}"));
            }
            if !(p.horizon > 0.0 && p.dt > 0.0 && p.delta > 0.0 && p.delta < p.horizon && p.dt <= p.delta) {
                return invalid("pde: need T > delta >= dt > 0");
            }
            if let Some(t) = p.snapshots.iter().find(|t| !(**t > 0.0 && **t < p.horizon)) {
                return invalid(format!("pde.snapshots: {t} is outside (0, T)"));
            }
            let (lo, hi) = self.box_bounds();
            let dim = want * (want + 1) / 2;
            if lo.len() != dim || hi.len() != dim {
                return invalid(format!("pde.box_lo/box_hi: expected {dim} entries"));
            }
            Some(self.build_grid()?)
        } else {
            None
        };
        Ok(Built { spec, x0, grid })
    }
}
