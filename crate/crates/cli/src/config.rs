//! Scenario and study configuration.
//!
//! Configs are JSON. An object may name a `"preset"`; the preset's document
//! is deep-merged under the remaining keys (objects merge key by key, all
//! other values are replaced). The merged document is then deserialized
//! with field paths in error messages and validated as a whole before any
//! output is created.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kvsim::assembly::{FixedPlacement, LoadSpec};
use kvsim::fem::DeformationField;
use kvsim::linsolve::SolverConfig;
use kvsim::material::MaterialParams;
use kvsim::mesh::{BoxSpec, Mesh, FACE_TAGS};
use kvsim::oracle::{NewtonConfig, Scheme};
use kvsim::stepper::step_count;
use nalgebra::{Matrix3, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

/// Names accepted by `"preset"`.
pub const PRESETS: [&str; 3] = ["jello", "convergence", "uniaxial"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: invalid JSON: {source}")]
    Syntax { path: PathBuf, source: serde_json::Error },
    #[error("schema violation at `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("unknown preset `{0}` (expected one of jello, convergence, uniaxial)")]
    UnknownPreset(String),
    #[error("invalid configuration:\n{}", .0.iter().map(|(f, m)| format!("  `{f}`: {m}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<(String, String)>),
}

/// Initial deformation `y0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    /// `y0(x) = x`.
    #[default]
    Identity,
    /// `y0(x) = matrix x + translation`.
    Affine {
        matrix: [[f64; 3]; 3],
        #[serde(default)]
        translation: [f64; 3],
    },
    /// A named initial condition: `identity` or `stretch_x` (`diag(1.2, 1, 1) x`).
    Preset { name: String },
}

impl InitialCondition {
    fn affine_parts(&self) -> Result<(Matrix3<f64>, Vector3<f64>), String> {
        match self {
            InitialCondition::Identity => Ok((Matrix3::identity(), Vector3::zeros())),
            InitialCondition::Affine { matrix, translation } => {
                let a = Matrix3::from_fn(|i, j| matrix[i][j]);
                if !(a.determinant() > 0.0) {
                    return Err(format!("matrix must have positive determinant, got {}", a.determinant()));
                }
                Ok((a, Vector3::from(*translation)))
            }
            InitialCondition::Preset { name } => match name.as_str() {
                "identity" => Ok((Matrix3::identity(), Vector3::zeros())),
                "stretch_x" => Ok((Matrix3::from_diagonal(&Vector3::new(1.2, 1.0, 1.0)), Vector3::zeros())),
                other => Err(format!("unknown initial condition preset `{other}` (expected identity or stretch_x)")),
            },
        }
    }

    pub fn field(&self, mesh: &Mesh) -> Result<DeformationField, String> {
        let (a, t) = self.affine_parts()?;
        Ok(DeformationField::affine(mesh, &a, &t))
    }
}

fn default_outputs() -> PathBuf {
    PathBuf::from("output")
}

/// One simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub mesh: BoxSpec,
    pub material: MaterialParams,
    #[serde(default)]
    pub loads: LoadSpec,
    #[serde(default)]
    pub initial_condition: InitialCondition,
    pub tau: f64,
    /// Final time.
    #[serde(rename = "T")]
    pub t_final: f64,
    /// Write a VTK snapshot every this many steps (0 disables snapshots).
    #[serde(default)]
    pub snapshot_every: usize,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_outputs")]
    pub outputs: PathBuf,
}

impl ScenarioConfig {
    /// Every problem with the configuration, without touching the file system.
    pub fn problems(&self, prefix: &str) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |field: &str, message: String| out.push((format!("{prefix}{field}"), message));
        if let Err(e) = self.mesh.validate() {
            push("mesh", e.to_string());
        }
        if let Err(e) = self.material.validate() {
            push("material", e.to_string());
        }
        if let Err(e) = self.solver.validate() {
            push("solver", e.to_string());
        }
        for tag in self.loads.traction.keys().chain(self.loads.dirichlet.keys()) {
            if !FACE_TAGS.contains(&tag.as_str()) {
                push("loads", format!("unknown boundary tag `{tag}` (expected one of {})", FACE_TAGS.join(", ")));
            }
        }
        if let Some(tag) = self.loads.traction.keys().find(|t| self.loads.dirichlet.contains_key(*t)) {
            push("loads", format!("tag `{tag}` carries both a traction and a Dirichlet condition"));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.loads.body_force) || !self.loads.traction.values().all(|g| finite(g)) {
            push("loads", "loads must be finite".into());
        }
        for (tag, placement) in &self.loads.dirichlet {
            if let FixedPlacement::Affine { matrix, translation } = placement {
                if !matrix.iter().flatten().chain(translation).all(|x| x.is_finite()) {
                    push("loads.dirichlet", format!("placement of `{tag}` must be finite"));
                }
            }
        }
        if let Err(e) = self.initial_condition.affine_parts() {
            push("initial_condition", e);
        }
        if let Err(e) = step_count(self.t_final, self.tau) {
            push("tau", e.to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let problems = self.problems("");
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }
}

fn default_convergence_taus() -> Vec<f64> {
    vec![0.1, 0.01, 0.001]
}

fn default_resolutions() -> Vec<usize> {
    vec![4, 6, 8]
}

/// Time step sweep of the energy-dissipation error on several box meshes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Base scenario; its `tau` is ignored and its mesh divisions are
    /// replaced by `[n, n, n]` for every resolution `n`.
    pub scenario: ScenarioConfig,
    #[serde(default = "default_convergence_taus")]
    pub taus: Vec<f64>,
    #[serde(default = "default_resolutions")]
    pub resolutions: Vec<usize>,
}

impl ConvergenceConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = self.scenario.problems("scenario.");
        problems.retain(|(f, _)| f != "scenario.tau");
        if self.taus.is_empty() {
            problems.push(("taus".into(), "at least one time step is required".into()));
        }
        for (i, &tau) in self.taus.iter().enumerate() {
            if let Err(e) = step_count(self.scenario.t_final, tau) {
                problems.push((format!("taus[{i}]"), e.to_string()));
            }
        }
        if self.resolutions.is_empty() || self.resolutions.contains(&0) {
            problems.push(("resolutions".into(), "resolutions must be a nonempty list of positive integers".into()));
        }
        if self.scenario.loads.has_external_loads() {
            problems.push(("scenario.loads".into(), "the energy-dissipation error needs a run without external loads".into()));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    /// The scenario run for one `(resolution, tau)` pair.
    pub fn run_config(&self, resolution: usize, tau: f64) -> ScenarioConfig {
        let mut s = self.scenario.clone();
        s.mesh.divisions = [resolution; 3];
        s.tau = tau;
        s
    }
}

fn default_oracle_taus() -> Vec<f64> {
    vec![0.02, 0.01, 0.005]
}

fn default_scheme_a() -> Scheme {
    Scheme::LinearizedExplicit
}

fn default_scheme_b() -> Scheme {
    Scheme::NonlinearImplicit
}

fn default_pointwise_samples() -> usize {
    50
}

/// Comparison of two time discretizations on a desk-scale mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleCompareConfig {
    /// Base scenario; its `tau` is ignored.
    pub scenario: ScenarioConfig,
    #[serde(default = "default_oracle_taus")]
    pub taus: Vec<f64>,
    #[serde(default)]
    pub newton: NewtonConfig,
    #[serde(default = "default_scheme_a")]
    pub scheme_a: Scheme,
    #[serde(default = "default_scheme_b")]
    pub scheme_b: Scheme,
    /// Random deformation gradients for the pointwise power-density check,
    /// drawn with `--seed`.
    #[serde(default = "default_pointwise_samples")]
    pub pointwise_samples: usize,
}

impl OracleCompareConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = self.scenario.problems("scenario.");
        problems.retain(|(f, _)| f != "scenario.tau");
        if let Err(e) = self.newton.validate() {
            problems.push(("newton".into(), e.to_string()));
        }
        if self.taus.is_empty() {
            problems.push(("taus".into(), "at least one time step is required".into()));
        }
        for (i, &tau) in self.taus.iter().enumerate() {
            if let Err(e) = step_count(self.scenario.t_final, tau) {
                problems.push((format!("taus[{i}]"), e.to_string()));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }
}

/// The preset documents.
pub fn preset(name: &str) -> Result<Value, ConfigError> {
    let material = json!({ "mu": 1.0e3, "lambda": 1.5e3, "c": 3.0e3 });
    let stretch = json!({ "kind": "affine", "matrix": [[1.2, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] });
    match name {
        // block attached at the top, sagging under gravity
        "jello" => Ok(json!({
            "mesh": { "lower": [-1.0, -1.0, -0.5], "upper": [1.0, 1.0, 0.5], "divisions": [4, 4, 2] },
            "material": material,
            "loads": { "body_force": [0.0, 0.0, -2.0e3], "dirichlet": { "z+": { "kind": "initial" } } },
            "initial_condition": { "kind": "identity" },
            "tau": 0.01,
            "T": 3.0,
            "snapshot_every": 100
        })),
        // stretched cube relaxing with a free boundary
        "convergence" => Ok(json!({
            "mesh": { "lower": [-1.0, -1.0, -1.0], "upper": [1.0, 1.0, 1.0], "divisions": [6, 6, 6] },
            "material": material,
            "loads": {},
            "initial_condition": stretch,
            "tau": 0.01,
            "T": 1.0,
            "snapshot_every": 0
        })),
        // stretched cube held at both ends, relaxing laterally
        "uniaxial" => Ok(json!({
            "mesh": { "lower": [-1.0, -1.0, -1.0], "upper": [1.0, 1.0, 1.0], "divisions": [4, 4, 4] },
            "material": material,
            "loads": { "dirichlet": { "x-": { "kind": "initial" }, "x+": { "kind": "initial" } } },
            "initial_condition": stretch,
            "tau": 0.01,
            "T": 1.0,
            "snapshot_every": 0
        })),
        other => Err(ConfigError::UnknownPreset(other.to_string())),
    }
}

/// Deep merge: objects merge key by key, everything else in `overlay` wins.
/// Tagged objects whose `"kind"` differs are replaced, not merged.
pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) if o.get("kind").is_none_or(|k| b.get("kind") == Some(k)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Replaces a `"preset"` key of an object by the merged preset document.
pub fn expand_preset(value: Value) -> Result<Value, ConfigError> {
    let Value::Object(mut map) = value else {
        return Ok(value);
    };
    match map.remove("preset") {
        None => Ok(Value::Object(map)),
        Some(Value::String(name)) => {
            let mut base = preset(&name)?;
            merge(&mut base, Value::Object(map));
            Ok(base)
        }
        Some(other) => Err(ConfigError::Schema { field: "preset".into(), message: format!("expected a string, got {other}") }),
    }
}

/// Deserializes with the path of the offending field in the error.
pub fn from_value<T: DeserializeOwned>(value: Value) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        ConfigError::Schema { field, message: e.into_inner().to_string() }
    })
}

pub fn read_json(path: &Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|source| ConfigError::Syntax { path: path.into(), source })
}

pub fn parse_scenario(value: Value) -> Result<ScenarioConfig, ConfigError> {
    let cfg: ScenarioConfig = from_value(expand_preset(value)?)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Expands the nested scenario: a `"preset"` replaces `default_scenario`,
/// any other keys are merged into it.
fn expand_study(value: Value, default_scenario: Value) -> Result<Value, ConfigError> {
    let mut map = match value {
        Value::Object(map) => map,
        other => return Ok(other),
    };
    let mut scenario = default_scenario;
    if let Some(given) = map.remove("scenario") {
        // a named preset replaces the default; anything else overrides it
        if given.get("preset").is_some() {
            scenario = expand_preset(given)?;
        } else {
            merge(&mut scenario, given);
        }
    }
    // studies sweep tau themselves
    if let Value::Object(s) = &mut scenario {
        s.entry("tau").or_insert(json!(1.0));
    }
    map.insert("scenario".into(), scenario);
    Ok(Value::Object(map))
}

pub fn parse_convergence(value: Value) -> Result<ConvergenceConfig, ConfigError> {
    let cfg: ConvergenceConfig = from_value(expand_study(value, preset("convergence")?)?)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Default scenario of the scheme comparison: the stretched cube on a
/// 2x2x2 mesh up to `T = 0.5`.
pub fn oracle_default_scenario() -> Value {
    let mut s = preset("convergence").expect("built-in preset");
    merge(&mut s, json!({ "mesh": { "divisions": [2, 2, 2] }, "T": 0.5 }));
    s
}

pub fn parse_oracle_compare(value: Value) -> Result<OracleCompareConfig, ConfigError> {
    let cfg: OracleCompareConfig = from_value(expand_study(value, oracle_default_scenario())?)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Top-level fields of [`ScenarioConfig`], as listed in the published schema.
pub fn scenario_fields() -> BTreeMap<&'static str, bool> {
    // field -> required
    BTreeMap::from([
        ("mesh", true),
        ("material", true),
        ("loads", false),
        ("initial_condition", false),
        ("tau", true),
        ("T", true),
        ("snapshot_every", false),
        ("solver", false),
        ("outputs", false),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for name in PRESETS {
            let cfg = parse_scenario(json!({ "preset": name })).unwrap();
            assert_eq!(cfg.material.mu, 1.0e3);
        }
        let jello = parse_scenario(json!({ "preset": "jello" })).unwrap();
        assert_eq!(jello.loads.body_force, [0.0, 0.0, -2.0e3]);
        assert_eq!(jello.mesh.lower, [-1.0, -1.0, -0.5]);
        assert_eq!(jello.tau, 0.01);
    }

    #[test]
    fn overrides_merge_deeply() {
        let cfg = parse_scenario(json!({ "preset": "jello", "mesh": { "divisions": [2, 2, 1] }, "T": 0.1 })).unwrap();
        assert_eq!(cfg.mesh.divisions, [2, 2, 1]);
        assert_eq!(cfg.mesh.upper, [1.0, 1.0, 0.5]);
        assert_eq!(cfg.t_final, 0.1);
        assert!(cfg.loads.dirichlet.contains_key("z+"));
        let cfg = parse_scenario(json!({
            "preset": "convergence",
            "initial_condition": { "kind": "affine", "matrix": [[1.1, 0, 0], [0, 1, 0], [0, 0, 1]] }
        }))
        .unwrap();
        assert!(matches!(cfg.initial_condition, InitialCondition::Affine { .. }));
    }

    #[test]
    fn schema_errors_carry_paths() {
        let err = parse_scenario(json!({ "preset": "jello", "material": { "mu": "soft" } })).unwrap_err();
        match err {
            ConfigError::Schema { field, .. } => assert_eq!(field, "material.mu"),
            other => panic!("{other}"),
        }
        let err = parse_scenario(json!({ "preset": "jello", "colour": 1 })).unwrap_err();
        assert!(matches!(err, ConfigError::Schema { .. }), "{err}");
        assert!(matches!(parse_scenario(json!({ "preset": "plate" })), Err(ConfigError::UnknownPreset(_))));
    }

    #[test]
    fn semantic_problems_are_listed_together() {
        let err = parse_scenario(json!({
            "preset": "convergence",
            "tau": 0.3,
            "material": { "c": -1.0 },
            "loads": { "dirichlet": { "top": { "kind": "initial" } } }
        }))
        .unwrap_err();
        let ConfigError::Invalid(problems) = err else { panic!() };
        let fields: Vec<&str> = problems.iter().map(|(f, _)| f.as_str()).collect();
        assert_eq!(fields, ["material", "loads", "tau"]);
    }

    #[test]
    fn studies_default_their_scenarios() {
        let conv = parse_convergence(json!({})).unwrap();
        assert_eq!(conv.taus, [0.1, 0.01, 0.001]);
        assert_eq!(conv.resolutions, [4, 6, 8]);
        assert_eq!(conv.run_config(4, 0.1).mesh.divisions, [4, 4, 4]);
        let oracle = parse_oracle_compare(json!({ "taus": [0.1] })).unwrap();
        assert_eq!(oracle.scenario.mesh.divisions, [2, 2, 2]);
        assert_eq!(oracle.scenario.t_final, 0.5);
        let partial = parse_oracle_compare(json!({ "scenario": { "T": 0.2 } })).unwrap();
        assert_eq!(partial.scenario.t_final, 0.2);
        assert!(parse_convergence(json!({ "taus": [0.3] })).is_err());
        assert!(parse_convergence(json!({ "scenario": { "preset": "jello" } })).is_err());
    }

    #[test]
    fn initial_conditions() {
        assert!(InitialCondition::Preset { name: "stretch_x".into() }.affine_parts().is_ok());
        assert!(InitialCondition::Preset { name: "twist".into() }.affine_parts().is_err());
        let flipped = InitialCondition::Affine { matrix: [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] };
        assert!(flipped.affine_parts().is_err());
    }
}
