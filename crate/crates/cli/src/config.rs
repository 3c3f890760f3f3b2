//! Experiment configuration: JSON parsing, defaults and validation.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use mesoflow::fisher_rao::StationaryMeasureSpec;
use mesoflow::flows::Schedule;
use mesoflow::graph::DiscreteGraph;
use mesoflow::mesh::{StructuredMesh, Vec2};
use mesoflow::particles::InitialSpec;
use mesoflow::poisson::SourceField;
use mesoflow::semidiscrete::MetricGraph;
use mesoflow::stationary::{AngularDensity, DensityField};
use mesoflow::{ModelParams, SymTensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Discrete,
    Reduced,
    Full,
    Monokinetic,
    Scalar,
    FisherRao,
    StationaryPlap,
    StationaryGamma1,
    StationaryScalar,
    StationaryFr,
    Semidiscrete,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Discrete => "discrete",
            ModelKind::Reduced => "reduced",
            ModelKind::Full => "full",
            ModelKind::Monokinetic => "monokinetic",
            ModelKind::Scalar => "scalar",
            ModelKind::FisherRao => "fisher-rao",
            ModelKind::StationaryPlap => "stationary-plap",
            ModelKind::StationaryGamma1 => "stationary-gamma1",
            ModelKind::StationaryScalar => "stationary-scalar",
            ModelKind::StationaryFr => "stationary-fr",
            ModelKind::Semidiscrete => "semidiscrete",
        }
    }

    fn on_grid(self) -> bool {
        !matches!(self, ModelKind::Discrete | ModelKind::Semidiscrete)
    }

    fn is_flow(self) -> bool {
        matches!(
            self,
            ModelKind::Discrete
                | ModelKind::Reduced
                | ModelKind::Full
                | ModelKind::Monokinetic
                | ModelKind::Scalar
                | ModelKind::FisherRao
        )
    }

    /// Top-level keys read by this model besides `model`, `params`, `output` and `threads`.
    fn keys(self) -> &'static [&'static str] {
        match self {
            ModelKind::Discrete => &["graph", "schedule"],
            ModelKind::Reduced | ModelKind::Full | ModelKind::FisherRao | ModelKind::Scalar => {
                &["mesh", "source", "schedule", "seed", "initial"]
            }
            ModelKind::Monokinetic => &["mesh", "source", "schedule", "initial"],
            ModelKind::StationaryPlap | ModelKind::StationaryGamma1 => &["mesh", "source", "density"],
            ModelKind::StationaryScalar => &["mesh", "source", "angular"],
            ModelKind::StationaryFr => &["mesh", "source", "spec"],
            ModelKind::Semidiscrete => &["graph"],
        }
    }
}

const ALL_KEYS: [&str; 13] = [
    "model", "params", "output", "threads", "graph", "schedule", "mesh", "source", "seed", "initial", "density",
    "angular", "spec",
];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsInput {
    gamma: f64,
    nu: f64,
    #[serde(default = "default_r")]
    r: f64,
    dim: Option<usize>,
}

fn default_r() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    #[serde(default)]
    pub extent: Option<Vec<[f64; 2]>>,
    pub cells: Vec<usize>,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self { extent: Some(vec![[0.0, 1.0], [0.0, 1.0]]), cells: vec![32, 32] }
    }
}

impl MeshConfig {
    fn resolved(mut self) -> Self {
        if self.extent.is_none() {
            self.extent = Some(vec![[0.0, 1.0]; self.cells.len()]);
        }
        self
    }

    pub fn build(&self) -> Result<StructuredMesh, String> {
        let extent = self.extent.clone().unwrap_or_else(|| vec![[0.0, 1.0]; self.cells.len()]);
        let m = StructuredMesh { dim: extent.len(), extent, cells: self.cells.clone() };
        let errs = m.violations();
        if errs.is_empty() {
            Ok(m)
        } else {
            Err(errs.join("; "))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center: Vec<f64>,
    pub amplitude: f64,
    pub width: f64,
}

/// Source descriptor; every variant is shifted to zero mean except `values`, which must already be.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    Zero,
    /// Positive bump at 30% and negative bump at 70% of the extent along the diagonal.
    TwoBumps {
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_width")]
        width: f64,
    },
    Bumps {
        bumps: Vec<Bump>,
    },
    /// `amplitude * cos(frequency * π * x_1)` on the unit scale of the first axis.
    Cosine {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
    },
    Values {
        values: Vec<f64>,
    },
}

fn default_amplitude() -> f64 {
    5.0
}

fn default_width() -> f64 {
    0.1
}

fn one() -> f64 {
    1.0
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig::TwoBumps { amplitude: default_amplitude(), width: default_width() }
    }
}

fn bump(x: &Vec2, c: &[f64], amp: f64, width: f64) -> f64 {
    let r2: f64 = c.iter().enumerate().map(|(a, ca)| (x[a] - ca).powi(2)).sum();
    amp * (-r2 / (2.0 * width * width)).exp()
}

impl SourceConfig {
    fn violations(&self, mesh: &StructuredMesh) -> Vec<String> {
        let mut errs = Vec::new();
        match self {
            SourceConfig::TwoBumps { width, .. } if !(*width > 0.0) => errs.push("source width must be positive".into()),
            SourceConfig::Bumps { bumps } => {
                for (k, b) in bumps.iter().enumerate() {
                    if b.center.len() != mesh.dim {
                        errs.push(format!("source bump {k} center does not match the mesh dimension"));
                    }
                    if !(b.width > 0.0) {
                        errs.push(format!("source bump {k} width must be positive"));
                    }
                }
            }
            SourceConfig::Values { values } => {
                if let Err(e) = SourceField::from_values(mesh, values.clone()) {
                    errs.push(format!("source: {e}"));
                }
            }
            _ => {}
        }
        errs
    }

    pub fn build(&self, mesh: &StructuredMesh) -> mesoflow::Result<SourceField> {
        let d = mesh.dim;
        let rel = |t: f64| -> Vec<f64> { (0..d).map(|a| mesh.extent[a][0] + t * (mesh.extent[a][1] - mesh.extent[a][0])).collect() };
        Ok(match self {
            SourceConfig::Zero => SourceField::zeros(mesh),
            SourceConfig::TwoBumps { amplitude, width } => {
                let (c1, c2) = (rel(0.3), rel(0.7));
                SourceField::from_fn(mesh, |x| bump(&x, &c1, *amplitude, *width) - bump(&x, &c2, *amplitude, *width))
            }
            SourceConfig::Bumps { bumps } => {
                SourceField::from_fn(mesh, |x| bumps.iter().map(|b| bump(&x, &b.center, b.amplitude, b.width)).sum())
            }
            SourceConfig::Cosine { amplitude, frequency } => {
                SourceField::from_fn(mesh, |x| amplitude * (frequency * PI * x[0]).cos())
            }
            SourceConfig::Values { values } => SourceField::from_values(mesh, values.clone())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityConfig {
    Uniform { value: f64 },
    /// `inside` on the ball, `outside` elsewhere (cell centers).
    Disk {
        center: Vec<f64>,
        radius: f64,
        inside: f64,
        #[serde(default)]
        outside: f64,
    },
    Values { values: Vec<f64> },
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig::Uniform { value: 1.0 }
    }
}

impl DensityConfig {
    pub fn build(&self, mesh: &StructuredMesh) -> DensityField {
        match self {
            DensityConfig::Uniform { value } => DensityField::uniform(mesh, *value),
            DensityConfig::Disk { center, radius, inside, outside } => DensityField::from_fn(mesh, |x| {
                let r2: f64 = center.iter().enumerate().map(|(a, c)| (x[a] - c).powi(2)).sum();
                if r2 <= radius * radius {
                    *inside
                } else {
                    *outside
                }
            }),
            DensityConfig::Values { values } => DensityField { values: values.clone() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngularConfig {
    #[serde(default = "default_angles")]
    pub angles: Vec<f64>,
    #[serde(default = "one")]
    pub weight: f64,
    /// Per-cell weights, overriding `weight`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<Vec<f64>>>,
}

fn default_angles() -> Vec<f64> {
    vec![0.0, PI / 2.0]
}

impl Default for AngularConfig {
    fn default() -> Self {
        Self { angles: default_angles(), weight: 1.0, weights: None }
    }
}

impl AngularConfig {
    pub fn build(&self, mesh: &StructuredMesh) -> AngularDensity {
        match &self.weights {
            Some(w) => AngularDensity { angles: self.angles.clone(), weights: w.clone() },
            None => AngularDensity::uniform(mesh, self.angles.clone(), self.weight),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonokineticInit {
    pub c0: SymTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarInit {
    #[serde(default = "default_atoms")]
    pub n: usize,
    #[serde(default = "half")]
    pub scale: f64,
}

fn default_atoms() -> usize {
    200
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum InitialConfig {
    Particles(InitialSpec),
    Monokinetic(MonokineticInit),
    Scalar(ScalarInit),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum GraphConfig {
    Discrete(DiscreteGraph),
    Metric(MetricGraph),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleInput {
    #[serde(default = "default_dt")]
    dt: f64,
    #[serde(default = "default_steps")]
    steps: usize,
    #[serde(default)]
    output_every: usize,
    #[serde(default = "default_dissipation_tol")]
    dissipation_tol: f64,
}

fn default_dt() -> f64 {
    Schedule::default().dt
}

fn default_steps() -> usize {
    Schedule::default().steps
}

fn default_dissipation_tol() -> f64 {
    Schedule::default().dissipation_tol
}

/// Fully resolved experiment; fields a model does not read are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub params: ModelParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mesh: Option<MeshConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub density: Option<DensityConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angular: Option<AngularConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<StationaryMeasureSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn mesh(&self) -> mesoflow::Result<StructuredMesh> {
        let m = self.mesh.clone().unwrap_or_default();
        m.build().map_err(mesoflow::Error::Precondition)
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule.unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
pub struct ParsedConfig {
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
}

fn take<T: DeserializeOwned>(map: &mut Map<String, Value>, key: &str, errors: &mut Vec<String>) -> Option<T> {
    let v = map.remove(key)?;
    serde_json::from_value(v).map_err(|e| errors.push(format!("{key}: {e}"))).ok()
}

pub fn parse_config(path: &Path, model: Option<ModelKind>) -> Result<ParsedConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
    parse_config_str(&text, model)
}

/// Parses and validates; on failure every detected problem is reported.
pub fn parse_config_str(text: &str, model: Option<ModelKind>) -> Result<ParsedConfig, CliError> {
    let root: Value = serde_json::from_str(text).map_err(|e| CliError::Config(vec![format!("malformed JSON: {e}")]))?;
    let Value::Object(mut map) = root else {
        return Err(CliError::Config(vec!["configuration must be a JSON object".into()]));
    };
    let mut errors = Vec::new();
    let mut warnings = Vec::new();

    let declared: Option<ModelKind> = take(&mut map, "model", &mut errors);
    let model = match (model, declared) {
        (Some(a), Some(b)) if a != b => {
            errors.push(format!("config declares model {} but {} was requested", b.name(), a.name()));
            a
        }
        (Some(a), _) | (None, Some(a)) => a,
        (None, None) => {
            errors.push("missing field `model`".into());
            return Err(CliError::Config(errors));
        }
    };

    for key in map.keys() {
        if !ALL_KEYS.contains(&key.as_str()) {
            warnings.push(format!("unknown key `{key}` ignored"));
        } else if !matches!(key.as_str(), "params" | "output" | "threads") && !model.keys().contains(&key.as_str()) {
            warnings.push(format!("key `{key}` is not used by model {}", model.name()));
        }
    }
    let wants = |k: &str| model.keys().contains(&k);

    let params_in: Option<ParamsInput> = take(&mut map, "params", &mut errors);
    if params_in.is_none() && !errors.iter().any(|e| e.starts_with("params")) {
        errors.push("missing field `params`".into());
    }
    let output: Option<PathBuf> = take(&mut map, "output", &mut errors);
    let threads: Option<usize> = take(&mut map, "threads", &mut errors);
    if threads == Some(0) {
        errors.push("threads must be positive".into());
    }

    let mesh_cfg = if model.on_grid() {
        Some(take::<MeshConfig>(&mut map, "mesh", &mut errors).unwrap_or_default().resolved())
    } else {
        None
    };
    let mesh = mesh_cfg.as_ref().and_then(|m| m.build().map_err(|e| errors.push(format!("mesh: {e}"))).ok());
    let dim = mesh.as_ref().map_or(2, |m| m.dim);

    let params = params_in.map(|p| {
        let d = p.dim.unwrap_or(dim);
        if model.on_grid() && d != dim {
            errors.push(format!("params.dim = {d} does not match the mesh dimension {dim}"));
        }
        ModelParams { gamma: p.gamma, nu: p.nu, r: p.r, dim: d }
    });
    if let Some(p) = &params {
        errors.extend(p.violations());
        model_param_checks(model, p, &mut errors);
    }

    let source = if model.on_grid() {
        let s: SourceConfig = take(&mut map, "source", &mut errors).unwrap_or_default();
        if let Some(m) = &mesh {
            errors.extend(s.violations(m));
        }
        Some(s)
    } else {
        None
    };

    let schedule = if model.is_flow() {
        let s: ScheduleInput = take(&mut map, "schedule", &mut errors).unwrap_or(ScheduleInput {
            dt: default_dt(),
            steps: default_steps(),
            output_every: 0,
            dissipation_tol: default_dissipation_tol(),
        });
        let s = Schedule { dt: s.dt, steps: s.steps, output_every: s.output_every, dissipation_tol: s.dissipation_tol };
        errors.extend(s.violations());
        Some(s)
    } else {
        None
    };

    let seed = if wants("seed") { Some(take(&mut map, "seed", &mut errors).unwrap_or(0)) } else { None };

    let initial = match model {
        ModelKind::Reduced | ModelKind::Full | ModelKind::FisherRao => {
            let spec = take(&mut map, "initial", &mut errors).unwrap_or(InitialSpec::Uniform { n: 200, scale: 0.5 });
            if let InitialSpec::Monokinetic { c0, .. } = &spec {
                if c0.dim() != dim {
                    errors.push(format!("initial.c0 must be a {dim}x{dim} tensor"));
                }
            }
            Some(InitialConfig::Particles(spec))
        }
        ModelKind::Monokinetic => {
            let init = take(&mut map, "initial", &mut errors)
                .unwrap_or(MonokineticInit { c0: SymTensor::identity(dim).scaled(0.5) });
            if init.c0.dim() != dim {
                errors.push(format!("initial.c0 must be a {dim}x{dim} tensor"));
            }
            Some(InitialConfig::Monokinetic(init))
        }
        ModelKind::Scalar => {
            let init = take(&mut map, "initial", &mut errors).unwrap_or(ScalarInit { n: default_atoms(), scale: half() });
            if init.n == 0 || !(init.scale >= 0.0) {
                errors.push("initial needs n > 0 and scale >= 0".into());
            }
            Some(InitialConfig::Scalar(init))
        }
        _ => None,
    };

    let graph = match model {
        ModelKind::Discrete => take::<DiscreteGraph>(&mut map, "graph", &mut errors).map(|g| {
            if let Err(e) = g.validate() {
                errors.push(format!("graph: {e}"));
            }
            GraphConfig::Discrete(g)
        }),
        ModelKind::Semidiscrete => take::<MetricGraph>(&mut map, "graph", &mut errors).map(|g| {
            errors.extend(g.violations().into_iter().map(|e| format!("graph: {e}")));
            GraphConfig::Metric(g)
        }),
        _ => None,
    };
    if matches!(model, ModelKind::Discrete | ModelKind::Semidiscrete) && graph.is_none() && !errors.iter().any(|e| e.starts_with("graph")) {
        errors.push("missing field `graph`".into());
    }

    let density = if wants("density") {
        let d: DensityConfig = take(&mut map, "density", &mut errors).unwrap_or_default();
        if let Some(m) = &mesh {
            if let Err(e) = d.build(m).validate(m) {
                errors.push(format!("density: {e}"));
            }
        }
        Some(d)
    } else {
        None
    };

    let angular = if wants("angular") {
        let a: AngularConfig = take(&mut map, "angular", &mut errors).unwrap_or_default();
        if let Some(m) = &mesh {
            if let Err(e) = a.build(m).validate(m) {
                errors.push(format!("angular: {e}"));
            }
        }
        Some(a)
    } else {
        None
    };

    let spec = if wants("spec") {
        let s: Option<StationaryMeasureSpec> = take(&mut map, "spec", &mut errors);
        match &s {
            Some(s) => {
                if let Err(e) = s.validate(dim) {
                    errors.push(format!("spec: {e}"));
                }
                if let Some(m) = &mesh {
                    if let Some(i) = (0..s.atoms.len()).find(|&i| !m.contains(&s.position(i))) {
                        errors.push(format!("spec: atom {i} lies outside the domain"));
                    }
                }
            }
            None if !errors.iter().any(|e| e.starts_with("spec")) => errors.push("missing field `spec`".into()),
            None => {}
        }
        s
    } else {
        None
    };

    match params {
        Some(params) if errors.is_empty() => Ok(ParsedConfig {
            config: ExperimentConfig {
                model,
                params,
                seed,
                mesh: mesh_cfg,
                source,
                schedule,
                initial,
                graph,
                density,
                angular,
                spec,
                output,
                threads,
            },
            warnings,
        }),
        _ => Err(CliError::Config(errors)),
    }
}

fn model_param_checks(model: ModelKind, p: &ModelParams, errors: &mut Vec<String>) {
    let needs_r = matches!(
        model,
        ModelKind::Reduced
            | ModelKind::Full
            | ModelKind::Monokinetic
            | ModelKind::Scalar
            | ModelKind::FisherRao
            | ModelKind::StationaryGamma1
            | ModelKind::StationaryScalar
            | ModelKind::StationaryFr
    );
    if needs_r && !(p.r > 0.0) {
        errors.push(format!("r must be positive for model {}", model.name()));
    }
    match model {
        ModelKind::StationaryGamma1 => {
            if p.gamma != 1.0 {
                errors.push("model stationary-gamma1 needs gamma = 1".into());
            }
            if !(p.nu > 0.0) {
                errors.push("model stationary-gamma1 needs nu > 0".into());
            }
        }
        ModelKind::StationaryScalar | ModelKind::StationaryFr if !(p.gamma > 1.0) => {
            errors.push(format!("model {} needs gamma > 1", model.name()));
        }
        _ => {}
    }
}
