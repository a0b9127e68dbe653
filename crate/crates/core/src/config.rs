//! Run configuration: one strict JSON file drives every command.
//!
//! The file is a single object. Unknown keys are rejected at every level,
//! `seed` and `data` are mandatory, and everything else falls back to the
//! defaults listed in [`SCHEMA_HELP`]. A run is a pure function of the
//! parsed configuration: no command reads state outside the files the
//! configuration names.
//!
//! Top-level sections:
//! - `seed`: the run seed every random stream derives from (required).
//! - `data`: `{"synthetic": {...}}` or `{"csv": {"train": ..., "test": ...}}`
//!   (required).
//! - `paths`: output directory; artifact names inside it are fixed.
//! - `network`: student architecture, input encoding, neuron parameters.
//! - `teacher` / `student`: hidden widths and optimization plans.
//! - `distill`: objective selector, term weights, temperatures, variants.
//! - `eval` / `diagnostics` / `energy`: report settings.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::{gen_synthetic, load_csv, Dataset, Split, SyntheticSpec};
use crate::distill::DistillConfig;
use crate::energy::EnergyModel;
use crate::error::{Error, Result};
use crate::io::read_file;
use crate::lif::LifParams;
use crate::network::Encoder;
use crate::optim::TrainPlan;

/// Configuration key reference rendered into `--help`. One line per key:
/// name, type, default. Kept next to the types it documents so the two
/// cannot drift silently.
pub const SCHEMA_HELP: &str = "\
Configuration file keys (strict JSON; unknown keys are fatal):
  seed                          u64      required; all randomness derives from it
  data                          object   required; exactly one of:
    data.synthetic.classes          u64      required; >= 2
    data.synthetic.dimension        u64      required; >= 1
    data.synthetic.samples_per_class u64     40; per class, per split
    data.synthetic.spread           f64      0.35; cluster standard deviation
    data.csv.train                  path     required in csv mode
    data.csv.test                   path     required in csv mode
  paths.out_dir                 path     \"out\"; artifact file names are fixed
  network.hidden                [u64]    [32]; spiking hidden-layer widths
  network.timesteps             u64      4; simulation steps T
  network.encoder               string   \"constant\" | \"rate\"
  network.init_scale            f64      1.0; uniform init bound scale
  network.lif.leak_alpha        f64      0.5; membrane leak in [0, 1]
  network.lif.v_threshold       f64      1.0; firing threshold > 0
  network.lif.surrogate_width   f64      1.0; rectangular surrogate window
  teacher.hidden                [u64]    [64]; relu hidden-layer widths
  teacher.plan.epochs           u64      40
  teacher.plan.batch_size       u64      16
  teacher.plan.learning_rate    f64      0.1
  teacher.plan.momentum         f64      0.9
  teacher.plan.weight_decay     f64      0.0
  teacher.plan.cosine_schedule  bool     true
  student.plan.epochs           u64      30
  student.plan.batch_size       u64      16
  student.plan.learning_rate    f64      0.2
  student.plan.momentum         f64      0.9
  student.plan.weight_decay     f64      0.0
  student.plan.cosine_schedule  bool     true
  distill.method                string   \"seal\"; ce-only | timestep-kd | ela | sta | uta | seal
  distill.ela_variant           string   \"ours\"; ours | S | A | AS | Both
  distill.sta_variant           string   \"ours\"; ours | no-conf | no-sim | dist
  distill.temperature           f64      4.0; teacher-student softmax temperature
  distill.cls_temperature       f64      1.0; classification softmax temperature
  distill.sta_temperature       f64      1.0; temporal-term softmax temperature
  distill.lambda_kd             f64      1.0; kd term weight
  distill.alpha_ela             f64      0.6; ela term weight
  distill.beta_sta              f64      0.15; sta/uta term weight
  eval.split                    string   \"test\"; train | test
  diagnostics.samples           u64      5; rows sampled for gradient probes
  diagnostics.split             string   \"test\"; train | test
  diagnostics.heatmap_sample    u64      absent; sample index for the logit heatmap CSV
  energy.e_ac                   f64      0.9; picojoules per accumulate
  energy.e_mac                  f64      4.6; picojoules per multiply-accumulate

Output files, all under paths.out_dir:
  gen-data       train.csv, test.csv, manifest.json
  train-teacher  teacher.json, teacher_logits.jsonl, teacher_metrics.jsonl
  train-student  student.json, student_metrics.jsonl
  eval           eval.json
  diagnose       diagnostics.jsonl [, heatmap.csv]
  energy         energy.json";

/// Where a run's train and test datasets come from.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Deterministic Gaussian clusters regenerated from the run seed;
    /// `gen-data` exports the same rows as CSV for outside use.
    Synthetic(SyntheticSpec),
    /// External CSV files (`features..., label` rows).
    Csv { train: PathBuf, test: PathBuf },
}

/// Output directory. Artifact names inside it are fixed so that commands
/// compose without path plumbing: each consumer knows exactly where a
/// producer left its output.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: default_out_dir(),
        }
    }
}

impl PathsConfig {
    pub fn train_csv(&self) -> PathBuf {
        self.out_dir.join("train.csv")
    }

    pub fn test_csv(&self) -> PathBuf {
        self.out_dir.join("test.csv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.out_dir.join("manifest.json")
    }

    pub fn teacher_net(&self) -> PathBuf {
        self.out_dir.join("teacher.json")
    }

    pub fn teacher_logits(&self) -> PathBuf {
        self.out_dir.join("teacher_logits.jsonl")
    }

    pub fn teacher_metrics(&self) -> PathBuf {
        self.out_dir.join("teacher_metrics.jsonl")
    }

    pub fn student_net(&self) -> PathBuf {
        self.out_dir.join("student.json")
    }

    pub fn student_metrics(&self) -> PathBuf {
        self.out_dir.join("student_metrics.jsonl")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.out_dir.join("eval.json")
    }

    pub fn diagnostics_report(&self) -> PathBuf {
        self.out_dir.join("diagnostics.jsonl")
    }

    pub fn heatmap(&self) -> PathBuf {
        self.out_dir.join("heatmap.csv")
    }

    pub fn energy_report(&self) -> PathBuf {
        self.out_dir.join("energy.json")
    }
}

/// Student network architecture and input encoding.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Spiking hidden-layer widths; at least one layer.
    #[serde(default = "default_student_hidden")]
    pub hidden: Vec<usize>,
    /// Simulation steps per sample.
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
    #[serde(default = "default_encoder")]
    pub encoder: Encoder,
    /// Scale on the fan-in-normalized uniform init bound.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub lif: LifParams,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden: default_student_hidden(),
            timesteps: default_timesteps(),
            encoder: default_encoder(),
            init_scale: default_init_scale(),
            lif: LifParams::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::invalid("network.hidden needs at least one layer"));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid("network.hidden widths must be >= 1"));
        }
        if self.timesteps == 0 {
            return Err(Error::invalid("network.timesteps must be >= 1"));
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return Err(Error::invalid(format!(
                "network.init_scale {} must be finite and > 0",
                self.init_scale
            )));
        }
        self.lif.validate()
    }

    /// Full dimension chain for a dataset: input, hidden..., classes.
    pub fn dims(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(&self.hidden);
        dims.push(classes);
        dims
    }
}

/// Dense teacher settings. An empty `hidden` list is allowed and gives a
/// linear softmax classifier.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    #[serde(default = "default_teacher_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_teacher_plan")]
    pub plan: TrainPlan,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            hidden: default_teacher_hidden(),
            plan: default_teacher_plan(),
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid("teacher.hidden widths must be >= 1"));
        }
        self.plan.validate_fields()
    }
}

/// Spiking student optimization settings.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    #[serde(default = "default_student_plan")]
    pub plan: TrainPlan,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            plan: default_student_plan(),
        }
    }
}

/// Evaluation report settings.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_report_split")]
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: default_report_split(),
        }
    }
}

/// Gradient-probe diagnostics settings.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Rows sampled for the per-sample gradient probes. The temporal
    /// accuracy report always covers the whole split.
    #[serde(default = "default_diag_samples")]
    pub samples: usize,
    #[serde(default = "default_report_split")]
    pub split: Split,
    /// When set, also export this sample's per-timestep logits as CSV.
    #[serde(default)]
    pub heatmap_sample: Option<usize>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            samples: default_diag_samples(),
            split: default_report_split(),
            heatmap_sample: None,
        }
    }
}

impl DiagnosticsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::invalid("diagnostics.samples must be >= 1"));
        }
        Ok(())
    }
}

/// The whole run manifest. See [`SCHEMA_HELP`] for every key and default.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub student: StudentConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub energy: EnergyModel,
}

impl RunConfig {
    /// Strict parse; `origin` names the source in errors.
    pub fn parse(text: &str, origin: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::Json {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    /// Reads, parses, and validates a configuration file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = read_file(path)?;
        let config = RunConfig::parse(&text, &path.display().to_string())?;
        config.validate()?;
        Ok(config)
    }

    /// Field validation across all sections. Called again after command
    /// line overrides, which can change `distill` and `paths`.
    pub fn validate(&self) -> Result<()> {
        if let DataConfig::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        self.network.validate()?;
        self.teacher.validate()?;
        self.student.plan.validate_fields()?;
        self.distill.validate()?;
        self.diagnostics.validate()?;
        self.energy.validate()
    }

    /// Materializes the train and test datasets. Synthetic data is
    /// regenerated from the seed, never read back from the exported CSVs,
    /// so a run is a pure function of its configuration; `csv` mode is the
    /// path for external data.
    pub fn resolve_datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataConfig::Synthetic(spec) => gen_synthetic(spec, self.seed),
            DataConfig::Csv { train, test } => {
                Ok((load_csv(train, Split::Train)?, load_csv(test, Split::Test)?))
            }
        }
    }

    /// Materializes only the dataset for `split`.
    pub fn dataset_for(&self, split: Split) -> Result<Dataset> {
        match &self.data {
            DataConfig::Synthetic(spec) => {
                let (train, test) = gen_synthetic(spec, self.seed)?;
                Ok(match split {
                    Split::Train => train,
                    Split::Test => test,
                })
            }
            DataConfig::Csv { train, test } => match split {
                Split::Train => load_csv(train, Split::Train),
                Split::Test => load_csv(test, Split::Test),
            },
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_student_hidden() -> Vec<usize> {
    vec![32]
}
fn default_timesteps() -> usize {
    4
}
fn default_encoder() -> Encoder {
    Encoder::Constant
}
fn default_init_scale() -> f64 {
    1.0
}
fn default_teacher_hidden() -> Vec<usize> {
    vec![64]
}
fn default_teacher_plan() -> TrainPlan {
    TrainPlan {
        epochs: 40,
        batch_size: 16,
        learning_rate: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
        cosine_schedule: true,
    }
}
fn default_student_plan() -> TrainPlan {
    TrainPlan {
        epochs: 30,
        batch_size: 16,
        learning_rate: 0.2,
        momentum: 0.9,
        weight_decay: 0.0,
        cosine_schedule: true,
    }
}
fn default_report_split() -> Split {
    Split::Test
}
fn default_diag_samples() -> usize {
    5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::Method;

    const MINIMAL: &str = r#"{
        "seed": 7,
        "data": {"synthetic": {"classes": 3, "dimension": 4}}
    }"#;

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let cfg = RunConfig::parse(MINIMAL, "inline").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.paths.out_dir, PathBuf::from("out"));
        assert_eq!(cfg.network.hidden, vec![32]);
        assert_eq!(cfg.network.timesteps, 4);
        assert_eq!(cfg.network.encoder, Encoder::Constant);
        assert_eq!(cfg.teacher.hidden, vec![64]);
        assert_eq!(cfg.teacher.plan.epochs, 40);
        assert_eq!(cfg.student.plan.epochs, 30);
        assert_eq!(cfg.student.plan.learning_rate, 0.2);
        assert_eq!(cfg.distill.method, Method::Seal);
        assert_eq!(cfg.eval.split, Split::Test);
        assert_eq!(cfg.diagnostics.samples, 5);
        assert_eq!(cfg.diagnostics.heatmap_sample, None);
        assert_eq!(cfg.energy.e_ac, 0.9);
    }

    #[test]
    fn unknown_keys_are_fatal_at_every_level() {
        let top = r#"{"seed": 1, "data": {"synthetic": {"classes": 2, "dimension": 2}}, "extra": 1}"#;
        assert!(RunConfig::parse(top, "inline").is_err());
        let nested = r#"{"seed": 1, "data": {"synthetic": {"classes": 2, "dimension": 2, "oops": 3}}}"#;
        assert!(RunConfig::parse(nested, "inline").is_err());
        let section = r#"{"seed": 1, "data": {"synthetic": {"classes": 2, "dimension": 2}},
                          "network": {"hiden": [8]}}"#;
        assert!(RunConfig::parse(section, "inline").is_err());
        let plan = r#"{"seed": 1, "data": {"synthetic": {"classes": 2, "dimension": 2}},
                       "student": {"plan": {"epochs": 1, "lr": 0.1}}}"#;
        assert!(RunConfig::parse(plan, "inline").is_err());
    }

    #[test]
    fn seed_and_data_are_mandatory() {
        assert!(RunConfig::parse(r#"{"data": {"synthetic": {"classes": 2, "dimension": 2}}}"#, "x")
            .is_err());
        assert!(RunConfig::parse(r#"{"seed": 1}"#, "x").is_err());
    }

    #[test]
    fn data_modes_are_mutually_exclusive() {
        let both = r#"{"seed": 1, "data": {"synthetic": {"classes": 2, "dimension": 2},
                       "csv": {"train": "a", "test": "b"}}}"#;
        assert!(RunConfig::parse(both, "inline").is_err());
        let csv = r#"{"seed": 1, "data": {"csv": {"train": "a.csv", "test": "b.csv"}}}"#;
        let cfg = RunConfig::parse(csv, "inline").unwrap();
        assert!(matches!(cfg.data, DataConfig::Csv { .. }));
    }

    #[test]
    fn validation_rejects_bad_sections() {
        let mut cfg = RunConfig::parse(MINIMAL, "inline").unwrap();
        cfg.network.timesteps = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::parse(MINIMAL, "inline").unwrap();
        cfg.network.hidden = vec![];
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::parse(MINIMAL, "inline").unwrap();
        cfg.diagnostics.samples = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::parse(MINIMAL, "inline").unwrap();
        cfg.student.plan.learning_rate = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn synthetic_datasets_regenerate_identically() {
        let cfg = RunConfig::parse(MINIMAL, "inline").unwrap();
        let (tr1, te1) = cfg.resolve_datasets().unwrap();
        let (tr2, te2) = cfg.resolve_datasets().unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);
        assert_eq!(tr1, cfg.dataset_for(Split::Train).unwrap());
        assert_eq!(te1, cfg.dataset_for(Split::Test).unwrap());
    }

    #[test]
    fn artifact_paths_live_under_out_dir() {
        let cfg = RunConfig::parse(MINIMAL, "inline").unwrap();
        for p in [
            cfg.paths.train_csv(),
            cfg.paths.test_csv(),
            cfg.paths.manifest(),
            cfg.paths.teacher_net(),
            cfg.paths.teacher_logits(),
            cfg.paths.teacher_metrics(),
            cfg.paths.student_net(),
            cfg.paths.student_metrics(),
            cfg.paths.eval_report(),
            cfg.paths.diagnostics_report(),
            cfg.paths.heatmap(),
            cfg.paths.energy_report(),
        ] {
            assert!(p.starts_with("out"), "{p:?} not under out_dir");
        }
    }

    #[test]
    fn schema_help_documents_every_section() {
        for key in [
            "seed", "data.synthetic", "data.csv", "paths.out_dir", "network.hidden",
            "network.lif", "teacher.plan", "student.plan", "distill.method", "eval.split",
            "diagnostics.samples", "energy.e_ac",
        ] {
            assert!(SCHEMA_HELP.contains(key), "schema help misses {key}");
        }
    }
}
