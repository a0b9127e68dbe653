//! Command-line front end: one binary, six subcommands, one JSON config.
//!
//! Every command is a pure function of its configuration: it reads the
//! config (plus any artifacts earlier commands produced), computes, and
//! stages all of its output files in one transaction. Exit code 0 means
//! every output was fully written; on any failure the staged files are
//! removed, so a failing command never leaves partial artifacts.
//!
//! The pipeline order is gen-data (optional, synthetic export), then
//! train-teacher, then train-student, then any of eval / diagnose /
//! energy against the student checkpoint.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{DataConfig, RunConfig, SCHEMA_HELP};
use crate::data::{gen_synthetic, render_csv, Dataset, Split, SyntheticSpec};
use crate::diagnostics::{
    render_diagnostics, render_logit_heatmap, run_diagnostics, temporal_accuracy_report,
    TemporalAccuracyReport,
};
use crate::distill::{ElaVariant, Method, StaVariant, TeacherLogits};
use crate::energy::{energy_report, render_energy};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, fmt_f64_array, AtomicSet};
use crate::network::SpikingNet;
use crate::rng::{substream_rng, Stream};
use crate::teacher::{
    dataset_logits, import_teacher_logits, mlp_accuracy, render_teacher_logits, train_teacher, Mlp,
};
use crate::train::{encode_dataset, evaluate_epoch, render_metrics, train_student, EpochMetrics};

#[derive(Debug, Parser)]
#[command(
    name = "spikedistill",
    version,
    about = "Train and analyze spiking-network distillation runs",
    after_long_help = SCHEMA_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Export the synthetic dataset as train/test CSVs plus a manifest.
    GenData(CommonArgs),
    /// Train the dense teacher; write its checkpoint, logits, and accuracy.
    TrainTeacher(CommonArgs),
    /// Train the spiking student under the configured objective.
    TrainStudent(CommonArgs),
    /// Evaluate the student checkpoint: loss terms and temporal accuracy.
    Eval(CommonArgs),
    /// Probe objective gradients at erroneous, weak, and correct timesteps.
    Diagnose(CommonArgs),
    /// Estimate synaptic-operation energy over the test split.
    Energy(CommonArgs),
}

/// Flags shared by every subcommand: the config file plus the small set
/// of overrides that make seed and method sweeps scriptable without
/// editing the manifest.
#[derive(Debug, Args)]
struct CommonArgs {
    /// Run configuration JSON file.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Override distill.method (ce-only | timestep-kd | ela | sta | uta | seal).
    #[arg(long, value_name = "NAME")]
    method: Option<String>,
    /// Override distill.ela_variant (ours | S | A | AS | Both).
    #[arg(long, value_name = "NAME")]
    ela_variant: Option<String>,
    /// Override distill.sta_variant (ours | no-conf | no-sim | dist).
    #[arg(long, value_name = "NAME")]
    sta_variant: Option<String>,
    /// Override paths.out_dir.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

/// Process entry point: parse, dispatch, report written files on stdout
/// and the failure on stderr.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(written) => {
            for path in written {
                println!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: &Command) -> Result<Vec<PathBuf>> {
    match command {
        Command::GenData(args) => cmd_gen_data(&configure(args)?),
        Command::TrainTeacher(args) => cmd_train_teacher(&configure(args)?),
        Command::TrainStudent(args) => cmd_train_student(&configure(args)?),
        Command::Eval(args) => cmd_eval(&configure(args)?),
        Command::Diagnose(args) => cmd_diagnose(&configure(args)?),
        Command::Energy(args) => cmd_energy(&configure(args)?),
    }
}

/// Loads the config file, applies command-line overrides, re-validates.
fn configure(args: &CommonArgs) -> Result<RunConfig> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(name) = &args.method {
        config.distill.method = Method::parse(name)?;
    }
    if let Some(name) = &args.ela_variant {
        config.distill.ela_variant = ElaVariant::parse(name)?;
    }
    if let Some(name) = &args.sta_variant {
        config.distill.sta_variant = StaVariant::parse(name)?;
    }
    if let Some(dir) = &args.out {
        config.paths.out_dir = dir.clone();
    }
    config.validate()?;
    Ok(config)
}

/// Transactional output writer: all files stage first and rename together,
/// so either every path in the returned list exists or none were touched.
struct OutputSet {
    set: AtomicSet,
    paths: Vec<PathBuf>,
}

impl OutputSet {
    fn create(config: &RunConfig) -> Result<OutputSet> {
        fs::create_dir_all(&config.paths.out_dir)?;
        Ok(OutputSet {
            set: AtomicSet::new(),
            paths: Vec::new(),
        })
    }

    fn stage(&mut self, path: PathBuf, contents: &str) -> Result<()> {
        self.set.stage(&path, contents)?;
        self.paths.push(path);
        Ok(())
    }

    fn commit(self) -> Result<Vec<PathBuf>> {
        self.set.commit()?;
        Ok(self.paths)
    }
}

/// Writes train.csv, test.csv, and a provenance manifest. Synthetic mode
/// only: csv mode means the data already exists outside this tool.
pub fn cmd_gen_data(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let spec = match &config.data {
        DataConfig::Synthetic(spec) => spec,
        DataConfig::Csv { .. } => {
            return Err(Error::invalid(
                "gen-data needs data.synthetic; csv datasets are supplied externally",
            ))
        }
    };
    let (train, test) = gen_synthetic(spec, config.seed)?;
    let mut out = OutputSet::create(config)?;
    out.stage(config.paths.train_csv(), &render_csv(&train))?;
    out.stage(config.paths.test_csv(), &render_csv(&test))?;
    out.stage(
        config.paths.manifest(),
        &render_manifest(spec, config.seed, &train, &test),
    )?;
    out.commit()
}

fn render_manifest(spec: &SyntheticSpec, seed: u64, train: &Dataset, test: &Dataset) -> String {
    format!(
        "{{\"format\":\"dataset-manifest-v1\",\"seed\":{},\"classes\":{},\"dimension\":{},\
         \"samples_per_class\":{},\"spread\":{},\"train_rows\":{},\"test_rows\":{},\
         \"train_csv\":\"train.csv\",\"test_csv\":\"test.csv\"}}\n",
        seed,
        spec.classes,
        spec.dimension,
        spec.samples_per_class,
        fmt_f64(spec.spread),
        train.len(),
        test.len()
    )
}

/// Trains the dense teacher on the train split and writes its checkpoint,
/// per-sample train-split logits, and a one-line accuracy summary.
pub fn cmd_train_teacher(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let (train, test) = config.resolve_datasets()?;
    let arts = train_teacher(&train, &config.teacher.plan, &config.teacher.hidden, config.seed)?;
    let summary = format!(
        "{{\"epochs\":{},\"train_accuracy\":{},\"test_accuracy\":{}}}\n",
        config.teacher.plan.epochs,
        fmt_f64(mlp_accuracy(&arts.net, &train)?),
        fmt_f64(mlp_accuracy(&arts.net, &test)?)
    );
    let mut out = OutputSet::create(config)?;
    out.stage(config.paths.teacher_net(), &arts.net.to_json())?;
    out.stage(config.paths.teacher_logits(), &render_teacher_logits(&arts.logits))?;
    out.stage(config.paths.teacher_metrics(), &summary)?;
    out.commit()
}

/// Trains the spiking student and writes its checkpoint plus per-epoch
/// metrics. Methods other than ce-only require the exported teacher
/// logits; a missing file aborts before any training work.
pub fn cmd_train_student(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let train = config.dataset_for(Split::Train)?;
    let teacher = teacher_logits_for_training(config)?;
    let dims = config.network.dims(train.dim(), train.classes());
    let mut init_rng = substream_rng(config.seed, Stream::StudentInit, 0);
    let net = SpikingNet::random(
        &dims,
        config.network.lif,
        config.network.timesteps,
        config.network.init_scale,
        &mut init_rng,
    )?;
    let arts = train_student(
        net,
        &train,
        teacher.as_deref(),
        &config.student.plan,
        &config.distill,
        config.network.encoder,
        config.seed,
    )?;
    let mut out = OutputSet::create(config)?;
    out.stage(config.paths.student_net(), &arts.net.to_json()?)?;
    out.stage(config.paths.student_metrics(), &render_metrics(&arts.metrics))?;
    out.commit()
}

fn teacher_logits_for_training(config: &RunConfig) -> Result<Option<Vec<TeacherLogits>>> {
    if config.distill.method == Method::CeOnly {
        return Ok(None);
    }
    let path = config.paths.teacher_logits();
    if !path.exists() {
        return Err(Error::invalid(format!(
            "method {} needs teacher logits, but {} does not exist; run train-teacher first",
            config.distill.method.as_str(),
            path.display()
        )));
    }
    Ok(Some(import_teacher_logits(&path)?))
}

/// Teacher logits for a report split. The exported JSONL covers only the
/// train split, so reports recompute logits from the teacher checkpoint;
/// the forward math is identical, making this exact for either split.
fn teacher_logits_for_report(
    config: &RunConfig,
    dataset: &Dataset,
) -> Result<Option<Vec<TeacherLogits>>> {
    if config.distill.method == Method::CeOnly {
        return Ok(None);
    }
    let path = config.paths.teacher_net();
    if !path.exists() {
        return Err(Error::invalid(format!(
            "method {} needs the teacher checkpoint, but {} does not exist; \
             run train-teacher first",
            config.distill.method.as_str(),
            path.display()
        )));
    }
    let teacher = Mlp::load(&path)?;
    Ok(Some(dataset_logits(&teacher, dataset)?))
}

/// Loads the student checkpoint and rejects any mismatch against the
/// configured architecture or dataset: a checkpoint from a different
/// config would silently change what a report means.
fn load_student(config: &RunConfig, dataset: &Dataset) -> Result<SpikingNet> {
    let path = config.paths.student_net();
    if !path.exists() {
        return Err(Error::invalid(format!(
            "student checkpoint {} does not exist; run train-student first",
            path.display()
        )));
    }
    let net = SpikingNet::load(&path)?;
    if net.input_dim() != dataset.dim() || net.classes() != dataset.classes() {
        return Err(Error::invalid(format!(
            "checkpoint maps {} -> {} but the dataset needs {} -> {}",
            net.input_dim(),
            net.classes(),
            dataset.dim(),
            dataset.classes()
        )));
    }
    if net.timesteps != config.network.timesteps || net.hidden_widths() != config.network.hidden {
        return Err(Error::invalid(format!(
            "checkpoint has hidden {:?} over {} timesteps but the config says {:?} over {}",
            net.hidden_widths(),
            net.timesteps,
            config.network.hidden,
            config.network.timesteps
        )));
    }
    Ok(net)
}

/// Evaluates the student checkpoint on the configured split: objective
/// term values plus the temporal accuracy report, one JSON object.
pub fn cmd_eval(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let dataset = config.dataset_for(config.eval.split)?;
    let net = load_student(config, &dataset)?;
    let teacher = teacher_logits_for_report(config, &dataset)?;
    let encoded = encode_dataset(&dataset, config.network.encoder, net.timesteps, config.seed)?;
    let metrics = evaluate_epoch(&net, &dataset, &encoded, teacher.as_deref(), &config.distill, 0)?;
    let outputs = encoded
        .iter()
        .map(|input| Ok(net.forward(input)?.logits))
        .collect::<Result<Vec<_>>>()?;
    let temporal = temporal_accuracy_report(&outputs, dataset.labels())?;
    let mut out = OutputSet::create(config)?;
    out.stage(
        config.paths.eval_report(),
        &render_eval(config.eval.split, dataset.len(), &metrics, &temporal),
    )?;
    out.commit()
}

fn render_eval(
    split: Split,
    samples: usize,
    metrics: &EpochMetrics,
    temporal: &TemporalAccuracyReport,
) -> String {
    let split = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let histogram: Vec<String> = temporal
        .correct_timestep_histogram
        .iter()
        .map(|c| c.to_string())
        .collect();
    format!(
        "{{\"split\":\"{}\",\"samples\":{},\"total_loss\":{},\"cls_loss\":{},\"kd_loss\":{},\
         \"ela_loss\":{},\"sta_loss\":{},\"per_timestep_accuracy\":{},\
         \"aggregated_accuracy\":{},\"correct_timestep_histogram\":[{}],\
         \"fraction_correct_with_errors\":{}}}\n",
        split,
        samples,
        fmt_f64(metrics.total_loss),
        fmt_f64(metrics.cls_loss),
        fmt_f64(metrics.kd_loss),
        fmt_f64(metrics.ela_loss),
        fmt_f64(metrics.sta_loss),
        fmt_f64_array(&metrics.per_timestep_accuracy),
        fmt_f64(metrics.aggregated_accuracy),
        histogram.join(","),
        fmt_f64(temporal.fraction_correct_with_errors())
    )
}

/// Emits the gradient-probe report and, when configured, one sample's
/// per-timestep logit heatmap CSV.
pub fn cmd_diagnose(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let dataset = config.dataset_for(config.diagnostics.split)?;
    let net = load_student(config, &dataset)?;
    let teacher = teacher_logits_for_report(config, &dataset)?;
    let report = run_diagnostics(
        &net,
        &dataset,
        teacher.as_deref(),
        &config.distill,
        config.network.encoder,
        config.diagnostics.samples,
        config.seed,
    )?;
    let mut out = OutputSet::create(config)?;
    out.stage(config.paths.diagnostics_report(), &render_diagnostics(&report))?;
    if let Some(index) = config.diagnostics.heatmap_sample {
        if index >= dataset.len() {
            return Err(Error::invalid(format!(
                "diagnostics.heatmap_sample {} out of range for {} samples",
                index,
                dataset.len()
            )));
        }
        let encoded = encode_dataset(&dataset, config.network.encoder, net.timesteps, config.seed)?;
        let record = net.forward(&encoded[index])?;
        out.stage(config.paths.heatmap(), &render_logit_heatmap(&record.logits))?;
    }
    out.commit()
}

/// Estimates synaptic-operation energy for the student on the test split.
pub fn cmd_energy(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let dataset = config.dataset_for(Split::Test)?;
    let net = load_student(config, &dataset)?;
    let report = energy_report(&net, &dataset, config.network.encoder, &config.energy, config.seed)?;
    let mut out = OutputSet::create(config)?;
    out.stage(config.paths.energy_report(), &render_energy(&report))?;
    out.commit()
}
