//! Experiment harness: run configuration files, the per-epoch metrics CSV,
//! run summaries, run comparison, and SVG learning curves.
//!
//! A run is reproducible from its config alone: equal configs (seeds
//! included) give byte-identical metrics files except for the timing
//! columns. The training loss reported each epoch always comes from a full
//! layer-serial forward pass of the current parameters, whatever mode
//! produced them.

use crate::data::{
    epoch_batches, gather, gen_dataset, load_csv, split_indices, AugmentKind, AugmentPolicy,
    AugmentRatio, DataKind, Dataset,
};
use crate::error::Error;
use crate::model::{ModelConfig, ResidualModel};
use crate::optim::{schedule_lr, LrSchedule, Momentum, SgdConfig};
use crate::parallel::{
    mean, AuxStorageStats, CouplingMode, ExecMode, LambdaStrategy, ParallelOptions,
    ParallelTrainer, PsiKind,
};
use crate::rng::SeededRng;
use crate::serial::{evaluate, train_epoch_serial};
use crate::speedup::{
    measure_phases, predict_speedup, serial_phases, speedup_upper_bound, PhaseTimings,
};
use crate::Result;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Serial,
    ParallelPenalty,
    ParallelAl,
    ParallelPenaltyAuxnet,
    ParallelPenaltyReauxnet,
}

impl Mode {
    pub fn is_parallel(self) -> bool {
        self != Mode::Serial
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Serial => "serial",
            Mode::ParallelPenalty => "parallel_penalty",
            Mode::ParallelAl => "parallel_al",
            Mode::ParallelPenaltyAuxnet => "parallel_penalty_auxnet",
            Mode::ParallelPenaltyReauxnet => "parallel_penalty_reauxnet",
        }
    }
}

fn d_blocks() -> usize {
    6
}
fn d_width() -> usize {
    8
}
fn d_hidden() -> usize {
    16
}
fn d_classes() -> usize {
    3
}
fn d_one() -> f64 {
    1.0
}
fn d_stages() -> usize {
    3
}
fn d_beta() -> f64 {
    100.0
}
fn d_psi() -> PsiKind {
    PsiKind::L2Squared
}
fn d_lr() -> f64 {
    0.1
}
fn d_sched() -> String {
    "cosine".to_string()
}
fn d_lr_factor() -> f64 {
    0.1
}
fn d_epochs() -> usize {
    40
}
fn d_batch() -> usize {
    64
}
fn d_noise_std() -> f64 {
    1e-3
}
fn d_one_usize() -> usize {
    1
}
fn d_dataset() -> DataKind {
    DataKind::Spirals
}
fn d_samples() -> usize {
    1000
}
fn d_dnoise() -> f64 {
    0.08
}
fn d_augment() -> String {
    "none".to_string()
}
fn d_train_frac() -> f64 {
    0.8
}
fn d_seed() -> u64 {
    7
}
fn d_out() -> String {
    "runs/run".to_string()
}
fn d_workers() -> ExecMode {
    ExecMode::Threads
}

/// One flat key/value file describes a whole run; see the README for the
/// schema. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    // model
    #[serde(default = "d_blocks")]
    pub blocks: usize,
    #[serde(default = "d_width")]
    pub width: usize,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_one")]
    pub residual_scale: f64,
    // partition and coupling
    #[serde(default = "d_stages")]
    pub stages: usize,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_one")]
    pub beta_step_factor: f64,
    #[serde(default)]
    pub beta_step_every: usize,
    /// Ceiling for the stepped beta schedule.
    #[serde(default)]
    pub beta_max: Option<f64>,
    #[serde(default = "d_psi")]
    pub psi: PsiKind,
    // optimization
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_sched")]
    pub lr_schedule: String,
    #[serde(default)]
    pub lr_step_milestones: Vec<usize>,
    #[serde(default = "d_lr_factor")]
    pub lr_step_factor: f64,
    #[serde(default)]
    pub lambda_lr: Option<f64>,
    /// Conditioning rule for the correction rate: lambda_lr = r / (2 beta),
    /// tracking the beta schedule. Mutually exclusive with `lambda_lr`.
    #[serde(default)]
    pub lambda_relaxation: Option<f64>,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_noise_std")]
    pub noise_std: f64,
    // auxiliary nets
    #[serde(default)]
    pub aux_hidden: Option<usize>,
    #[serde(default = "d_one_usize")]
    pub aux_blocks: usize,
    #[serde(default)]
    pub aux_lr: Option<f64>,
    #[serde(default = "d_one_usize")]
    pub distill_steps: usize,
    #[serde(default)]
    pub reaux_shared_prefix: bool,
    // data
    #[serde(default = "d_dataset")]
    pub dataset: DataKind,
    #[serde(default)]
    pub csv_path: Option<String>,
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default = "d_dnoise")]
    pub data_noise: f64,
    #[serde(default)]
    pub data_seed: Option<u64>,
    #[serde(default = "d_augment")]
    pub augment: String,
    #[serde(default)]
    pub augment_param: f64,
    #[serde(default)]
    pub augment_ratio: u32,
    #[serde(default)]
    pub augment_unbounded: bool,
    #[serde(default = "d_train_frac")]
    pub train_fraction: f64,
    // run
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_out")]
    pub out_dir: String,
    #[serde(default = "d_workers")]
    pub workers: ExecMode,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::parse(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 || self.width < 1 || self.hidden < 1 || self.classes < 2 {
            return Err(Error::input(
                "config: degenerate model dimensions".to_string(),
            ));
        }
        if self.stages < 1 || self.stages > self.blocks {
            return Err(Error::input(format!(
                "config: stages must be in 1..={}, got {}",
                self.blocks, self.stages
            )));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::input(
                "config: epochs and batch_size must be >= 1".to_string(),
            ));
        }
        if self.lr < 0.0 || self.beta <= 0.0 || self.beta_step_factor <= 0.0 {
            return Err(Error::input(
                "config: lr must be >= 0, beta factors > 0".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::input(
                "config: momentum must be in [0, 1)".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.train_fraction) || self.train_fraction <= 0.0 {
            return Err(Error::input(
                "config: train_fraction must be in (0, 1)".to_string(),
            ));
        }
        if self.mode == Mode::ParallelPenaltyReauxnet && self.stages < 2 {
            return Err(Error::input(
                "config: reaux mode needs stages >= 2".to_string(),
            ));
        }
        if self.lambda_lr.is_some() && self.lambda_relaxation.is_some() {
            return Err(Error::input(
                "config: lambda_lr and lambda_relaxation are mutually exclusive".to_string(),
            ));
        }
        if let Some(r) = self.lambda_relaxation {
            if r <= 0.0 {
                return Err(Error::input(
                    "config: lambda_relaxation must be > 0".to_string(),
                ));
            }
        }
        self.lr_schedule_enum()?;
        self.augment_kind()?;
        if self.dataset == DataKind::Csv && self.csv_path.is_none() {
            return Err(Error::input(
                "config: dataset = \"csv\" needs csv_path".to_string(),
            ));
        }
        Ok(())
    }

    pub fn lr_schedule_enum(&self) -> Result<LrSchedule> {
        match self.lr_schedule.as_str() {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            "step" => Ok(LrSchedule::Step {
                milestones: self.lr_step_milestones.clone(),
                factor: self.lr_step_factor,
            }),
            other => Err(Error::input(format!(
                "config: unknown lr_schedule {other:?}"
            ))),
        }
    }

    fn augment_kind(&self) -> Result<AugmentKind> {
        match self.augment.as_str() {
            "none" => Ok(AugmentKind::None),
            "gaussian_jitter" => Ok(AugmentKind::GaussianJitter {
                sigma: self.augment_param,
            }),
            "random_shift" => Ok(AugmentKind::RandomShift {
                max_offset: self.augment_param,
            }),
            "flip_sign" => Ok(AugmentKind::FlipSign {
                p: self.augment_param,
            }),
            other => Err(Error::input(format!(
                "config: unknown augment kind {other:?}"
            ))),
        }
    }

    pub fn augment_policy(&self) -> Result<AugmentPolicy> {
        let kind = self.augment_kind()?;
        let ratio = if self.augment_unbounded {
            AugmentRatio::Unbounded
        } else {
            AugmentRatio::Finite(self.augment_ratio)
        };
        let policy = AugmentPolicy {
            kind,
            ratio,
            seed: self.seed ^ 0xDA7A,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn build_dataset(&self) -> Result<Dataset> {
        match self.dataset {
            DataKind::Csv => load_csv(Path::new(self.csv_path.as_ref().unwrap())),
            kind => gen_dataset(
                kind,
                self.samples,
                self.classes,
                self.data_noise,
                self.data_seed.unwrap_or(self.seed),
            ),
        }
    }

    pub fn beta_at(&self, epoch: usize) -> f64 {
        let raw = match epoch.checked_div(self.beta_step_every) {
            None => self.beta,
            Some(steps) => self.beta * self.beta_step_factor.powi(steps as i32),
        };
        match self.beta_max {
            Some(cap) => raw.min(cap),
            None => raw,
        }
    }

    fn aux_hidden_or_default(&self) -> usize {
        self.aux_hidden.unwrap_or_else(|| (self.hidden / 2).max(1))
    }

    fn lambda_strategy(&self) -> Result<(CouplingMode, LambdaStrategy)> {
        let strategy = match self.mode {
            Mode::Serial => {
                return Err(Error::usage(
                    "serial mode has no lambda strategy".to_string(),
                ))
            }
            Mode::ParallelPenalty | Mode::ParallelAl => LambdaStrategy::Persistent,
            Mode::ParallelPenaltyAuxnet => LambdaStrategy::AuxNets {
                hidden: self.aux_hidden_or_default(),
                blocks: self.aux_blocks,
                lr: self.aux_lr,
                distill_steps: self.distill_steps,
            },
            Mode::ParallelPenaltyReauxnet => LambdaStrategy::ReAux {
                hidden: self.aux_hidden_or_default(),
                blocks: self.aux_blocks,
                lr: self.aux_lr,
                shared_prefix: self.reaux_shared_prefix,
            },
        };
        let mode = if self.mode == Mode::ParallelAl {
            CouplingMode::AugmentedLagrangian
        } else {
            CouplingMode::Penalty
        };
        Ok((mode, strategy))
    }
}

// ---------------------------------------------------------------------------
// Metrics file

pub const METRICS_HEADER: &str = "epoch,train_loss,test_accuracy,violation_mean,violation_max,\
distill_loss,lr,beta,t_data,t_forward,t_backward,t_psi,t_aux_forward,t_aux_backward,wall";

/// Columns before the timing block; these must be byte-identical across
/// reruns of the same config.
pub const NON_TIMING_COLUMNS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub violation_mean: f64,
    pub violation_max: f64,
    pub distill_loss: f64,
    pub lr: f64,
    pub beta: f64,
    pub phases: PhaseTimings,
    pub wall: f64,
}

impl EpochMetrics {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.test_accuracy,
            self.violation_mean,
            self.violation_max,
            self.distill_loss,
            self.lr,
            self.beta,
            self.phases.t_data,
            self.phases.t_forward,
            self.phases.t_backward,
            self.phases.t_psi,
            self.phases.t_aux_forward,
            self.phases.t_aux_backward,
            self.wall
        )
    }
}

struct MetricsWriter {
    file: std::fs::File,
}

impl MetricsWriter {
    fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{METRICS_HEADER}")?;
        file.flush()?;
        Ok(MetricsWriter { file })
    }

    /// Append-only; flushed per record so a crash loses at most one row.
    fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(self.file, "{}", m.csv_row())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Read a metrics file back. A truncated final record (abnormal termination)
/// is dropped; malformed interior records are errors.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(format!("{}: empty metrics file", path.display())))?;
    if header != METRICS_HEADER {
        return Err(Error::parse(format!(
            "{}: incompatible metrics schema",
            path.display()
        )));
    }
    let rows: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
    let mut out = Vec::with_capacity(rows.len());
    for (i, line) in rows.iter().enumerate() {
        match parse_metrics_row(line) {
            Ok(m) => out.push(m),
            Err(e) if i + 1 == rows.len() => {
                let _ = e; // truncated trailing record
                break;
            }
            Err(e) => {
                return Err(Error::parse(format!(
                    "{}: row {}: {e}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

fn parse_metrics_row(line: &str) -> Result<EpochMetrics> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 15 {
        return Err(Error::parse(format!(
            "expected 15 columns, got {}",
            fields.len()
        )));
    }
    let f = |i: usize| -> Result<f64> {
        fields[i]
            .parse()
            .map_err(|e| Error::parse(format!("column {i}: {e}")))
    };
    Ok(EpochMetrics {
        epoch: fields[0]
            .parse()
            .map_err(|e| Error::parse(format!("epoch: {e}")))?,
        train_loss: f(1)?,
        test_accuracy: f(2)?,
        violation_mean: f(3)?,
        violation_max: f(4)?,
        distill_loss: f(5)?,
        lr: f(6)?,
        beta: f(7)?,
        phases: PhaseTimings {
            t_data: f(8)?,
            t_forward: f(9)?,
            t_backward: f(10)?,
            t_psi: f(11)?,
            t_aux_forward: f(12)?,
            t_aux_backward: f(13)?,
        },
        wall: f(14)?,
    })
}

/// Byte equality of two metrics files over the non-timing columns.
pub fn metrics_equal_ignoring_timing(a: &Path, b: &Path) -> Result<bool> {
    let strip = |path: &Path| -> Result<Vec<String>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
        Ok(text
            .lines()
            .map(|l| {
                l.split(',')
                    .take(NON_TIMING_COLUMNS)
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect())
    };
    Ok(strip(a)? == strip(b)?)
}

// ---------------------------------------------------------------------------
// Run summaries

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub stages: usize,
    pub epochs: usize,
    pub seed: u64,
    pub param_count: usize,
    pub final_train_loss: f64,
    pub final_test_accuracy: f64,
    pub final_violation_mean: f64,
    pub final_distill_loss: f64,
    pub mean_epoch_wall: f64,
    pub mean_phases: PhaseTimings,
    pub predicted_speedup: Option<f64>,
    pub speedup_upper_bound: Option<f64>,
    pub aux_storage: Option<AuxStorageStats>,
}

impl RunSummary {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::parse(format!("summary serialization: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(format!("{}: {e}", path.display())))
    }
}

// ---------------------------------------------------------------------------
// Running experiments

/// Execute a configured run end to end: train, evaluate each epoch by a full
/// serial forward pass, stream metrics to `out_dir/metrics.csv`, and leave a
/// summary plus a final checkpoint behind.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(
        out_dir.join("config.toml"),
        toml::to_string_pretty(cfg).map_err(|e| Error::parse(format!("config echo: {e}")))?,
    )?;

    let ds = cfg.build_dataset()?;
    if ds.classes != cfg.classes {
        return Err(Error::input(format!(
            "config: classes = {} but the dataset has {}",
            cfg.classes, ds.classes
        )));
    }
    let (train_idx, test_idx) = split_indices(
        ds.len(),
        cfg.train_fraction,
        cfg.data_seed.unwrap_or(cfg.seed),
    );
    let (train_x, train_y) = gather(&ds, &train_idx);
    let (test_x, test_y) = gather(&ds, &test_idx);
    let policy = cfg.augment_policy()?;

    let model_cfg = ModelConfig {
        raw_dim: ds.raw_dim(),
        width: cfg.width,
        hidden: cfg.hidden,
        classes: cfg.classes,
        blocks: cfg.blocks,
        residual_scale: cfg.residual_scale,
    };
    let mut rng = SeededRng::derive(cfg.seed, &[0x0DE1]);
    let model = ResidualModel::init(model_cfg, &mut rng)?;
    let param_count = model.param_count();
    let schedule = cfg.lr_schedule_enum()?;

    let mut csv = MetricsWriter::create(&out_dir.join("metrics.csv"))?;
    let mut epochs_out: Vec<EpochMetrics> = Vec::with_capacity(cfg.epochs);
    let final_model: ResidualModel;
    let mut aux_storage = None;
    let mut aux_nets_for_ckpt = None;

    match cfg.mode {
        Mode::Serial => {
            let sgd = SgdConfig {
                eta0: cfg.lr,
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                schedule: schedule.clone(),
                momentum: cfg.momentum,
            };
            let mut m = model;
            let mut momentum = Momentum::matching(&m.tensors());
            for epoch in 0..cfg.epochs {
                let lr = schedule_lr(&schedule, cfg.lr, epoch, cfg.epochs)?;
                let report = train_epoch_serial(
                    &mut m,
                    &mut momentum,
                    &ds,
                    &train_idx,
                    &policy,
                    &sgd,
                    epoch,
                    lr,
                    cfg.seed,
                )?;
                let row = evaluate_epoch(
                    &m,
                    &train_x,
                    &train_y,
                    &test_x,
                    &test_y,
                    epoch,
                    lr,
                    cfg.beta,
                    Vec::new(),
                    Vec::new(),
                    serial_phases(report.t_data, report.t_forward, report.t_backward),
                    report.wall,
                )?;
                csv.append(&row)?;
                epochs_out.push(row);
            }
            final_model = m;
        }
        _ => {
            let (coupling, strategy) = cfg.lambda_strategy()?;
            let opts = ParallelOptions {
                mode: coupling,
                psi_kind: cfg.psi,
                beta: cfg.beta,
                lambda_lr: cfg.lambda_lr,
                noise_std: cfg.noise_std,
                momentum: cfg.momentum,
                exec: cfg.workers,
                seed: cfg.seed,
                strategy,
            };
            let mut trainer = ParallelTrainer::new(model, cfg.stages, opts)?;
            for epoch in 0..cfg.epochs {
                let epoch_start = Instant::now();
                let lr = schedule_lr(&schedule, cfg.lr, epoch, cfg.epochs)?;
                let beta = cfg.beta_at(epoch);
                trainer.set_beta(beta)?;
                if let Some(r) = cfg.lambda_relaxation {
                    trainer.set_lambda_lr(Some(r / (2.0 * beta)));
                }

                let t0 = Instant::now();
                let batches =
                    epoch_batches(&ds, &train_idx, &policy, epoch, cfg.batch_size, cfg.seed)?;
                let t_data = t0.elapsed().as_secs_f64();

                let mut timings = Vec::with_capacity(batches.len());
                let mut violations = Vec::new();
                let mut distills = Vec::new();
                for (step, batch) in batches.iter().enumerate() {
                    let m = trainer.train_step(batch, lr, epoch, step)?;
                    violations.extend_from_slice(&m.violations);
                    distills.extend_from_slice(&m.distill_losses);
                    timings.push(m.timings);
                }
                let mut phases = measure_phases(&timings, cfg.stages)?;
                phases.t_data = t_data;

                let snapshot = trainer.model()?;
                let row = evaluate_epoch(
                    &snapshot,
                    &train_x,
                    &train_y,
                    &test_x,
                    &test_y,
                    epoch,
                    lr,
                    trainer.beta(),
                    violations,
                    distills,
                    phases,
                    epoch_start.elapsed().as_secs_f64(),
                )?;
                csv.append(&row)?;
                epochs_out.push(row);
            }
            final_model = trainer.model()?;
            aux_storage = Some(trainer.aux_storage());
            aux_nets_for_ckpt = trainer.aux_nets().map(|n| n.to_vec());
        }
    }

    let mean_phases = mean_of_phases(&epochs_out);
    let (predicted, bound) = if cfg.mode.is_parallel() && cfg.stages > 1 {
        (
            predict_speedup(&mean_phases, cfg.stages).ok(),
            speedup_upper_bound(&mean_phases).ok(),
        )
    } else {
        (None, None)
    };
    let last = epochs_out.last().expect("at least one epoch");
    let summary = RunSummary {
        mode: cfg.mode.as_str().to_string(),
        stages: if cfg.mode.is_parallel() {
            cfg.stages
        } else {
            1
        },
        epochs: cfg.epochs,
        seed: cfg.seed,
        param_count,
        final_train_loss: last.train_loss,
        final_test_accuracy: last.test_accuracy,
        final_violation_mean: last.violation_mean,
        final_distill_loss: last.distill_loss,
        mean_epoch_wall: epochs_out.iter().map(|e| e.wall).sum::<f64>() / epochs_out.len() as f64,
        mean_phases,
        predicted_speedup: predicted,
        speedup_upper_bound: bound,
        aux_storage,
    };
    summary.save(&out_dir.join("summary.json"))?;
    crate::checkpoint::pack_model(&final_model, aux_nets_for_ckpt.as_deref())
        .save(&out_dir.join("model.ckpt"))?;
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_epoch(
    model: &ResidualModel,
    train_x: &crate::tensor::Tensor,
    train_y: &[usize],
    test_x: &crate::tensor::Tensor,
    test_y: &[usize],
    epoch: usize,
    lr: f64,
    beta: f64,
    violations: Vec<f64>,
    distills: Vec<f64>,
    phases: PhaseTimings,
    wall: f64,
) -> Result<EpochMetrics> {
    let (train_loss, _) = evaluate(model, train_x, train_y)?;
    let (_, test_accuracy) = evaluate(model, test_x, test_y)?;
    if !train_loss.is_finite() {
        return Err(Error::Numeric {
            epoch,
            stage: None,
            what: "training loss".to_string(),
        });
    }
    let violation_max = violations.iter().cloned().fold(0.0, f64::max);
    Ok(EpochMetrics {
        epoch,
        train_loss,
        test_accuracy,
        violation_mean: mean(&violations),
        violation_max,
        distill_loss: mean(&distills),
        lr,
        beta,
        phases,
        wall,
    })
}

fn mean_of_phases(epochs: &[EpochMetrics]) -> PhaseTimings {
    let n = epochs.len().max(1) as f64;
    let mut acc = PhaseTimings::default();
    for e in epochs {
        acc.t_data += e.phases.t_data;
        acc.t_forward += e.phases.t_forward;
        acc.t_backward += e.phases.t_backward;
        acc.t_psi += e.phases.t_psi;
        acc.t_aux_forward += e.phases.t_aux_forward;
        acc.t_aux_backward += e.phases.t_aux_backward;
    }
    acc.t_data /= n;
    acc.t_forward /= n;
    acc.t_backward /= n;
    acc.t_psi /= n;
    acc.t_aux_forward /= n;
    acc.t_aux_backward /= n;
    acc
}

// ---------------------------------------------------------------------------
// Run comparison

#[derive(Debug, Clone, serde::Serialize)]
pub struct RunRow {
    pub dir: String,
    pub mode: String,
    pub final_accuracy: f64,
    pub final_violation: f64,
    pub predicted_speedup: Option<f64>,
    pub mean_epoch_wall: f64,
    pub measured_speedup_vs_baseline: f64,
    pub accuracy_delta_vs_baseline: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ComparisonReport {
    pub rows: Vec<RunRow>,
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<28} {:<26} {:>9} {:>10} {:>10} {:>10} {:>9}",
            "run", "mode", "acc", "d_acc", "violation", "pred_rho", "meas_rho"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<28} {:<26} {:>9.4} {:>+10.4} {:>10.3e} {:>10} {:>9.3}",
                r.dir,
                r.mode,
                r.final_accuracy,
                r.accuracy_delta_vs_baseline,
                r.final_violation,
                r.predicted_speedup
                    .map_or_else(|| "-".to_string(), |v| format!("{v:.3}")),
                r.measured_speedup_vs_baseline,
            )?;
        }
        Ok(())
    }
}

/// Tabulate completed runs against the first (baseline) directory.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<ComparisonReport> {
    if dirs.len() < 2 {
        return Err(Error::usage(
            "compare needs at least two run directories".to_string(),
        ));
    }
    let mut rows = Vec::with_capacity(dirs.len());
    let mut baseline: Option<RunSummary> = None;
    for dir in dirs {
        let summary_path = dir.join("summary.json");
        if !summary_path.exists() {
            return Err(Error::parse(format!(
                "missing run summary: {}",
                summary_path.display()
            )));
        }
        let summary = RunSummary::load(&summary_path)?;
        // Schema check on the metrics file; errors name the path.
        let _ = read_metrics(&dir.join("metrics.csv"))?;
        let base = baseline.get_or_insert_with(|| summary.clone());
        rows.push(RunRow {
            dir: dir.display().to_string(),
            mode: summary.mode.clone(),
            final_accuracy: summary.final_test_accuracy,
            final_violation: summary.final_violation_mean,
            predicted_speedup: summary.predicted_speedup,
            mean_epoch_wall: summary.mean_epoch_wall,
            measured_speedup_vs_baseline: base.mean_epoch_wall / summary.mean_epoch_wall,
            accuracy_delta_vs_baseline: summary.final_test_accuracy - base.final_test_accuracy,
        });
    }
    Ok(ComparisonReport { rows })
}

// ---------------------------------------------------------------------------
// Learning-curve rendering

/// Render one self-contained SVG line chart per requested metrics field.
pub fn render_curves(
    metrics_path: &Path,
    fields: &[String],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if fields.is_empty() {
        return Err(Error::usage("plot: no fields requested".to_string()));
    }
    let metrics = read_metrics(metrics_path)?;
    if metrics.is_empty() {
        return Err(Error::IncompleteMetrics(format!(
            "{}: no complete records",
            metrics_path.display()
        )));
    }
    let columns: Vec<&str> = METRICS_HEADER.split(',').collect();
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(fields.len());
    for field in fields {
        let col = columns
            .iter()
            .position(|c| c == field)
            .ok_or_else(|| Error::usage(format!("plot: unknown field {field:?}")))?;
        let series: Vec<(f64, f64)> = metrics
            .iter()
            .map(|m| {
                let row = m.csv_row();
                let v: f64 = row.split(',').nth(col).unwrap().parse().unwrap();
                (m.epoch as f64, v)
            })
            .collect();
        let svg = line_chart_svg(field, &series);
        let path = out_dir.join(format!("curve_{field}.svg"));
        std::fs::write(&path, svg)?;
        written.push(path);
    }
    Ok(written)
}

fn line_chart_svg(title: &str, series: &[(f64, f64)]) -> String {
    let (w, h) = (720.0, 440.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 40.0, 50.0);
    let (x_min, x_max) = bounds(series.iter().map(|p| p.0));
    let (y_min, y_max) = bounds(series.iter().map(|p| p.1));
    let x_span = (x_max - x_min).max(1e-12);
    let y_span = (y_max - y_min).max(1e-12);
    let px = |x: f64| ml + (x - x_min) / x_span * (w - ml - mr);
    let py = |y: f64| h - mb - (y - y_min) / y_span * (h - mt - mb);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        w / 2.0
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#444\"/>\n",
        h - mb,
        w - mr
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"#444\"/>\n",
        h - mb
    ));
    for (value, anchor, x, y) in [
        (x_min, "middle", px(x_min), h - mb + 18.0),
        (x_max, "middle", px(x_max), h - mb + 18.0),
    ] {
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"{anchor}\">{value:.0}</text>\n"
        ));
    }
    for (value, y) in [(y_min, py(y_min)), (y_max, py(y_max))] {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{value:.4}</text>\n",
            ml - 6.0,
            y + 4.0
        ));
    }
    if series.len() == 1 {
        let (x, y) = series[0];
        svg.push_str(&format!(
            "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"4\" fill=\"#1f77b4\"/>\n",
            px(x),
            py(y)
        ));
    } else {
        let points: Vec<String> = series
            .iter()
            .map(|(x, y)| format!("{:.3},{:.3}", px(*x), py(*y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for v in values {
        min = min.min(v);
        max = max.max(v);
    }
    if !min.is_finite() {
        (0.0, 1.0)
    } else {
        (min, max)
    }
}
