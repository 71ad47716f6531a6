//! One configured experiment: data, fleet, federation and per-round logs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::data::{dirichlet_partition, generate_dataset, Dataset, PartitionSpec};
use crate::diagnostics::{heterogeneity, HeterogeneityReport};
use crate::error::{Error, Result};
use crate::federation::{build_fleet, run_federation, FedModel, RoundHooks, RoundRecord, Vehicle};
use crate::metrics::{argmax_channels, evaluate};
use crate::model::{resolve_taps, AdapterSet, ParamStore, SegNet};
use crate::numeric::{write_checkpoint, Precision, Real, RngStream, Tape};
use crate::objectives::{LossBreakdown, LossWeights};

/// Bumped whenever a log field changes meaning.
pub const LOG_SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: &str = "t,mIoU,mF1,mPre,mRec,H,grad_norm_sq,mean_ce,mean_mi,mean_ne,wall_ms";

const DATA_TAG: u64 = 0xda7a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleSummary {
    pub id: usize,
    pub weight: f64,
    /// Loss of the vehicle's last local minibatch.
    pub loss: LossBreakdown,
}

/// One line of `rounds.jsonl`. Metrics describe the model after `t`
/// rounds; `h` and `grad_norm_sq` are taken at the start of round `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub schema_version: u32,
    pub t: usize,
    pub miou: Option<f64>,
    pub mf1: Option<f64>,
    pub mpre: Option<f64>,
    pub mrec: Option<f64>,
    pub test_ce: Option<f64>,
    /// Mean per-pixel channel entropy of each tap on the held-out set.
    pub tap_entropy: Vec<f64>,
    pub h: Option<f64>,
    pub grad_norm_sq: Option<f64>,
    pub mean_ce: f64,
    pub mean_mi: f64,
    pub mean_ne: f64,
    pub step_size: f64,
    pub vehicles: Vec<VehicleSummary>,
    pub wall_ms: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl LogRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.t,
            opt(self.miou),
            opt(self.mf1),
            opt(self.mpre),
            opt(self.mrec),
            opt(self.h),
            opt(self.grad_norm_sq),
            self.mean_ce,
            self.mean_mi,
            self.mean_ne,
            self.wall_ms
        )
    }
}

/// Generated train/test sets and the fleet built from the train split.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub parts: Vec<Vec<usize>>,
    pub fleet: Vec<Vehicle>,
}

/// Data depends only on the seed and the data section.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    let root = RngStream::new(cfg.seed).derive(&[DATA_TAG]);
    let scene = &cfg.data.scene;
    let train = generate_dataset(scene, cfg.data.train_samples, &mut root.derive(&[0]))?;
    let test = generate_dataset(scene, cfg.data.test_samples, &mut root.derive(&[1]))?;
    let spec = PartitionSpec {
        min_samples: cfg.data.partition.min_samples.max(1),
        ..cfg.data.partition.clone()
    };
    let parts = dirichlet_partition(&train, &spec, &mut root.derive(&[2]))?;
    let fleet = build_fleet(&train, &parts);
    Ok(Prepared {
        train,
        test,
        parts,
        fleet,
    })
}

pub fn initial_model<R: Real>(cfg: &ExperimentConfig) -> Result<FedModel<R>> {
    let net_cfg = cfg.net_config();
    let sites = resolve_taps(&cfg.model.taps, &net_cfg)?;
    Ok(FedModel {
        net: SegNet::build(net_cfg, cfg.seed)?,
        adapters: AdapterSet::build(&net_cfg, &sites, cfg.model.taps.adapter, cfg.seed)?,
        sites,
        ne_channels: cfg.model.taps.ne_channels,
    })
}

struct LogWriter {
    dir: PathBuf,
    csv: BufWriter<File>,
    jsonl: BufWriter<File>,
}

impl LogWriter {
    fn create(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
        let mut csv = BufWriter::new(File::create(dir.join("rounds.csv"))?);
        writeln!(csv, "{CSV_HEADER}")?;
        csv.flush()?;
        let jsonl = BufWriter::new(File::create(dir.join("rounds.jsonl"))?);
        Ok(Self {
            dir: dir.to_path_buf(),
            csv,
            jsonl,
        })
    }

    fn append(&mut self, rec: &LogRecord) -> Result<()> {
        writeln!(self.csv, "{}", rec.csv_row())?;
        writeln!(self.jsonl, "{}", serde_json::to_string(rec)?)?;
        self.csv.flush()?;
        self.jsonl.flush()?;
        Ok(())
    }
}

fn save_params<R: Real>(path: &Path, params: &ParamStore<R>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, &params.to_checkpoint())?;
    w.flush()?;
    Ok(())
}

struct Hooks<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Prepared,
    weights: LossWeights,
    writer: Option<LogWriter>,
    records: Vec<LogRecord>,
    diag: Option<HeterogeneityReport>,
}

impl<R: Real> RoundHooks<R> for Hooks<'_> {
    fn before_round(&mut self, round: usize, model: &FedModel<R>) -> Result<()> {
        let every = self.cfg.evaluation.diagnostics_every;
        self.diag = if every > 0 && round % every == 0 {
            Some(heterogeneity(model, &self.data.fleet, &self.weights)?)
        } else {
            None
        };
        Ok(())
    }

    fn after_round(&mut self, rec: &RoundRecord, model: &FedModel<R>) -> Result<()> {
        let t = rec.round + 1;
        let ev = &self.cfg.evaluation;
        let summary = if t % ev.every == 0 || t == self.cfg.training.rounds {
            Some(evaluate(
                &model.net,
                &self.data.test,
                ev.batch_size,
                &model.sites,
                model.ne_channels,
            )?)
        } else {
            None
        };
        let taps = rec.mean_loss.mi.len().max(1) as f64;
        let diag = self.diag.take();
        let log = LogRecord {
            schema_version: LOG_SCHEMA_VERSION,
            t,
            miou: summary.as_ref().map(|s| s.metrics.miou),
            mf1: summary.as_ref().map(|s| s.metrics.mf1),
            mpre: summary.as_ref().map(|s| s.metrics.mpre),
            mrec: summary.as_ref().map(|s| s.metrics.mrec),
            test_ce: summary.as_ref().map(|s| s.mean_ce),
            tap_entropy: summary.map(|s| s.tap_entropy).unwrap_or_default(),
            h: diag.as_ref().map(|d| d.h),
            grad_norm_sq: diag.as_ref().map(|d| d.grad_norm_sq),
            mean_ce: rec.mean_loss.ce,
            mean_mi: rec.mean_loss.mi.iter().sum::<f64>() / taps,
            mean_ne: rec.mean_loss.ne.iter().sum::<f64>() / taps,
            step_size: rec.step_size,
            vehicles: rec
                .weights
                .vehicles
                .iter()
                .zip(&rec.weights.weights)
                .zip(&rec.final_losses)
                .map(|((&id, &weight), loss)| VehicleSummary {
                    id,
                    weight,
                    loss: loss.clone(),
                })
                .collect(),
            wall_ms: if ev.log_wall_time { rec.wall_ms } else { 0 },
        };
        if let Some(w) = &mut self.writer {
            w.append(&log)?;
            if ev.checkpoint_every > 0 && t % ev.checkpoint_every == 0 {
                let dir = w.dir.join("checkpoints");
                fs::create_dir_all(&dir)?;
                save_params(&dir.join(format!("round{t:04}.ckpt")), model.net.params())?;
            }
        }
        self.records.push(log);
        Ok(())
    }
}

/// Records and final state of a finished run.
#[derive(Clone, Debug)]
pub struct RunOutcome<R: Real> {
    pub records: Vec<LogRecord>,
    pub model: FedModel<R>,
}

impl<R: Real> RunOutcome<R> {
    /// SHA-256 of the θ checkpoint encoding.
    pub fn theta_digest(&self) -> String {
        self.model.net.params().digest()
    }
}

/// Runs `cfg` on already prepared data, writing artifacts to `out` if given.
pub fn run_prepared<R: Real>(cfg: &ExperimentConfig, data: &Prepared, out: Option<&Path>) -> Result<RunOutcome<R>> {
    cfg.validate()?;
    if cfg.precision != R::PRECISION {
        return Err(Error::Config(format!(
            "config asks for {} but the run was started in {}",
            cfg.precision.as_str(),
            R::PRECISION.as_str()
        )));
    }
    let round_cfg = cfg.round_config()?;
    let mut hooks = Hooks {
        cfg,
        data,
        weights: round_cfg.weights.clone(),
        writer: out.map(|d| LogWriter::create(d, cfg)).transpose()?,
        records: Vec::new(),
        diag: None,
    };
    let outcome = run_federation(
        &data.fleet,
        initial_model::<R>(cfg)?,
        &round_cfg,
        cfg.training.rounds,
        cfg.seed,
        cfg.threads,
        &mut hooks,
    )?;
    if let Some(dir) = out {
        save_params(&dir.join("model.ckpt"), outcome.model.net.params())?;
        save_params(&dir.join("adapters.ckpt"), outcome.model.adapters.params())?;
        if cfg.evaluation.panel > 0 {
            dump_panel(&dir.join("panel"), &outcome.model, &data.test, cfg.evaluation.panel)?;
        }
    }
    Ok(RunOutcome {
        records: hooks.records,
        model: outcome.model,
    })
}

pub fn run_experiment<R: Real>(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutcome<R>> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    run_prepared(cfg, &data, out)
}

/// Precision-independent view of a run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub records: Vec<LogRecord>,
    pub theta_digest: String,
}

/// Runs in the precision named by the config.
pub fn run_with_precision(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunSummary> {
    fn go<R: Real>(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunSummary> {
        let o = run_experiment::<R>(cfg, out)?;
        Ok(RunSummary {
            theta_digest: o.theta_digest(),
            records: o.records,
        })
    }
    match cfg.precision {
        Precision::Single => go::<f32>(cfg, out),
        Precision::Double => go::<f64>(cfg, out),
    }
}

/// Binary PGM (P5), one byte per pixel.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    w.flush()?;
    Ok(())
}

fn class_gray(class: u8, classes: usize) -> u8 {
    if class == crate::numeric::tape::IGNORE_LABEL {
        return 0;
    }
    (class as usize * 255 / (classes - 1).max(1)) as u8
}

fn dump_panel<R: Real>(dir: &Path, model: &FedModel<R>, test: &Dataset, count: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let idx: Vec<usize> = (0..count).collect();
    let (x, labels) = test.batch::<R>(&idx)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let fp = model.net.forward(&mut tape, xv, &[], false)?;
    let pred = argmax_channels(tape.value(fp.logits))?;
    let (h, w, k) = (test.height, test.width, test.classes);
    for i in 0..count {
        let span = i * h * w..(i + 1) * h * w;
        let p: Vec<u8> = pred[span.clone()].iter().map(|&c| class_gray(c, k)).collect();
        let t: Vec<u8> = labels[span].iter().map(|&c| class_gray(c, k)).collect();
        write_pgm(&dir.join(format!("pred{i:03}.pgm")), w, h, &p)?;
        write_pgm(&dir.join(format!("truth{i:03}.pgm")), w, h, &t)?;
    }
    Ok(())
}
