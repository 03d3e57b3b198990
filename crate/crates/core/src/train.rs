//! The pre-training loop: batch sampling, corruption, forward, losses and
//! AdamW, with CSV logging, checkpoints and a run manifest.
//!
//! Every random draw is keyed by `(train.seed, purpose, step, ...)`, so a
//! run is a pure function of its config.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::autograd::Tape;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::{DataKind, TrainConfig};
use crate::corruption::{BatchCorruption, NoiseSchedule};
use crate::data::{
    channel_stats, load_cifar10, synthetic_dataset, ChannelStats, Dataset, SynthSpec,
};
use crate::encoder::{model_forward, patchify_batch, ParamStore};
use crate::error::{Error, NonFinite, Result};
use crate::objectives::{batch_losses, pixel_targets, LossReport};
use crate::optim::{adamw_step, lr_at, AdamState, AdamWConfig};
use crate::rng::{Purpose, Rng};
use crate::tensor::Tensor;

pub const LOSS_CSV: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const ABORT_CHECKPOINT: &str = "abort.ckpt";
pub const MANIFEST: &str = "manifest.txt";

/// Training and held-out data with the normalization statistics of the
/// training split.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub stats: ChannelStats,
}

pub fn synth_spec(cfg: &TrainConfig) -> SynthSpec {
    SynthSpec {
        classes: cfg.data.classes,
        size: cfg.encoder.image_size,
        noise_std: cfg.data.noise_std,
        seed: cfg.data.seed,
        ..SynthSpec::default()
    }
}

pub fn load_data(cfg: &TrainConfig) -> Result<TrainData> {
    let (train, test) = match cfg.data.kind {
        DataKind::Synthetic => {
            let spec = synth_spec(cfg);
            let train = synthetic_dataset(&spec, cfg.data.samples_per_class, 0)?;
            let test = if cfg.data.eval_per_class > 0 {
                Some(synthetic_dataset(&spec, cfg.data.eval_per_class, 1)?)
            } else {
                None
            };
            (train, test)
        }
        DataKind::Cifar10 => load_cifar10(&cfg.data.path)?,
    };
    let e = &cfg.encoder;
    if (train.channels, train.height, train.width) != (e.channels, e.image_size, e.image_size) {
        return Err(Error::Config(format!(
            "dataset images are {}x{}x{} but the encoder expects {}x{}x{}",
            train.channels, train.height, train.width, e.channels, e.image_size, e.image_size
        )));
    }
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let stats = channel_stats(&train);
    Ok(TrainData { train, test, stats })
}

/// Normalized, patchified `[B, L_img, P]` batch.
pub fn batch_patches(
    ds: &Dataset,
    indices: &[usize],
    stats: &ChannelStats,
    flips: &[bool],
    patch: usize,
) -> Result<Tensor> {
    let imgs: Vec<Tensor> = indices
        .iter()
        .enumerate()
        .map(|(k, &i)| ds.normalized_image(i, stats, flips.get(k).copied().unwrap_or(false)))
        .collect();
    patchify_batch(&imgs, patch)
}

/// One logged step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based step number.
    pub step: u64,
    pub report: LossReport,
    pub lr: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub state: AdamState,
    sched: NoiseSchedule,
    data: TrainData,
    order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: TrainData) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config.encoder, config.train.seed)?;
        let state = AdamState::new(&params);
        let sched = config.noise.schedule()?;
        Ok(Trainer {
            config,
            params,
            state,
            sched,
            data,
            order: None,
        })
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    pub fn steps_done(&self) -> u64 {
        self.state.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            optimizer: Some(self.state.clone()),
            step: self.state.step,
        }
    }

    /// Dataset indices of the batch at `step`: epoch-wise permutations,
    /// read consecutively.
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let n = self.data.train.len();
        let bsz = self.config.train.batch_size;
        let seed = self.config.train.seed;
        (0..bsz)
            .map(|j| {
                let k = step as usize * bsz + j;
                let epoch = (k / n) as u64;
                if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut perm: Vec<usize> = (0..n).collect();
                    Rng::derive(seed, Purpose::Batch, &[epoch]).shuffle(&mut perm);
                    self.order = Some((epoch, perm));
                }
                self.order.as_ref().expect("set above").1[k % n]
            })
            .collect()
    }

    fn flips(&self, step: u64) -> Vec<bool> {
        let bsz = self.config.train.batch_size;
        if !self.config.train.hflip {
            return vec![false; bsz];
        }
        let mut r = Rng::derive(self.config.train.seed, Purpose::Augment, &[step]);
        (0..bsz).map(|_| r.next_u64() & 1 == 1).collect()
    }

    /// Loss gradients for a given batch and corruption plan, in store order.
    pub fn gradients(
        &self,
        patches: &Tensor,
        plan: &BatchCorruption,
    ) -> Result<(LossReport, Vec<Tensor>)> {
        let cfg = &self.config;
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let targets = pixel_targets(patches, cfg.loss.normalize_per_patch)?;
        let out = model_forward(&cfg.encoder, &bound, tape.constant(patches.clone()), plan)?;
        let (total, report) = batch_losses(
            &cfg.encoder,
            &cfg.loss,
            &out.pred,
            &out.encoder.affinities,
            &targets,
            plan,
        )?;
        let mut grads = tape.backward(total)?;
        let g = bound
            .vars()
            .iter()
            .zip(self.params.params())
            .map(|(v, p)| {
                grads
                    .take(*v)
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect();
        Ok((report, g))
    }

    /// Runs one optimization step.
    pub fn step(&mut self) -> Result<StepLog> {
        let step = self.state.step;
        let cfg = self.config.clone();
        let idx = self.batch_indices(step);
        let flips = self.flips(step);
        let patches = batch_patches(
            &self.data.train,
            &idx,
            &self.data.stats,
            &flips,
            cfg.encoder.patch_size,
        )?;
        let plan = BatchCorruption::draw(
            cfg.encoder.strategy,
            idx.len(),
            cfg.encoder.num_patches(),
            cfg.encoder.embed_dim,
            cfg.encoder.mask_ratio,
            &self.sched,
            cfg.train.seed,
            step,
        )?;
        let with_context = |e: Error| match e {
            Error::NonFinite(nf) => Error::NonFinite(NonFinite {
                step: Some(step + 1),
                batch_indices: idx.clone(),
                ..nf
            }),
            other => other,
        };
        let (report, grads) = self.gradients(&patches, &plan).map_err(with_context)?;
        let lr = lr_at(
            cfg.train.lr,
            step as usize,
            cfg.train.warmup(),
            cfg.train.steps,
        );
        let opt = AdamWConfig {
            lr: cfg.train.lr,
            beta1: cfg.train.beta1,
            beta2: cfg.train.beta2,
            eps: cfg.train.eps,
            weight_decay: cfg.train.weight_decay,
        };
        adamw_step(&mut self.params, &grads, &mut self.state, &opt, lr).map_err(with_context)?;
        Ok(StepLog {
            step: step + 1,
            report,
            lr,
        })
    }
}

/// Files written by [`pretrain`].
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub manifest: PathBuf,
    pub history: Vec<StepLog>,
    pub stats: ChannelStats,
}

pub fn csv_row(log: &StepLog) -> String {
    let r = &log.report;
    format!(
        "{},{},{},{},{},{}",
        log.step, r.l_mim, r.l_denoise, r.l_disrupt, r.total, log.lr
    )
}

/// Best-effort `git describe` of the working directory.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

pub fn unix_time() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Writes `key=value` lines to `dir/manifest.txt`.
pub fn write_manifest(dir: &Path, entries: &[(String, String)]) -> Result<PathBuf> {
    let path = dir.join(MANIFEST);
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(k);
        s.push('=');
        s.push_str(&v.replace('\n', " "));
        s.push('\n');
    }
    fs::write(&path, s)?;
    Ok(path)
}

/// Manifest entries describing a training run.
pub fn run_manifest_entries(cfg: &TrainConfig, stats: &ChannelStats) -> Vec<(String, String)> {
    let mut e: Vec<(String, String)> = cfg
        .to_lines()
        .into_iter()
        .filter_map(|l| {
            l.split_once('=')
                .map(|(k, v)| (format!("config.{k}"), v.to_string()))
        })
        .collect();
    for (c, (m, s)) in stats.mean.iter().zip(&stats.std).enumerate() {
        e.push((format!("data.channel{c}.mean"), m.to_string()));
        e.push((format!("data.channel{c}.std"), s.to_string()));
    }
    e.push(("seed".into(), cfg.train.seed.to_string()));
    e.push(("git_describe".into(), git_describe()));
    e
}

/// Trains for `train.steps` steps writing artifacts under `out`.
/// `manifest_extra` is appended to the manifest. A non-finite loss writes
/// the last good state to `abort.ckpt` before returning the error.
pub fn pretrain(
    cfg: &TrainConfig,
    out: &Path,
    manifest_extra: &[(String, String)],
) -> Result<RunArtifacts> {
    let started = unix_time();
    fs::create_dir_all(out)?;
    let data = load_data(cfg)?;
    pretrain_with_data(cfg, data, out, manifest_extra, started)
}

pub fn pretrain_with_data(
    cfg: &TrainConfig,
    data: TrainData,
    out: &Path,
    manifest_extra: &[(String, String)],
    started: u64,
) -> Result<RunArtifacts> {
    fs::create_dir_all(out)?;
    let stats = data.stats.clone();
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    let loss_csv = out.join(LOSS_CSV);
    let mut csv = std::io::BufWriter::new(fs::File::create(&loss_csv)?);
    writeln!(csv, "step,l_mim,l_denoise,l_disrupt,total,lr")?;
    let mut history = Vec::with_capacity(cfg.train.steps);
    for _ in 0..cfg.train.steps {
        let log = match trainer.step() {
            Ok(l) => l,
            Err(e @ Error::NonFinite(_)) => {
                csv.flush()?;
                save_checkpoint(&out.join(ABORT_CHECKPOINT), &trainer.checkpoint())?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if log.step % cfg.train.log_every as u64 == 0 || log.step == cfg.train.steps as u64 {
            writeln!(csv, "{}", csv_row(&log))?;
            log::info!(
                "step {} total {:.5} mim {:.5} denoise {:.5} disrupt {:.5}",
                log.step,
                log.report.total,
                log.report.l_mim,
                log.report.l_denoise,
                log.report.l_disrupt
            );
        }
        let every = cfg.train.checkpoint_every as u64;
        if every > 0 && log.step % every == 0 {
            save_checkpoint(
                &out.join(format!("step_{}.ckpt", log.step)),
                &trainer.checkpoint(),
            )?;
        }
        history.push(log);
    }
    csv.flush()?;
    let checkpoint = out.join(FINAL_CHECKPOINT);
    save_checkpoint(&checkpoint, &trainer.checkpoint())?;

    let mut entries = run_manifest_entries(cfg, &stats);
    entries.push(("start_unix".into(), started.to_string()));
    entries.push(("end_unix".into(), unix_time().to_string()));
    entries.push(("artifact.checkpoint".into(), FINAL_CHECKPOINT.into()));
    entries.push(("artifact.loss_csv".into(), LOSS_CSV.into()));
    entries.extend_from_slice(manifest_extra);
    let manifest = write_manifest(out, &entries)?;
    Ok(RunArtifacts {
        checkpoint,
        loss_csv,
        manifest,
        history,
        stats,
    })
}
