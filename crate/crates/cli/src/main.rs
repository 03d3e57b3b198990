//! `noisymim`: data generation, pre-training, ablation grids, attention
//! analysis and gradient verification.
//!
//! Exit codes: 0 success, 1 experiment failure, 2 usage or input error,
//! 3 numeric abort.

mod grid;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};
use noisymim_core::analysis::{analyze_attention, linear_probe, AttentionAnalysis, ProbeConfig};
use noisymim_core::checkpoint::load_checkpoint;
use noisymim_core::config::TrainConfig;
use noisymim_core::data::{
    channel_stats, check_cifar_dir, load_cifar10, synthetic_dataset, write_cifar_file,
    write_label_names, SynthSpec, TEST_FILE,
};
use noisymim_core::train::{load_data, pretrain_with_data, unix_time, write_manifest, TrainData};
use noisymim_core::verify::{check_components, check_op_families, GradcheckConfig};
use noisymim_core::{Error, Result};

use grid::{builtin, parse_grid, Grid, BUILTINS};

#[derive(Parser)]
#[command(
    name = "noisymim",
    version,
    about = "Masked and noised image-model pre-training at toy scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DataMode {
    Synthetic,
    CifarCheck,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in CIFAR-10 binary layout, or validate an
    /// existing CIFAR-10 directory (`--out` is the directory checked).
    MakeData {
        #[arg(long, value_enum)]
        kind: DataMode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Training images per class.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Held-out images per class written to `test_batch.bin`; 0 skips it.
        #[arg(long, default_value_t = 50)]
        test_samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        noise_std: f64,
    },
    /// Pre-train one encoder.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// `key=value` settings applied after the config file.
        #[arg(long = "override", num_args = 1..)]
        overrides: Vec<String>,
    },
    /// Pre-train every arm of a grid for every seed, then probe each run.
    Compare {
        /// Grid file, or a built-in name: components, strategies,
        /// noise-blocks, disruption.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Applied to every arm before the grid's own overrides.
        #[arg(long = "override", num_args = 1..)]
        overrides: Vec<String>,
        /// Replaces the grid's seed list, e.g. `0,1,2`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Hidden state probed: 0 is the embedding, the depth the last block.
        #[arg(long)]
        feature_layer: Option<usize>,
    },
    /// Head-divergence statistics and attention heatmaps of a checkpoint.
    AnalyzeAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CIFAR-10 layout directory; its test split is analyzed when present.
        /// Without it the checkpoint's own data config is regenerated.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Heatmap layer; defaults to the last block.
        #[arg(long)]
        layer: Option<usize>,
        /// Heatmap query token; 0 is the CLS slot when present.
        #[arg(long, default_value_t = 0)]
        query: usize,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Finite-difference check of every parameter gradient of every loss
    /// component, plus each differentiable op family.
    Gradcheck {
        /// `encoder.*` and `gradcheck.*` keys applied over the tiny config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Writes the report and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Test hook: doubles the analytic gradient of this parameter.
        #[arg(long, hide = true)]
        corrupt_gradient: Option<String>,
    },
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFinite(_) => 3,
            Error::Config(_) | Error::UnknownKey { .. } | Error::Format { .. } | Error::Data(_) => {
                2
            }
            Error::Io(_) | Error::Shape { .. } | Error::Domain { .. } | Error::Contract(_) => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let started = unix_time();
    let result = match cli.command {
        Command::MakeData {
            kind,
            out,
            classes,
            samples,
            test_samples,
            seed,
            noise_std,
        } => match kind {
            DataMode::Synthetic => make_synthetic(
                &out,
                classes,
                samples,
                test_samples,
                seed,
                noise_std,
                started,
            ),
            DataMode::CifarCheck => cifar_check(&out, started),
        },
        Command::Pretrain {
            config,
            out,
            overrides,
        } => pretrain(config.as_deref(), &out, &overrides, started),
        Command::Compare {
            grid,
            out,
            config,
            overrides,
            seeds,
            feature_layer,
        } => compare(
            &grid,
            &out,
            config.as_deref(),
            &overrides,
            seeds,
            feature_layer,
            started,
        ),
        Command::AnalyzeAttn {
            checkpoint,
            data,
            out,
            layer,
            query,
            samples,
        } => analyze(
            &checkpoint,
            data.as_deref(),
            &out,
            layer,
            query,
            samples,
            started,
        ),
        Command::Gradcheck {
            config,
            out,
            corrupt_gradient,
        } => gradcheck(config.as_deref(), out.as_deref(), corrupt_gradient, started),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

/// Manifest entries shared by every command.
fn base_manifest(started: u64) -> Vec<(String, String)> {
    vec![
        ("command".into(), command_line()),
        ("version".into(), env!("CARGO_PKG_VERSION").into()),
        ("start_unix".into(), started.to_string()),
    ]
}

fn finish_manifest(dir: &Path, mut entries: Vec<(String, String)>) -> Result<()> {
    entries.push(("end_unix".into(), unix_time().to_string()));
    write_manifest(dir, &entries)?;
    Ok(())
}

fn make_synthetic(
    out: &Path,
    classes: usize,
    samples: usize,
    test_samples: usize,
    seed: u64,
    noise_std: f64,
    started: u64,
) -> CmdResult {
    let spec = SynthSpec {
        classes,
        noise_std,
        seed,
        ..SynthSpec::default()
    };
    fs::create_dir_all(out)?;
    let train = synthetic_dataset(&spec, samples, 0)?;
    write_cifar_file(&out.join("data_batch_1.bin"), &train)?;
    write_label_names(out, &train.label_names)?;
    let mut m = base_manifest(started);
    m.extend([
        ("seed".to_string(), seed.to_string()),
        ("classes".into(), classes.to_string()),
        ("samples_per_class".into(), samples.to_string()),
        ("noise_std".into(), noise_std.to_string()),
        ("artifact.train".into(), "data_batch_1.bin".into()),
    ]);
    if test_samples > 0 {
        let test = synthetic_dataset(&spec, test_samples, 1)?;
        write_cifar_file(&out.join(TEST_FILE), &test)?;
        m.push(("artifact.test".into(), TEST_FILE.into()));
    }
    log::info!("wrote {} training images to {}", train.len(), out.display());
    finish_manifest(out, m)?;
    Ok(())
}

fn cifar_check(dir: &Path, started: u64) -> CmdResult {
    let files = check_cifar_dir(dir)?;
    let mut m = base_manifest(started);
    for (name, n) in &files {
        println!("{name}: {n} records ok");
        m.push((format!("records.{name}"), n.to_string()));
    }
    finish_manifest(dir, m)?;
    Ok(())
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::parse_text(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pretrain(config: Option<&Path>, out: &Path, overrides: &[String], started: u64) -> CmdResult {
    let cfg = load_config(config, overrides)?;
    fs::create_dir_all(out)?;
    let data = load_data(&cfg)?;
    let extra = vec![("command".to_string(), command_line())];
    let run = pretrain_with_data(&cfg, data, out, &extra, started)?;
    if let Some(last) = run.history.last() {
        println!("step {} total loss {:.6}", last.step, last.report.total);
    }
    println!("checkpoint {}", run.checkpoint.display());
    Ok(())
}

/// One finished or failed arm-seed run.
#[derive(Clone, Debug)]
struct RunRow {
    arm: String,
    seed: u64,
    outcome: std::result::Result<(f64, f64, f64), String>,
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var("NOISYMIM_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(jobs).max(1)
}

fn run_arm(
    cfg: &TrainConfig,
    dir: &Path,
    feature_layer: usize,
    arm_name: &str,
) -> Result<(f64, f64, f64)> {
    fs::create_dir_all(dir)?;
    let data: TrainData = load_data(cfg)?;
    let test = data
        .test
        .clone()
        .ok_or_else(|| Error::Data("probing needs a held-out split".into()))?;
    let extra = vec![("arm".to_string(), arm_name.to_string())];
    let run = pretrain_with_data(cfg, data.clone(), dir, &extra, unix_time())?;
    let ckpt = load_checkpoint(&run.checkpoint)?;
    let probe = linear_probe(
        &cfg.encoder,
        &ckpt.params,
        &data.train,
        &test,
        &data.stats,
        feature_layer,
        &ProbeConfig::default(),
    )?;
    let last = run.history.last().map_or(f64::NAN, |l| l.report.total);
    Ok((probe.train_acc, probe.test_acc, last))
}

fn format_table(rows: &[RunRow], arms: &[String]) -> (String, String) {
    let mut csv = String::from("arm,seed,status,train_acc,test_acc,final_loss\n");
    let mut lines: Vec<[String; 6]> = vec![[
        "arm".into(),
        "seed".into(),
        "status".into(),
        "train_acc".into(),
        "test_acc".into(),
        "final_loss".into(),
    ]];
    for r in rows {
        let cells = match &r.outcome {
            Ok((tr, te, loss)) => [
                r.arm.clone(),
                r.seed.to_string(),
                "ok".into(),
                format!("{tr:.4}"),
                format!("{te:.4}"),
                format!("{loss:.6}"),
            ],
            Err(_) => [
                r.arm.clone(),
                r.seed.to_string(),
                "failed".into(),
                String::new(),
                String::new(),
                String::new(),
            ],
        };
        csv.push_str(&cells.join(","));
        csv.push('\n');
        lines.push(cells);
    }
    lines.push(Default::default());
    lines.push([
        "arm".into(),
        "runs_ok".into(),
        String::new(),
        String::new(),
        "median_test".into(),
        String::new(),
    ]);
    for a in arms {
        let mut acc: Vec<f64> = rows
            .iter()
            .filter(|r| &r.arm == a)
            .filter_map(|r| r.outcome.as_ref().ok().map(|o| o.1))
            .collect();
        let total = rows.iter().filter(|r| &r.arm == a).count();
        let ok = acc.len();
        let med = median(&mut acc).map_or("n/a".into(), |m| format!("{m:.4}"));
        lines.push([
            a.clone(),
            format!("{ok}/{total}"),
            String::new(),
            String::new(),
            med,
            String::new(),
        ]);
    }
    let mut widths = [0usize; 6];
    for l in &lines {
        for (w, c) in widths.iter_mut().zip(l) {
            *w = (*w).max(c.len());
        }
    }
    let mut text = String::new();
    for l in &lines {
        let row: Vec<String> = l
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        text.push_str(row.join("  ").trim_end());
        text.push('\n');
    }
    (csv, text)
}

fn resolve_grid(name: &str) -> Result<Grid> {
    if let Some(g) = builtin(name) {
        return Ok(g);
    }
    let p = Path::new(name);
    if !p.exists() {
        return Err(Error::Config(format!(
            "`{name}` is neither a grid file nor a built-in grid ({})",
            BUILTINS.join(", ")
        )));
    }
    parse_grid(&fs::read_to_string(p)?)
}

fn compare(
    grid_name: &str,
    out: &Path,
    config: Option<&Path>,
    overrides: &[String],
    seeds: Option<Vec<u64>>,
    feature_layer: Option<usize>,
    started: u64,
) -> CmdResult {
    let mut grid = resolve_grid(grid_name)?;
    if let Some(s) = seeds {
        if s.is_empty() {
            return Err(fail(2, "empty --seeds list"));
        }
        grid.seeds = s;
    }
    let base = load_config(config, overrides)?;
    // Resolve every arm up front so a bad key fails before any training.
    let mut jobs = Vec::new();
    for arm in &grid.arms {
        for &seed in &grid.seeds {
            let mut cfg = base.clone();
            for o in grid.base.iter().chain(&arm.overrides) {
                cfg.apply_override(o)?;
            }
            cfg.train.seed = seed;
            cfg.validate()?;
            let layer = feature_layer.unwrap_or(cfg.encoder.depth);
            if layer > cfg.encoder.depth {
                return Err(fail(
                    2,
                    format!("feature layer {layer} exceeds depth {}", cfg.encoder.depth),
                ));
            }
            jobs.push((arm.name.clone(), seed, cfg, layer));
        }
    }
    fs::create_dir_all(out)?;
    let workers = worker_count(jobs.len());
    log::info!("{} runs on {workers} worker(s)", jobs.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<RunRow>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((arm, seed, cfg, layer)) = jobs.get(i) else {
                    break;
                };
                let dir = out.join("runs").join(format!("{arm}_seed{seed}"));
                log::info!("arm {arm} seed {seed}");
                let outcome = run_arm(cfg, &dir, *layer, arm).map_err(|e| e.to_string());
                if let Err(e) = &outcome {
                    log::error!("arm {arm} seed {seed} failed: {e}");
                }
                results.lock().expect("results lock")[i] = Some(RunRow {
                    arm: arm.clone(),
                    seed: *seed,
                    outcome,
                });
            });
        }
    });
    let rows: Vec<RunRow> = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect();
    let arm_names: Vec<String> = grid.arms.iter().map(|a| a.name.clone()).collect();
    let (csv, text) = format_table(&rows, &arm_names);
    fs::write(out.join("probe.csv"), &csv)?;
    fs::write(out.join("probe.txt"), &text)?;
    print!("{text}");

    let mut m = base_manifest(started);
    m.push(("grid".into(), grid_name.into()));
    m.push((
        "seeds".into(),
        grid.seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(","),
    ));
    for a in &grid.arms {
        m.push((format!("arm.{}", a.name), a.overrides.join(" ")));
    }
    m.push(("artifact.table_csv".into(), "probe.csv".into()));
    m.push(("artifact.table_txt".into(), "probe.txt".into()));
    finish_manifest(out, m)?;

    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        return Err(fail(1, format!("{failed} of {} runs failed", rows.len())));
    }
    Ok(())
}

fn analyze(
    checkpoint: &Path,
    data: Option<&Path>,
    out: &Path,
    layer: Option<usize>,
    query: usize,
    samples: usize,
    started: u64,
) -> CmdResult {
    let ckpt = load_checkpoint(checkpoint)?;
    let enc = &ckpt.config.encoder;
    let (ds, stats) = match data {
        Some(dir) => {
            let (train, test) = load_cifar10(dir)?;
            let stats = channel_stats(&train);
            (test.unwrap_or(train), stats)
        }
        None => {
            let d = load_data(&ckpt.config)?;
            (d.test.unwrap_or(d.train), d.stats)
        }
    };
    if (ds.channels, ds.height, ds.width) != (enc.channels, enc.image_size, enc.image_size) {
        return Err(fail(
            2,
            format!(
                "images are {}x{}x{} but the checkpoint expects {}x{}x{}",
                ds.channels, ds.height, ds.width, enc.channels, enc.image_size, enc.image_size
            ),
        ));
    }
    if layer.is_some_and(|l| l >= enc.depth) || query >= enc.num_tokens() {
        return Err(fail(
            2,
            format!(
                "layer must be below {} and query below {}",
                enc.depth,
                enc.num_tokens()
            ),
        ));
    }
    let opts = AttentionAnalysis {
        samples,
        layer,
        query,
        heatmap_sample: 0,
    };
    let art = analyze_attention(enc, &ckpt.params, &ds, &stats, &opts, out)?;
    for (l, mean) in noisymim_core::analysis::layer_means(&art.records) {
        println!("layer {l}: mean KL {mean:.6}");
    }
    let mut m = base_manifest(started);
    m.push(("checkpoint".into(), checkpoint.display().to_string()));
    m.push(("seed".into(), ckpt.config.train.seed.to_string()));
    m.push(("samples".into(), samples.min(ds.len()).to_string()));
    for f in &art.files {
        if let Some(name) = f.file_name().and_then(|n| n.to_str()) {
            m.push((format!("artifact.{name}"), name.to_string()));
        }
    }
    finish_manifest(out, m)?;
    Ok(())
}

fn gradcheck_config(path: Option<&Path>) -> Result<GradcheckConfig> {
    let mut gc = GradcheckConfig::default();
    let Some(path) = path else {
        return Ok(gc);
    };
    let mut train = TrainConfig {
        encoder: gc.encoder.clone(),
        ..TrainConfig::default()
    };
    for (i, raw) in fs::read_to_string(path)?.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
        let num = |what: &str| Error::Config(format!("cannot parse `{v}` for {what}"));
        match k {
            "gradcheck.batch" => gc.batch = v.parse().map_err(|_| num(k))?,
            "gradcheck.seed" => gc.seed = v.parse().map_err(|_| num(k))?,
            "gradcheck.init_std" => gc.init_std = v.parse().map_err(|_| num(k))?,
            "gradcheck.eps" => gc.eps = v.parse().map_err(|_| num(k))?,
            "gradcheck.threshold" => gc.threshold = v.parse().map_err(|_| num(k))?,
            "gradcheck.timestep" => gc.timestep = v.parse().map_err(|_| num(k))?,
            k if k.starts_with("encoder.") => train.set(k, v)?,
            other => {
                return Err(Error::Config(format!(
                    "gradcheck accepts encoder.* and gradcheck.* keys, not `{other}`"
                )))
            }
        }
    }
    gc.encoder = train.encoder;
    gc.encoder.validate()?;
    Ok(gc)
}

/// False for NaN as well as for errors at or above the threshold.
fn within(err: f64, threshold: f64) -> bool {
    err < threshold
}

fn gradcheck(
    config: Option<&Path>,
    out: Option<&Path>,
    corrupt: Option<String>,
    started: u64,
) -> CmdResult {
    let mut gc = gradcheck_config(config)?;
    if let Some(name) = &corrupt {
        noisymim_core::encoder::ParamStore::init(&gc.encoder, 0)?
            .position(name)
            .ok_or_else(|| fail(2, format!("no parameter named `{name}`")))?;
    }
    gc.corrupt_param = corrupt;
    let t0 = std::time::Instant::now();
    let comps = check_components(&gc)?;
    let ops = check_op_families(gc.seed, gc.eps)?;

    let mut report = format!("{:<14} {:>14}  worst parameter\n", "check", "max rel err");
    let mut failures = Vec::new();
    for c in &comps {
        let (param, err) = c.worst();
        report.push_str(&format!(
            "{:<14} {:>14.3e}  {param}\n",
            c.component.name(),
            err
        ));
        for (p, e) in &c.per_param {
            if !within(*e, gc.threshold) {
                failures.push(format!(
                    "{} gradient of {p}: rel err {e:.3e}",
                    c.component.name()
                ));
            }
        }
    }
    for (name, err) in &ops {
        report.push_str(&format!("{:<14} {:>14.3e}  op\n", name, err));
        if !within(*err, gc.threshold) {
            failures.push(format!("op {name}: rel err {err:.3e}"));
        }
    }
    report.push_str(&format!(
        "threshold {:.0e}; {:.2}s; {}\n",
        gc.threshold,
        t0.elapsed().as_secs_f64(),
        if failures.is_empty() { "PASS" } else { "FAIL" }
    ));
    print!("{report}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("gradcheck.txt"), &report)?;
        let mut m = base_manifest(started);
        m.push(("seed".into(), gc.seed.to_string()));
        m.push(("artifact.report".into(), "gradcheck.txt".into()));
        finish_manifest(dir, m)?;
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(fail(
            1,
            format!("gradient check failed: {}", failures.join("; ")),
        ))
    }
}
