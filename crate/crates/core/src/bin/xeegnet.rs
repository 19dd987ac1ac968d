use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xeegnet::analysis::{self, FbfsOptions};
use xeegnet::experiment::{
    self, compare_models_on, rows_csv, run_experiment_on, split_separability, synth_spec, train_single, Dataset,
    DatasetConfig, DatasetSource, ExperimentConfig,
};
use xeegnet::filterbank::{canonical_bank, check_kernel, freq_response};
use xeegnet::model::{self, build_with_default_bank, load_checkpoint, save_checkpoint, Preset};
use xeegnet::signal_io::{default_channel_names, synth_generate, write_dataset};
use xeegnet::spectral::{welch_psd, window_band_powers};
use xeegnet::training::init_seed;
use xeegnet::{Band, Error};

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "xeegnet", version, about = "Band-power convolutional EEG classifiers")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Experiment config (TOML, or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Architecture preset, e.g. xEEGNet or ShallowNet.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Also write weight tables as CSV.
    #[arg(long, global = true)]
    export_csv: bool,
    /// Dataset manifest, replacing the configured source.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Use the built-in synthetic profile with this many subjects per class.
    #[arg(long, global = true)]
    synth: Option<usize>,
    /// Outer folds (test partitions)
    #[arg(long, global = true)]
    outer: Option<usize>,
    /// Inner folds (validation partitions) per outer fold
    #[arg(long, global = true)]
    inner: Option<usize>,
    /// Maximum training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Initial learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (raw f32 files plus manifest).
    Synth {
        #[arg(long, default_value_t = 20)]
        subjects: usize,
        #[arg(long)]
        channels: Option<usize>,
        /// Recording length in seconds.
        #[arg(long)]
        length: Option<f64>,
    },
    /// Train one split and save its checkpoint.
    Train {
        #[arg(long = "split-outer", default_value_t = 1)]
        split_outer: usize,
        #[arg(long = "split-inner", default_value_t = 1)]
        split_inner: usize,
    },
    /// Run the full nested leave-N-subjects-out protocol.
    Nlnso {
        /// Also save a checkpoint per split.
        #[arg(long)]
        save_models: bool,
        #[arg(long)]
        no_analyses: bool,
    },
    /// Run several models on the same split plan.
    Compare {
        /// Comma separated presets; MLRM and shnMLRM are accepted too.
        #[arg(long, value_delimiter = ',', default_value = "xEEGNet,ShallowNet,MLRM,shnMLRM")]
        models: Vec<String>,
    },
    /// Spectral and model analyses
    #[command(subcommand)]
    Analyze(Analyze),
    /// Filter bank and weight inspection
    #[command(subcommand)]
    Inspect(Inspect),
}

#[derive(Subcommand)]
enum Analyze {
    /// Welch PSD and band powers per subject.
    Psd,
    /// Logit-space separability of one trained split.
    Separability {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "split-outer", default_value_t = 1)]
        split_outer: usize,
        #[arg(long = "split-inner", default_value_t = 1)]
        split_inner: usize,
    },
    /// Correlation screening and stepwise regression over a finished run.
    Regression {
        /// Directory written by `nlnso`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Weight change from initialization.
    Drift {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Initial weights; regenerated from the seed when absent.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Dense-layer band usage, plus activation/band-power agreement when a dataset is given.
    Bands {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Subcommand)]
enum Inspect {
    /// Frequency responses of the canonical filter bank.
    Filters {
        #[arg(long, default_value_t = 7)]
        n_filters: usize,
        #[arg(long, default_value_t = 125)]
        length: usize,
        #[arg(long, default_value_t = 125.0)]
        fs: f64,
    },
    /// Parameter counts and weight tables of a checkpoint or preset.
    Weights {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_config() { EXIT_CONFIG } else { EXIT_DATA },
            message: e.to_string(),
        }
    }
}

fn config_failure(e: Error) -> Failure {
    Failure { code: EXIT_CONFIG, message: e.to_string() }
}

type CliResult = Result<u8, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn experiment_config(g: &Global, need_dataset: bool) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::read(p).map_err(config_failure)?,
        None => {
            let source = match (&g.data, g.synth) {
                (Some(p), _) => DatasetSource::Manifest { path: p.clone() },
                (None, Some(n)) => DatasetSource::DementiaLike {
                    n_subjects_per_class: n,
                    channels: None,
                    recording_length_s: None,
                    seed: None,
                },
                (None, None) if need_dataset => {
                    return Err(Failure {
                        code: EXIT_CONFIG,
                        message: "no dataset: pass --config, --data or --synth".into(),
                    })
                }
                (None, None) => DatasetSource::DementiaLike {
                    n_subjects_per_class: 10,
                    channels: None,
                    recording_length_s: None,
                    seed: None,
                },
            };
            ExperimentConfig::new(DatasetConfig { source, window_length_s: None, overlap: 0.0 })
        }
    };
    if g.config.is_some() {
        if let Some(p) = &g.data {
            cfg.dataset.source = DatasetSource::Manifest { path: p.clone() };
        } else if let Some(n) = g.synth {
            cfg.dataset.source = DatasetSource::DementiaLike {
                n_subjects_per_class: n,
                channels: None,
                recording_length_s: None,
                seed: None,
            };
        }
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(p) = &g.preset {
        cfg.preset = p.clone();
        cfg.model = None;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    if let Some(j) = g.jobs {
        cfg.jobs = j;
    }
    if let Some(o) = g.outer {
        cfg.outer = o;
    }
    if let Some(i) = g.inner {
        cfg.inner = i;
    }
    if let Some(e) = g.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(lr) = g.lr {
        cfg.train.lr0 = lr;
    }
    cfg.export_csv |= g.export_csv;
    cfg.validate().map_err(config_failure)?;
    Ok(cfg)
}

fn load(cfg: &ExperimentConfig) -> Result<Dataset, Failure> {
    let ds = Dataset::load(&cfg.dataset)?;
    for w in &ds.warnings {
        log::warn!("{w}");
    }
    Ok(ds)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure { code: EXIT_DATA, message: format!("{}: {e}", dir.display()) })?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Failure { code: EXIT_DATA, message: format!("{}: {e}", path.display()) })?;
    println!("wrote {}", path.display());
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn run(cli: Cli) -> CliResult {
    let g = cli.global;
    match cli.command {
        Command::Synth { subjects, channels, length } => {
            let cfg = experiment_config(&g, false)?;
            let mut spec = match (&g.config, synth_spec(&cfg.dataset.source, cfg.seed)) {
                (Some(_), Some(s)) => s,
                _ => xeegnet::signal_io::SynthSpec::dementia_like(subjects, cfg.seed),
            };
            if let Some(c) = channels {
                spec.channels = c;
            }
            if let Some(l) = length {
                spec.recording_length_s = l;
            }
            let recs = synth_generate(&spec)?;
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("synth_data"));
            let m = write_dataset(&out, &recs, cfg.dataset.window_length_s.unwrap_or(4.0))?;
            write(&out, "synth_spec.json", json(&spec))?;
            println!("{} recordings, manifest at {}", m.entries.len(), out.join("manifest.json").display());
            Ok(0)
        }
        Command::Train { split_outer, split_inner } => {
            let cfg = experiment_config(&g, true)?;
            let ds = load(&cfg)?;
            let (mcfg, res) = train_single(&cfg, &ds, split_outer, split_inner)?;
            let out = &cfg.out_dir;
            experiment::write_run_manifest(out, &cfg, "train")?;
            write(out, "split.csv", rows_csv(std::slice::from_ref(&res.row)))?;
            let (Some(p), Some(t)) = (&res.params, &res.trace) else {
                return Err(Failure {
                    code: EXIT_DATA,
                    message: res.row.error.unwrap_or_else(|| "training failed".into()),
                });
            };
            save_checkpoint(&out.join("model.ckpt"), &mcfg, p)?;
            println!("wrote {}", out.join("model.ckpt").display());
            write(out, "trace.csv", t.to_csv())?;
            if cfg.export_csv {
                write(out, "dense_weights.csv", model::dense_weights_csv(&mcfg, p))?;
                write(out, "spatial_weights.csv", model::spatial_weights_csv(&mcfg, p, &ds.channel_names))?;
            }
            println!(
                "split ({split_outer}, {split_inner}): weighted accuracy {:.4}, {} epochs",
                res.row.weighted_accuracy.unwrap_or(f64::NAN),
                t.epochs_run
            );
            Ok(0)
        }
        Command::Nlnso { save_models, no_analyses } => {
            let mut cfg = experiment_config(&g, true)?;
            cfg.save_models |= save_models;
            cfg.analyses &= !no_analyses;
            let ds = load(&cfg)?;
            let b = run_experiment_on(&cfg, &ds)?;
            let s = &b.summary;
            if let Some(a) = &s.weighted_accuracy {
                println!(
                    "{}: {} of {} splits, median weighted accuracy {:.4} (mean {:.4}, QCV {})",
                    s.model,
                    s.splits_ok,
                    s.splits_planned,
                    a.median,
                    a.mean,
                    a.qcv.map_or("n/a".into(), |q| format!("{q:.4}"))
                );
            }
            println!("reports in {}", b.out_dir.display());
            Ok(if b.has_failures() { EXIT_PARTIAL } else { 0 })
        }
        Command::Compare { models } => {
            let cfg = experiment_config(&g, true)?;
            let ds = load(&cfg)?;
            let cmp = compare_models_on(&cfg, &ds, &models)?;
            experiment::write_comparison(&cfg.out_dir, &cfg, &cmp)?;
            println!("{:<12} {:>10} {:>8} {:>8}", "model", "params", "median", "mean");
            let mut partial = false;
            for r in &cmp.rows {
                partial |= r.splits_ok < r.per_split.len();
                let (md, mn) = r.weighted_accuracy.as_ref().map_or((f64::NAN, f64::NAN), |d| (d.median, d.mean));
                println!("{:<12} {:>10} {:>8.4} {:>8.4}", r.model, r.trainable_params, md, mn);
            }
            Ok(if partial { EXIT_PARTIAL } else { 0 })
        }
        Command::Analyze(a) => analyze(&g, a),
        Command::Inspect(i) => inspect(&g, i),
    }
}

fn analyze(g: &Global, a: Analyze) -> CliResult {
    match a {
        Analyze::Psd => {
            let cfg = experiment_config(g, true)?;
            let ds = load(&cfg)?;
            let mut bands = format!(
                "subject,label,{}\n",
                Band::ALL.iter().map(|b| b.name()).collect::<Vec<_>>().join(",")
            );
            let mut psd_csv = String::from("subject,label,freq_hz,density\n");
            for (id, d) in &ds.subjects {
                let mut mean_bp = [0.0; 7];
                let mut mean_psd: Vec<f64> = Vec::new();
                let mut freqs = Vec::new();
                for w in &d.windows {
                    let bp = window_band_powers(w, ds.fs)?;
                    mean_bp.iter_mut().zip(&bp).for_each(|(a, b)| *a += b / d.windows.len() as f64);
                    let psd = welch_psd(w, ds.fs)?;
                    if mean_psd.is_empty() {
                        mean_psd = vec![0.0; psd.freqs.len()];
                        freqs = psd.freqs.clone();
                    }
                    for c in 0..psd.channels {
                        for (m, v) in mean_psd.iter_mut().zip(psd.channel(c)) {
                            *m += v / (psd.channels * d.windows.len()) as f64;
                        }
                    }
                }
                let vals: Vec<String> = mean_bp.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(bands, "{id},{},{}", d.label, vals.join(","));
                for (f, v) in freqs.iter().zip(&mean_psd) {
                    let _ = writeln!(psd_csv, "{id},{},{f},{v}", d.label);
                }
            }
            write(&cfg.out_dir, "band_power.csv", bands)?;
            write(&cfg.out_dir, "psd.csv", psd_csv)?;
            Ok(0)
        }
        Analyze::Separability { checkpoint, split_outer, split_inner } => {
            let cfg = experiment_config(g, true)?;
            let ck = load_checkpoint(&checkpoint)?;
            let ds = load(&cfg)?;
            let plan = experiment::plan_split(&cfg, &ds, split_outer, split_inner)?;
            let m = split_separability(&ck.config, &ck.params, &ds, &plan)?;
            let mut csv = String::from("pair,separability\n");
            for e in &m.entries {
                let _ = writeln!(csv, "{},{}", e.pair, e.value);
            }
            for w in &m.warnings {
                log::warn!("{w}");
            }
            write(&cfg.out_dir, "separability.csv", csv)?;
            Ok(0)
        }
        Analyze::Regression { run } => {
            let (target, features) = read_run_separability(&run)?;
            let (screening, report) = analysis::screen_and_select(&target, &features, 0.05, &FbfsOptions::default())?;
            let out = g.out.clone().unwrap_or(run);
            write(&out, "regression.json", json(&experiment::RegressionOutput { screening, report: report.clone() }))?;
            println!("selected: {:?}", report.selected_features);
            for c in &report.fit.coefficients {
                println!(
                    "{:<20} coef {:>9.4} se {:>7.4} t {:>8.3} p {:>7.4} [{:.3}, {:.3}]",
                    c.name, c.coef, c.std_err, c.t, c.p, c.ci_low, c.ci_high
                );
            }
            println!("adj R2 {:.3}  AIC {:.1}", report.fit.adj_r2, report.fit.aic);
            Ok(0)
        }
        Analyze::Drift { checkpoint, init } => {
            let ck = load_checkpoint(&checkpoint)?;
            let init = match init {
                Some(p) => load_checkpoint(&p)?.params,
                None => {
                    let seed = match g.seed {
                        Some(s) => s,
                        None => g
                            .config
                            .as_ref()
                            .map(|p| ExperimentConfig::read(p).map(|c| c.seed))
                            .transpose()
                            .map_err(config_failure)?
                            .unwrap_or(experiment::DEFAULT_SEED),
                    };
                    build_with_default_bank(&ck.config, init_seed(seed))?
                }
            };
            let d = analysis::weight_drift(&init, &ck.params)?;
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("."));
            write(&out, "drift.json", json(&d))?;
            for t in &d.tensors {
                println!(
                    "{:<18} frozen={:<5} median {:>9.3}%  IQR [{:.3}, {:.3}]%",
                    t.name, t.frozen, t.quantiles[2], t.quantiles[1], t.quantiles[3]
                );
            }
            Ok(0)
        }
        Analyze::Bands { checkpoint } => {
            let ck = load_checkpoint(&checkpoint)?;
            let usage = analysis::dense_band_usage(&ck.params)?;
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let mut csv = String::from("band,class,weight,tie\n");
            for u in &usage {
                let class = u.class.map_or("unused".into(), |l| l.to_string());
                let _ = writeln!(csv, "{},{class},{},{}", u.band, u.weight, u.tie);
                println!("{:<6} -> {class}{}", u.band, if u.tie { " (tie)" } else { "" });
            }
            write(&out, "band_usage.csv", csv)?;
            if g.config.is_some() || g.data.is_some() || g.synth.is_some() {
                let cfg = experiment_config(g, true)?;
                let ds = load(&cfg)?;
                let windows: Vec<_> = ds.subjects.values().flat_map(|d| d.windows.iter().cloned()).collect();
                let corr = analysis::activation_bandpower_corr(&ck.config, &ck.params, &windows, ds.fs)?;
                let mut csv = String::from("band,rho,slope,intercept,n\n");
                for c in &corr {
                    let _ = writeln!(csv, "{},{},{},{},{}", c.band, c.rho, c.slope, c.intercept, c.n);
                }
                write(&out, "band_correlation.csv", csv)?;
            }
            Ok(0)
        }
    }
}

/// Weighted accuracy and the 36 separabilities of every successful split of a run.
fn read_run_separability(run: &Path) -> Result<(Vec<f64>, Vec<(String, Vec<f64>)>), Failure> {
    let read = |name: &str| {
        let p = run.join(name);
        fs::read_to_string(&p).map_err(|e| Failure { code: EXIT_DATA, message: format!("{}: {e}", p.display()) })
    };
    let bad = |msg: String| Failure { code: EXIT_DATA, message: msg };
    let splits = read("splits.csv")?;
    let sep = read("separability.csv")?;
    let mut acc = std::collections::BTreeMap::new();
    for line in splits.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 7 || f[2] != "ok" {
            continue;
        }
        let v: f64 = f[6].parse().map_err(|_| bad(format!("bad accuracy in {line:?}")))?;
        acc.insert((f[0].to_string(), f[1].to_string()), v);
    }
    let mut lines = sep.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| bad("separability.csv is empty".into()))?
        .split(',')
        .skip(2)
        .map(str::to_string)
        .collect();
    let mut target = Vec::new();
    let mut cols = vec![Vec::new(); header.len()];
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let Some(&a) = acc.get(&(f[0].to_string(), f[1].to_string())) else {
            continue;
        };
        target.push(a);
        for (k, v) in f[2..].iter().enumerate() {
            cols[k].push(v.parse::<f64>().unwrap_or(f64::NAN));
        }
    }
    let features = header
        .into_iter()
        .zip(cols)
        .filter(|(_, v)| v.iter().all(|x| x.is_finite()))
        .collect();
    Ok((target, features))
}

fn inspect(g: &Global, i: Inspect) -> CliResult {
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("."));
    match i {
        Inspect::Filters { n_filters, length, fs } => {
            let bank = canonical_bank(n_filters, length, fs)?;
            let mut all = String::from("kernel,freq_hz,magnitude_db,phase_rad\n");
            let mut checks = String::from("kernel,worst_pass_db,worst_stop_db\n");
            for k in &bank {
                let r = freq_response(k, 1001)?;
                for ((f, m), p) in r.freqs.iter().zip(&r.magnitude_db).zip(&r.phase_rad) {
                    let _ = writeln!(all, "{},{f},{m},{p}", k.name());
                }
                let c = check_kernel(k);
                let _ = writeln!(checks, "{},{},{}", k.name(), c.worst_pass_db, c.worst_stop_db);
                println!("{:<24} pass >= {:>7.2} dB  stop <= {:>7.2} dB", k.name(), c.worst_pass_db, c.worst_stop_db);
            }
            write(&out, "filter_response.csv", all)?;
            write(&out, "filter_checks.csv", checks)?;
            if g.export_csv {
                let mut taps = String::from("kernel,tap,value\n");
                for k in &bank {
                    for (t, v) in k.taps.iter().enumerate() {
                        let _ = writeln!(taps, "{},{t},{v}", k.name());
                    }
                }
                write(&out, "filter_taps.csv", taps)?;
            }
            Ok(0)
        }
        Inspect::Weights { checkpoint } => {
            let (cfg, params) = match checkpoint {
                Some(p) => {
                    let ck = load_checkpoint(&p)?;
                    (ck.config, ck.params)
                }
                None => {
                    let name = g.preset.clone().unwrap_or_else(|| Preset::XEegNet.to_string());
                    let preset: Preset = name.parse().map_err(config_failure)?;
                    let cfg = preset.config();
                    let params = build_with_default_bank(&cfg, init_seed(g.seed.unwrap_or(experiment::DEFAULT_SEED)))?;
                    (cfg, params)
                }
            };
            let pc = cfg.count_params()?;
            let macs = xeegnet::evaluation::count_macs(&cfg)?;
            println!(
                "trainable {} (temporal {} + spatial {} + batch norm {} + dense {}), total {}",
                pc.trainable, pc.temporal, pc.spatial, pc.batch_norm, pc.dense, pc.total
            );
            println!("MACs per window {}", macs.total);
            if g.export_csv {
                write(&out, "dense_weights.csv", model::dense_weights_csv(&cfg, &params))?;
                write(
                    &out,
                    "spatial_weights.csv",
                    model::spatial_weights_csv(&cfg, &params, &default_channel_names(cfg.channels)),
                )?;
            }
            Ok(0)
        }
    }
}
