//! Experiment CLI: configuration parsing, subcommand dispatch, run
//! directories, seeds, and report emission.
//!
//! Subcommands: `gen-data`, `train`, `eval`, `decode`, `check-diffusion`,
//! `bench`. Every run writes a manifest (config snapshot, seed, code
//! version, timestamps). Numeric outputs are reproducible byte-for-byte
//! given the same config and seed; manifests are the only files carrying
//! wall-clock state. `DIFFNAR_THREADS` selects the worker count for
//! batch-parallel gradient accumulation (default 1; any count produces
//! identical results).

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::diffusion::{run_diffusion_checks, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::eval::{accuracy_metrics, latency_bench, mca, Readout};
use crate::model::{Mode, ModelConfig, TransformerModel};
use crate::scalar::Scalar;
use crate::synthdata::{generate_dataset, load_dataset, save_dataset, DatasetSpec, Vocabulary};
use crate::training::{encode_pairs, run_training, TrainConfig, TrainData};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "diffnar", version, about = "Synthetic multi-modality sequence generation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus from a dataset spec.
    GenData(GenDataArgs),
    /// Train a model on a generated corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint: accuracy metrics plus the likelihood metric.
    Eval(EvalArgs),
    /// Decode a corpus with a checkpoint, emitting newline-delimited JSON.
    Decode(DecodeArgs),
    /// Run the diffusion math enumeration oracles and report deviations.
    CheckDiffusion(CheckDiffusionArgs),
    /// Wall-clock latency: one-pass parallel decoding vs greedy sequential.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Dataset spec JSON file.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for the corpus files.
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Allow writing into an existing non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run config JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory (checkpoints, metrics CSVs, manifest).
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
    /// Print progress to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which split to evaluate: train | valid | test.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Cap the number of evaluated pairs (0 = all).
    #[arg(long, default_value_t = 0)]
    limit: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory (vocabulary + spec).
    #[arg(long)]
    data: PathBuf,
    /// Corpus file to decode; defaults to the chosen split of --data.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Output JSONL file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    limit: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct CheckDiffusionArgs {
    /// Optional directory for the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// NAR checkpoint.
    #[arg(long)]
    nar: PathBuf,
    /// AR checkpoint.
    #[arg(long)]
    ar: PathBuf,
    /// Corpus directory (provides the value range for fresh sources).
    #[arg(long)]
    data: PathBuf,
    /// Sequence length to benchmark at.
    #[arg(long, default_value_t = 32)]
    len: usize,
    /// Number of timed sequences.
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

/// Top-level training run configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// "f64" (default) or "f32".
    #[serde(default = "default_precision")]
    pub precision: String,
    /// Optional corpus directory; the --data flag takes precedence.
    #[serde(default)]
    pub data: Option<String>,
    pub model: ModelConfig,
    pub schedule: DiffusionSchedule,
    pub train: TrainConfig,
}

fn default_precision() -> String {
    "f64".to_string()
}

/// Parses argv and runs the subcommand. Exit codes: 0 success, 2 usage
/// errors, 3 config/validation failures, 1 runtime failures.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own usage/error text
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Decode(a) => cmd_decode(a),
        Command::CheckDiffusion(a) => cmd_check_diffusion(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Data(_) => 3,
                _ => 1,
            }
        }
    }
}

/// Worker count from `DIFFNAR_THREADS` (>= 1; default 1).
pub fn thread_count() -> usize {
    std::env::var("DIFFNAR_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n >= 1).unwrap_or(1)
}

fn now_epoch_s() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} exists and is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

struct Manifest {
    command: &'static str,
    seed: u64,
    config: serde_json::Value,
    args: serde_json::Value,
    started_at: u64,
}

impl Manifest {
    fn start(command: &'static str, seed: u64, config: serde_json::Value, args: serde_json::Value) -> Self {
        Manifest { command, seed, config, args, started_at: now_epoch_s() }
    }

    fn finish(self, path: &Path) -> Result<()> {
        let doc = json!({
            "command": self.command,
            "seed": self.seed,
            "code_version": CODE_VERSION,
            "started_at_epoch_s": self.started_at,
            "finished_at_epoch_s": now_epoch_s(),
            "args": self.args,
            "config": self.config,
        });
        let f = fs::File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(f), &doc)?;
        Ok(())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid {what} {}: {e}", path.display())))
}

fn cmd_gen_data(a: GenDataArgs) -> Result<i32> {
    let mut spec: DatasetSpec = read_json(&a.spec, "dataset spec")?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    prepare_out_dir(&a.out, a.force)?;
    let manifest = Manifest::start(
        "gen-data",
        spec.seed,
        serde_json::to_value(&spec)?,
        json!({"spec": a.spec, "out": a.out, "force": a.force}),
    );
    let ds = generate_dataset(&spec)?;
    let vocab = Vocabulary::from_spec(&spec);
    save_dataset(&a.out, &spec, &ds, &vocab)?;
    manifest.finish(&a.out.join("manifest.json"))?;
    println!(
        "wrote {} train / {} valid / {} test pairs, vocabulary size {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        vocab.size()
    );
    Ok(0)
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let mut cfg: RunConfig = read_json(&a.config, "run config")?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    let data_dir = match (&a.data, &cfg.data) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => return Err(Error::Config("no corpus: pass --data or set \"data\" in the config".into())),
    };
    if !data_dir.exists() {
        return Err(Error::Config(format!("corpus directory {} does not exist", data_dir.display())));
    }
    let (spec, ds, vocab) = load_dataset(&data_dir)?;
    cfg.model.vocab_size = vocab.size();
    cfg.model.validate()?;
    cfg.schedule.validate()?;
    cfg.train.validate()?;
    prepare_out_dir(&a.out, a.force)?;
    let manifest = Manifest::start(
        "train",
        cfg.seed,
        serde_json::to_value(&cfg)?,
        json!({"config": a.config, "data": data_dir, "out": a.out, "force": a.force}),
    );
    // config snapshot for re-running
    let f = fs::File::create(a.out.join("config.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &cfg)?;

    let merge = cfg.train.regimen == crate::training::Regimen::ModalityGrowing;
    let merge_ctx = if merge {
        let map = spec
            .merge_map
            .as_ref()
            .ok_or_else(|| Error::Config("modality growing needs a merge_map in the dataset spec".into()))?;
        Some((map, spec.rules.as_slice()))
    } else {
        None
    };
    let train_pairs = encode_pairs(&ds.train, &vocab, merge_ctx)?;
    let data = TrainData { train: train_pairs, val: &ds.val, vocab: &vocab, rules: &spec.rules };
    let last = match cfg.precision.as_str() {
        "f64" => run_training::<f64>(&a.out, &data, cfg.model.clone(), cfg.schedule.clone(), cfg.train.clone(), a.verbose)?,
        "f32" => run_training::<f32>(&a.out, &data, cfg.model.clone(), cfg.schedule.clone(), cfg.train.clone(), a.verbose)?,
        other => return Err(Error::Config(format!("unknown precision '{other}' (f64 or f32)"))),
    };
    manifest.finish(&a.out.join("manifest.json"))?;
    println!("trained {} steps, final loss {:.6}", last.step + 1, last.total_loss);
    Ok(0)
}

fn load_model_any(path: &Path) -> Result<(Checkpoint, ModelAny)> {
    let ck = Checkpoint::read(path)?;
    let model = match ck.precision.as_str() {
        "f64" => ModelAny::F64(ck.instantiate::<f64>()?),
        "f32" => ModelAny::F32(ck.instantiate::<f32>()?),
        other => return Err(Error::Config(format!("checkpoint precision '{other}' unsupported"))),
    };
    Ok((ck, model))
}

enum ModelAny {
    F64(TransformerModel<f64>),
    F32(TransformerModel<f32>),
}

impl ModelAny {
    fn mode(&self) -> Mode {
        match self {
            ModelAny::F64(m) => m.cfg.mode,
            ModelAny::F32(m) => m.cfg.mode,
        }
    }

    fn decode(&self, src: &[usize]) -> Result<Vec<usize>> {
        match (self, self.mode()) {
            (ModelAny::F64(m), Mode::Nar) => m.decode_argmax(src),
            (ModelAny::F64(m), Mode::Ar) => m.ar_decode(src),
            (ModelAny::F32(m), Mode::Nar) => m.decode_argmax(src),
            (ModelAny::F32(m), Mode::Ar) => m.ar_decode(src),
        }
    }

    fn mca_final(&self, srcs: &[Vec<usize>], tgts: &[Vec<usize>]) -> Result<crate::eval::McaReport> {
        match self {
            ModelAny::F64(m) => mca(m, srcs, tgts, Readout::Final),
            ModelAny::F32(m) => mca(m, srcs, tgts, Readout::Final),
        }
    }
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let (ck, model) = load_model_any(&a.checkpoint)?;
    let (spec, ds, vocab) = load_dataset(&a.data)?;
    let pairs = ds.split(&a.split)?;
    let pairs = if a.limit > 0 && a.limit < pairs.len() { &pairs[..a.limit] } else { pairs };
    if pairs.is_empty() {
        return Err(Error::Data(format!("split '{}' is empty", a.split)));
    }
    prepare_out_dir(&a.out, a.force)?;
    let manifest = Manifest::start(
        "eval",
        ck.step,
        json!({"checkpoint_step": ck.step, "precision": ck.precision, "model": ck.model}),
        json!({"checkpoint": a.checkpoint, "data": a.data, "split": a.split, "limit": a.limit, "out": a.out}),
    );

    let mut outputs = Vec::with_capacity(pairs.len());
    let mut sources = Vec::with_capacity(pairs.len());
    let mut srcs_ids = Vec::with_capacity(pairs.len());
    let mut tgts_ids = Vec::with_capacity(pairs.len());
    for p in pairs {
        let src = vocab.encode(&p.source)?;
        let out_ids = model.decode(&src)?;
        outputs.push(vocab.decode(&out_ids).into_iter().map(|v| v.unwrap_or(i64::MIN)).collect::<Vec<_>>());
        sources.push(p.source.clone());
        tgts_ids.push(vocab.encode(&p.target)?);
        srcs_ids.push(src);
    }
    let acc = accuracy_metrics(&outputs, &sources, &spec.rules);
    let mca_report = match model.mode() {
        Mode::Nar => Some(model.mca_final(&srcs_ids, &tgts_ids)?),
        Mode::Ar => None,
    };

    // per-pair flat CSV
    let mut csv = fs::File::create(a.out.join("pairs.csv"))?;
    writeln!(csv, "index,modality_true,modality_closest,distance,exact,len")?;
    for (i, (p, out)) in pairs.iter().zip(&outputs).enumerate() {
        let (ridx, _tgt, dist) = crate::eval::closest_target(out, &p.source, &spec.rules);
        writeln!(
            csv,
            "{i},{},{},{dist},{},{}",
            p.modality,
            spec.rules[ridx].id,
            (dist == 0) as u8,
            out.len()
        )?;
    }

    let report = json!({
        "split": a.split,
        "pairs": pairs.len(),
        "accuracy": acc,
        "mca": mca_report,
        "checkpoint_step": ck.step,
        "precision": ck.precision,
    });
    let f = fs::File::create(a.out.join("report.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &report)?;
    manifest.finish(&a.out.join("manifest.json"))?;
    println!(
        "number accuracy {:.2}%, sequence accuracy {:.2}%{}",
        acc.number_accuracy,
        acc.sequence_accuracy,
        match &mca_report {
            Some(m) => format!(", nll {:.4} nats/token", m.nats_per_token),
            None => String::new(),
        }
    );
    Ok(0)
}

fn cmd_decode(a: DecodeArgs) -> Result<i32> {
    let (_ck, model) = load_model_any(&a.checkpoint)?;
    let (spec, ds, vocab) = load_dataset(&a.data)?;
    let pairs_storage;
    let pairs = match &a.input {
        Some(input) => {
            pairs_storage = crate::synthdata::read_jsonl(input)?;
            &pairs_storage[..]
        }
        None => ds.split(&a.split)?,
    };
    let pairs = if a.limit > 0 && a.limit < pairs.len() { &pairs[..a.limit] } else { pairs };
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    if a.out.exists() && !a.force {
        return Err(Error::Config(format!("{} exists (use --force)", a.out.display())));
    }
    let manifest = Manifest::start(
        "decode",
        0,
        json!({"checkpoint": a.checkpoint}),
        json!({"data": a.data, "input": a.input, "split": a.split, "limit": a.limit, "out": a.out}),
    );
    let f = fs::File::create(&a.out)?;
    let mut w = BufWriter::new(f);
    for p in pairs {
        let src = vocab.encode(&p.source)?;
        let out_ids = model.decode(&src)?;
        let out_vals = vocab.decode(&out_ids);
        let (ridx, _t, dist) = crate::eval::closest_target(
            &out_vals.iter().map(|v| v.unwrap_or(i64::MIN)).collect::<Vec<_>>(),
            &p.source,
            &spec.rules,
        );
        let line = json!({
            "source": p.source,
            "output": out_vals,
            "closest_modality": spec.rules[ridx].id,
            "distance": dist,
        });
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut manifest_path = a.out.clone();
    manifest_path.set_extension("manifest.json");
    manifest.finish(&manifest_path)?;
    println!("decoded {} sequences", pairs.len());
    Ok(0)
}

fn cmd_check_diffusion(a: CheckDiffusionArgs) -> Result<i32> {
    let report = run_diffusion_checks()?;
    for l in &report.lines {
        let status = if l.informational {
            "info"
        } else if l.pass {
            "pass"
        } else {
            "FAIL"
        };
        if l.informational {
            println!("[{status}] {}: max deviation {:.3e}", l.name, l.max_deviation);
        } else {
            println!(
                "[{status}] {}: max deviation {:.3e} (threshold {:.0e})",
                l.name, l.max_deviation, l.threshold
            );
        }
    }
    if let Some(out) = &a.out {
        prepare_out_dir(out, true)?;
        let f = fs::File::create(out.join("check_diffusion.json"))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &report)?;
    }
    Ok(if report.all_pass { 0 } else { 1 })
}

fn cmd_bench(a: BenchArgs) -> Result<i32> {
    let (ck_nar, nar) = load_model_any(&a.nar)?;
    let (ck_ar, ar) = load_model_any(&a.ar)?;
    if nar.mode() != Mode::Nar {
        return Err(Error::Config("--nar checkpoint is not a NAR model".into()));
    }
    if ar.mode() != Mode::Ar {
        return Err(Error::Config("--ar checkpoint is not an AR model".into()));
    }
    let (spec, _ds, vocab) = load_dataset(&a.data)?;
    prepare_out_dir(&a.out, a.force)?;
    let manifest = Manifest::start(
        "bench",
        a.seed,
        json!({"nar_step": ck_nar.step, "ar_step": ck_ar.step, "len": a.len, "count": a.count, "batch_size": a.batch_size}),
        json!({"nar": a.nar, "ar": a.ar, "data": a.data, "out": a.out}),
    );
    // fresh sources of the requested length from the corpus value range
    let (lo, hi) = spec.value_range;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let srcs: Vec<Vec<usize>> = (0..a.count)
        .map(|_| {
            let vals: Vec<i64> = (0..a.len).map(|_| rng.gen_range(lo..=hi)).collect();
            vocab.encode(&vals)
        })
        .collect::<Result<_>>()?;
    let report = match (&nar, &ar) {
        (ModelAny::F64(n), ModelAny::F64(r)) => latency_bench(n, r, &srcs, a.batch_size)?,
        (ModelAny::F32(n), ModelAny::F32(r)) => latency_bench(n, r, &srcs, a.batch_size)?,
        _ => return Err(Error::Config("nar/ar checkpoints use different precisions".into())),
    };
    let f = fs::File::create(a.out.join("latency.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &report)?;
    manifest.finish(&a.out.join("manifest.json"))?;
    println!(
        "nar {:.3} ms/seq (std {:.3}), ar {:.3} ms/seq (std {:.3}), ratio {:.2}x over {} sequences",
        report.nar_mean_s * 1e3,
        report.nar_std_s * 1e3,
        report.ar_mean_s * 1e3,
        report.ar_std_s * 1e3,
        report.ratio,
        report.sequences
    );
    Ok(0)
}
