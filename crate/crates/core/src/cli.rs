//! Command-line front end: run configuration handling and one function per
//! subcommand. The `gaitmil` binary only parses arguments and maps errors to
//! exit codes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{
    class_counts, generate_dataset, load_dataset, load_text_embeddings, save_dataset, ClassLabel, FrameSequence,
    SynthConfig, TextGuidance, BUNDLED_TEXT_SEED,
};
use crate::dtw::{distance_matrix, frame_features, partition_sequence, DEFAULT_STRIPS};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::trainer::{
    self, format_ratio, parse_ratio, predict, run_ablation, run_sweep, stratified_split, write_history_csv,
    write_sweep_csv, Ablation, EvalReport, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "gaitmil", version, about = "Synthetic gait data, DTW bag clustering and scoliosis-grade training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic silhouette dataset.
    Synth(SynthArgs),
    /// Partition every sequence of a dataset into K contiguous bags.
    Cluster(ClusterArgs),
    /// Train a model and evaluate it on the held-out split.
    Train(ConfigArgs),
    /// Evaluate a checkpoint.
    Eval(ConfigArgs),
    /// Train and evaluate one model per class ratio.
    Sweep(ConfigArgs),
    /// Train and evaluate the configured ablation variants.
    Ablate(ConfigArgs),
    /// Write per-sequence embeddings of a checkpoint to CSV.
    ExportEmbeddings(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of positive sequences.
    #[arg(long, default_value_t = 0)]
    pub pos: usize,
    /// Number of neutral sequences.
    #[arg(long, default_value_t = 0)]
    pub neu: usize,
    /// Number of negative sequences.
    #[arg(long, default_value_t = 0)]
    pub neg: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sway (px) below which a sequence is negative.
    #[arg(long, default_value_t = 3.0)]
    pub sway_lo: f64,
    /// Sway (px) above which a sequence is positive.
    #[arg(long, default_value_t = 5.0)]
    pub sway_hi: f64,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Dataset directory (with manifest.json).
    #[arg(long)]
    pub data: PathBuf,
    /// Number of bags.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Output directory for the partition files.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write each frame-distance matrix as CSV.
    #[arg(long, default_value_t = false)]
    pub emit_distances: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Dotted-path override, e.g. `trainer.epochs=5`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Ratios as `pos:neu:neg` strings.
    pub ratios: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { ratios: ["1:1:2", "1:1:4", "1:1:8", "1:1:16"].map(String::from).to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub variants: Vec<Ablation>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection { variants: Ablation::ALL.to_vec() }
    }
}

/// Everything a `train`/`eval`/`sweep`/`ablate`/`export-embeddings` run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset directory used for training (and for the held-out split when
    /// `test_dir` is unset).
    pub data_dir: Option<PathBuf>,
    /// Separate evaluation dataset.
    pub test_dir: Option<PathBuf>,
    /// Text-guidance JSON; the bundled vectors are used when unset.
    pub text_guidance: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Checkpoint read by `eval` and `export-embeddings`; defaults to
    /// `<out_dir>/checkpoint`.
    pub checkpoint: Option<PathBuf>,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub sweep: SweepSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: None,
            test_dir: None,
            text_guidance: None,
            out_dir: None,
            checkpoint: None,
            test_fraction: 0.3,
            split_seed: 0,
            model: ModelConfig::default(),
            trainer: TrainConfig::default(),
            sweep: SweepSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_u64() => "non-negative integer",
        Value::Number(n) if n.is_i64() => "integer",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn compatible(template: &Value, v: &Value) -> bool {
    match (template, v) {
        (Value::Null, _) => true,
        (Value::Number(t), Value::Number(n)) => !t.is_u64() || n.is_u64(),
        (Value::Bool(_), Value::Bool(_)) | (Value::String(_), Value::String(_)) => true,
        (Value::Array(_), Value::Array(_)) | (Value::Object(_), Value::Object(_)) => true,
        _ => false,
    }
}

/// Compares `v` against the defaults in `template`, collecting every unknown
/// key and type mismatch.
fn check_keys(template: &Value, v: &Value, path: &str, problems: &mut Vec<String>) {
    let name = |k: &str| if path.is_empty() { k.to_string() } else { format!("{path}.{k}") };
    match (template, v) {
        (Value::Object(t), Value::Object(o)) => {
            for (k, val) in o {
                match t.get(k) {
                    None => problems.push(format!("{}: unknown key", name(k))),
                    Some(tv) if !compatible(tv, val) => {
                        problems.push(format!("{}: expected {}, got {} {}", name(k), kind(tv), kind(val), val))
                    }
                    Some(tv) => check_keys(tv, val, &name(k), problems),
                }
            }
        }
        (Value::Array(t), Value::Array(items)) => {
            if let Some(first) = t.first() {
                for (i, item) in items.iter().enumerate() {
                    let p = format!("{path}[{i}]");
                    if compatible(first, item) {
                        check_keys(first, item, &p, problems);
                    } else {
                        problems.push(format!("{p}: expected {}, got {} {}", kind(first), kind(item), item));
                    }
                }
            }
        }
        _ => {}
    }
}

/// Sets `key` (dotted path) in `doc`. The value is read as JSON when it
/// parses, otherwise as a string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Argument(format!("override {assignment:?} is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Argument(format!("override key {key:?} is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(Error::ConfigKeys(vec![format!("{key}: {part} is not a section")]));
        }
        node =
            node.as_object_mut().unwrap().entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::ConfigKeys(vec![format!("{key}: parent is not a section")])),
    }
}

impl RunConfig {
    /// Parses a JSON document after applying overrides. Unknown keys and type
    /// mismatches are reported together.
    pub fn from_json_str(text: &str, overrides: &[String], origin: &Path) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        if !doc.is_object() {
            return Err(Error::format(origin, "run configuration must be a JSON object"));
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let template = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        let mut problems = Vec::new();
        check_keys(&template, &doc, "", &mut problems);
        if !problems.is_empty() {
            return Err(Error::ConfigKeys(problems));
        }
        serde_json::from_value(doc).map_err(|e| Error::ConfigKeys(vec![e.to_string()]))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read run configuration {}: {e}", path.display())))?;
        Self::from_json_str(&text, overrides, path)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("test_fraction must be in [0, 1), got {}", self.test_fraction)));
        }
        for r in &self.sweep.ratios {
            parse_ratio(r)?;
        }
        Ok(())
    }

    fn require_dataset(dir: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        let dir = dir.clone().ok_or_else(|| Error::Config(format!("{key} is required")))?;
        if !dir.join(crate::data::MANIFEST).is_file() {
            return Err(Error::Config(format!("{key}: {} has no manifest.json", dir.display())));
        }
        Ok(dir)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out_dir.clone().ok_or_else(|| Error::Config("out_dir is required".into()))?;
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn checkpoint_dir(&self) -> Result<PathBuf> {
        match (&self.checkpoint, &self.out_dir) {
            (Some(c), _) => Ok(c.clone()),
            (None, Some(o)) => Ok(o.join("checkpoint")),
            (None, None) => Err(Error::Config("checkpoint or out_dir is required".into())),
        }
    }

    fn check_text_path(&self) -> Result<()> {
        match &self.text_guidance {
            Some(p) if !p.is_file() => Err(Error::Config(format!("text_guidance: {} does not exist", p.display()))),
            _ => Ok(()),
        }
    }

    /// Text vectors for the configured model width.
    pub fn text(&self) -> Result<TextGuidance> {
        match &self.text_guidance {
            Some(p) => load_text_embeddings(p, self.model.text_dim),
            None => {
                let bundled = TextGuidance::bundled();
                Ok(if bundled.dim == self.model.text_dim {
                    bundled
                } else {
                    TextGuidance::seeded(self.model.text_dim, BUNDLED_TEXT_SEED)
                })
            }
        }
    }

    /// Training and evaluation sets: `data_dir` split by class unless a
    /// separate `test_dir` is configured.
    fn datasets(&self, data_dir: &Path, test_dir: Option<&Path>) -> Result<(Vec<FrameSequence>, Vec<FrameSequence>)> {
        let data = load_dataset(data_dir)?;
        match test_dir {
            Some(t) => Ok((data, load_dataset(t)?)),
            None => {
                let (tr, te) = stratified_split(&data, self.test_fraction, self.split_seed)?;
                let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
                Ok((pick(&tr), pick(&te)))
            }
        }
    }

    fn ratios(&self) -> Result<Vec<trainer::Ratio>> {
        self.sweep.ratios.iter().map(|r| parse_ratio(r)).collect()
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn pct(x: Option<f64>) -> String {
    x.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

/// Summary table with the Acc / Sen / Spe / F1 columns, in percent.
pub fn summary_table(rows: &[(String, &EvalReport)]) -> String {
    let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<w$}  {:>6}  {:>6}  {:>6}  {:>6}\n", "", "Acc", "Sen", "Spe", "F1");
    for (name, r) in rows {
        writeln!(
            s,
            "{:<w$}  {:>6}  {:>6}  {:>6}  {:>6}",
            name,
            pct(Some(r.accuracy)),
            pct(r.sensitivity),
            pct(r.specificity),
            pct(Some(r.macro_f1))
        )
        .unwrap();
    }
    s
}

fn recall_line(r: &EvalReport) -> String {
    format!(
        "recall: negative {}  neutral {}  positive {}",
        pct(r.recall_of(ClassLabel::Negative)),
        pct(r.recall_of(ClassLabel::Neutral)),
        pct(r.recall_of(ClassLabel::Positive))
    )
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig::with_thresholds(args.sway_lo, args.sway_hi);
    let ds = generate_dataset(args.pos, args.neu, args.neg, &cfg, args.seed)?;
    if ds.is_empty() {
        log::warn!("no sequences requested; writing an empty manifest");
    }
    save_dataset(&ds, &args.out)?;
    let [neg, neu, pos] = class_counts(&ds);
    println!("wrote {} sequences to {}", ds.len(), args.out.display());
    println!("negative {neg}  neutral {neu}  positive {pos}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct PartitionRecord {
    subject_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    boundaries: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn safe_name(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes `<subject_id>.json` per sequence (and `<subject_id>.distances.csv`
/// on request). Sequences shorter than K get an error record and make the
/// command fail after all files are written.
pub fn cmd_cluster(args: &ClusterArgs) -> Result<()> {
    if args.k == 0 {
        return Err(Error::Argument("--k must be at least 1".into()));
    }
    let ds = load_dataset(&args.data)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut failed = Vec::new();
    for seq in &ds {
        let record = match partition_sequence(&seq.frames, args.k) {
            Ok(p) => {
                PartitionRecord { subject_id: seq.subject_id.clone(), boundaries: Some(p.boundaries), error: None }
            }
            Err(e) => {
                failed.push(seq.subject_id.clone());
                PartitionRecord { subject_id: seq.subject_id.clone(), boundaries: None, error: Some(e.to_string()) }
            }
        };
        let mut json = serde_json::to_string_pretty(&record).expect("record serializes");
        json.push('\n');
        let stem = safe_name(&seq.subject_id);
        write(&args.out.join(format!("{stem}.json")), &json)?;
        if args.emit_distances {
            let feats = frame_features(&seq.frames, DEFAULT_STRIPS)?;
            write(&args.out.join(format!("{stem}.distances.csv")), &distance_matrix(&feats)?.to_csv())?;
        }
    }
    println!("partitioned {} of {} sequences into {} bags", ds.len() - failed.len(), ds.len(), args.k);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "{} sequence(s) have fewer than {} frames: {}",
            failed.len(),
            args.k,
            failed.join(", ")
        )))
    }
}

fn load_run(args: &ConfigArgs) -> Result<RunConfig> {
    let cfg = RunConfig::load(&args.config, &args.overrides)?;
    cfg.validate()?;
    cfg.check_text_path()?;
    Ok(cfg)
}

/// Trains on the training split, writes `checkpoint/`, `history.csv`,
/// `report.json` and the resolved `config.json`. On divergence the last
/// finite parameters and the partial history are still written.
pub fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let cfg = load_run(args)?;
    let data_dir = RunConfig::require_dataset(&cfg.data_dir, "data_dir")?;
    let test_dir = match &cfg.test_dir {
        Some(_) => Some(RunConfig::require_dataset(&cfg.test_dir, "test_dir")?),
        None => None,
    };
    let out = cfg.out_dir()?;
    let text = cfg.text()?;
    let (train_set, test_set) = cfg.datasets(&data_dir, test_dir.as_deref())?;
    write(&out.join("config.json"), &cfg.to_json())?;

    let model = Model::new(cfg.model.clone(), text)?;
    let outcome = trainer::train(&train_set, model, &cfg.trainer)?;
    outcome.model.save(&out.join("checkpoint"))?;
    write_history_csv(&out.join("history.csv"), &outcome.history)?;
    let (model, _) = outcome.ok()?;
    if test_set.is_empty() {
        return Err(Error::Config("the held-out split is empty; raise test_fraction or set test_dir".into()));
    }
    let report = trainer::evaluate(&model, &test_set, cfg.trainer.sampler.window, cfg.trainer.eval_batch)?;
    write(&out.join("report.json"), &report.to_json())?;
    print!("{}", summary_table(&[("held-out".into(), &report)]));
    println!("{}", recall_line(&report));
    Ok(())
}

fn eval_set(cfg: &RunConfig) -> Result<Vec<FrameSequence>> {
    match &cfg.test_dir {
        Some(_) => load_dataset(&RunConfig::require_dataset(&cfg.test_dir, "test_dir")?),
        None => {
            let data_dir = RunConfig::require_dataset(&cfg.data_dir, "data_dir")?;
            Ok(cfg.datasets(&data_dir, None)?.1)
        }
    }
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Model> {
    let dir = cfg.checkpoint_dir()?;
    if !dir.join("model.json").is_file() {
        return Err(Error::Config(format!("checkpoint {} has no model.json", dir.display())));
    }
    Model::load(&dir)
}

/// Evaluates the checkpoint on `test_dir`, or on the held-out split of
/// `data_dir`, and writes `report.json`.
pub fn cmd_eval(args: &ConfigArgs) -> Result<()> {
    let cfg = load_run(args)?;
    let out = cfg.out_dir()?;
    let model = load_checkpoint(&cfg)?;
    let data = eval_set(&cfg)?;
    let report = trainer::evaluate(&model, &data, cfg.trainer.sampler.window, cfg.trainer.eval_batch)?;
    write(&out.join("report.json"), &report.to_json())?;
    print!("{}", summary_table(&[("eval".into(), &report)]));
    println!("{}", recall_line(&report));
    Ok(())
}

/// Runs the imbalance sweep and writes `sweep.csv` and `sweep.json`.
pub fn cmd_sweep(args: &ConfigArgs) -> Result<()> {
    let cfg = load_run(args)?;
    let data_dir = RunConfig::require_dataset(&cfg.data_dir, "data_dir")?;
    let test_dir = match &cfg.test_dir {
        Some(_) => Some(RunConfig::require_dataset(&cfg.test_dir, "test_dir")?),
        None => None,
    };
    let out = cfg.out_dir()?;
    let ratios = cfg.ratios()?;
    let text = cfg.text()?;
    let (pool, test_set) = cfg.datasets(&data_dir, test_dir.as_deref())?;
    let rows = run_sweep(&pool, &test_set, &ratios, &cfg.model, &text, &cfg.trainer)?;
    write_sweep_csv(&out.join("sweep.csv"), &rows)?;
    let mut json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    json.push('\n');
    write(&out.join("sweep.json"), &json)?;
    let named: Vec<(String, &EvalReport)> = rows.iter().map(|r| (format_ratio(&r.ratio), &r.report)).collect();
    print!("{}", summary_table(&named));
    Ok(())
}

pub fn ablation_csv(rows: &[(Ablation, EvalReport)]) -> String {
    let mut s = String::from(
        "variant,accuracy,sensitivity,specificity,macro_f1,recall_negative,recall_neutral,recall_positive\n",
    );
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    for (v, r) in rows {
        writeln!(
            s,
            "{v},{},{},{},{},{},{},{}",
            r.accuracy,
            opt(r.sensitivity),
            opt(r.specificity),
            r.macro_f1,
            opt(r.recall[0]),
            opt(r.recall[1]),
            opt(r.recall[2])
        )
        .unwrap();
    }
    s
}

/// Trains each configured variant with identical seeds; writes `ablation.csv`.
pub fn cmd_ablate(args: &ConfigArgs) -> Result<()> {
    let cfg = load_run(args)?;
    let data_dir = RunConfig::require_dataset(&cfg.data_dir, "data_dir")?;
    let test_dir = match &cfg.test_dir {
        Some(_) => Some(RunConfig::require_dataset(&cfg.test_dir, "test_dir")?),
        None => None,
    };
    let out = cfg.out_dir()?;
    let text = cfg.text()?;
    let (train_set, test_set) = cfg.datasets(&data_dir, test_dir.as_deref())?;
    let mut rows = Vec::new();
    for &v in &cfg.ablate.variants {
        log::info!("ablation variant {v}");
        rows.push((v, run_ablation(v, &train_set, &test_set, &cfg.model, &text, &cfg.trainer)?));
    }
    write(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    let named: Vec<(String, &EvalReport)> = rows.iter().map(|(v, r)| (v.to_string(), r)).collect();
    print!("{}", summary_table(&named));
    for (v, r) in &rows {
        println!("{v}: {}", recall_line(r));
    }
    Ok(())
}

/// Writes `embeddings.csv` for every sequence of `data_dir` (and `test_dir`).
pub fn cmd_export_embeddings(args: &ConfigArgs) -> Result<()> {
    let cfg = load_run(args)?;
    let data_dir = RunConfig::require_dataset(&cfg.data_dir, "data_dir")?;
    let out = cfg.out_dir()?;
    let model = load_checkpoint(&cfg)?;
    let mut data = load_dataset(&data_dir)?;
    if cfg.test_dir.is_some() {
        data.extend(load_dataset(&RunConfig::require_dataset(&cfg.test_dir, "test_dir")?)?);
    }
    let p = predict(&model, &data, cfg.trainer.sampler.window, cfg.trainer.eval_batch)?;
    write(&out.join("embeddings.csv"), &p.embeddings_csv())?;
    println!("wrote {} embeddings of dimension {}", data.len(), p.embeddings.shape()[1]);
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::ExportEmbeddings(a) => cmd_export_embeddings(a),
    }
}

/// Parses `args` (including the program name) and runs the command; returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, overrides: &[&str]) -> Result<RunConfig> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        RunConfig::from_json_str(text, &o, Path::new("run.json"))
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back = parse(&cfg.to_json(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(parse("{}", &[]).unwrap(), cfg);
    }

    #[test]
    fn shipped_config_is_valid() {
        let cfg = parse(include_str!("../configs/desk.json"), &[]).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.input_hw(), (32, 22));
    }

    #[test]
    fn overrides_set_nested_keys() {
        let cfg = parse(
            "{}",
            &["trainer.epochs=5", "model.channels=[2,4]", "data_dir=some/dir", "trainer.sampler.ratio=[1,1,2]"],
        )
        .unwrap();
        assert_eq!(cfg.trainer.epochs, 5);
        assert_eq!(cfg.model.channels, vec![2, 4]);
        assert_eq!(cfg.data_dir, Some(PathBuf::from("some/dir")));
        assert_eq!(cfg.trainer.sampler.ratio, [1.0, 1.0, 2.0]);
    }

    #[test]
    fn every_bad_key_is_reported() {
        let err = parse(
            r#"{"trainer": {"epochz": 3, "lr": "fast"}, "bogus": 1, "model": {"bags": -2}}"#,
            &["trainer.epochs=banana"],
        )
        .unwrap_err();
        let Error::ConfigKeys(keys) = &err else { panic!("{err:?}") };
        let joined = keys.join("\n");
        for k in ["trainer.epochz", "trainer.lr", "bogus", "model.bags", "trainer.epochs"] {
            assert!(joined.contains(k), "{k} missing from {joined}");
        }
        assert_eq!(keys.len(), 5);
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn malformed_overrides() {
        assert!(matches!(parse("{}", &["trainer.epochs"]), Err(Error::Argument(_))));
        assert!(matches!(parse("{}", &["a..b=1"]), Err(Error::Argument(_))));
        assert!(matches!(parse("{}", &["test_fraction.x=1"]), Err(Error::ConfigKeys(_))));
        assert!(matches!(parse("[1]", &[]), Err(Error::Format { .. })));
    }

    #[test]
    fn ablation_variants_parse_by_name() {
        let cfg = parse(r#"{"ablate": {"variants": ["full", "no_bam"]}}"#, &[]).unwrap();
        assert_eq!(cfg.ablate.variants, vec![Ablation::Full, Ablation::NoBam]);
        assert!(parse(r#"{"ablate": {"variants": ["no_such"]}}"#, &[]).is_err());
    }

    #[test]
    fn text_vectors_follow_model_width() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.text().unwrap(), TextGuidance::bundled());
        cfg.model.text_dim = 5;
        assert_eq!(cfg.text().unwrap().dim, 5);
    }

    #[test]
    fn table_columns() {
        let r = EvalReport::from_confusion([[8, 1, 1], [2, 6, 2], [0, 1, 9]]);
        let t = summary_table(&[("x".into(), &r)]);
        let lines: Vec<&str> = t.lines().collect();
        assert!(
            lines[0].contains("Acc") && lines[0].contains("Sen") && lines[0].contains("Spe") && lines[0].contains("F1")
        );
        assert!(
            lines[1].contains("76.7")
                && lines[1].contains("80.0")
                && lines[1].contains("75.0")
                && lines[1].contains("76.2")
        );
    }
}
