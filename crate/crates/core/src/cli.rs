//! Command-line interface.
//!
//! Artifacts go to stdout (or `--output`), diagnostics to stderr. Exit codes:
//! 0 success, 1 internal error, 2 input or format error, 3 configuration error.
//! Config files give the base settings and flags override them.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{disagreement, disagreement_report, routing_csv, routing_summary};
use crate::decode::decode_all;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, Subset};
use crate::fusion::{fuse, FusionConfig, FusionMethod};
use crate::gate::{Architecture, GateMode, GateOutput, GateParams, GateSpec};
use crate::geometry::Detection;
use crate::io::gate_file::write_gate;
use crate::io::jsonl::{parse_lines, read_detections, read_ground_truth, read_subsets, to_lines};
use crate::io::manifest::{list_tensor_files, load_training_set, read_anchors, read_pipeline};
use crate::io::synth::{synth_dataset, write_dataset, SynthSpec};
use crate::io::tensor_file::read_raw;
use crate::pipeline::{load_image, par_map, pipeline_images, pipeline_weighting, run_pipeline};
use crate::training::{train_gate, Balancing, LossMode, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "moedet", version, about = "Mixture-of-experts fusion for object detectors")]
pub struct Cli {
    /// Worker threads for per-image work; 1 is fully sequential.
    #[arg(long, global = true, env = "MOE_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode a directory of raw tensors into detections.
    Decode(DecodeArgs),
    /// Fuse detection files, one per expert.
    Fuse(FuseArgs),
    /// Run the full pipeline: weighting, decode, fusion.
    Moe(MoeArgs),
    /// Train a gate from a manifest.
    GateTrain(GateTrainArgs),
    /// Evaluate detections against ground truth.
    Eval(EvalArgs),
    /// Routing and disagreement analysis.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Write a synthetic two-domain dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Directory of `<image_id>.moef` raw tensors from one expert.
    #[arg(long)]
    pub raw_dir: PathBuf,
    #[arg(long)]
    pub anchors: PathBuf,
    #[arg(long, default_value_t = crate::eval::DEFAULT_CONF_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct FusionFlags {
    /// nms, softnms, wbf or nmw.
    #[arg(long)]
    pub method: Option<FusionMethod>,
    /// Overlap above which boxes suppress or merge.
    #[arg(long)]
    pub iou: Option<f64>,
    /// Soft-NMS Gaussian width.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Soft-NMS score floor.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Per-expert mAP weights, e.g. `daytime=0.6,nighttime=0.5`.
    #[arg(long, value_delimiter = ',')]
    pub model_weights: Option<Vec<String>>,
}

impl FusionFlags {
    fn apply(&self, mut cfg: FusionConfig) -> Result<FusionConfig> {
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(v) = self.iou {
            cfg.iou_threshold = v;
        }
        if let Some(v) = self.sigma {
            cfg.softnms_sigma = v;
        }
        if let Some(v) = self.tau {
            cfg.softnms_score_floor = v;
        }
        if let Some(pairs) = &self.model_weights {
            cfg.model_map_weights = Some(parse_model_weights(pairs)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_model_weights(pairs: &[String]) -> Result<BTreeMap<String, f64>> {
    pairs
        .iter()
        .map(|p| {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::config(format!("model weight {p:?} is not id=value")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| Error::config(format!("model weight {p:?} has a bad number")))?;
            Ok((k.to_string(), v))
        })
        .collect()
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Detection files, one per expert.
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    /// Fusion settings as JSON; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub fusion: FusionFlags,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MoeArgs {
    /// Pipeline config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Gate file; overrides the config's gate and fixed weights.
    #[arg(long, conflicts_with = "fixed_weights")]
    pub gate: Option<PathBuf>,
    /// Fixed expert weights, e.g. `0.5,0.5`; overrides the config.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub fixed_weights: Option<Vec<f64>>,
    #[command(flatten)]
    pub fusion: FusionFlags,
    /// Minimum decoded confidence; overrides the config.
    #[arg(long)]
    pub conf_threshold: Option<f64>,
    /// Detections file; stdout if neither this nor the config names one.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Also write per-image gate weights as JSON Lines.
    #[arg(long)]
    pub weights_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GateTrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Training settings as JSON; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = Architecture::ConvFc2)]
    pub architecture: Architecture,
    #[arg(long, default_value_t = GateMode::Single)]
    pub mode: GateMode,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub conv_channels: Option<usize>,
    /// domain_ce or detection.
    #[arg(long)]
    pub loss: Option<LossMode>,
    /// none, importance, kl, batch_entropy or sample_entropy.
    #[arg(long)]
    pub balancing: Option<Balancing>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda_decay: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gate file to write.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// Subset labels; adds one report per subset.
    #[arg(long)]
    pub subsets: Option<PathBuf>,
    #[arg(long, default_value_t = crate::eval::DEFAULT_CONF_THRESHOLD)]
    pub conf_threshold: f64,
    #[arg(long, default_value_t = crate::eval::DEFAULT_MATCH_IOU)]
    pub match_iou: f64,
    /// Class count; inferred from the largest class id otherwise.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Print a text table instead of JSON.
    #[arg(long)]
    pub table: bool,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Distribution of gate weights per subset.
    Routing(RoutingArgs),
    /// Agreement categories between two experts' detections.
    Disagreement(DisagreementArgs),
}

#[derive(Debug, Args)]
pub struct RoutingArgs {
    /// Gate weights written by `moe --weights-out`.
    #[arg(long, required_unless_present = "config", conflicts_with = "config")]
    pub weights: Option<PathBuf>,
    /// Pipeline config whose gate is run over the feature directory.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub subsets: Option<PathBuf>,
    /// Print per-image weights as CSV instead of the JSON summary.
    #[arg(long)]
    pub csv: bool,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DisagreementArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long)]
    pub subsets: Option<PathBuf>,
    #[arg(long, default_value_t = crate::analysis::DEFAULT_DISAGREEMENT_IOU)]
    pub iou: f64,
    #[arg(long)]
    pub name_a: Option<String>,
    #[arg(long)]
    pub name_b: Option<String>,
    #[arg(long)]
    pub csv: bool,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Generator settings as JSON; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub images_per_domain: Option<usize>,
    /// Images mixing both domains, written as the undefined subset.
    #[arg(long)]
    pub ambiguous: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Separation of the two domains in feature space.
    #[arg(long)]
    pub margin: Option<f64>,
    /// Standard deviation of feature noise.
    #[arg(long)]
    pub feature_noise: Option<f64>,
}

/// One line of a gate-weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub image_id: String,
    pub expert_ids: Vec<String>,
    pub gate: GateOutput,
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))
        }
    }
}

fn emit(out: &mut dyn Write, path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

fn subsets_or_empty(path: Option<&Path>) -> Result<BTreeMap<String, Subset>> {
    path.map(read_subsets).transpose().map(Option::unwrap_or_default)
}

fn cmd_decode(a: &DecodeArgs, threads: Option<usize>, out: &mut dyn Write) -> Result<()> {
    let anchors = read_anchors(&a.anchors)?;
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::config("threshold must lie in [0, 1]"));
    }
    let files = list_tensor_files(&a.raw_dir)?;
    let per_image = par_map(&files, threads, |(id, p)| {
        let raw = read_raw(p)?;
        if &raw.image_id != id {
            return Err(Error::input(format!("{} holds image {:?}", p.display(), raw.image_id)));
        }
        decode_all(&raw, &anchors, a.threshold)
    })?;
    let dets: Vec<Detection> = per_image.into_iter().flatten().collect();
    emit(out, a.output.as_deref(), &to_lines(&dets))
}

fn cmd_fuse(a: &FuseArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.fusion.apply(read_config(a.config.as_deref())?)?;
    let per_expert = a.files.iter().map(|f| read_detections(f)).collect::<Result<Vec<_>>>()?;
    let fused = fuse(&per_expert, &cfg)?;
    emit(out, a.output.as_deref(), &to_lines(&fused))
}

fn cmd_moe(a: &MoeArgs, threads: Option<usize>, out: &mut dyn Write) -> Result<()> {
    let mut cfg = read_pipeline(&a.config)?;
    if let Some(g) = &a.gate {
        cfg.gate = Some(g.clone());
        cfg.fixed_weights = None;
    }
    if let Some(w) = &a.fixed_weights {
        cfg.gate = None;
        cfg.fixed_weights = Some(w.clone());
    }
    cfg.fusion = a.fusion.apply(cfg.fusion)?;
    if let Some(c) = a.conf_threshold {
        cfg.conf_threshold = c;
    }
    if !(0.0..=1.0).contains(&cfg.conf_threshold) {
        return Err(Error::config("confidence threshold must lie in [0, 1]"));
    }
    let anchors = read_anchors(&cfg.anchors)?;
    let ids = cfg.expert_ids();
    let results = run_pipeline(&cfg, &anchors, threads)?;
    if let Some(p) = &a.weights_out {
        let records: Vec<WeightRecord> = results
            .iter()
            .map(|r| WeightRecord {
                image_id: r.image_id.clone(),
                expert_ids: ids.clone(),
                gate: r.weights.clone(),
            })
            .collect();
        fs::write(p, to_lines(&records)).map_err(|e| Error::io(p, e))?;
    }
    let dets: Vec<Detection> = results.into_iter().flat_map(|r| r.detections).collect();
    let target = a.output.clone().or(cfg.output);
    emit(out, target.as_deref(), &to_lines(&dets))
}

fn cmd_gate_train(a: &GateTrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut cfg: TrainConfig = read_config(a.config.as_deref())?;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { cfg.$field = v; })*
        };
    }
    set!(loss => loss_mode, balancing => balancing, lambda => lambda, learning_rate => learning_rate,
         momentum => momentum, epochs => epochs, batch_size => batch_size, seed => seed);
    if a.lambda_decay.is_some() {
        cfg.lambda_decay = a.lambda_decay;
    }
    cfg.validate()?;
    let (manifest, anchors, samples) = load_training_set(&a.manifest)?;
    let first = samples
        .first()
        .ok_or_else(|| Error::input("manifest has no samples"))?;
    let mut spec = GateSpec::new(a.architecture, a.mode, manifest.expert_ids.clone(), first.features.channels);
    if let Some(h) = a.hidden {
        spec.hidden = h;
    }
    if let Some(c) = a.conv_channels {
        spec.conv_channels = c;
    }
    if a.mode == GateMode::Classwise {
        spec.class_count = Some(anchors.class_count);
    }
    let init = GateParams::init(spec, cfg.seed)?;
    let mut lines = String::new();
    let (params, history) = train_gate(&init, &samples, &cfg, Some(&anchors), |m| {
        let _ = writeln!(
            err,
            "epoch {:>3}  loss {:.6}  task {:.6}  balance {:.6}",
            m.epoch, m.total_loss, m.task_loss, m.balancing_loss
        );
    })?;
    for m in &history {
        lines.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        lines.push('\n');
    }
    write_gate(&a.output, &params)?;
    emit(out, None, &lines)
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let dets = read_detections(&a.detections)?;
    let gts = read_ground_truth(&a.ground_truth)?;
    let subsets = subsets_or_empty(a.subsets.as_deref())?;
    let cfg = EvalConfig {
        conf_threshold: a.conf_threshold,
        match_iou: a.match_iou,
        class_count: a.classes,
    };
    let report = evaluate(&dets, &gts, &subsets, &cfg)?;
    for w in &report.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    let text = if a.table { report.to_table() } else { json(&report) };
    emit(out, a.output.as_deref(), &text)
}

fn cmd_routing(a: &RoutingArgs, threads: Option<usize>, out: &mut dyn Write) -> Result<()> {
    let subsets = subsets_or_empty(a.subsets.as_deref())?;
    let (records, expert_ids) = match (&a.weights, &a.config) {
        (Some(w), _) => {
            let text = fs::read_to_string(w).map_err(|e| Error::io(w, e))?;
            let records: Vec<WeightRecord> = parse_lines(&text, &w.display().to_string())?;
            let ids = records.first().map(|r| r.expert_ids.clone()).unwrap_or_default();
            if records
                .iter()
                .any(|r| r.expert_ids != ids || r.gate.expert_count() != ids.len())
            {
                return Err(Error::input("weight records disagree on the experts"));
            }
            (records, ids)
        }
        (None, Some(c)) => {
            let cfg = read_pipeline(c)?;
            let anchors = read_anchors(&cfg.anchors)?;
            let weighting = pipeline_weighting(&cfg)?;
            let ids = cfg.expert_ids();
            let files = pipeline_images(&cfg, matches!(weighting, crate::pipeline::Weighting::Gate(_)))?;
            let records = par_map(&files, threads, |f| {
                let im = load_image(f, &ids, &anchors)?;
                Ok(WeightRecord {
                    image_id: im.image_id,
                    expert_ids: ids.clone(),
                    gate: weighting.weights(im.features.as_ref(), ids.len())?,
                })
            })?;
            (records, ids)
        }
        (None, None) => return Err(Error::config("give --weights or --config")),
    };
    let outputs: Vec<(String, GateOutput)> = records.into_iter().map(|r| (r.image_id, r.gate)).collect();
    let text = if a.csv {
        routing_csv(&outputs, &subsets, &expert_ids)
    } else {
        json(&routing_summary(&outputs, &subsets, &expert_ids))
    };
    emit(out, a.output.as_deref(), &text)
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("expert").to_string()
}

fn cmd_disagreement(a: &DisagreementArgs, out: &mut dyn Write) -> Result<()> {
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(Error::config("match IoU must lie in (0, 1]"));
    }
    let da = read_detections(&a.a)?;
    let db = read_detections(&a.b)?;
    let subsets = subsets_or_empty(a.subsets.as_deref())?;
    let mut counts = disagreement(&da, &db, a.iou);
    for id in subsets.keys() {
        counts.entry(id.clone()).or_default();
    }
    let name_a = a.name_a.clone().unwrap_or_else(|| stem(&a.a));
    let name_b = a.name_b.clone().unwrap_or_else(|| stem(&a.b));
    let report = disagreement_report(&counts, &subsets, &name_a, &name_b, a.iou);
    let text = if a.csv { report.to_csv() } else { json(&report) };
    emit(out, a.output.as_deref(), &text)
}

fn cmd_synth(a: &SynthArgs, err: &mut dyn Write) -> Result<()> {
    let mut spec: SynthSpec = read_config(a.config.as_deref())?;
    if let Some(v) = a.images_per_domain {
        spec.images_per_domain = v;
    }
    if let Some(v) = a.ambiguous {
        spec.ambiguous_images = v;
    }
    if let Some(v) = a.classes {
        spec.class_count = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.margin {
        spec.feature_margin = v;
    }
    if let Some(v) = a.feature_noise {
        spec.feature_noise = v;
    }
    let ds = synth_dataset(&spec)?;
    write_dataset(&ds, &a.out)?;
    let _ = writeln!(err, "wrote {} images to {}", ds.images.len(), a.out.display());
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let t = cli.threads;
    match &cli.command {
        Command::Decode(a) => cmd_decode(a, t, out),
        Command::Fuse(a) => cmd_fuse(a, out),
        Command::Moe(a) => cmd_moe(a, t, out),
        Command::GateTrain(a) => cmd_gate_train(a, out, err),
        Command::Eval(a) => cmd_eval(a, out, err),
        Command::Analyze(AnalyzeCommand::Routing(a)) => cmd_routing(a, t, out),
        Command::Analyze(AnalyzeCommand::Disagreement(a)) => cmd_disagreement(a, out),
        Command::Synth(a) => cmd_synth(a, err),
    }
}

/// Parses `args` (including the program name) and runs the command; returns
/// the process exit code. Usage errors are configuration errors.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("moedet").chain(args.iter().copied()), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn usage_errors_are_config_errors() {
        assert_eq!(call(&["fuse"]).0, 3);
        assert_eq!(call(&["decode", "--raw-dir", "x", "--anchors", "y", "--threshold", "abc"]).0, 3);
        assert_eq!(call(&["--help"]).0, 0);
    }

    #[test]
    fn missing_file_is_input_error() {
        let (code, out, err) = call(&["fuse", "/nonexistent/a.jsonl"]);
        assert_eq!(code, 2);
        assert!(out.is_empty());
        assert!(err.contains("nonexistent"));
    }

    #[test]
    fn model_weights_parse() {
        let m = parse_model_weights(&["a=0.5".into(), "b=1".into()]).unwrap();
        assert_eq!(m["a"], 0.5);
        assert!(parse_model_weights(&["a".into()]).is_err());
    }

    #[test]
    fn fusion_flags_default_to_nmw() {
        let cfg = FusionFlags::default().apply(FusionConfig::default()).unwrap();
        assert_eq!(cfg.method, FusionMethod::Nmw);
        assert_eq!(cfg.iou_threshold, 0.6);
    }
}
