mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lsr_core::loss::LossKind;
use lsr_core::metrics::{DistanceMetric, EvalSummary};
use lsr_core::model::ModelParams;
use lsr_core::provenance::{config_hash, content_hash, TOOL};
use lsr_core::synth::{
    annotation_sample, build_table_mask_estimation, build_table_visual_approx, generate_dataset, load_dataset,
    save_dataset, AnnotationPlan, AnnotatorNoise, CountDistributionTable, Dataset, DatasetBlock, GeneratorConfig,
    Split,
};
use lsr_core::train::{
    ablate_alpha, evaluate_masks, low_res_masks, predict_masks, train, train_supervised_baseline, TrainConfig,
};
use lsr_core::LsrError;

#[derive(Parser)]
#[command(name = "lsr", version, about = "Label super resolution from block-level count statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic block dataset.
    GenData(GenData),
    /// Estimate the per-label count table from an annotated sample.
    BuildTable(BuildTable),
    /// Train a model from count statistics (or, with --supervised, from masks).
    Train(TrainArgs),
    /// Score predictions on one split.
    Eval(EvalArgs),
    /// Train once per alpha and tabulate the test scores.
    AblateAlpha(AblateArgs),
    /// Comparison tables and boundary overlays.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Method {
    Mask,
    Visual,
}

#[derive(Args)]
struct BuildTable {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    method: Method,
    /// Blocks per label used for each row.
    #[arg(long, default_value_t = 20)]
    cap: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Size of the annotated sample drawn from the training split; 0 uses every block.
    #[arg(long, default_value_t = 167)]
    sample: usize,
    #[arg(long, default_value_t = 12)]
    min_per_bin: usize,
    #[arg(long, default_value_t = 20)]
    max_per_bin: usize,
    /// Additive annotator noise std (visual method).
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Multiplicative annotator noise std (visual method).
    #[arg(long, default_value_t = 0.0)]
    mult_noise: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Count table; not needed with --supervised.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Pixel-supervised baseline on an annotated subset of this size.
    #[arg(long)]
    supervised: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// `checkpoint:PATH`, `lowres` or `gt`.
    #[arg(long)]
    pred: String,
    /// Required for `lowres`.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long, value_enum, default_value_t = DistanceArg::Euclidean)]
    distance: DistanceArg,
    /// Method name used for the output row.
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
    alphas: Vec<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    data: PathBuf,
    /// Count table used for the low-resolution baseline.
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    intra: PathBuf,
    #[arg(long)]
    intra_inter: PathBuf,
    #[arg(long)]
    supervised: Option<PathBuf>,
    #[arg(long)]
    intra_visual: Option<PathBuf>,
    #[arg(long)]
    intra_inter_visual: Option<PathBuf>,
    /// Output of `ablate-alpha`.
    #[arg(long)]
    alpha_sweep: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    figure_blocks: usize,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum DistanceArg {
    Euclidean,
    Chebyshev,
}

impl From<DistanceArg> for DistanceMetric {
    fn from(d: DistanceArg) -> DistanceMetric {
        match d {
            DistanceArg::Euclidean => DistanceMetric::Euclidean,
            DistanceArg::Chebyshev => DistanceMetric::Chebyshev,
        }
    }
}

/// Failure with its exit code.
#[derive(Debug)]
struct Failure {
    kind: &'static str,
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            kind: "config",
            code: 2,
            message: message.into(),
        }
    }
}

impl From<LsrError> for Failure {
    fn from(e: LsrError) -> Self {
        let (kind, code) = match &e {
            LsrError::InvalidConfig { .. } | LsrError::InvalidAlpha(_) => ("config", 2),
            LsrError::Divergence { .. } | LsrError::NonFinite { .. } => ("divergence", 4),
            _ => ("data", 3),
        };
        Failure {
            kind,
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn require_seed(seed: Option<u64>) -> std::result::Result<u64, Failure> {
    seed.ok_or_else(|| Failure::config("--seed is required: every stochastic command takes an explicit seed"))
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> std::result::Result<T, Failure> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {}", p.display(), e.message())))
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LsrError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Failure::from(LsrError::io(path, e)))
}

fn header(hash: &str, seed: u64) -> Vec<(String, String)> {
    vec![
        ("tool".into(), TOOL.into()),
        ("config_hash".into(), hash.into()),
        ("seed".into(), seed.to_string()),
    ]
}

fn header_text(hash: &str, seed: u64) -> String {
    header(hash, seed).iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

/// Inputs enter a config hash by content so that moved files hash the same.
fn file_hash(path: &Path) -> std::result::Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| LsrError::io(path, e))?;
    Ok(content_hash(&bytes))
}

fn load_table(path: &Path) -> std::result::Result<CountDistributionTable, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::from(LsrError::io(path, e)))?;
    Ok(CountDistributionTable::from_text(&text)?)
}

fn gen_data(a: GenData) -> CmdResult {
    let seed = require_seed(a.seed)?;
    let cfg: GeneratorConfig = read_toml(a.config.as_deref())?;
    cfg.validate()?;
    let ds = generate_dataset(&cfg, seed)?;
    save_dataset(&ds, &a.out)?;
    println!("{}", header_text(&config_hash(&cfg), seed).trim_end());
    println!(
        "splits train={} val={} test={}",
        ds.split(Split::Train).len(),
        ds.split(Split::Val).len(),
        ds.split(Split::Test).len()
    );
    let counts: Vec<String> = ds.bin_counts().iter().map(|c| c.to_string()).collect();
    println!("bin_counts {}", counts.join(" "));
    Ok(())
}

#[derive(Serialize)]
struct TableSettings {
    method: Method,
    cap: usize,
    sample: usize,
    min_per_bin: usize,
    max_per_bin: usize,
    noise: f64,
    mult_noise: f64,
    data_seed: u64,
}

fn build_table(a: BuildTable) -> CmdResult {
    let seed = require_seed(a.seed)?;
    let ds = load_dataset(&a.data)?;
    let train_blocks = ds.split(Split::Train);
    let sampled: Vec<&DatasetBlock> = if a.sample == 0 {
        train_blocks
    } else {
        let plan = AnnotationPlan {
            total: a.sample,
            min_per_bin: a.min_per_bin,
            max_per_bin: a.max_per_bin,
        };
        annotation_sample(&train_blocks, ds.config.bins.len(), plan, seed)
    };
    let table = match a.method {
        Method::Mask => build_table_mask_estimation(&sampled, &ds.config.bins, a.cap),
        Method::Visual => {
            let noise = AnnotatorNoise {
                additive_std: a.noise,
                multiplicative_std: a.mult_noise,
            };
            build_table_visual_approx(&sampled, &ds.config.bins, a.cap, noise, seed)
        }
    };
    let table = match table {
        Err(LsrError::UnderSampledBins { bins, min }) => {
            let list: Vec<String> = bins.iter().map(|b| b.to_string()).collect();
            println!("under_sampled_bins {}", list.join(" "));
            return Err(LsrError::UnderSampledBins { bins, min }.into());
        }
        other => other?,
    };
    // The method is left out of the hash so that a noise-free visual table
    // carries the same header as the mask table it reproduces.
    let noise_free = matches!(a.method, Method::Mask) || (a.noise == 0.0 && a.mult_noise == 0.0);
    let settings = TableSettings {
        method: a.method,
        cap: a.cap,
        sample: a.sample,
        min_per_bin: a.min_per_bin,
        max_per_bin: a.max_per_bin,
        noise: if noise_free { 0.0 } else { a.noise },
        mult_noise: if noise_free { 0.0 } else { a.mult_noise },
        data_seed: ds.seed,
    };
    let hash = config_hash(&(
        settings.cap,
        settings.sample,
        settings.min_per_bin,
        settings.max_per_bin,
        settings.noise,
        settings.mult_noise,
        settings.data_seed,
    ));
    let text = table.to_text(&header(&hash, seed));
    write_file(&a.out, &text)?;
    println!("{}", header_text(&hash, seed).trim_end());
    println!("sampled_blocks {}", sampled.len());
    for r in &table.rows {
        println!("z={} eta={:.4} rho={:.4} n={}", r.bin, r.eta[table.classes - 1], r.rho[table.classes - 1], r.n_samples);
    }
    Ok(())
}

fn train_config(path: Option<&Path>, seed: u64) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg: TrainConfig = read_toml(path)?;
    cfg.seed = seed;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let seed = require_seed(a.seed)?;
    let mut cfg = train_config(a.config.as_deref(), seed)?;
    if let Some(m) = &a.mode {
        cfg.mode = m.parse::<LossKind>()?;
    }
    if let Some(alpha) = a.alpha {
        cfg.alpha = alpha;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = Some(lr);
    }
    cfg.validate()?;
    let ds = load_dataset(&a.data)?;
    let (params, log) = match a.supervised {
        Some(n) => {
            let train_blocks = ds.split(Split::Train);
            let plan = AnnotationPlan {
                total: n,
                ..AnnotationPlan::default()
            };
            let subset = annotation_sample(&train_blocks, ds.config.bins.len(), plan, seed);
            train_supervised_baseline(&cfg, &ds, &subset)?
        }
        None => {
            let path = a.table.as_deref().ok_or_else(|| Failure::config("--table is required for count training"))?;
            let table = load_table(path)?;
            train(&cfg, &ds, &table)?
        }
    };
    let hash = config_hash(&cfg);
    fs::create_dir_all(&a.out).map_err(|e| LsrError::io(&a.out, e))?;
    write_file(&a.out.join("checkpoint.txt"), params.to_text_with(&header(&hash, seed)))?;
    write_file(&a.out.join("runlog.jsonl"), log.to_jsonl())?;
    println!("{}", header_text(&hash, seed).trim_end());
    if let Some(s) = log.test_summary() {
        println!("test masked_iou={} masked_dice={} iou={} dice={}", s.masked_iou, s.masked_dice, s.iou, s.dice);
    }
    eprintln!("wall_clock_secs {:.1}", log.wall_clock_secs);
    Ok(())
}

fn eval_rows(label: &str, s: &EvalSummary) -> String {
    format!(
        "method\tmasked_iou\tmasked_dice\tiou\tdice\tn_blocks\tn_masked_blocks\n{label}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        s.masked_iou, s.masked_dice, s.iou, s.dice, s.n_blocks, s.n_masked_blocks
    )
}

fn predictions(
    pred: &str,
    blocks: &[&DatasetBlock],
    table: Option<&Path>,
) -> std::result::Result<Vec<Vec<u8>>, Failure> {
    if pred == "gt" {
        return Ok(blocks.iter().map(|b| b.block.gt_mask.clone()).collect());
    }
    if pred == "lowres" {
        let path = table.ok_or_else(|| Failure::config("--table is required for the lowres predictor"))?;
        return Ok(low_res_masks(blocks, &load_table(path)?)?);
    }
    match pred.strip_prefix("checkpoint:") {
        Some(p) => Ok(predict_masks(&ModelParams::load(Path::new(p))?, blocks)?),
        None => Err(Failure::config(format!("unknown predictor `{pred}`; use checkpoint:PATH, lowres or gt"))),
    }
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    let ds = load_dataset(&a.data)?;
    let blocks = ds.split(a.split.into());
    let radius = a.radius.unwrap_or(ds.config.block_side);
    let preds = predictions(&a.pred, &blocks, a.table.as_deref())?;
    let summary = evaluate_masks(&preds, &blocks, radius, a.distance.into())?;
    let pred_hash = match a.pred.strip_prefix("checkpoint:") {
        Some(p) => file_hash(Path::new(p))?,
        None => a.pred.clone(),
    };
    let table_hash = a.table.as_deref().map(file_hash).transpose()?;
    let hash = config_hash(&(pred_hash, table_hash, a.split, radius, a.distance));
    let label = a.label.clone().unwrap_or_else(|| {
        match a.pred.as_str() {
            "gt" => "Ground truth",
            "lowres" => "Low resolution model",
            _ => "Model",
        }
        .to_string()
    });
    let text = format!("{}{}", header_text(&hash, ds.seed), eval_rows(&label, &summary));
    print!("{text}");
    if let Some(out) = &a.out {
        write_file(out, &text)?;
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> CmdResult {
    let seed = require_seed(a.seed)?;
    let mut cfg = train_config(a.config.as_deref(), seed)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    for &alpha in &a.alphas {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(LsrError::InvalidAlpha(alpha).into());
        }
    }
    let ds = load_dataset(&a.data)?;
    let table = load_table(&a.table)?;
    let (sweep, _) = ablate_alpha(&cfg, &a.alphas, &ds, &table)?;
    let hash = config_hash(&(&cfg, &a.alphas));
    let text = format!("{}# mode={}\n{}", header_text(&hash, seed), cfg.mode.as_str(), report::alpha_table(&sweep));
    print!("{text}");
    if let Some(out) = &a.out {
        write_file(out, &text)?;
    }
    Ok(())
}

fn report_cmd(a: ReportArgs) -> CmdResult {
    let ds: Dataset = load_dataset(&a.data)?;
    let table = load_table(&a.table)?;
    let radius = a.radius.unwrap_or(ds.config.block_side);
    let inputs = report::ReportInputs {
        intra: ModelParams::load(&a.intra)?,
        intra_inter: ModelParams::load(&a.intra_inter)?,
        supervised: a.supervised.as_deref().map(ModelParams::load).transpose()?,
        intra_visual: a.intra_visual.as_deref().map(ModelParams::load).transpose()?,
        intra_inter_visual: a.intra_inter_visual.as_deref().map(ModelParams::load).transpose()?,
        alpha_sweep: match &a.alpha_sweep {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| LsrError::io(p, e))?),
            None => None,
        },
    };
    let inputs_hash: Vec<Option<String>> = [
        Some(&a.table),
        Some(&a.intra),
        Some(&a.intra_inter),
        a.supervised.as_ref(),
        a.intra_visual.as_ref(),
        a.intra_inter_visual.as_ref(),
        a.alpha_sweep.as_ref(),
    ]
    .into_iter()
    .map(|p| p.map(|p| file_hash(p)).transpose())
    .collect::<std::result::Result<_, _>>()?;
    let hash = config_hash(&(inputs_hash, radius, a.figure_blocks));
    let out = report::build(&ds, &table, &inputs, radius, a.figure_blocks)?;
    let head = header_text(&hash, ds.seed);
    fs::create_dir_all(&a.out).map_err(|e| LsrError::io(&a.out, e))?;
    for (name, body) in &out.tables {
        write_file(&a.out.join(name), format!("{head}{body}"))?;
        println!("== {name}\n{body}");
    }
    write_file(&a.out.join("overlay.ppm"), &out.overlay)?;
    println!("overlay.ppm {}x{}", out.overlay_size.0, out.overlay_size.1);
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::BuildTable(a) => build_table(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::AblateAlpha(a) => ablate_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn fail(f: &Failure) -> ExitCode {
    let line = serde_json::json!({ "error": f.kind, "code": f.code, "message": f.message });
    eprintln!("{line}");
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            return fail(&Failure::config(first));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&f),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_contract() {
        assert_eq!(Failure::from(LsrError::config("x", "y")).code, 2);
        assert_eq!(Failure::from(LsrError::UnderSampledBins { bins: vec![1], min: 2 }).code, 3);
        assert_eq!(Failure::from(LsrError::Divergence { step: 3, loss: f64::NAN }).code, 4);
    }
}
