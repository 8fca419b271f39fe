use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use adsq::codes::{encode, pack, PackedCodes};
use adsq::data::{build_similarity, load_dataset, load_features, load_labels, save_features, save_labels, HyperParams};
use adsq::metrics::{mean_ap, mean_precision_at_hamming2, pr_curve, precision_at_n, ApDenominator, RelevanceJudge};
use adsq::synth::{generate, SynthSpec};
use adsq::trainer::{load_hash_model, save_model_dir, train, Variant, MODEL_FILES};
use adsq::{AdsqError, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "adsq", version, about = "Train asymmetric deep semantic quantization hash functions and evaluate binary codes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Gaussian-cluster dataset (train and query splits).
    Synth(SynthArgs),
    /// Train the label and image networks and write a model directory.
    Train(TrainArgs),
    /// Encode feature rows into packed binary codes.
    Encode(EncodeArgs),
    /// Evaluate query codes against database codes.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    per_class: usize,
    #[arg(long, default_value_t = 25)]
    queries_per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    #[arg(long, default_value_t = 1.0)]
    center_scale: f64,
    /// Probability of one extra random label per item.
    #[arg(long, default_value_t = 0.0)]
    overlap: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Model directory to create.
    #[arg(long)]
    out: PathBuf,
    /// full, no-asym, no-sem, no-both or sym.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_half: Option<usize>,
    #[arg(long)]
    outer_rounds: Option<usize>,
    #[arg(long)]
    t_label: Option<usize>,
    #[arg(long)]
    t_img: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    lr_max: Option<f64>,
    /// Comma-separated hidden widths of the image networks.
    #[arg(long, value_delimiter = ',')]
    encoder_hidden: Option<Vec<usize>>,
    #[arg(long)]
    semantic_dim: Option<usize>,
}

#[derive(Args)]
struct EncodeArgs {
    /// Model directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    query_codes: PathBuf,
    #[arg(long)]
    db_codes: PathBuf,
    #[arg(long)]
    query_labels: PathBuf,
    #[arg(long)]
    db_labels: PathBuf,
    /// Any of map, ph2, pr, pn.
    #[arg(long, value_delimiter = ',', default_value = "map,ph2")]
    metrics: Vec<String>,
    /// mAP cutoff; defaults to the database size.
    #[arg(long)]
    map_r: Option<usize>,
    /// Normalize AP by all relevant items instead of min(R, relevant).
    #[arg(long)]
    ap_total_relevant: bool,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    pr_grid: Vec<f64>,
    /// Top-N list sizes; defaults to 1, 10, 50, 100, 500, 1000 up to the database size.
    #[arg(long, value_delimiter = ',')]
    pn_grid: Option<Vec<usize>>,
    /// Write the CSV here (plus a manifest) instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| AdsqError::from(e).context(path.display()))?))
}

fn digests(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths.iter().map(|p| Ok((p.display().to_string(), digest_file(p)?))).collect()
}

/// Digests of files inside `dir`, keyed by file name.
fn dir_digests(dir: &Path, names: &[&str]) -> Result<BTreeMap<String, String>> {
    names.iter().map(|n| Ok((n.to_string(), digest_file(&dir.join(n))?))).collect()
}

struct Manifest {
    command: &'static str,
    config: Value,
    seeds: Value,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    timings: Vec<(String, f64)>,
}

impl Manifest {
    fn write(&self, path: &Path) -> Result<()> {
        let wall: serde_json::Map<String, Value> = self.timings.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        let v = json!({
            "tool": "adsq",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_clock_s": wall,
        });
        let text = serde_json::to_string_pretty(&v).map_err(|e| AdsqError::Format(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let start = Instant::now();
    let spec = SynthSpec {
        classes: a.classes,
        dim: a.dim,
        per_class: a.per_class,
        queries_per_class: a.queries_per_class,
        cluster_spread: a.spread,
        center_scale: a.center_scale,
        multilabel_overlap: a.overlap,
        seed: a.seed,
    };
    let data = generate(&spec)?;
    fs::create_dir_all(&a.out)?;
    let names = ["train.feat", "train.label", "query.feat", "query.label"];
    let files = names.map(|f| a.out.join(f));
    save_features(&files[0], data.train.features())?;
    save_labels(&files[1], data.train.labels())?;
    save_features(&files[2], data.query.features())?;
    save_labels(&files[3], data.query.labels())?;
    Manifest {
        command: "synth",
        config: serde_json::to_value(&spec).map_err(|e| AdsqError::Format(e.to_string()))?,
        seeds: json!({ "seed": a.seed }),
        inputs: BTreeMap::new(),
        outputs: dir_digests(&a.out, &names)?,
        timings: vec![("generate".into(), start.elapsed().as_secs_f64())],
    }
    .write(&a.out.join("manifest.json"))
}

fn resolve_config(a: &TrainArgs) -> Result<HyperParams> {
    let mut h = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| AdsqError::from(e).context(p.display()))?;
            serde_json::from_str(&text).map_err(|e| AdsqError::Config(format!("{}: {e}", p.display())))?
        }
        None => HyperParams::default(),
    };
    if let Some(v) = a.variant {
        h.variant = v;
    }
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f.clone() { h.$f = v; })* };
    }
    set!(seed, k_half, outer_rounds, t_label, t_img, batch_size, lr_min, lr_max, encoder_hidden, semantic_dim);
    h.validate()?;
    Ok(h)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let h = resolve_config(&a)?;
    let load_start = Instant::now();
    let data = load_dataset(&a.features, &a.labels)?;
    let s = build_similarity(data.labels());
    let load_secs = load_start.elapsed().as_secs_f64();
    let state = train(&data, &s, &h)?;
    let save_start = Instant::now();
    save_model_dir(&a.out, &state, &h)?;

    let mut inputs = vec![a.features.as_path(), a.labels.as_path()];
    if let Some(c) = &a.config {
        inputs.push(c);
    }
    let mut timings = vec![("load".to_string(), load_secs)];
    timings.extend(state.timings.iter().cloned());
    timings.push(("save".into(), save_start.elapsed().as_secs_f64()));
    Manifest {
        command: "train",
        config: serde_json::to_value(&h).map_err(|e| AdsqError::Format(e.to_string()))?,
        seeds: json!({ "seed": h.seed, "rounds_run": state.round }),
        inputs: digests(&inputs)?,
        outputs: dir_digests(&a.out, &MODEL_FILES)?,
        timings,
    }
    .write(&a.out.join("manifest.json"))
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let start = Instant::now();
    let (x, y) = load_hash_model(&a.model)?;
    let feats = load_features(&a.features)?;
    if feats.nrows() == 0 {
        return Err(AdsqError::Data(format!("{} holds no feature rows", a.features.display())));
    }
    if feats.ncols() != x.in_dim() {
        return Err(AdsqError::Shape(format!("model expects {} features per row, {} has {}", x.in_dim(), a.features.display(), feats.ncols())));
    }
    let codes = pack(encode(feats.view(), &x, &y)?.view())?;
    codes.save(&a.out)?;
    let model_files = ["imgx.net", "imgy.net"].map(|f| a.model.join(f));
    Manifest {
        command: "encode",
        config: json!({ "k_total": codes.k_total(), "n": codes.n() }),
        seeds: json!({}),
        inputs: digests(&[&model_files[0], &model_files[1], &a.features])?,
        outputs: digests(&[&a.out])?,
        timings: vec![("encode".into(), start.elapsed().as_secs_f64())],
    }
    .write(&sidecar(&a.out))
}

fn eval_rows(a: &EvalArgs, q: &PackedCodes, db: &PackedCodes, judge: &RelevanceJudge) -> Result<Vec<(String, f64, String)>> {
    let mut rows = Vec::new();
    for m in &a.metrics {
        match m.trim() {
            "map" => {
                let r = a.map_r.unwrap_or(db.n());
                let denom = if a.ap_total_relevant { ApDenominator::TotalRelevant } else { ApDenominator::MinCutoffTotal };
                rows.push(("map".into(), mean_ap(q, db, judge, r, denom)?, r.to_string()));
            }
            "ph2" => rows.push(("ph2".into(), mean_precision_at_hamming2(q, db, judge)?, "2".into())),
            "pr" => {
                for (recall, p) in pr_curve(q, db, judge, &a.pr_grid)? {
                    rows.push(("pr".into(), p, recall.to_string()));
                }
            }
            "pn" => {
                let grid = match &a.pn_grid {
                    Some(g) => g.clone(),
                    None => [1, 10, 50, 100, 500, 1000].into_iter().filter(|&n| n <= db.n()).collect(),
                };
                for (n, p) in precision_at_n(q, db, judge, &grid)? {
                    rows.push(("pn".into(), p, n.to_string()));
                }
            }
            other => return Err(AdsqError::Argument(format!("unknown metric {other:?} (expected map, ph2, pr, pn)"))),
        }
    }
    Ok(rows)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let start = Instant::now();
    let q = PackedCodes::load(&a.query_codes).map_err(|e| e.context(a.query_codes.display()))?;
    let db = PackedCodes::load(&a.db_codes).map_err(|e| e.context(a.db_codes.display()))?;
    if q.k_total() != db.k_total() {
        return Err(AdsqError::Argument(format!("query codes have {} bits but database codes {}", q.k_total(), db.k_total())));
    }
    let ql = load_labels(&a.query_labels)?;
    let dl = load_labels(&a.db_labels)?;
    let judge = RelevanceJudge::new(ql.view(), dl.view())?;
    let rows = eval_rows(&a, &q, &db, &judge)?;
    let mut csv = String::from("metric,k_total,value,grid_point\n");
    for (metric, value, point) in &rows {
        csv.push_str(&format!("{metric},{},{value},{point}\n", q.k_total()));
    }
    match &a.out {
        None => print!("{csv}"),
        Some(out) => {
            fs::write(out, &csv)?;
            Manifest {
                command: "eval",
                config: json!({ "metrics": a.metrics, "map_r": a.map_r, "ap_total_relevant": a.ap_total_relevant }),
                seeds: json!({}),
                inputs: digests(&[&a.query_codes, &a.db_codes, &a.query_labels, &a.db_labels])?,
                outputs: digests(&[out])?,
                timings: vec![("eval".into(), start.elapsed().as_secs_f64())],
            }
            .write(&sidecar(out))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
