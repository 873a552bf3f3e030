//! Command-line pipelines behind the `takit` binary.
//!
//! Exit codes: 0 success, 1 a check or threshold failed, 2 bad input.
//! Record streams are processed in chunks on a worker pool and written back
//! in input order, so output never depends on `--threads`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::adapters::{
    builtin_profiles, find_profile, load_profiles, parse_prediction, InterfaceProfile, ParseFailure, ParsedPrediction,
};
use crate::bench::{
    annotations_from_record, sample_benchmark, BenchQuery, CandidatePool, PoolWarning, QuotaSpec, DEFAULT_SEED,
};
use crate::consensus::{
    consensus, resolve_entry, ConsensusConfig, ConsensusStats, GeometryPolicy, QueueEntry, Verdict, DEFAULT_MATCH_IOU,
};
use crate::cqmd::{make_golden, selftest, ParamsFile};
use crate::evaluator::{aggregate, score_query, QueryResult, DEFAULT_IOU_THRESHOLD};
use crate::geometry::{Box, ImageSize};
use crate::maskrender::{default_rasterizer, render_destylized, BitmapRasterizer, GlyphRasterizer, TtfRasterizer};
use crate::records::{
    parse_line, read_chunk, to_line, AnnotationRecord, EngineRecord, InstanceRecord, PredictionRecord, TextItem,
};
use crate::rng::Pcg32;
use crate::spi::{
    derive_weights, materialize_gamma, normalize_weights, Gamma, MaterializeStats, NoiseProfile, SourceKind, SpiConfig,
    DEFAULT_ALIGN_IOU,
};
use crate::textnorm::punct_table_tsv;
use crate::VERSION;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK: u8 = 1;
pub const EXIT_INPUT: u8 = 2;

/// Records per parallel chunk.
const CHUNK: usize = 2048;
/// Largest fraction of records render-masks may skip before failing.
const MAX_SKIP_FRACTION: f64 = 0.01;

pub const BENCH_FORMAT: &str = "takit-bench/1";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    pub fn check(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CHECK,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

fn at(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::input(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "takit", version, about = "Text-anchoring benchmark and data-engine toolkit")]
pub struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON file with default values for command options.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the benchmark from an annotation pool.
    GenBench {
        #[arg(long)]
        pool: PathBuf,
        /// Per-category quotas as JSON; defaults to the released counts.
        #[arg(long)]
        quota: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Score stored model outputs against a benchmark.
    Eval {
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        profile: Option<String>,
        /// JSON array of extra interface profiles.
        #[arg(long)]
        profiles_file: Option<PathBuf>,
        #[arg(long)]
        iou_threshold: Option<f64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Two-engine pseudo-label agreement.
    Consensus {
        #[arg(long)]
        engine_a: PathBuf,
        #[arg(long)]
        engine_b: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        iou_threshold: Option<f64>,
        /// engine_a | union | intersection
        #[arg(long)]
        geometry: Option<String>,
        /// Accept images present in only one engine file (engine B is then
        /// held in memory).
        #[arg(long)]
        allow_partial: bool,
        /// Do not attach engine A's raw output to agreed instances.
        #[arg(long)]
        no_raw_priors: bool,
        #[arg(long, default_value = "scene")]
        source: String,
    },
    /// Turn a judged adjudication queue into instances.
    ImportVerdicts {
        #[arg(long)]
        queue: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value = "scene")]
        source: String,
    },
    /// Materialize OCR priors for instance records.
    Spi {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        noise_profile: Option<PathBuf>,
        #[arg(long)]
        gamma: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        align_iou: Option<f64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Render de-stylized masks for instance records.
    RenderMasks {
        #[arg(long)]
        instances: PathBuf,
        /// Fonts JSON `{"latin": path, "cjk": path}`; overrides TAKIT_FONTS.
        #[arg(long)]
        fonts: Option<PathBuf>,
        /// Use the embedded bitmap font even if fonts are configured.
        #[arg(long)]
        bitmap_font: bool,
        #[arg(long)]
        export_pgm: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Numerical checks of the mask decoder reference.
    CqmdSelftest {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        causal_draws: Option<usize>,
    },
    /// Write a parameter file with an embedded golden test vector.
    CqmdGolden {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Write the region-to-text punctuation table as TSV.
    ExportPunctTable {
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

/// Values a `--config` file may set. Command-line flags win.
#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub quota: Option<PathBuf>,
    pub profile: Option<String>,
    pub profiles_file: Option<PathBuf>,
    pub iou_threshold: Option<f64>,
    pub consensus_iou: Option<f64>,
    pub geometry: Option<String>,
    pub noise_profile: Option<PathBuf>,
    pub gamma: Option<f64>,
    pub align_iou: Option<f64>,
    pub fonts: Option<PathBuf>,
    pub causal_draws: Option<usize>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| at(path, e))?;
        let mut cfg: ConfigFile = serde_json::from_str(&text).map_err(|e| at(path, e))?;
        // relative paths in a config file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.quota,
            &mut cfg.profiles_file,
            &mut cfg.noise_profile,
            &mut cfg.fonts,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = File::open(path).map_err(|e| at(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| at(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| at(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| at(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| at(path, e))
}

fn write_all(w: &mut impl Write, path: &Path, data: &[u8]) -> Result<(), CliError> {
    w.write_all(data).map_err(|e| at(path, e))
}

/// Streams a JSONL file through `map` in parallel chunks, handing results to
/// `sink` in input order. `map` receives the 0-based record index (blank
/// lines excluded), the 1-based line number and the line. Returns the number
/// of records.
pub fn stream_records<T: Send>(
    path: &Path,
    map: impl Fn(usize, usize, &str) -> Result<T, CliError> + Sync,
    mut sink: impl FnMut(T) -> Result<(), CliError>,
) -> Result<usize, CliError> {
    let mut reader = open(path)?;
    let mut line_no = 0;
    let mut index = 0;
    loop {
        let chunk = read_chunk(&mut reader, &mut line_no, CHUNK).map_err(|e| at(path, e))?;
        if chunk.is_empty() {
            return Ok(index);
        }
        let base = index;
        let results: Vec<Result<T, CliError>> = chunk
            .par_iter()
            .enumerate()
            .map(|(k, (ln, line))| map(base + k, *ln, line))
            .collect();
        index += chunk.len();
        for r in results {
            sink(r?)?;
        }
    }
}

fn parse_at<T: serde::de::DeserializeOwned>(path: &Path, line: &str, line_no: usize) -> Result<T, CliError> {
    parse_line(line, line_no).map_err(|e| at(path, e))
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let threads = cli.threads.or(cfg.threads).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::input(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli.command, &cfg, threads))
}

fn dispatch(cmd: Command, cfg: &ConfigFile, threads: usize) -> Result<(), CliError> {
    match cmd {
        Command::GenBench { pool, quota, seed, out } => {
            let quota = quota.or_else(|| cfg.quota.clone());
            cmd_gen_bench(&pool, quota.as_deref(), seed.or(cfg.seed).unwrap_or(DEFAULT_SEED), &out)
        }
        Command::Eval {
            bench,
            predictions,
            profile,
            profiles_file,
            iou_threshold,
            out,
        } => cmd_eval(
            &bench,
            &predictions,
            &EvalOptions {
                profile: profile
                    .or_else(|| cfg.profile.clone())
                    .unwrap_or_else(|| "standard_xyxy_abs".into()),
                profiles_file: profiles_file.or_else(|| cfg.profiles_file.clone()),
                iou_threshold: iou_threshold.or(cfg.iou_threshold).unwrap_or(DEFAULT_IOU_THRESHOLD),
                threads,
            },
            &out,
        ),
        Command::Consensus {
            engine_a,
            engine_b,
            out_dir,
            iou_threshold,
            geometry,
            allow_partial,
            no_raw_priors,
            source,
        } => {
            let geometry: GeometryPolicy = geometry
                .or_else(|| cfg.geometry.clone())
                .map(|g| g.parse().map_err(CliError::input))
                .transpose()?
                .unwrap_or_default();
            let opts = ConsensusOptions {
                cfg: ConsensusConfig {
                    iou_threshold: iou_threshold.or(cfg.consensus_iou).unwrap_or(DEFAULT_MATCH_IOU),
                    geometry,
                },
                allow_partial,
                raw_priors: !no_raw_priors,
                source,
            };
            cmd_consensus(&engine_a, &engine_b, &out_dir, &opts)
        }
        Command::ImportVerdicts { queue, out, source } => cmd_import_verdicts(&queue, &out, &source),
        Command::Spi {
            instances,
            noise_profile,
            gamma,
            seed,
            align_iou,
            out,
        } => {
            let gamma = match gamma {
                Some(g) => g.parse::<Gamma>().map_err(|e| CliError::input(e.to_string()))?,
                None => match cfg.gamma {
                    Some(v) => Gamma::from_value(v).map_err(|e| CliError::input(e.to_string()))?,
                    None => return Err(CliError::input("--gamma is required (1.0, 0.5 or 0.0)")),
                },
            };
            let profile = noise_profile
                .or_else(|| cfg.noise_profile.clone())
                .ok_or_else(|| CliError::input("--noise-profile is required"))?;
            cmd_spi(
                &instances,
                &profile,
                gamma,
                seed.or(cfg.seed).unwrap_or(DEFAULT_SEED),
                align_iou.or(cfg.align_iou).unwrap_or(DEFAULT_ALIGN_IOU),
                &out,
            )
        }
        Command::RenderMasks {
            instances,
            fonts,
            bitmap_font,
            export_pgm,
            out,
        } => {
            let r: Arc<dyn GlyphRasterizer> = if bitmap_font {
                Arc::new(BitmapRasterizer)
            } else {
                match fonts.or_else(|| cfg.fonts.clone()) {
                    Some(f) => Arc::new(TtfRasterizer::from_config(&f).map_err(|e| CliError::input(e.to_string()))?),
                    None => default_rasterizer().map_err(|e| CliError::input(e.to_string()))?,
                }
            };
            cmd_render_masks(&instances, r.as_ref(), export_pgm.as_deref(), &out)
        }
        Command::CqmdSelftest {
            params,
            seed,
            causal_draws,
        } => cmd_cqmd_selftest(
            params.as_deref(),
            seed.or(cfg.seed).unwrap_or(DEFAULT_SEED),
            causal_draws.or(cfg.causal_draws).unwrap_or(100),
        ),
        Command::CqmdGolden { seed, out } => {
            let f =
                make_golden(seed.or(cfg.seed).unwrap_or(DEFAULT_SEED)).map_err(|e| CliError::check(e.to_string()))?;
            let mut w = create(&out)?;
            write_all(&mut w, &out, f.to_json().as_bytes())?;
            w.flush().map_err(|e| at(&out, e))
        }
        Command::ExportPunctTable { out } => {
            let tsv = punct_table_tsv();
            match out {
                Some(p) => {
                    let mut w = create(&p)?;
                    write_all(&mut w, &p, tsv.as_bytes())?;
                    w.flush().map_err(|e| at(&p, e))
                }
                None => {
                    print!("{tsv}");
                    Ok(())
                }
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BenchFile {
    pub format: String,
    pub version: String,
    pub seed: u64,
    pub quota: BTreeMap<String, u32>,
    pub counts: Vec<Value>,
    pub queries: Vec<BenchQuery>,
}

pub fn cmd_gen_bench(pool: &Path, quota: Option<&Path>, seed: u64, out: &Path) -> Result<(), CliError> {
    let quota = match quota {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| at(p, e))?;
            QuotaSpec::from_json(&text).map_err(|e| at(p, e))?
        }
        None => QuotaSpec::released(),
    };
    let mut anns = Vec::new();
    let mut warnings = 0usize;
    stream_records(
        pool,
        |_, ln, line| {
            let rec: AnnotationRecord = parse_at(pool, line, ln)?;
            let mut w = Vec::new();
            let a = annotations_from_record(&rec, &mut w).map_err(|e| at(pool, format!("line {ln}: {e}")))?;
            Ok((a, w, ln))
        },
        |(a, w, ln)| {
            for warning in w {
                warnings += 1;
                match warning {
                    PoolWarning::DegenerateBox { image, item } => {
                        warn!("line {ln}: {image} item {item}: degenerate box dropped")
                    }
                    PoolWarning::EmptyTranscript { image, item } => {
                        warn!("line {ln}: {image} item {item}: empty transcript dropped")
                    }
                }
            }
            anns.extend(a);
            Ok(())
        },
    )?;
    let cand = CandidatePool::build(&anns).map_err(|e| at(pool, e))?;
    let sampled = sample_benchmark(&cand, &quota, seed);
    let file = BenchFile {
        format: BENCH_FORMAT.into(),
        version: VERSION.into(),
        seed,
        quota: quota.0.iter().map(|(c, v)| (c.to_string(), *v)).collect(),
        counts: sampled
            .counts
            .iter()
            .map(|c| serde_json::to_value(c).expect("serializable"))
            .collect(),
        queries: sampled.queries,
    };
    let mut w = create(out)?;
    serde_json::to_writer(&mut w, &file).map_err(|e| at(out, e))?;
    write_all(&mut w, out, b"\n")?;
    w.flush().map_err(|e| at(out, e))?;

    println!(
        "{:<14} {:>6} {:>9} {:>9} {:>8}",
        "category", "quota", "r2t_pool", "t2r_pool", "sampled"
    );
    for c in &sampled.counts {
        println!(
            "{:<14} {:>6} {:>9} {:>9} {:>8}",
            c.category.to_string(),
            c.quota,
            c.r2t_pool,
            c.t2r_pool,
            c.sampled
        );
    }
    println!("total queries: {} (dropped pool items: {warnings})", file.queries.len());
    Ok(())
}

pub fn load_bench(path: &Path) -> Result<BenchFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| at(path, e))?;
    let b: BenchFile = serde_json::from_str(&text).map_err(|e| at(path, e))?;
    if b.format != BENCH_FORMAT {
        return Err(at(path, format!("unknown format `{}`", b.format)));
    }
    for q in &b.queries {
        q.validate().map_err(|e| at(path, e))?;
    }
    Ok(b)
}

pub struct EvalOptions {
    pub profile: String,
    pub profiles_file: Option<PathBuf>,
    pub iou_threshold: f64,
    pub threads: usize,
}

pub fn resolve_profile(name: &str, extra: Option<&Path>) -> Result<InterfaceProfile, CliError> {
    let mut profiles = builtin_profiles();
    if let Some(p) = extra {
        let text = std::fs::read_to_string(p).map_err(|e| at(p, e))?;
        let more = load_profiles(&text).map_err(|e| at(p, e))?;
        // later definitions replace built-ins of the same name
        profiles.retain(|b| !more.iter().any(|m| m.name == b.name));
        profiles.extend(more);
    }
    find_profile(&profiles, name)
        .cloned()
        .map_err(|e| CliError::input(e.to_string()))
}

pub fn cmd_eval(bench: &Path, predictions: &Path, opts: &EvalOptions, out: &Path) -> Result<(), CliError> {
    if !(opts.iou_threshold > 0.0 && opts.iou_threshold <= 1.0) {
        return Err(CliError::input(format!(
            "IoU threshold {} outside (0, 1]",
            opts.iou_threshold
        )));
    }
    let profile = resolve_profile(&opts.profile, opts.profiles_file.as_deref())?;
    let b = load_bench(bench)?;
    let known: HashMap<&str, usize> = b
        .queries
        .iter()
        .enumerate()
        .map(|(i, q)| (q.query_id.as_str(), i))
        .collect();
    if known.len() != b.queries.len() {
        return Err(at(bench, "duplicate query_id in benchmark"));
    }
    let mut raw: Vec<Option<String>> = vec![None; b.queries.len()];
    let mut unknown = 0usize;
    stream_records(
        predictions,
        |_, ln, line| Ok((parse_at::<PredictionRecord>(predictions, line, ln)?, ln)),
        |(rec, ln)| {
            match known.get(rec.query_id.as_str()) {
                Some(&i) => {
                    if raw[i].is_some() {
                        return Err(at(
                            predictions,
                            format!("line {ln}: duplicate query_id `{}`", rec.query_id),
                        ));
                    }
                    raw[i] = Some(rec.raw_output);
                }
                None => {
                    unknown += 1;
                    warn!("line {ln}: prediction for unknown query `{}` ignored", rec.query_id);
                }
            }
            Ok(())
        },
    )?;
    let scored: Vec<(QueryResult, ParsedPrediction)> = b
        .queries
        .par_iter()
        .zip(raw.par_iter())
        .map(|(q, r)| {
            let parsed = match r {
                Some(text) => parse_prediction(
                    &q.query_id,
                    text,
                    &profile,
                    q.direction,
                    q.image_size().expect("validated"),
                ),
                None => ParsedPrediction::failed(&q.query_id, ParseFailure::Missing),
            };
            (score_query(q, &parsed, opts.iou_threshold), parsed)
        })
        .collect();
    let mut failures: BTreeMap<String, u64> = BTreeMap::new();
    for (_, p) in &scored {
        if let Some(f) = p.failure {
            *failures.entry(format!("{f:?}")).or_default() += 1;
        }
    }
    let results: Vec<QueryResult> = scored.into_iter().map(|(r, _)| r).collect();
    let report = aggregate(&results).map_err(|e| CliError::input(e.to_string()))?;
    let doc = json!({
        "tool": "takit",
        "version": VERSION,
        "inputs": {
            "bench": {"path": bench.display().to_string(), "sha256": sha256_file(bench)?},
            "predictions": {"path": predictions.display().to_string(), "sha256": sha256_file(predictions)?},
        },
        "config": {
            "profile": profile,
            "iou_threshold": opts.iou_threshold,
            "threads": opts.threads,
        },
        "report": report,
        "parse_failures": failures,
        "unknown_predictions": unknown,
    });
    let mut w = create(out)?;
    serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| at(out, e))?;
    write_all(&mut w, out, b"\n")?;
    w.flush().map_err(|e| at(out, e))?;
    println!(
        "Acc_R2T {:.2}  F1_T2R {:.2}  Overall {:.2}",
        report.scores.acc_r2t, report.scores.f1_t2r, report.scores.overall
    );
    Ok(())
}

pub struct ConsensusOptions {
    pub cfg: ConsensusConfig,
    pub allow_partial: bool,
    pub raw_priors: bool,
    pub source: String,
}

fn engine_items(rec: &EngineRecord, path: &Path, ln: usize) -> Result<Vec<TextItem>, CliError> {
    rec.items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            Box::from_array(it.bbox)
                .map(|b| TextItem::new(b, it.text.clone()))
                .map_err(|e| at(path, format!("line {ln}: item {i}: {e}")))
        })
        .collect()
}

#[derive(Debug, Default, Clone, Copy, Serialize)]
struct ConsensusTotals {
    images: u64,
    images_only_a: u64,
    images_only_b: u64,
    #[serde(flatten)]
    stats: ConsensusStats,
}

struct ImageOutput {
    agreed: String,
    disputed: String,
    stats: ConsensusStats,
}

fn consensus_image(
    a: Option<&EngineRecord>,
    b: Option<&EngineRecord>,
    items_a: &[TextItem],
    items_b: &[TextItem],
    opts: &ConsensusOptions,
) -> Result<ImageOutput, CliError> {
    let rec = a.or(b).expect("at least one side");
    let size = ImageSize::new(rec.width, rec.height).map_err(|e| CliError::input(format!("{}: {e}", rec.image)))?;
    let r = consensus(items_a, items_b, &opts.cfg);
    let mut agreed = String::new();
    for item in &r.agreed {
        let inst = InstanceRecord {
            image: rec.image.clone(),
            width: rec.width,
            height: rec.height,
            bbox: item.bbox,
            text: item.text.clone(),
            source: opts.source.clone(),
            mask_rle: None,
            priors: None,
            raw_priors: opts.raw_priors.then(|| items_a.to_vec()),
            extra: Default::default(),
        };
        agreed.push_str(&to_line(&inst));
    }
    let mut disputed = String::new();
    for d in &r.disputed {
        disputed.push_str(&to_line(&QueueEntry::from_pair(&rec.image, size, d, opts.cfg.geometry)));
    }
    Ok(ImageOutput {
        agreed,
        disputed,
        stats: r.stats(items_a.len(), items_b.len()),
    })
}

pub fn cmd_consensus(
    engine_a: &Path,
    engine_b: &Path,
    out_dir: &Path,
    opts: &ConsensusOptions,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| at(out_dir, e))?;
    let agreed_path = out_dir.join("agreed.jsonl");
    let disputed_path = out_dir.join("disputed.jsonl");
    let mut agreed_w = create(&agreed_path)?;
    let mut disputed_w = create(&disputed_path)?;
    let mut totals = ConsensusTotals::default();

    let mut emit = |o: ImageOutput, only: Option<char>| -> Result<(), CliError> {
        write_all(&mut agreed_w, &agreed_path, o.agreed.as_bytes())?;
        write_all(&mut disputed_w, &disputed_path, o.disputed.as_bytes())?;
        totals.images += 1;
        match only {
            Some('a') => totals.images_only_a += 1,
            Some(_) => totals.images_only_b += 1,
            None => {}
        }
        totals.stats += o.stats;
        Ok(())
    };

    if opts.allow_partial {
        let mut b_recs: Vec<(EngineRecord, usize)> = Vec::new();
        stream_records(
            engine_b,
            |_, ln, line| Ok((parse_at::<EngineRecord>(engine_b, line, ln)?, ln)),
            |r| {
                b_recs.push(r);
                Ok(())
            },
        )?;
        let mut b_index: HashMap<String, usize> = HashMap::with_capacity(b_recs.len());
        for (i, (r, ln)) in b_recs.iter().enumerate() {
            if b_index.insert(r.image.clone(), i).is_some() {
                return Err(at(engine_b, format!("line {ln}: image `{}` listed twice", r.image)));
            }
        }
        let mut used = vec![false; b_recs.len()];
        let b_recs = &b_recs;
        let b_index = &b_index;
        let mut claimed = Vec::new();
        stream_records(
            engine_a,
            |_, ln, line| {
                let ra: EngineRecord = parse_at(engine_a, line, ln)?;
                let ia = engine_items(&ra, engine_a, ln)?;
                let bi = b_index.get(&ra.image).copied();
                let (rb, ib) = match bi {
                    Some(i) => {
                        let (rb, lb) = &b_recs[i];
                        check_same_image(&ra, rb, ln)?;
                        (Some(rb), engine_items(rb, engine_b, *lb)?)
                    }
                    None => (None, Vec::new()),
                };
                Ok((consensus_image(Some(&ra), rb, &ia, &ib, opts)?, bi))
            },
            |(o, bi)| {
                if let Some(i) = bi {
                    claimed.push(i);
                }
                emit(o, if bi.is_none() { Some('a') } else { None })
            },
        )?;
        for i in claimed {
            used[i] = true;
        }
        for (i, (rb, lb)) in b_recs.iter().enumerate() {
            if !used[i] {
                let ib = engine_items(rb, engine_b, *lb)?;
                emit(consensus_image(None, Some(rb), &[], &ib, opts)?, Some('b'))?;
            }
        }
    } else {
        let mut ra_reader = open(engine_a)?;
        let mut rb_reader = open(engine_b)?;
        let (mut la, mut lb) = (0usize, 0usize);
        loop {
            let ca = read_chunk(&mut ra_reader, &mut la, CHUNK).map_err(|e| at(engine_a, e))?;
            let cb = read_chunk(&mut rb_reader, &mut lb, CHUNK).map_err(|e| at(engine_b, e))?;
            if ca.len() != cb.len() {
                return Err(CliError::input(format!(
                    "engine files list different numbers of images; use --allow-partial ({} has {} more)",
                    if ca.len() > cb.len() {
                        engine_a.display()
                    } else {
                        engine_b.display()
                    },
                    ca.len().abs_diff(cb.len())
                )));
            }
            if ca.is_empty() {
                break;
            }
            let outs: Vec<Result<ImageOutput, CliError>> = ca
                .par_iter()
                .zip(cb.par_iter())
                .map(|((lna, a), (lnb, b))| {
                    let ra: EngineRecord = parse_at(engine_a, a, *lna)?;
                    let rb: EngineRecord = parse_at(engine_b, b, *lnb)?;
                    if ra.image != rb.image {
                        return Err(CliError::input(format!(
                            "image mismatch: {}:{lna} has `{}`, {}:{lnb} has `{}`; use --allow-partial",
                            engine_a.display(),
                            ra.image,
                            engine_b.display(),
                            rb.image
                        )));
                    }
                    check_same_image(&ra, &rb, *lna)?;
                    let ia = engine_items(&ra, engine_a, *lna)?;
                    let ib = engine_items(&rb, engine_b, *lnb)?;
                    consensus_image(Some(&ra), Some(&rb), &ia, &ib, opts)
                })
                .collect();
            for o in outs {
                emit(o?, None)?;
            }
        }
    }
    agreed_w.flush().map_err(|e| at(&agreed_path, e))?;
    disputed_w.flush().map_err(|e| at(&disputed_path, e))?;

    let s = totals.stats;
    let rate = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let stats = json!({
        "tool": "takit",
        "version": VERSION,
        "inputs": {
            "engine_a": {"path": engine_a.display().to_string(), "sha256": sha256_file(engine_a)?},
            "engine_b": {"path": engine_b.display().to_string(), "sha256": sha256_file(engine_b)?},
        },
        "config": {
            "iou_threshold": opts.cfg.iou_threshold,
            "geometry": opts.cfg.geometry,
            "allow_partial": opts.allow_partial,
            "raw_priors": opts.raw_priors,
            "source": opts.source,
        },
        "totals": totals,
        "reasons": {
            "NoMutualMatch": s.no_mutual_match,
            "LowIoU": s.low_iou,
            "TranscriptMismatch": s.disputed_pairs,
        },
        "acceptance_rate_a": rate(s.agreed_pairs, s.instances_a),
        "acceptance_rate_b": rate(s.agreed_pairs, s.instances_b),
    });
    let stats_path = out_dir.join("stats.json");
    let mut w = create(&stats_path)?;
    serde_json::to_writer_pretty(&mut w, &stats).map_err(|e| at(&stats_path, e))?;
    write_all(&mut w, &stats_path, b"\n")?;
    w.flush().map_err(|e| at(&stats_path, e))?;
    println!(
        "images {}  agreed {}  disputed {}  acceptance(A) {:.4}",
        totals.images,
        s.agreed_pairs,
        s.disputed_pairs,
        rate(s.agreed_pairs, s.instances_a)
    );
    Ok(())
}

fn check_same_image(a: &EngineRecord, b: &EngineRecord, ln: usize) -> Result<(), CliError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(CliError::input(format!(
            "line {ln}: image `{}` has size {}x{} in engine A but {}x{} in engine B",
            a.image, a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn cmd_import_verdicts(queue: &Path, out: &Path, source: &str) -> Result<(), CliError> {
    let mut w = create(out)?;
    let (mut resolved, mut rejected, mut pending) = (0u64, 0u64, 0u64);
    stream_records(
        queue,
        |_, ln, line| {
            let e: QueueEntry = parse_at(queue, line, ln)?;
            let v = Verdict::parse(e.verdict.as_deref().unwrap_or(""), ln).map_err(|err| at(queue, err))?;
            Ok((e, v))
        },
        |(e, v)| {
            match v {
                None => pending += 1,
                Some(v) => match resolve_entry(&e, &v) {
                    None => rejected += 1,
                    Some(item) => {
                        resolved += 1;
                        let inst = InstanceRecord {
                            image: e.image.clone(),
                            width: e.width,
                            height: e.height,
                            bbox: item.bbox,
                            text: item.text,
                            source: source.to_string(),
                            mask_rle: None,
                            priors: None,
                            raw_priors: None,
                            extra: Default::default(),
                        };
                        write_all(&mut w, out, to_line(&inst).as_bytes())?;
                    }
                },
            }
            Ok(())
        },
    )?;
    w.flush().map_err(|e| at(out, e))?;
    if pending > 0 {
        warn!("{pending} queue entries have no verdict yet and were skipped");
    }
    println!("resolved {resolved}  rejected {rejected}  pending {pending}");
    Ok(())
}

pub fn cmd_spi(
    instances: &Path,
    profile: &Path,
    gamma: Gamma,
    seed: u64,
    align_iou: f64,
    out: &Path,
) -> Result<(), CliError> {
    let text = std::fs::read_to_string(profile).map_err(|e| at(profile, e))?;
    let np = NoiseProfile::from_json(&text).map_err(|e| at(profile, e))?;
    let probs = normalize_weights(&derive_weights(&np)).map_err(|e| at(profile, e))?;
    let cfg = SpiConfig {
        align_iou,
        ..SpiConfig::new(probs)
    };
    let mut w = create(out)?;
    let mut totals = MaterializeStats::default();
    let n = stream_records(
        instances,
        |idx, ln, line| {
            let mut rec: InstanceRecord = parse_at(instances, line, ln)?;
            let source: SourceKind = rec
                .source
                .parse()
                .map_err(|e| at(instances, format!("line {ln}: {e}")))?;
            let image = rec.image_size().map_err(|e| at(instances, format!("line {ln}: {e}")))?;
            let gt = [TextItem::new(rec.bbox, rec.text.clone())];
            let mut rng = Pcg32::for_record(seed, idx as u64);
            let (set, stats) = materialize_gamma(&gt, gamma, source, rec.raw_priors.as_deref(), &cfg, image, &mut rng)
                .map_err(|e| at(instances, format!("line {ln}: {e}")))?;
            rec.priors = Some(set.priors);
            rec.extra.insert("gamma".into(), json!(gamma.value()));
            Ok((to_line(&rec), stats))
        },
        |(line, s)| {
            totals.kept += s.kept;
            totals.noised += s.noised;
            totals.deleted += s.deleted;
            totals.jittered += s.jittered;
            totals.text_perturbed += s.text_perturbed;
            totals.jitter_degenerate += s.jitter_degenerate;
            totals.unaligned += s.unaligned;
            write_all(&mut w, out, line.as_bytes())
        },
    )?;
    w.flush().map_err(|e| at(out, e))?;
    info!("spi totals: {}", serde_json::to_string(&totals).expect("serializable"));
    println!(
        "records {n}  gamma {}  kept {}  noised {} (del {}, jit {}, txt {})",
        gamma.value(),
        totals.kept,
        totals.noised,
        totals.deleted,
        totals.jittered,
        totals.text_perturbed
    );
    Ok(())
}

pub fn cmd_render_masks(
    instances: &Path,
    r: &dyn GlyphRasterizer,
    export_pgm: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    if let Some(dir) = export_pgm {
        std::fs::create_dir_all(dir).map_err(|e| at(dir, e))?;
    }
    let mut w = create(out)?;
    let mut skipped = 0usize;
    let n = stream_records(
        instances,
        |idx, ln, line| {
            let mut rec: InstanceRecord = parse_at(instances, line, ln)?;
            let image = rec.image_size().map_err(|e| at(instances, format!("line {ln}: {e}")))?;
            let outcome = match render_destylized(&rec.text, &rec.bbox, image, r) {
                Ok(o) => o,
                Err(e) => return Ok(Err(format!("line {ln}: {e}"))),
            };
            if !outcome.mask.confined_to(&rec.bbox, 1.0) {
                return Ok(Err(format!("line {ln}: mask escapes its box")));
            }
            if let Some(dir) = export_pgm {
                let p = dir.join(format!("{idx:08}.pgm"));
                std::fs::write(&p, outcome.mask.to_pgm()).map_err(|e| at(&p, e))?;
            }
            rec.mask_rle = Some(outcome.mask.to_rle());
            Ok(Ok(to_line(&rec)))
        },
        |r| {
            match r {
                Ok(line) => write_all(&mut w, out, line.as_bytes())?,
                Err(reason) => {
                    skipped += 1;
                    warn!("record skipped: {reason}");
                }
            }
            Ok(())
        },
    )?;
    w.flush().map_err(|e| at(out, e))?;
    println!("rendered {}  skipped {skipped}", n - skipped);
    if n > 0 && skipped as f64 > MAX_SKIP_FRACTION * n as f64 {
        return Err(CliError::check(format!(
            "{skipped} of {n} records skipped (more than 1%)"
        )));
    }
    Ok(())
}

pub fn cmd_cqmd_selftest(params: Option<&Path>, seed: u64, causal_draws: usize) -> Result<(), CliError> {
    let file = match params {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| at(p, e))?;
            let f = ParamsFile::from_json(&text).map_err(|e| at(p, e))?;
            f.params().map_err(|e| at(p, e))?;
            if let Some(g) = &f.golden {
                g.hidden().map_err(|e| at(p, e))?;
                g.expected_mask().map_err(|e| at(p, e))?;
            }
            Some(f)
        }
        None => None,
    };
    let report = selftest(file.as_ref(), seed, causal_draws).map_err(|e| CliError::input(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    println!("max gradient relative error: {:.3e}", report.grad.max_rel_error);
    if report.passed {
        Ok(())
    } else {
        Err(CliError::check("cqmd self-test failed"))
    }
}

/// Entry point shared by the binary: parses arguments, runs, maps errors to
/// exit codes.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
