//! Command-line surface.
//!
//! Exit codes: 0 success, 1 data or format error, 2 usage error.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{read_bundle, write_bundle};
use crate::coco::{
    detections_from_json, detections_to_json, read_json_lines, write_json_lines, GroundRecord, GtAnnotation,
    GtCategory, GtFile, GtImage, PhraseRecord,
};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geometry::{BoxPx, Detection};
use crate::grounding::{
    detect_categories, ground_phrase, grounding_confidence, word_heatmap, Lexicon, LexiconEntry, PhraseQuery,
};
use crate::metrics::{map_at, map_range, recall_at_1, GtMerge};
use crate::nms::{nms_pseudo_labels, sort_detections};
use crate::render::render_overlay;
use crate::segment::segment;
use crate::synth::{generate_synthetic_bundle, random_specs, RandomCorpus, SynthSpec};

pub const BUNDLE_EXT: &str = "wsab";

#[derive(Debug, Parser)]
#[command(name = "capbox", version, about = "Boxes from caption attention and ViT keys")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Pipeline {
    /// JSON file overriding pipeline parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (default: one per core).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// One box per lexicon category mentioned in each caption.
    Detect {
        #[arg(long)]
        bundles: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pipeline: Pipeline,
    },
    /// One box per phrase line.
    Ground {
        #[arg(long)]
        bundles: PathBuf,
        #[arg(long)]
        phrases: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pipeline: Pipeline,
    },
    /// recall@1 of `ground` output against the phrases file.
    EvalGrounding {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Count a hit on any single ground-truth box instead of their union.
        #[arg(long)]
        any_box: bool,
    },
    /// mAP of detections against COCO-style ground truth.
    EvalDet {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, conflicts_with = "range")]
        iou: Option<f64>,
        /// Report mAP50 and mAP50:95.
        #[arg(long)]
        range: bool,
    },
    /// Confidence gate plus per-class NMS.
    PseudoLabel {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = PipelineConfig::default().nms_conf)]
        conf: f64,
        #[arg(long, default_value_t = PipelineConfig::default().nms_iou)]
        iou: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a planted-object corpus.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PPM overlay of one token's expanded heatmap and box.
    Render {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        token: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("capbox: usage error: {m}");
            2
        }
        Err(Failure::Run(e)) => {
            eprintln!("capbox: error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Detect {
            bundles,
            lexicon,
            out,
            pipeline,
        } => {
            let (cfg, pool) = setup(&pipeline)?;
            let lex = Lexicon::from_json(&read_text(&lexicon)?)?;
            let dets = pool.install(|| detect_dir(&bundles, &lex, &cfg))?;
            write_text(&out, &detections_to_json(&dets)?)?;
        }
        Command::Ground {
            bundles,
            phrases,
            out,
            pipeline,
        } => {
            let (cfg, pool) = setup(&pipeline)?;
            let records: Vec<PhraseRecord> = read_json_lines(&read_text(&phrases)?)?;
            let grounded = pool.install(|| ground_records(&bundles, &records, &cfg))?;
            write_text(&out, &write_json_lines(&grounded)?)?;
        }
        Command::EvalGrounding { pred, gt, any_box } => {
            let merge = if any_box { GtMerge::AnyBox } else { GtMerge::Union };
            let report = eval_grounding(&pred, &gt, merge)?;
            println!("{}", serde_json::to_string(&report).map_err(Error::from)?);
        }
        Command::EvalDet { pred, gt, iou, range } => {
            if let Some(t) = iou {
                if !(t > 0.0 && t <= 1.0) {
                    return Err(Failure::Usage(format!("--iou {t} outside (0, 1]")));
                }
            }
            let dets = detections_from_json(&read_text(&pred)?)?;
            let truth = GtFile::from_json(&read_text(&gt)?)?.to_set()?;
            let line = if range {
                let m = map_range(&dets, &truth)?;
                serde_json::to_string(&RangeReport {
                    map50: m.map50,
                    map5095: m.map5095,
                    classes_evaluated: m.classes_evaluated,
                    classes_excluded: m.classes_excluded,
                })
            } else {
                let m = map_at(&dets, &truth, iou.unwrap_or(0.5))?;
                serde_json::to_string(&SingleReport {
                    iou: m.iou,
                    map: m.map,
                    classes_evaluated: m.per_class.len(),
                    classes_excluded: m.excluded,
                })
            }
            .map_err(Error::from)?;
            println!("{line}");
        }
        Command::PseudoLabel { pred, conf, iou, out } => {
            if !(0.0..=1.0).contains(&conf) || !(0.0..=1.0).contains(&iou) {
                return Err(Failure::Usage("--conf and --iou must lie in [0, 1]".into()));
            }
            let dets = detections_from_json(&read_text(&pred)?)?;
            write_text(&out, &detections_to_json(&nms_pseudo_labels(&dets, conf, iou))?)?;
        }
        Command::Synth { spec, out } => {
            let corpus: CorpusSpec = serde_json::from_str(&read_text(&spec)?).map_err(Error::from)?;
            write_corpus(&corpus, &out)?;
        }
        Command::Render {
            bundle,
            token,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let b = load(&bundle)?;
            let w = word_heatmap(&b, token, &cfg)?;
            let seg = segment(&w.heatmap, &w.initial_seed, &b.geometry, &cfg)?;
            render_overlay(&b, &w.heatmap, &[seg.bbox], &out)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RangeReport {
    map50: f64,
    map5095: f64,
    classes_evaluated: usize,
    classes_excluded: usize,
}

#[derive(Serialize)]
struct SingleReport {
    iou: f64,
    map: f64,
    classes_evaluated: usize,
    classes_excluded: usize,
}

#[derive(Debug, Serialize)]
struct GroundingReport {
    recall_at_1: f64,
    phrases: usize,
    hits: usize,
}

fn setup(p: &Pipeline) -> std::result::Result<(PipelineConfig, rayon::ThreadPool), Failure> {
    let cfg = load_config(p.config.as_deref())?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    match p.workers {
        Some(0) => return Err(Failure::Usage("--workers must be at least 1".into())),
        Some(n) => builder = builder.num_threads(n),
        None => {}
    }
    let pool = builder
        .build()
        .map_err(|e| Failure::Run(Error::Argument(format!("thread pool: {e}"))))?;
    Ok((cfg, pool))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::from_json(&read_text(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::file(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

/// Bundle files in `dir`, sorted by file name.
pub fn list_bundles(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
        let path = entry.map_err(|e| Error::file(dir, e))?.path();
        if path.extension().is_some_and(|x| x == BUNDLE_EXT) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Image id of a bundle: its file stem read as an unsigned integer.
pub fn image_id(path: &Path) -> Result<u64> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Data(format!("{}: bundle file stem is not a numeric image id", path.display())))
}

fn load(path: &Path) -> Result<crate::bundle::FeatureBundle> {
    read_bundle(path).map_err(|e| Error::InBundle {
        path: path.display().to_string(),
        source: Box::new(e),
    })
}

/// The first error in path order wins, whatever order the workers finish in.
fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

pub fn detect_dir(dir: &Path, lex: &Lexicon, cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    let paths = list_bundles(dir)?;
    let ids = paths.iter().map(|p| image_id(p)).collect::<Result<Vec<_>>>()?;
    if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
        return Err(Error::Data("two bundle files map to the same image id".into()));
    }
    let per_image: Vec<Result<Vec<Detection>>> = paths
        .par_iter()
        .zip(&ids)
        .map(|(p, &id)| detect_categories(&load(p)?, id, lex, cfg))
        .collect();
    let mut dets: Vec<Detection> = first_error(per_image)?.into_iter().flatten().collect();
    sort_detections(&mut dets);
    Ok(dets)
}

pub fn ground_records(dir: &Path, records: &[PhraseRecord], cfg: &PipelineConfig) -> Result<Vec<GroundRecord>> {
    let mut by_bundle: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (k, r) in records.iter().enumerate() {
        if Path::new(&r.bundle).components().count() != 1 {
            return Err(Error::Data(format!("phrase {k}: bundle {:?} must be a bare file name", r.bundle)));
        }
        by_bundle.entry(r.bundle.as_str()).or_default().push(k);
    }
    let groups: Vec<(&str, Vec<usize>)> = by_bundle.into_iter().collect();
    let done: Vec<Result<Vec<(usize, GroundRecord)>>> = groups
        .par_iter()
        .map(|(name, ks)| {
            let b = load(&dir.join(name))?;
            ks.iter()
                .map(|&k| {
                    let r = &records[k];
                    let g = ground_phrase(&b, &PhraseQuery::new(r.token_indices.clone(), r.phrase.clone()), cfg)
                        .map_err(|e| Error::Data(format!("phrase {k} ({}): {e}", r.bundle)))?;
                    Ok((
                        k,
                        GroundRecord {
                            bundle: r.bundle.clone(),
                            token_indices: r.token_indices.clone(),
                            phrase: r.phrase.clone(),
                            bbox: g.bbox.to_xywh(),
                            score: grounding_confidence(&g),
                        },
                    ))
                })
                .collect()
        })
        .collect();
    let mut out: Vec<(usize, GroundRecord)> = first_error(done)?.into_iter().flatten().collect();
    out.sort_by_key(|(k, _)| *k);
    Ok(out.into_iter().map(|(_, r)| r).collect())
}

fn eval_grounding(pred: &Path, gt: &Path, merge: GtMerge) -> Result<GroundingReport> {
    let preds: Vec<GroundRecord> = read_json_lines(&read_text(pred)?)?;
    let phrases: Vec<PhraseRecord> = read_json_lines(&read_text(gt)?)?;
    let mut lookup: BTreeMap<(&str, &[usize]), BoxPx> = BTreeMap::new();
    for (k, p) in preds.iter().enumerate() {
        let b = BoxPx::from_xywh(p.bbox).map_err(|e| Error::Data(format!("prediction {k}: {e}")))?;
        lookup.insert((p.bundle.as_str(), p.token_indices.as_slice()), b);
    }
    let mut boxes = Vec::with_capacity(phrases.len());
    let mut truth = Vec::with_capacity(phrases.len());
    for (k, p) in phrases.iter().enumerate() {
        let b = lookup
            .get(&(p.bundle.as_str(), p.token_indices.as_slice()))
            .ok_or_else(|| Error::Data(format!("phrase {k} ({} {:?}) has no prediction", p.bundle, p.token_indices)))?;
        boxes.push(*b);
        let gts = p
            .gt_boxes
            .iter()
            .map(|&xywh| BoxPx::from_xywh(xywh).map_err(|e| Error::Data(format!("phrase {k}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        truth.push(gts);
    }
    let recall = recall_at_1(&boxes, &truth, merge)?;
    Ok(GroundingReport {
        recall_at_1: recall,
        phrases: boxes.len(),
        hits: (recall * boxes.len() as f64).round() as usize,
    })
}

/// Contents of a `synth --spec` file: explicit bundles, a random corpus, or both
/// (explicit ones first).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub bundles: Vec<SynthSpec>,
    pub random: Option<RandomCorpus>,
}

/// Writes `NNNNNN.wsab` bundles (ids from 1), `gt.json`, `lexicon.json` and `phrases.jsonl`.
pub fn write_corpus(spec: &CorpusSpec, out: &Path) -> Result<()> {
    let mut specs = spec.bundles.clone();
    if let Some(r) = &spec.random {
        specs.extend(random_specs(r)?);
    }
    if specs.is_empty() {
        return Err(Error::Data("corpus spec describes no bundles".into()));
    }
    let names: BTreeSet<&str> = specs
        .iter()
        .flat_map(|s| s.objects.iter().map(|o| o.category.as_str()))
        .collect();
    let ids: BTreeMap<&str, u64> = names.iter().zip(1..).map(|(n, id)| (*n, id)).collect();

    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    let mut gt = GtFile {
        categories: ids
            .iter()
            .map(|(n, &id)| GtCategory {
                id,
                name: n.to_string(),
            })
            .collect(),
        ..GtFile::default()
    };
    let mut phrases = Vec::new();
    for (s, image_id) in specs.iter().zip(1u64..) {
        let synth = generate_synthetic_bundle(s).map_err(|e| match e {
            Error::Argument(m) => Error::Data(format!("bundle {image_id}: {m}")),
            other => other,
        })?;
        let name = format!("{image_id:06}.{BUNDLE_EXT}");
        write_bundle(&synth.bundle, &out.join(&name))?;
        gt.images.push(GtImage {
            id: image_id,
            width: synth.bundle.geometry.image_w(),
            height: synth.bundle.geometry.image_h(),
        });
        for (t, (category, bbox)) in synth.truth.iter().enumerate() {
            gt.annotations.push(GtAnnotation {
                image_id,
                category_id: ids[category.as_str()],
                bbox: bbox.to_xywh(),
            });
            phrases.push(PhraseRecord {
                bundle: name.clone(),
                token_indices: vec![t],
                phrase: category.clone(),
                gt_boxes: vec![bbox.to_xywh()],
            });
        }
    }
    let lexicon: Vec<LexiconEntry> = ids
        .iter()
        .map(|(n, &id)| LexiconEntry {
            id,
            name: n.to_string(),
            aliases: Vec::new(),
        })
        .collect();
    write_text(&out.join("gt.json"), &pretty(&gt)?)?;
    write_text(&out.join("lexicon.json"), &pretty(&lexicon)?)?;
    write_text(&out.join("phrases.jsonl"), &write_json_lines(&phrases)?)?;
    Ok(())
}

fn pretty<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}
