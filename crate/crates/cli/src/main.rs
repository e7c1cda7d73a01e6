//! `detcore` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 input/output error.

mod config;
mod imageio;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use detcore::augment::{apply_chain, Sample, Transform};
use detcore::cascade::simulate_cascade;
use detcore::coco::{load_coco, load_results, Dataset, ResultRecord};
use detcore::eval::{iou_thresholds, map_50_95, EvalParams};
use detcore::pyramid::gen_anchors;
use detcore::schedule::lr_at;
use detcore::suppression::{filter_by_score, nms_with, soft_nms, Detection, SoftNmsMethod, SoftNmsParams};
use detcore::{gradcheck, BBox};

use config::Config;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Input(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Input(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Input(m) => f.write_str(m),
        }
    }
}

impl From<detcore::Error> for CliError {
    fn from(e: detcore::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "detcore", version, about = "Detection post-processing, augmentation and evaluation tools")]
struct Cli {
    /// JSON configuration file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    Linear,
    Gaussian,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// COCO-style mAP of a results file against annotations.
    Eval {
        #[arg(long)]
        ann: PathBuf,
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        iou_min: Option<f64>,
        #[arg(long)]
        iou_max: Option<f64>,
        #[arg(long)]
        iou_step: Option<f64>,
        #[arg(long)]
        max_dets: Option<usize>,
        /// Emit the full report as JSON instead of a table.
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hard or soft NMS over a COCO results file, per image.
    Nms {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        soft: bool,
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[arg(long)]
        iou_thr: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        score_floor: Option<f64>,
        #[arg(long)]
        score_thr: Option<f64>,
        #[arg(long)]
        class_agnostic: bool,
    },
    /// Apply a transform chain to one image and its annotations.
    Augment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ann: PathBuf,
        /// Image id in the annotation file; optional when it holds one image.
        #[arg(long)]
        image_id: Option<u64>,
        /// Transform chain as a JSON array; overrides the config chain.
        #[arg(long)]
        chain: Option<String>,
        #[arg(long)]
        out_image: PathBuf,
        #[arg(long)]
        out_ann: PathBuf,
    },
    /// Anchor boxes for every pyramid level as CSV.
    Anchors {
        #[arg(long)]
        width: Option<u32>,
        #[arg(long)]
        height: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// IoU histograms of proposals through a simulated cascade as CSV.
    SimulateCascade {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learning rate per iteration as CSV.
    LrDump {
        #[arg(long)]
        iters: u64,
        #[arg(long)]
        iters_per_epoch: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare deformable-sampling gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| CliError::Input(format!("cannot write {}: {e}", p.display()))),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Input(format!("cannot write to stdout: {e}"))),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    match cli.command {
        Command::Eval {
            ann,
            dets,
            iou_min,
            iou_max,
            iou_step,
            max_dets,
            json,
            out,
        } => {
            let ds = load_coco(&ann)?;
            let results = load_results(&dets)?;
            let params = EvalParams {
                iou_thresholds: iou_thresholds(
                    iou_min.unwrap_or(cfg.eval.iou_min),
                    iou_max.unwrap_or(cfg.eval.iou_max),
                    iou_step.unwrap_or(cfg.eval.iou_step),
                )?,
                max_dets: max_dets.or(cfg.eval.max_dets),
            };
            let report = map_50_95(&results, &ds, &params)?;
            let text = if json { to_json(&report) } else { report.to_table() };
            emit(out.as_deref(), &text)
        }
        Command::Nms {
            dets,
            out,
            soft,
            method,
            iou_thr,
            sigma,
            score_floor,
            score_thr,
            class_agnostic,
        } => {
            let n = &cfg.nms;
            let params = SoftNmsParams {
                iou_thr: iou_thr.unwrap_or(n.iou_thr),
                sigma: sigma.unwrap_or(n.sigma),
                score_floor: score_floor.unwrap_or(n.score_floor),
                method: match method {
                    Some(Method::Linear) => SoftNmsMethod::Linear,
                    Some(Method::Gaussian) => SoftNmsMethod::Gaussian,
                    None => n.method,
                },
                class_agnostic: class_agnostic || n.class_agnostic,
            };
            let score_thr = score_thr.unwrap_or(n.score_thr);
            let results = load_results(&dets)?;
            let kept = suppress(&results, soft || n.soft, &params, score_thr)?;
            emit(out.as_deref(), &to_json(&kept))
        }
        Command::Augment {
            image,
            ann,
            image_id,
            chain,
            out_image,
            out_ann,
        } => {
            let chain: Vec<Transform> = match chain {
                Some(text) => serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("--chain: {e}")))?,
                None => cfg.augment.chain.clone(),
            };
            let ds = load_coco(&ann)?;
            let pixels = imageio::read_image(&image)?;
            let (out_ds, out_pixels) = augment(&ds, pixels, image_id, &chain, seed, &out_image)?;
            imageio::write_image(&out_image, &out_pixels)?;
            emit(Some(&out_ann), &to_json(&out_ds))
        }
        Command::Anchors { width, height, out } => {
            let spec = &cfg.anchors.pyramid;
            let (Some(w), Some(h)) = (width.or(cfg.anchors.width), height.or(cfg.anchors.height)) else {
                return Err(CliError::Usage("anchors needs --width and --height".into()));
            };
            let levels = gen_anchors(spec, w, h)?;
            let mut s = String::from("level,x1,y1,x2,y2\n");
            for (level, boxes) in spec.levels.iter().zip(&levels) {
                for b in boxes {
                    let _ = writeln!(s, "{},{},{},{},{}", level.name, b.x1, b.y1, b.x2, b.y2);
                }
            }
            emit(out.as_deref(), &s)
        }
        Command::SimulateCascade { out } => {
            let report = simulate_cascade(&cfg.cascade.stages(), &cfg.cascade.simulation, seed)?;
            let mut s = String::from("stage,bin_lo,bin_hi,count\n");
            for (stage, hist) in report.histograms.iter().enumerate() {
                for (k, count) in hist.counts.iter().enumerate() {
                    let (lo, hi) = hist.edges(k);
                    let _ = writeln!(s, "{stage},{lo},{hi},{count}");
                }
            }
            emit(out.as_deref(), &s)
        }
        Command::LrDump {
            iters,
            iters_per_epoch,
            out,
        } => {
            let mut sched = cfg.schedule.clone();
            if let Some(n) = iters_per_epoch {
                sched.iters_per_epoch = n;
            }
            sched.validate()?;
            let mut s = String::from("iter,lr\n");
            for i in 0..iters {
                let _ = writeln!(s, "{i},{}", lr_at(i, &sched));
            }
            emit(out.as_deref(), &s)
        }
        Command::Gradcheck { instances, out } => {
            let n = instances.unwrap_or(cfg.gradcheck.instances);
            let tol = cfg.gradcheck.tolerance;
            let r = gradcheck::run(n, seed)?;
            let mut s = String::new();
            let _ = writeln!(s, "instances {}", r.instances);
            for (name, v) in [
                ("conv_input", r.conv_input),
                ("conv_weight", r.conv_weight),
                ("conv_offsets", r.conv_offsets),
                ("sample_xy", r.sample_xy),
                ("sample_map", r.sample_map),
            ] {
                let _ = writeln!(s, "{name} max_rel_err {v:.3e}");
            }
            let pass = r.max() < tol;
            let _ = writeln!(s, "{} (tolerance {tol:e})", if pass { "PASS" } else { "FAIL" });
            emit(out.as_deref(), &s)?;
            if pass {
                Ok(())
            } else {
                Err(CliError::Usage("gradient check exceeded tolerance".into()))
            }
        }
    }
}

/// Suppress per image, in ascending image id; each image keeps selection order.
fn suppress(
    results: &[ResultRecord],
    soft: bool,
    params: &SoftNmsParams,
    score_thr: f64,
) -> Result<Vec<ResultRecord>, CliError> {
    params.validate()?;
    let mut per_image: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for r in results {
        per_image.entry(r.image_id).or_default().push(r.to_detection());
    }
    let mut kept = Vec::new();
    for (image_id, dets) in per_image {
        let survivors = if soft {
            soft_nms(&dets, params)?
        } else {
            nms_with(&dets, params.iou_thr, params.class_agnostic)?
        };
        kept.extend(
            filter_by_score(&survivors, score_thr)
                .iter()
                .map(|d| ResultRecord::from_detection(image_id, d)),
        );
    }
    Ok(kept)
}

fn augment(
    ds: &Dataset,
    pixels: detcore::Tensor,
    image_id: Option<u64>,
    chain: &[Transform],
    seed: u64,
    out_image: &Path,
) -> Result<(Dataset, detcore::Tensor), CliError> {
    let image = match image_id {
        Some(id) => ds
            .images
            .iter()
            .find(|im| im.id == id)
            .ok_or_else(|| CliError::Input(format!("image id {id} not in annotations")))?,
        None => match ds.images.as_slice() {
            [only] => only,
            _ => return Err(CliError::Usage("annotation file holds several images; pass --image-id".into())),
        },
    };
    let (_, h, w) = pixels.dims3()?;
    if (w as u32, h as u32) != (image.width, image.height) {
        return Err(CliError::Input(format!(
            "image is {w}x{h} but annotations say {}x{}",
            image.width, image.height
        )));
    }
    let anns: Vec<_> = ds.annotations.iter().filter(|a| a.image_id == image.id).collect();
    let boxes: Vec<BBox> = anns.iter().map(|a| a.to_box().clip(w as f64, h as f64)).collect();
    let labels = anns.iter().map(|a| a.category_id).collect();
    let sample = Sample::new(pixels, boxes, labels)?;
    let out = apply_chain(&sample, chain, seed)?;

    let mut out_ds = Dataset {
        images: vec![image.clone()],
        annotations: Vec::with_capacity(anns.len()),
        categories: ds.categories.clone(),
    };
    out_ds.images[0].width = out.width() as u32;
    out_ds.images[0].height = out.height() as u32;
    if let Some(name) = out_image.file_name() {
        out_ds.images[0].file_name = name.to_string_lossy().into_owned();
    }
    for (a, b) in anns.iter().zip(&out.boxes) {
        let mut a = (*a).clone();
        a.bbox = b.to_xywh();
        out_ds.annotations.push(a);
    }
    Ok((out_ds, out.image))
}
