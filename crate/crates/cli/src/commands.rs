use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use tinycount::annotations::{load_annotations, write_dataset, AnnotationError};
use tinycount::backends::{synthetic_density, synthetic_detect, write_replay_density, write_replay_detections};
use tinycount::density::{generate_density_map, write_csv, write_grid};
use tinycount::hybrid::{density_stage, detector_stage, Branch, CountResult, HybridConfig, PipelineError};
use tinycount::metrics::{confusion_report, mae, match_detections, rmse, ConfusionReport, PrCurve};
use tinycount::nms::{NmsConfig, NmsMode};
use tinycount::sweeps::{
    sweep_overlap, sweep_switch_threshold, sweep_window, SweepCache, SweepError, SweepParameter,
    SweepReport, SweepSpec, SweepValues,
};
use tinycount::synthgen::{generate_parts, CountDistribution, Dataset, SceneSpec};
use tinycount::{DensityBackend, DetectorBackend, KernelConfig, MergeMode, Scene};

use crate::backend::{self, BackendUri};
use crate::{
    Cli, Command, CountArgs, DensityGenArgs, EvalArgs, GridFormat, MergeArg, NmsModeArg,
    PipelineArgs, SweepArgs, SweepParam, SynthArgs,
};

/// An error with its process exit code.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn usage(m: impl Into<String>) -> Self {
        Self { code: 2, message: m.into() }
    }
    pub fn io(m: impl Into<String>) -> Self {
        Self { code: 3, message: m.into() }
    }
    pub fn invalid(m: impl Into<String>) -> Self {
        Self { code: 4, message: m.into() }
    }
    pub fn backend(m: impl Into<String>) -> Self {
        Self { code: 5, message: m.into() }
    }
    pub fn code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub trait ResultExt<T> {
    fn io_ctx(self, path: &Path) -> Result<T, Failure>;
    fn invalid_ctx(self, what: impl fmt::Display) -> Result<T, Failure>;
}

impl<T, E: fmt::Display> ResultExt<T> for Result<T, E> {
    fn io_ctx(self, path: &Path) -> Result<T, Failure> {
        self.map_err(|e| Failure::io(format!("{}: {e}", path.display())))
    }
    fn invalid_ctx(self, what: impl fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| Failure::invalid(format!("{what}: {e}")))
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::Config(c) => Failure::usage(c.to_string()),
        other => Failure::backend(other.to_string()),
    }
}

fn sweep_failure(e: SweepError) -> Failure {
    match e {
        SweepError::Pipeline { parameter, value, source } => {
            let code = pipeline_failure(source);
            Failure { code: code.code, message: format!("{parameter}={value}: {code}") }
        }
        SweepError::InvalidValues(_) | SweepError::WrongParameter { .. } => Failure::usage(e.to_string()),
        SweepError::Metrics { .. } => Failure::invalid(e.to_string()),
    }
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Count(a) => count(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Sweep(a) => sweep(cli, a),
        Command::Synth(a) => synth(cli, a),
        Command::DensityGen(a) => density_gen(a),
    }
}

/// Settings echoed at the top of every report.
#[derive(Debug, Serialize)]
struct Header<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    annotations: &'a Path,
    detector: &'a str,
    density: &'a str,
    window: u32,
    overlap: f64,
    sigma: f64,
    iou_threshold: f64,
    nms: &'static str,
    prune_epsilon: f64,
    merge: &'static str,
    /// `null` when infinite.
    switch_threshold: f64,
    count_score_threshold: f64,
    density_scale: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    match_iou: Option<f64>,
}

impl<'a> Header<'a> {
    fn new(command: &'static str, seed: u64, p: &'a PipelineArgs, match_iou: Option<f64>) -> Self {
        Self {
            tool: "tinycount",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            annotations: &p.annotations,
            detector: &p.detector,
            density: &p.density,
            window: p.window,
            overlap: p.overlap,
            sigma: p.sigma,
            iou_threshold: p.iou_threshold,
            nms: match p.nms {
                NmsModeArg::Soft => "soft-linear",
                NmsModeArg::Hard => "hard",
            },
            prune_epsilon: p.prune_epsilon,
            merge: match p.merge {
                MergeArg::Nms => "global-nms",
                MergeArg::Concat => "concatenate",
            },
            switch_threshold: p.switch_threshold,
            count_score_threshold: p.count_score_threshold,
            density_scale: p.density_scale,
            match_iou,
        }
    }
}

fn hybrid_config(p: &PipelineArgs) -> Result<HybridConfig, Failure> {
    let nms = NmsConfig {
        iou_threshold: p.iou_threshold,
        prune_epsilon: match p.nms {
            NmsModeArg::Soft => p.prune_epsilon,
            NmsModeArg::Hard => 0.0,
        },
        mode: match p.nms {
            NmsModeArg::Soft => NmsMode::SoftLinear,
            NmsModeArg::Hard => NmsMode::Hard,
        },
    };
    let cfg = HybridConfig {
        switch_threshold: p.switch_threshold,
        count_score_threshold: p.count_score_threshold,
        window: p.window,
        overlap_ratio: p.overlap,
        nms,
        merge: match p.merge {
            MergeArg::Nms => MergeMode::GlobalNms,
            MergeArg::Concat => MergeMode::Concatenate,
        },
    };
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    load_annotations(path).map_err(|e| match e {
        AnnotationError::Io(io) => Failure::io(format!("{}: {io}", path.display())),
        other => Failure::invalid(format!("{}: {other}", path.display())),
    })
}

struct Loaded {
    dataset: Dataset,
    cfg: HybridConfig,
    det: Box<dyn DetectorBackend>,
    den: Box<dyn DensityBackend>,
}

fn load_pipeline(seed: u64, p: &PipelineArgs) -> Result<Loaded, Failure> {
    let cfg = hybrid_config(p)?;
    let det_uri = BackendUri::parse(&p.detector)?;
    let den_uri = BackendUri::parse(&p.density)?;
    let kernel = KernelConfig { sigma: p.sigma, truncation: KernelConfig::default().truncation };
    kernel.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let dataset = load_dataset(&p.annotations)?;
    let det = backend::detector(&det_uri, &dataset.scenes, seed)?;
    let den = backend::density(&den_uri, &dataset.scenes, seed, p.density_scale, kernel)?;
    Ok(Loaded { dataset, cfg, det, den })
}

/// Writes pretty JSON plus a newline to `path`, or stdout.
fn emit_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("report serialises");
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text).io_ctx(p),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::io(format!("stdout: {e}"))),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).io_ctx(path)
}

/// Per-image work, parallel when both backends allow it; output keeps input order.
fn per_scene<R: Send>(
    l: &Loaded,
    f: impl Fn(&Scene) -> Result<R, PipelineError> + Sync + Send,
) -> Result<Vec<R>, Failure> {
    let parallel = l.det.capabilities().concurrent_safe && l.den.capabilities().concurrent_safe;
    let out: Result<Vec<R>, PipelineError> = if parallel {
        l.dataset.scenes.par_iter().map(f).collect()
    } else {
        l.dataset.scenes.iter().map(f).collect()
    };
    out.map_err(pipeline_failure)
}

#[derive(Serialize)]
struct CountReport<'a> {
    header: Header<'a>,
    results: Vec<CountResult>,
}

fn count(cli: &Cli, a: &CountArgs) -> Result<(), Failure> {
    let l = load_pipeline(cli.seed, &a.pipeline)?;
    let results = per_scene(&l, |s| {
        tinycount::hybrid_count(&s.image_ref(), l.det.as_ref(), l.den.as_ref(), &l.cfg)
    })?;
    log::info!("counted {} images", results.len());
    emit_json(
        a.out.as_deref(),
        &CountReport {
            header: Header::new("count", cli.seed, &a.pipeline, None),
            results,
        },
    )
}

#[derive(Serialize)]
struct ImageSummary {
    image: String,
    truth: usize,
    count: f64,
    branch: Branch,
    n1: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    n2: Option<f64>,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    header: Header<'a>,
    images: usize,
    mae: Option<f64>,
    rmse: Option<f64>,
    /// `null` when the dataset has no ground-truth boxes.
    ap: Option<f64>,
    confusion: ConfusionReport,
    per_image: Vec<ImageSummary>,
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<(), Failure> {
    let l = load_pipeline(cli.seed, &a.pipeline)?;
    let staged = per_scene(&l, |s| {
        let img = s.image_ref();
        let (dets, n1) = detector_stage(&img, l.det.as_ref(), &l.cfg)?;
        let n2 = match l.cfg.route(n1) {
            Branch::Density => Some(density_stage(&img, l.den.as_ref())?),
            Branch::Detector => None,
        };
        Ok((dets, n1, n2))
    })?;

    let scenes = &l.dataset.scenes;
    let summaries: Vec<ImageSummary> = scenes
        .iter()
        .zip(&staged)
        .map(|(s, (_, n1, n2))| ImageSummary {
            image: s.id.clone(),
            truth: s.count(),
            count: n2.unwrap_or(*n1 as f64),
            branch: if n2.is_some() { Branch::Density } else { Branch::Detector },
            n1: *n1,
            n2: *n2,
        })
        .collect();
    let pairs: Vec<(f64, f64)> = summaries.iter().map(|s| (s.count, s.truth as f64)).collect();

    let curve = PrCurve::build(
        scenes.iter().zip(&staged).map(|(s, (d, _, _))| (d.as_slice(), s.boxes.as_slice())),
        a.match_iou,
    );
    let ap = match &curve {
        Ok(c) => Some(c.average_precision()),
        Err(e) => {
            log::warn!("{e}");
            None
        }
    };
    if let (Some(path), Ok(c)) = (&a.pr_curve, &curve) {
        write_text(path, &c.to_tsv())?;
    }

    let min_score = l.cfg.count_score_threshold;
    let confusion = confusion_report(
        a.match_iou,
        scenes.iter().zip(&staged).map(|(s, (dets, _, n2))| {
            let m = n2.is_none().then(|| {
                let kept: Vec<_> = dets.iter().filter(|d| d.score >= min_score).copied().collect();
                match_detections(&kept, &s.boxes, a.match_iou)
            });
            (s.id.clone(), m)
        }),
    );

    let report = EvalReport {
        header: Header::new("eval", cli.seed, &a.pipeline, Some(a.match_iou)),
        images: scenes.len(),
        mae: mae(&pairs).ok(),
        rmse: rmse(&pairs).ok(),
        ap,
        confusion,
        per_image: summaries,
    };
    if a.out.is_some() {
        print!("{}", report.confusion.to_table());
        println!(
            "MAE {}  RMSE {}  AP@{} {}",
            fmt_opt(report.mae),
            fmt_opt(report.rmse),
            a.match_iou,
            fmt_opt(report.ap)
        );
    }
    emit_json(a.out.as_deref(), &report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

#[derive(Serialize)]
struct SweepOutput<'a> {
    header: Header<'a>,
    report: SweepReport,
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<(), Failure> {
    let values = match (&a.values, a.from, a.to, a.step) {
        (Some(v), None, None, None) => SweepValues::List(v.clone()),
        (None, Some(from), Some(to), Some(step)) => SweepValues::Range { from, to, step },
        _ => return Err(Failure::usage("give either --values or all of --from, --to and --step")),
    };
    let l = load_pipeline(cli.seed, &a.pipeline)?;
    let parameter = match a.param {
        SweepParam::SwitchThreshold => SweepParameter::SwitchThreshold,
        SweepParam::Window => SweepParameter::Window,
        SweepParam::Overlap => SweepParameter::Overlap,
    };
    let spec = SweepSpec {
        parameter,
        values,
        base: l.cfg.clone(),
        match_iou: a.match_iou,
    };
    let cache = SweepCache::new();
    let scenes = &l.dataset.scenes;
    let report = match parameter {
        SweepParameter::SwitchThreshold => {
            sweep_switch_threshold(&spec, scenes, l.det.as_ref(), l.den.as_ref(), &cache)
        }
        SweepParameter::Window => sweep_window(&spec, scenes, l.det.as_ref(), &cache),
        SweepParameter::Overlap => sweep_overlap(&spec, scenes, l.det.as_ref(), &cache),
    }
    .map_err(sweep_failure)?;
    if let Some(path) = &a.curve {
        write_text(path, &report.curve())?;
    }
    emit_json(
        a.out.as_deref(),
        &SweepOutput {
            header: Header::new("sweep", cli.seed, &a.pipeline, Some(a.match_iou)),
            report,
        },
    )
}

pub const REPLAY_DETECTIONS_FILE: &str = "detections.ndjson";
pub const REPLAY_DENSITY_FILE: &str = "density.bin";

fn synth(cli: &Cli, a: &SynthArgs) -> Result<(), Failure> {
    let base = SceneSpec {
        width: a.width,
        height: a.height,
        ..SceneSpec::default()
    };
    let normal = SceneSpec {
        count: CountDistribution::Uniform { min: a.min_count, max: a.max_count },
        ..base.clone()
    };
    let high = SceneSpec {
        count: CountDistribution::Uniform { min: a.high_min_count, max: a.high_max_count },
        ..base
    };
    let mut parts = vec![(&normal, a.images)];
    if a.high_images > 0 {
        parts.push((&high, a.high_images));
    }
    let ds = generate_parts(&parts, cli.seed, Some(a.high_cut)).invalid_ctx("synth")?;
    write_dataset(&a.out, &ds, &ds.manifest(Some(cli.seed), Some(a.high_cut))).io_ctx(&a.out)?;

    if a.emit_replay {
        if a.density_scale == 0 {
            return Err(Failure::usage("density scale must be at least 1"));
        }
        let model = backend::load_model(a.error_model.as_deref(), cli.seed)?;
        let kernel = KernelConfig { sigma: a.sigma, truncation: KernelConfig::default().truncation };
        kernel.validate().map_err(|e| Failure::usage(e.to_string()))?;
        let (dets, maps): (Vec<_>, Vec<_>) = ds
            .scenes
            .par_iter()
            .map(|s| {
                (
                    synthetic_detect(s, &model, None),
                    synthetic_density(s, &model, &kernel).sum_pool(a.density_scale),
                )
            })
            .unzip();
        let det_path = a.out.join(REPLAY_DETECTIONS_FILE);
        let mut w = BufWriter::new(File::create(&det_path).io_ctx(&det_path)?);
        write_replay_detections(
            &mut w,
            ds.scenes.iter().zip(&dets).map(|(s, d)| (s.id.as_str(), d.as_slice())),
        )
        .and_then(|_| w.flush())
        .io_ctx(&det_path)?;
        let den_path = a.out.join(REPLAY_DENSITY_FILE);
        let mut w = BufWriter::new(File::create(&den_path).io_ctx(&den_path)?);
        write_replay_density(&mut w, ds.scenes.iter().zip(&maps).map(|(s, m)| (s.id.as_str(), m)))
            .and_then(|_| w.flush())
            .io_ctx(&den_path)?;
    }
    log::info!("wrote {} scenes to {}", ds.len(), a.out.display());
    Ok(())
}

fn density_gen(a: &DensityGenArgs) -> Result<(), Failure> {
    let kernel = KernelConfig { sigma: a.sigma, truncation: a.truncation };
    kernel.validate().map_err(|e| Failure::usage(e.to_string()))?;
    if a.scale == 0 {
        return Err(Failure::usage("scale must be at least 1"));
    }
    let ds = load_dataset(&a.annotations)?;
    for s in &ds.scenes {
        if s.id.is_empty() || s.id.contains(['/', '\\']) || s.id == "." || s.id == ".." {
            return Err(Failure::invalid(format!("image id `{}` cannot be used as a file name", s.id)));
        }
    }
    std::fs::create_dir_all(&a.out).io_ctx(&a.out)?;
    let maps = ds
        .scenes
        .par_iter()
        .map(|s| {
            generate_density_map(&s.points, s.width, s.height, &kernel)
                .map(|m| if a.scale > 1 { m.sum_pool(a.scale) } else { m })
                .invalid_ctx(format!("image `{}`", s.id))
        })
        .collect::<Result<Vec<_>, _>>()?;
    for (s, m) in ds.scenes.iter().zip(&maps) {
        let ext = match a.format {
            GridFormat::Bin => "tcdm",
            GridFormat::Csv => "csv",
        };
        let path = a.out.join(format!("{}.{ext}", s.id));
        let mut w = BufWriter::new(File::create(&path).io_ctx(&path)?);
        match a.format {
            GridFormat::Bin => write_grid(m, &mut w),
            GridFormat::Csv => write_csv(m, &mut w),
        }
        .and_then(|_| w.flush())
        .io_ctx(&path)?;
    }
    log::info!("wrote {} density maps to {}", maps.len(), a.out.display());
    Ok(())
}
