//! Command-line front end.
//!
//! Exit codes: 0 success (and `--help`), 1 usage error, 2 data error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, Vector2};

use crate::diffusion::{fit_linear_denoiser, sample_many, Condition, LinearDenoiser, LinearFitConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::fitting::{fit_hand, triangulate_point, CameraCalib, FitConfig, Observation2D, DEFAULT_CONFIDENCE};
use crate::io::{
    read_calibration, read_joints, read_keypoints, read_motion, write_atomic, write_joints, write_motion, JointsRecord, Layout,
    MotionFile, KEYPOINTS_PER_RECORD,
};
use crate::metrics::{
    diversity, frechet_distance, interaction_loss, sdf_penetration, shape_loss, ContactParams, DirectionWeight, FeatureExtractor,
    FeatureStats, MetricReport, ReportParams, StatisticalFeaturizer, DEFAULT_SDF_RADIUS,
};
use crate::par;
use crate::representation::{
    decode_global, decode_local, encode_global, encode_local, normalize_sequence, FrameJoints, GlobalRepMatrix, HandPair,
    MotionSequence, DEFAULT_FPS,
};
use crate::skeleton::{Handedness, JointSet, SkeletonTemplate, TemplatePair, NUM_JOINTS};
use crate::synth::{synth_sequence, MotionFamily, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "hdmo", version, about = "Two-hand motion toolkit")]
pub struct Cli {
    /// Hand template (JSON or binary). The other hand is its mirror image.
    /// Defaults to the built-in synthetic template.
    #[arg(long, global = true)]
    pub template: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural two-hand sequence (params layout).
    Synth(SynthArgs),
    /// Normalize a params file and encode it as a representation matrix.
    Encode(EncodeArgs),
    /// Decode a local or global representation back to parameters.
    Decode(DecodeArgs),
    /// Compare predicted motion against ground truth.
    Metrics(MetricsArgs),
    /// Triangulate multi-view 2D keypoints into 3D joints.
    Triangulate(TriangulateArgs),
    /// Fit hand parameters to triangulated joints.
    Fit(FitArgs),
    /// Fit a ridge-linear denoiser to representation files.
    TrainDenoiser(TrainArgs),
    /// Draw samples with a trained denoiser.
    Sample(SampleArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 120)]
    pub frames: usize,
    #[arg(long, default_value_t = 0.8)]
    pub intensity: f64,
    #[arg(long, value_enum, default_value_t = MotionFamily::Clasp)]
    pub family: MotionFamily,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Rep {
    Local,
    Global,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long, value_enum)]
    pub rep: Rep,
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Ground-truth motion files (any layout). Repeatable.
    #[arg(long, required = true)]
    pub gt: Vec<PathBuf>,
    /// Predicted motion files, paired with `--gt` in order. Repeatable.
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub stiffness: f64,
    #[arg(long, default_value_t = 0.02)]
    pub tau: f64,
    #[arg(long, value_enum, default_value_t = DirectionWeight::Dot)]
    pub direction_weight: DirectionWeight,
    #[arg(long, default_value_t = DEFAULT_SDF_RADIUS)]
    pub radius: f64,
    /// Frames per feature window.
    #[arg(long, default_value_t = 16)]
    pub window: usize,
    #[arg(long, default_value_t = 8)]
    pub stride: usize,
    /// Pair count for diversity (reduced when there are fewer samples).
    #[arg(long, default_value_t = 200)]
    pub diversity_subset: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; printed to stdout when omitted.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TriangulateArgs {
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub keypoints: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE)]
    pub confidence: f64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Triangulated joints (JSONL).
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long)]
    pub warm_start: bool,
    #[arg(long, default_value_t = DEFAULT_FPS)]
    pub fps: f64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Representation files (all local or all global). Repeatable.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub buckets: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub ridge: f64,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 4096)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SampleMode {
    Unconstrained,
    Inbetween,
    Trajectory,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, value_enum, default_value_t = SampleMode::Unconstrained)]
    pub mode: SampleMode,
    #[arg(long)]
    pub model: PathBuf,
    /// Conditioning motion in the model's layout. Required for
    /// `inbetween` and `trajectory`; sets the frame count when given.
    #[arg(long)]
    pub cond: Option<PathBuf>,
    #[arg(long, default_value_t = 120)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Output path. With `--count > 1`, files are named `<stem>_<i>.<ext>`.
    #[arg(short, long)]
    pub output: PathBuf,
}

/// Parse `args` (including the program name), run, and return the exit code.
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
    par::init_from_env();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn templates(cli: &Cli) -> Result<TemplatePair> {
    let Some(path) = &cli.template else {
        return Ok(TemplatePair::synthetic());
    };
    let t = SkeletonTemplate::load(path)?;
    let m = t.mirrored();
    Ok(match t.handedness {
        Handedness::Left => HandPair::new(t, m),
        Handedness::Right => HandPair::new(m, t),
    })
}

pub fn run(cli: &Cli) -> Result<()> {
    let templates = templates(cli)?;
    match &cli.command {
        Command::Synth(a) => synth(a, &templates),
        Command::Encode(a) => encode(a, &templates),
        Command::Decode(a) => decode(a, &templates),
        Command::Metrics(a) => metrics(a, &templates),
        Command::Triangulate(a) => triangulate(a),
        Command::Fit(a) => fit(a, &templates),
        Command::TrainDenoiser(a) => train(a),
        Command::Sample(a) => sample(a),
    }
}

fn synth(a: &SynthArgs, templates: &TemplatePair) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        frames: a.frames,
        interaction_intensity: a.intensity,
        family: a.family,
    };
    let seq = synth_sequence(&cfg, templates)?;
    write_motion(&a.output, &MotionFile::from_sequence(&seq)?)
}

fn encode(a: &EncodeArgs, templates: &TemplatePair) -> Result<()> {
    let seq = read_motion(&a.input)?.to_sequence()?;
    let (seq, _) = normalize_sequence(&seq, templates)?;
    let file = match a.rep {
        Rep::Local => {
            let m = encode_local(&seq, templates)?;
            MotionFile::from_matrix(Layout::Local, m.data(), m.fps)?
        }
        Rep::Global => {
            let m = encode_global(&seq, templates)?;
            MotionFile::from_matrix(Layout::Global, m.data(), m.fps)?
        }
    };
    write_motion(&a.output, &file)
}

/// Any motion file as a parameter sequence (decoded sequences carry their
/// joints).
fn load_sequence(file: &MotionFile, templates: &TemplatePair) -> Result<MotionSequence> {
    match file.layout {
        Layout::Params => file.to_sequence(),
        Layout::Local => decode_local(&file.to_local()?, templates),
        Layout::Global => decode_global(&file.to_global()?, templates),
    }
}

fn decode(a: &DecodeArgs, templates: &TemplatePair) -> Result<()> {
    let file = read_motion(&a.input)?;
    if file.layout == Layout::Params {
        return Err(Error::Format("input is already a params file".into()));
    }
    let seq = load_sequence(&file, templates)?;
    write_motion(&a.output, &MotionFile::from_sequence(&seq)?)
}

struct LoadedMotion {
    joints: Vec<FrameJoints>,
    global: GlobalRepMatrix,
}

fn load_for_metrics(path: &Path, templates: &TemplatePair) -> Result<LoadedMotion> {
    let file = read_motion(path)?;
    let seq = load_sequence(&file, templates)?;
    let joints = seq.joints(templates)?;
    let global = match file.layout {
        Layout::Global => file.to_global()?,
        _ => encode_global(&normalize_sequence(&seq, templates)?.0, templates)?,
    };
    Ok(LoadedMotion { joints, global })
}

fn windows(rep: &GlobalRepMatrix, window: usize, stride: usize) -> Result<Vec<GlobalRepMatrix>> {
    let n = rep.frames();
    if n <= window {
        return Ok(vec![rep.clone()]);
    }
    (0..=(n - window))
        .step_by(stride)
        .map(|s| GlobalRepMatrix::new(rep.data().rows(s, window).into_owned(), rep.fps))
        .collect()
}

fn feature_matrix(motions: &[LoadedMotion], window: usize, stride: usize) -> Result<DMatrix<f64>> {
    let mut reps = Vec::new();
    for m in motions {
        reps.extend(windows(&m.global, window, stride)?);
    }
    Ok(StatisticalFeaturizer.extract_all(&reps))
}

fn metrics(a: &MetricsArgs, templates: &TemplatePair) -> Result<()> {
    if a.gt.len() != a.pred.len() {
        return Err(Error::invalid(format!(
            "--gt and --pred must be given the same number of times ({} vs {})",
            a.gt.len(),
            a.pred.len()
        )));
    }
    if a.window == 0 || a.stride == 0 {
        return Err(Error::invalid("--window and --stride must be positive"));
    }
    let contact = ContactParams {
        stiffness: a.stiffness,
        threshold: a.tau,
        direction_weight: a.direction_weight,
    };
    contact.validate()?;
    let gt = a.gt.iter().map(|p| load_for_metrics(p, templates)).collect::<Result<Vec<_>>>()?;
    let pred = a.pred.iter().map(|p| load_for_metrics(p, templates)).collect::<Result<Vec<_>>>()?;
    let mut gt_frames = Vec::new();
    let mut pred_frames = Vec::new();
    for (g, p) in gt.iter().zip(&pred) {
        if g.joints.len() != p.joints.len() {
            return Err(Error::DimensionMismatch {
                what: "paired gt/pred frame count",
                expected: g.joints.len(),
                got: p.joints.len(),
            });
        }
        gt_frames.extend(g.joints.iter().cloned());
        pred_frames.extend(p.joints.iter().cloned());
    }

    let fg = feature_matrix(&gt, a.window, a.stride)?;
    let fp = feature_matrix(&pred, a.window, a.stride)?;
    let fid = if fg.nrows() >= 2 && fp.nrows() >= 2 {
        Some(frechet_distance(&FeatureStats::from_samples(&fg)?, &FeatureStats::from_samples(&fp)?)?)
    } else {
        None
    };
    let subset = a.diversity_subset.min(fp.nrows() / 2);
    let div = if subset >= 1 { Some(diversity(&fp, subset, a.seed)?) } else { None };

    let report = MetricReport {
        fid,
        diversity: div,
        sdf_penetration: sdf_penetration(&pred_frames, a.radius)?,
        interaction_loss: interaction_loss(&pred_frames, &gt_frames, &contact)?,
        shape_loss: shape_loss(&pred_frames, &gt_frames)?,
        params: ReportParams {
            stiffness: a.stiffness,
            threshold: a.tau,
            radius: a.radius,
            seed: a.seed,
        },
    };
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    match &a.output {
        Some(p) => write_atomic(p, &json),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&json)?;
            Ok(())
        }
    }
}

fn triangulate(a: &TriangulateArgs) -> Result<()> {
    let cams: Vec<CameraCalib> = read_calibration(&a.calib)?;
    let records = read_keypoints(&a.keypoints)?;
    let mut by_frame: BTreeMap<usize, Vec<&crate::io::KeypointRecord>> = BTreeMap::new();
    for r in &records {
        by_frame.entry(r.frame).or_default().push(r);
    }
    let frames: Vec<(usize, Vec<&crate::io::KeypointRecord>)> = by_frame.into_iter().collect();
    let out = par::try_map_range(frames.len(), |f| -> Result<JointsRecord> {
        let (frame, recs) = &frames[f];
        let mut points = Vec::with_capacity(KEYPOINTS_PER_RECORD);
        let mut residuals = Vec::with_capacity(KEYPOINTS_PER_RECORD);
        for j in 0..KEYPOINTS_PER_RECORD {
            let obs: Vec<Observation2D> = recs
                .iter()
                .map(|r| Observation2D {
                    camera_id: r.camera_id.clone(),
                    point: Vector2::new(r.points[j][0], r.points[j][1]),
                    confidence: r.points[j][2],
                })
                .collect();
            match triangulate_point(&obs, &cams, a.confidence) {
                Ok(t) => {
                    points.push(Some([t.point.x, t.point.y, t.point.z]));
                    residuals.push(Some(t.residual_px));
                }
                Err(Error::InsufficientViews { .. } | Error::DegenerateGeometry(_)) => {
                    points.push(None);
                    residuals.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        let right = points.split_off(NUM_JOINTS);
        Ok(JointsRecord {
            frame: *frame,
            left: points,
            right,
            residual_px: residuals,
        })
    })?;
    write_joints(&a.output, &out)
}

fn joint_set(frame: usize, side: &str, pts: &[Option<[f64; 3]>]) -> Result<JointSet> {
    if pts.len() != NUM_JOINTS {
        return Err(Error::DimensionMismatch {
            what: "joints per hand",
            expected: NUM_JOINTS,
            got: pts.len(),
        });
    }
    let v = pts
        .iter()
        .enumerate()
        .map(|(j, p)| {
            p.map(|p| crate::geometry::Vec3::new(p[0], p[1], p[2]))
                .ok_or_else(|| Error::invalid(format!("frame {frame}: {side} joint {j} was not triangulated")))
        })
        .collect::<Result<Vec<_>>>()?;
    JointSet::new(v)
}

fn fit(a: &FitArgs, templates: &TemplatePair) -> Result<()> {
    let recs = read_joints(&a.targets)?;
    if recs.is_empty() {
        return Err(Error::SequenceTooShort {
            what: "fit targets",
            min: 1,
            got: 0,
        });
    }
    let cfg = FitConfig {
        lambda: a.lambda,
        max_iters: a.max_iters,
        tol: a.tol,
        warm_start: a.warm_start,
    };
    let left = recs.iter().map(|r| joint_set(r.frame, "left", &r.left)).collect::<Result<Vec<_>>>()?;
    let right = recs.iter().map(|r| joint_set(r.frame, "right", &r.right)).collect::<Result<Vec<_>>>()?;
    let fl = fit_hand(&left, &templates.left, &cfg)?;
    let fr = fit_hand(&right, &templates.right, &cfg)?;
    let frames = fl.params.into_iter().zip(fr.params).map(|(l, r)| HandPair::new(l, r)).collect();
    let seq = MotionSequence::new(frames, a.fps)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let unconverged = fl.converged.iter().chain(&fr.converged).filter(|c| !**c).count();
    eprintln!(
        "fit {} frames: mean RMS joint error left {:.3e} m, right {:.3e} m; {} hand-frames hit max_iters",
        recs.len(),
        mean(&fl.residuals),
        mean(&fr.residuals),
        unconverged
    );
    write_motion(&a.output, &MotionFile::from_sequence(&seq)?)
}

fn train(a: &TrainArgs) -> Result<()> {
    let files = a.data.iter().map(|p| read_motion(p)).collect::<Result<Vec<_>>>()?;
    let layout = files[0].layout;
    if layout == Layout::Params {
        return Err(Error::Format("training data must be local or global representation files".into()));
    }
    if let Some(f) = files.iter().find(|f| f.layout != layout) {
        return Err(Error::Format(format!("mixed layouts in training data ({layout:?} and {:?})", f.layout)));
    }
    let data: Vec<DMatrix<f64>> = files.iter().map(MotionFile::to_matrix).collect();
    let s = NoiseSchedule::cosine(a.steps)?;
    let cfg = LinearFitConfig {
        buckets: a.buckets,
        ridge: a.ridge,
        samples_per_bucket: a.samples,
        seed: a.seed,
    };
    let model = fit_linear_denoiser(&data, &s, &cfg)?;
    write_atomic(&a.output, &model.to_bytes())
}

fn numbered(path: &Path, i: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_{i:03}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{i:03}"),
    };
    path.with_file_name(name)
}

fn sample(a: &SampleArgs) -> Result<()> {
    let model = LinearDenoiser::load(&a.model)?;
    let s = NoiseSchedule::cosine(model.steps())?;
    model.check_schedule(&s)?;
    let layout = match model.dim() {
        d if d == Layout::Local.width() => Layout::Local,
        d if d == Layout::Global.width() => Layout::Global,
        d => return Err(Error::Format(format!("model width {d} is not a motion representation width"))),
    };
    let cond_file = a.cond.as_ref().map(|p| read_motion(p)).transpose()?;
    if let Some(f) = &cond_file {
        if f.layout != layout {
            return Err(Error::Format(format!(
                "conditioning file is {:?} but the model was trained on {layout:?}",
                f.layout
            )));
        }
    }
    let gt = cond_file.as_ref().map(MotionFile::to_matrix);
    let need_gt = || {
        gt.as_ref()
            .ok_or_else(|| Error::invalid(format!("--mode {:?} needs --cond", a.mode).to_lowercase()))
    };
    let cond = match a.mode {
        SampleMode::Unconstrained => Condition::Unconstrained,
        SampleMode::Inbetween => Condition::inbetween_from(need_gt()?)?,
        SampleMode::Trajectory => Condition::trajectory_from(need_gt()?)?,
    };
    let frames = gt.as_ref().map_or(a.frames, |g| g.nrows());
    if frames == 0 {
        return Err(Error::invalid("--frames must be positive"));
    }
    let fps = cond_file.as_ref().map_or(DEFAULT_FPS, |f| f.fps as f64);
    let samples = sample_many(&model, &s, (frames, model.dim()), &cond, a.seed, a.count)?;
    for (i, m) in samples.iter().enumerate() {
        let path = if a.count == 1 { a.output.clone() } else { numbered(&a.output, i) };
        write_motion(&path, &MotionFile::from_matrix(layout, m, fps)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        main_with_args(std::iter::once("hdmo").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_1_and_help_exits_0() {
        assert_eq!(run_args(&["--bogus"]), 1);
        assert_eq!(run_args(&["synth"]), 1);
        assert_eq!(run_args(&["--help"]), 0);
        assert_eq!(run_args(&["encode", "--rep", "sideways", "-i", "a", "-o", "b"]), 1);
    }

    #[test]
    fn data_errors_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.hdmo");
        let out = dir.path().join("o.hdmo");
        assert_eq!(run_args(&["decode", "-i", missing.to_str().unwrap(), "-o", out.to_str().unwrap()]), 2);
        assert_eq!(run_args(&["synth", "--frames", "5", "-o", out.to_str().unwrap()]), 2);
    }

    #[test]
    fn numbered_outputs() {
        assert_eq!(numbered(Path::new("/x/out.hdmo"), 3), PathBuf::from("/x/out_003.hdmo"));
        assert_eq!(numbered(Path::new("out"), 0), PathBuf::from("out_000"));
    }
}
