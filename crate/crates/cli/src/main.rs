//! `kineflow` command-line front end.
//!
//! Errors print as one line, `CODE: message`, and set the exit status:
//! 2 usage, 3 config, 4 i/o or format, 5 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kineflow::dataio::{
    load_manifest, read_flo, read_frame_png, read_occ_png, synth_pair, synth_specs, write_flo, write_frame_png,
    write_manifest, write_occ_png, FileSource, ManifestEntry, MotionKind, SampleRecord, SyntheticSource,
};
use kineflow::metrics::MetricReport;
use kineflow::model::Model;
use kineflow::trainer::{evaluate, evaluate_with, Checkpoint, LogWriter, Phase, TrainConfig, Trainer};
use kineflow::types::{FlowField, Frame, OcclusionMap, RngSeed};
use kineflow::viz::flow_to_rgb;
use kineflow::warp::occlusion_oracle;
use kineflow::Error;

#[derive(Parser)]
#[command(name = "kineflow", version, about = "Correlation-free optical flow: data, training, evaluation and inference")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled dataset with a manifest.
    Synth(SynthArgs),
    /// Run one training phase and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint (or a reference predictor) on a dataset.
    Eval(EvalArgs),
    /// Predict flow for one frame pair.
    Infer(InferArgs),
    /// Produce an occlusion map.
    Occ(OccArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Translation,
    Rotation,
    Zoom,
    Affine,
}

impl From<Kind> for MotionKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Translation => MotionKind::Translation,
            Kind::Rotation => MotionKind::Rotation,
            Kind::Zoom => MotionKind::Zoom,
            Kind::Affine => MotionKind::Affine,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; the manifest is written as `manifest.jsonl` inside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Motion families, cycled in order.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "translation")]
    kinds: Vec<Kind>,
    /// Frame size as HEIGHTxWIDTH.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's phase.
    #[arg(long, value_parser = parse_phase)]
    phase: Option<Phase>,
    /// Continue an interrupted run; its stored config wins.
    #[arg(long, conflicts_with = "init")]
    resume: Option<PathBuf>,
    /// Weights to start from; required for the kgl phase.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines log, appended to. Defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also save the checkpoint every this many steps.
    #[arg(long)]
    save_every: Option<u64>,
    /// Stop after this many completed steps (the run can be resumed).
    #[arg(long)]
    until: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint path, or `oracle` (ground truth) or `zero` (zero flow).
    #[arg(long)]
    checkpoint: String,
    /// Dataset manifest.
    #[arg(long)]
    dataset: PathBuf,
    /// Where to write the report; it is always printed too.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    frame0: PathBuf,
    #[arg(long)]
    frame1: PathBuf,
    #[arg(long)]
    flo_out: PathBuf,
    /// Colour-wheel rendering of the flow.
    #[arg(long)]
    viz_out: Option<PathBuf>,
    /// Normalise the rendering by this magnitude instead of the image maximum.
    #[arg(long, requires = "viz_out")]
    viz_max: Option<f64>,
}

#[derive(Args)]
struct OccArgs {
    /// Checkpoint path, or `oracle` for the forward-backward consistency test.
    #[arg(long)]
    checkpoint: String,
    #[arg(long)]
    frame0: Option<PathBuf>,
    #[arg(long)]
    frame1: Option<PathBuf>,
    /// Forward flow; with a checkpoint, replaces the model's prediction.
    #[arg(long, requires = "bwd")]
    fwd: Option<PathBuf>,
    #[arg(long, requires = "fwd")]
    bwd: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Reference occlusion PNG to score against.
    #[arg(long)]
    gt: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HEIGHTxWIDTH")?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((n(h)?, n(w)?))
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    match s.to_ascii_lowercase().as_str() {
        "ail" => Ok(Phase::Ail),
        "kgl" => Ok(Phase::Kgl),
        _ => Err("expected `ail` or `kgl`".into()),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Precondition(_) => 2,
        Error::Config { .. } => 3,
        Error::Io { .. } | Error::Format(_) => 4,
        _ => 5,
    }
}

fn ensure_dir(p: &Path) -> kineflow::Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.into(),
        source: e,
    })
}

fn write_text(p: &Path, s: &str) -> kineflow::Result<()> {
    std::fs::write(p, s).map_err(|e| Error::Io {
        path: p.into(),
        source: e,
    })
}

fn synth(a: SynthArgs, seed: RngSeed) -> kineflow::Result<()> {
    let kinds: Vec<MotionKind> = a.kinds.iter().map(|&k| k.into()).collect();
    ensure_dir(&a.out)?;
    let mut entries = Vec::with_capacity(a.count);
    for (i, spec) in synth_specs(&kinds, a.count, a.size, seed).into_iter().enumerate() {
        let id = format!("s{i:04}");
        let r = synth_pair(spec, a.size)?;
        let files = FileSource {
            frame0: format!("{id}_0.png").into(),
            frame1: format!("{id}_1.png").into(),
            flow: Some(format!("{id}.flo").into()),
            occ: r.gt_occ.as_ref().map(|_| format!("{id}_occ.png").into()),
        };
        write_frame_png(&r.frame0, a.out.join(&files.frame0))?;
        write_frame_png(&r.frame1, a.out.join(&files.frame1))?;
        write_flo(r.gt_flow.as_ref().expect("synthetic pairs are labeled"), a.out.join(files.flow.as_ref().unwrap()))?;
        if let (Some(o), Some(p)) = (&r.gt_occ, &files.occ) {
            write_occ_png(o, a.out.join(p))?;
        }
        entries.push(ManifestEntry {
            id,
            synthetic: Some(SyntheticSource {
                spec,
                height: a.size.0,
                width: a.size.1,
            }),
            files: Some(files),
        });
    }
    let manifest = a.out.join("manifest.jsonl");
    write_manifest(&entries, &manifest)?;
    println!("wrote {} pairs to {}", entries.len(), manifest.display());
    Ok(())
}

fn config_error(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

fn load_records(p: Option<&PathBuf>, key: &str) -> kineflow::Result<Option<Vec<SampleRecord>>> {
    p.map(load_manifest).transpose().map_err(|e| match e {
        Error::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
            config_error(key, format!("`{}` does not exist", path.display()))
        }
        e => e,
    })
}

fn train(a: TrainArgs, seed: Option<u64>) -> kineflow::Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(p) = a.phase {
        cfg.phase = p;
    }
    if let Some(s) = seed {
        cfg.seed = RngSeed(s);
    }
    let mut t = match (&a.resume, &a.init) {
        (Some(r), _) => Checkpoint::load(r)?.into_trainer()?,
        (None, Some(i)) => Trainer::from_model(cfg, Checkpoint::load(i)?.into_model()?)?,
        (None, None) if cfg.phase == Phase::Kgl => {
            return Err(Error::Precondition(
                "the kgl phase starts from trained weights; pass --init or --resume".into(),
            ))
        }
        (None, None) => Trainer::new(cfg)?,
    };
    let train = load_records(t.cfg.data.train_manifest.as_ref(), "data.train_manifest")?
        .ok_or_else(|| config_error("data.train_manifest", "a training manifest is required"))?;
    let eval = load_records(t.cfg.data.eval_manifest.as_ref(), "data.eval_manifest")?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.jsonl"));
    let mut log = LogWriter::append(&log_path)?;
    let stop = a.until.unwrap_or(t.cfg.steps).min(t.cfg.steps);
    let chunk = a.save_every.filter(|&n| n > 0).unwrap_or(u64::MAX);
    let mut last = None;
    let mut saved = false;
    while t.step < stop {
        let next = stop.min(t.step.saturating_add(chunk));
        t.run(&train, eval.as_deref(), Some(next), |r| {
            if !r.is_eval() {
                last = Some(r.losses.get("total").copied().unwrap_or(f64::NAN));
            }
            log.write(r)
        })?;
        t.checkpoint().save(&a.out)?;
        saved = true;
    }
    if !saved {
        t.checkpoint().save(&a.out)?;
    }
    println!(
        "phase = {}\nstep = {}\nsteps = {}\nloss = {}\ncheckpoint = {}",
        t.cfg.phase.name(),
        t.step,
        t.cfg.steps,
        last.map_or("none".into(), |v| format!("{v:.6}")),
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> kineflow::Result<()> {
    let records = load_manifest(&a.dataset)?;
    let report: MetricReport = match a.checkpoint.as_str() {
        "oracle" => evaluate_with(&records, |r| Ok(r.gt_flow.clone().expect("checked by evaluate_with")))?,
        "zero" => evaluate_with(&records, |r| Ok(FlowField::zeros(r.height(), r.width())))?,
        path => evaluate(&Checkpoint::load(path)?.into_model()?, &records)?,
    };
    let text = report.to_string();
    if let Some(p) = &a.report {
        write_text(p, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn load_model(p: &Path) -> kineflow::Result<Model> {
    Checkpoint::load(p)?.into_model()
}

fn infer(a: InferArgs) -> kineflow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let (i0, i1) = (read_frame_png(&a.frame0)?, read_frame_png(&a.frame1)?);
    let flow = model.predict(&i0, &i1)?.into_last();
    write_flo(&flow, &a.flo_out)?;
    if let Some(v) = &a.viz_out {
        write_frame_png(&flow_to_rgb(&flow, a.viz_max), v)?;
    }
    println!("max_magnitude = {:.6}", flow.max_magnitude());
    Ok(())
}

fn frames(a: &OccArgs) -> kineflow::Result<(Frame, Frame)> {
    match (&a.frame0, &a.frame1) {
        (Some(f0), Some(f1)) => Ok((read_frame_png(f0)?, read_frame_png(f1)?)),
        _ => Err(Error::Precondition("WarpNet occlusion needs --frame0 and --frame1".into())),
    }
}

fn occ(a: OccArgs) -> kineflow::Result<()> {
    let given = match (&a.fwd, &a.bwd) {
        (Some(f), Some(b)) => Some((read_flo(f)?, read_flo(b)?)),
        _ => None,
    };
    let map: OcclusionMap = if a.checkpoint == "oracle" {
        let (f, b) = given.ok_or_else(|| Error::Precondition("oracle mode needs --fwd and --bwd".into()))?;
        occlusion_oracle(&f, &b)?
    } else {
        let model = load_model(Path::new(&a.checkpoint))?;
        let (i0, i1) = frames(&a)?;
        let (f, b) = match given {
            Some(fb) => fb,
            None => {
                let (f, b) = model.predict_bidirectional(&i0, &i1)?;
                (f.into_last(), b.into_last())
            }
        };
        let (_, o) = model.net.warpnet.warp_frame(&model.params, &i1, &f, Some(&b))?;
        let reference = occlusion_oracle(&f, &b)?;
        println!("iou_vs_oracle = {:.6}", o.iou(&reference));
        o
    };
    write_occ_png(&map, &a.out)?;
    let occluded = map.binarize().iter().filter(|&&v| v).count();
    println!("occluded_fraction = {:.6}", occluded as f64 / map.values().len() as f64);
    if let Some(g) = &a.gt {
        println!("iou_vs_gt = {:.6}", map.iou(&read_occ_png(g)?));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&msg).trim_start_matches("error: ");
            eprintln!("E_USAGE: {first}");
            return ExitCode::from(2);
        }
    };
    let seed = RngSeed(cli.seed.unwrap_or(0));
    let res = match cli.cmd {
        Cmd::Synth(a) => synth(a, seed),
        Cmd::Train(a) => train(a, cli.seed),
        Cmd::Eval(a) => eval(a),
        Cmd::Infer(a) => infer(a),
        Cmd::Occ(a) => occ(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.code());
            ExitCode::from(exit_code(&e))
        }
    }
}
