use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use rvld::completion::complete_lanes;
use rvld::eigenlane::{build_basis, mean_reconstruction_error};
use rvld::geometry::LanePolyline;
use rvld::ild::{train_ild, IldModel};
use rvld::io::{
    frame_path, group_by_video, load_basis, load_frame, parse_annotations, render_overlay, save_basis, save_png,
    write_annotations, write_atomic, AnnotationLane, AnnotationRecord, Checkpoint,
};
use rvld::metrics::evaluate;
use rvld::pipeline::{clip_targets, ild_samples, pld_units, prediction_records, RunConfig};
use rvld::pld::{ild_step, pld_step, train_pld, Ablation, FrameOutput, PldModel};
use rvld::synth::{generate_benchmark, load_benchmark, Profile, SynthClip, IMAGE_DIR};
use rvld::Error;

#[derive(Parser)]
#[command(name = "rvld", version, about = "Recursive video lane detection on synthetic road videos")]
struct Cli {
    /// Run configuration (TOML); command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Train or run an ablated predictive detector.
    #[arg(long, global = true, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    #[command(subcommand)]
    cmd: Cmd,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic benchmark directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "occluded")]
        profile: Profile,
        #[arg(long, default_value_t = 40)]
        clips: usize,
    },
    /// Fit an eigenlane basis to the complete lanes of an annotation file.
    Basis {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Basis dimension; defaults to the configured M.
        #[arg(long)]
        m: Option<usize>,
    },
    /// Fill missing lane points by low-rank completion.
    Complete {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Build one lane matrix per video or one for the whole file.
        #[arg(long, value_enum, default_value_t = Scope::Video)]
        scope: Scope,
    },
    /// Train the single-frame detector.
    TrainIld {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the predictive detector on top of a frozen single-frame detector.
    TrainPld {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        ild: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Detect lanes in every video of a dataset, or in one directory of frames.
    Infer {
        /// Dataset directory written by `synth`.
        #[arg(long, conflicts_with = "frames")]
        data: Option<PathBuf>,
        /// Directory of PNG frames forming one video, read in name order.
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        ild: PathBuf,
        /// Predictive detector; without it every frame is detected on its own.
        #[arg(long)]
        pld: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write the recursive state after every frame into this directory.
        #[arg(long)]
        dump_state: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw predictions (and optionally GT and motion) over the frames of a video.
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        video: String,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gt: bool,
        /// Recompute motion with these models and draw it as arrows.
        #[arg(long, requires_all = ["ild", "pld", "basis"])]
        flow: bool,
        #[arg(long)]
        ild: Option<PathBuf>,
        #[arg(long)]
        pld: Option<PathBuf>,
        #[arg(long)]
        basis: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Scope {
    Video,
    Dataset,
}

fn resolve_config(cli: &Cli) -> rvld::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.ablation.is_some() {
        cfg.pld = cfg.pld.clone().with_ablation(cli.ablation);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_ild(p: &Path) -> rvld::Result<IldModel> {
    IldModel::from_checkpoint(&Checkpoint::load(p)?)
}

fn load_pld(p: &Path) -> rvld::Result<PldModel> {
    PldModel::from_checkpoint(&Checkpoint::load(p)?)
}

fn frames_dir_video(dir: &Path) -> rvld::Result<SynthClip> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    let frames = paths.iter().map(|p| load_frame(p)).collect::<rvld::Result<Vec<_>>>()?;
    let first = frames.first().ok_or(Error::EmptyVideo)?;
    let (_, h, w) = first.chw()?;
    let grid = rvld::synth::SceneConfig { width: w, height: h, ..Default::default() }.grid(16);
    let name = dir.file_name().map_or("video".into(), |n| n.to_string_lossy().into_owned());
    Ok(SynthClip {
        name,
        gt: vec![Vec::new(); frames.len()],
        frames,
        occlusion: vec![],
        occluders: vec![],
        shifts: vec![],
        grid,
    })
}

fn run(cli: Cli) -> rvld::Result<()> {
    let cfg = resolve_config(&cli)?;
    info!("resolved configuration:\n{}", cfg.to_toml_string()?);
    match cli.cmd {
        Cmd::Synth { out, profile, clips } => {
            let m = generate_benchmark(&out, profile, clips, cfg.seed)?;
            println!("wrote {} clips to {}", m.clips.len(), out.display());
        }
        Cmd::Basis { annotations, out, m } => {
            let recs = parse_annotations(&annotations)?;
            let grid = recs.first().ok_or(Error::EmptyDataset)?.grid;
            let lanes: Vec<LanePolyline> =
                recs.iter().flat_map(|r| r.lanes.iter().map(|l| l.polyline())).filter(|l| l.is_complete()).collect();
            let b = build_basis(&lanes, m.unwrap_or(cfg.ild.m), &grid)?;
            info!(
                "basis from {} lanes, mean reconstruction error {:.4} px",
                lanes.len(),
                mean_reconstruction_error(&b, &lanes)?
            );
            save_basis(&out, &b)?;
        }
        Cmd::Complete { annotations, out, scope } => {
            let mut recs = parse_annotations(&annotations)?;
            let mut filled: Vec<(String, usize, usize, LanePolyline)> = Vec::new();
            let groups: Vec<(String, Vec<&AnnotationRecord>)> = match scope {
                Scope::Video => group_by_video(&recs),
                Scope::Dataset => vec![("dataset".into(), recs.iter().collect())],
            };
            for (name, frames) in groups {
                let mut index = Vec::new();
                let mut lanes = Vec::new();
                for r in &frames {
                    for (li, l) in r.lanes.iter().enumerate() {
                        if l.valid.iter().any(|&v| v) {
                            index.push((r.video.clone(), r.frame, li));
                            lanes.push(l.polyline());
                        }
                    }
                }
                if lanes.iter().all(|l| l.is_complete()) {
                    continue;
                }
                let width = frames[0].grid.width as f64;
                let (done, c) = complete_lanes(&lanes, width, &cfg.completion)?;
                info!("{name}: completed {} lanes in {} iterations", lanes.len(), c.iterations);
                for ((video, frame, li), l) in index.into_iter().zip(done) {
                    filled.push((video, frame, li, l));
                }
            }
            for (video, frame, li, l) in filled {
                let r = recs.iter_mut().find(|r| r.video == video && r.frame == frame).expect("grouped record");
                let lane = &mut r.lanes[li];
                *lane = AnnotationLane::from_polyline(lane.track_id, &l, lane.score);
            }
            write_annotations(&out, &recs)?;
        }
        Cmd::TrainIld { data, basis, out, steps } => {
            let clips = load_benchmark(&data)?;
            let b = load_basis(&basis)?;
            let targets = clip_targets(&clips, &b, &cfg.ild)?;
            let mut model = IldModel::new(&cfg.ild, cfg.stage_seed("ild-init"))?;
            let mut tc = cfg.train_config(&cfg.ild_train, "ild-train");
            tc.steps = steps.unwrap_or(tc.steps);
            let trace = train_ild(&mut model, &ild_samples(&clips, &targets), &b, &tc)?;
            info!("final loss {:.5}", trace.last().copied().unwrap_or(f64::NAN));
            model.to_checkpoint()?.save(&out)?;
        }
        Cmd::TrainPld { data, basis, ild, out, steps } => {
            let clips = load_benchmark(&data)?;
            let b = load_basis(&basis)?;
            let ild = load_ild(&ild)?;
            let targets = clip_targets(&clips, &b, &ild.cfg)?;
            let mut model = PldModel::new(&cfg.pld, ild.cfg.k, cfg.stage_seed("pld-init"))?;
            let mut tc = cfg.train_config(&cfg.pld_train, "pld-train");
            tc.steps = steps.unwrap_or(tc.steps);
            let trace = train_pld(&mut model, &ild, &pld_units(&clips, &targets), &b, &cfg.nms, &tc)?;
            info!("final loss {:.5}", trace.last().copied().unwrap_or(f64::NAN));
            model.to_checkpoint()?.save(&out)?;
        }
        Cmd::Infer { data, frames, basis, ild, pld, out, dump_state } => {
            let videos = match (data, frames) {
                (Some(d), None) => load_benchmark(&d)?,
                (None, Some(f)) => vec![frames_dir_video(&f)?],
                _ => return Err(Error::Config("give exactly one of --data or --frames".into())),
            };
            let b = load_basis(&basis)?;
            let ild = load_ild(&ild)?;
            let pld = pld.as_deref().map(load_pld).transpose()?;
            let mut records = Vec::new();
            for v in &videos {
                let mut outs: Vec<FrameOutput> = Vec::with_capacity(v.frames.len());
                let mut state = None;
                for (t, f) in v.frames.iter().enumerate() {
                    let (o, s) = match (&pld, &state) {
                        (Some(p), Some(s)) => pld_step(s, f, &ild, p, &b, &cfg.nms)?,
                        _ => ild_step(f, &ild, &b, &cfg.nms)?,
                    };
                    if let Some(dir) = &dump_state {
                        s.to_checkpoint().save(&dir.join(&v.name).join(format!("{t:05}.state")))?;
                    }
                    outs.push(o);
                    state = Some(s);
                }
                records.extend(prediction_records(&v.name, &outs, &v.grid));
            }
            write_annotations(&out, &records)?;
            println!("wrote {} frames of predictions to {}", records.len(), out.display());
        }
        Cmd::Eval { gt, pred, out } => {
            let report = evaluate(&parse_annotations(&gt)?, &parse_annotations(&pred)?, cfg.stripe_width)?;
            print!("{}", report.summary());
            if let Some(p) = out {
                let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
                write_atomic(&p, text.as_bytes())?;
            }
        }
        Cmd::Render { data, video, pred, out, gt, flow, ild, pld, basis } => {
            let preds = parse_annotations(&pred)?;
            let preds: Vec<&AnnotationRecord> = preds.iter().filter(|r| r.video == video).collect();
            let truth = if gt { parse_annotations(&data.join(rvld::synth::ANNOTATION_FILE))? } else { Vec::new() };
            let clip = load_benchmark(&data)?.into_iter().find(|c| c.name == video);
            let frames = match &clip {
                Some(c) => c.frames.clone(),
                None => (0..preds.len())
                    .map(|t| load_frame(&frame_path(&data.join(IMAGE_DIR), &video, t)))
                    .collect::<rvld::Result<_>>()?,
            };
            let flows: Vec<Option<rvld::autograd::Tensor>> = if flow {
                let (ild, pld, b) = (load_ild(&ild.unwrap())?, load_pld(&pld.unwrap())?, load_basis(&basis.unwrap())?);
                rvld::pld::run_video(&frames, &ild, Some(&pld), &b, &cfg.nms)?.into_iter().map(|o| o.flow).collect()
            } else {
                vec![None; frames.len()]
            };
            for (t, f) in frames.iter().enumerate() {
                let rec = preds.iter().find(|r| r.frame == t);
                let grid = rec.map(|r| r.grid).or_else(|| clip.as_ref().map(|c| c.grid)).ok_or(Error::EmptyVideo)?;
                let dets: Vec<LanePolyline> =
                    rec.map(|r| r.lanes.iter().map(|l| l.polyline()).collect()).unwrap_or_default();
                let g: Option<Vec<LanePolyline>> = gt.then(|| {
                    truth
                        .iter()
                        .filter(|r| r.video == video && r.frame == t)
                        .flat_map(|r| r.lanes.iter().map(|l| l.polyline()))
                        .collect()
                });
                let img = render_overlay(f, &dets, g.as_deref(), &grid, 2.0, flows[t].as_ref())?;
                save_png(&out.join(format!("{video}_{t:05}.png")), &img)?;
            }
            println!("rendered {} frames to {}", frames.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match &e {
                Error::Io(_) => "io",
                Error::Config(_) => "config",
                Error::Parse { .. } | Error::Schema { .. } => "format",
                _ => "runtime",
            };
            eprintln!("{}", serde_json::json!({ "error": e.to_string(), "kind": kind }));
            ExitCode::from(1)
        }
    }
}
