//! Run configuration and the end-to-end experiment: synthesize data, fit the
//! basis, train the single-frame detector, train the predictive variants and
//! score every method on held-out clips.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::completion::CompletionConfig;
use crate::eigenlane::{build_basis, EigenlaneBasis};
use crate::error::{Error, Result};
use crate::geometry::{LanePolyline, SampleGrid};
use crate::ild::{make_gt_maps, train_ild, GtMaps, IldConfig, IldModel, IldSample, TrainConfig, DOWNSAMPLE};
use crate::io::{AnnotationLane, AnnotationRecord};
use crate::metrics::{evaluate, EvalReport, STRIPE_WIDTH};
use crate::nms::NmsConfig;
use crate::pld::{run_video, train_pld, Ablation, FrameOutput, PldConfig, PldModel, PldUnit};
use crate::synth::{clip_records, generate_split, Profile, SynthClip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub profile: Profile,
    pub train_clips: usize,
    pub test_clips: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { profile: Profile::Occluded, train_clips: 200, test_clips: 40 }
    }
}

/// Every tunable of a run. Unknown keys are rejected when parsing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub ild: IldConfig,
    pub ild_train: TrainConfig,
    pub pld: PldConfig,
    pub pld_train: TrainConfig,
    pub nms: NmsConfig,
    pub completion: CompletionConfig,
    /// Metric stripe width, input pixels.
    pub stripe_width: f64,
    /// Ablated predictive variants trained next to the full model.
    pub ablations: Vec<Ablation>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataConfig::default(),
            ild: IldConfig::default(),
            ild_train: TrainConfig {
                steps: 3000,
                lr: 2e-3,
                optimizer: crate::ild::Optimizer::Adam,
                clip: 5.0,
                ..TrainConfig::default()
            },
            pld: PldConfig::default(),
            pld_train: TrainConfig {
                steps: 1500,
                lr: 2e-3,
                optimizer: crate::ild::Optimizer::Adam,
                clip: 5.0,
                ..TrainConfig::default()
            },
            nms: NmsConfig::default(),
            completion: CompletionConfig::default(),
            stripe_width: STRIPE_WIDTH,
            ablations: vec![Ablation::NoWarp, Ablation::NoReuse],
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.ild.validate()?;
        self.pld.validate()?;
        self.nms.validate()?;
        if !(self.stripe_width > 0.0) {
            return Err(Error::Config("stripe_width must be positive".into()));
        }
        Ok(())
    }

    /// Independent seed for a named stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let tag = stage.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ tag);
        rng.gen()
    }

    pub fn train_config(&self, base: &TrainConfig, stage: &str) -> TrainConfig {
        TrainConfig { seed: self.stage_seed(stage), ..base.clone() }
    }
}

/// Every GT lane of every frame, for fitting the basis.
pub fn clip_lanes(clips: &[SynthClip]) -> Vec<LanePolyline> {
    clips.iter().flat_map(|c| c.gt.iter().flatten().map(|g| g.lane.clone())).collect()
}

pub fn fit_basis(clips: &[SynthClip], m: usize) -> Result<EigenlaneBasis> {
    let grid = clips.first().ok_or(Error::EmptyDataset)?.grid;
    build_basis(&clip_lanes(clips), m, &grid)
}

/// Working-grid targets of every frame of every clip.
pub fn clip_targets(clips: &[SynthClip], basis: &EigenlaneBasis, cfg: &IldConfig) -> Result<Vec<Vec<GtMaps>>> {
    clips
        .iter()
        .map(|c| {
            let (h, w) = (c.grid.height / DOWNSAMPLE, c.grid.width / DOWNSAMPLE);
            c.gt.iter()
                .map(|lanes| {
                    let ls: Vec<LanePolyline> = lanes.iter().map(|g| g.lane.clone()).collect();
                    make_gt_maps(&ls, basis, h, w, cfg.gt_width)
                })
                .collect()
        })
        .collect()
}

pub fn ild_samples<'a>(clips: &'a [SynthClip], targets: &'a [Vec<GtMaps>]) -> Vec<IldSample<'a>> {
    clips
        .iter()
        .zip(targets)
        .flat_map(|(c, t)| c.frames.iter().zip(t).map(|(image, gt)| IldSample { image, gt }))
        .collect()
}

/// Every window of three consecutive frames.
pub fn pld_units<'a>(clips: &'a [SynthClip], targets: &'a [Vec<GtMaps>]) -> Vec<PldUnit<'a>> {
    let mut out = Vec::new();
    for (c, t) in clips.iter().zip(targets) {
        for s in 0..c.frames.len().saturating_sub(2) {
            out.push(PldUnit {
                frames: [&c.frames[s], &c.frames[s + 1], &c.frames[s + 2]],
                gt: [&t[s], &t[s + 1], &t[s + 2]],
            });
        }
    }
    out
}

pub fn prediction_records(video: &str, outputs: &[FrameOutput], grid: &SampleGrid) -> Vec<AnnotationRecord> {
    outputs
        .iter()
        .enumerate()
        .map(|(frame, o)| AnnotationRecord {
            video: video.to_string(),
            frame,
            grid: *grid,
            lanes: o.detections.iter().map(|d| AnnotationLane::from_polyline(None, &d.lane, Some(d.score))).collect(),
        })
        .collect()
}

/// Run one method over every clip and score it.
pub fn evaluate_method(
    clips: &[SynthClip],
    ild: &IldModel,
    pld: Option<&PldModel>,
    basis: &EigenlaneBasis,
    nms: &NmsConfig,
    stripe_width: f64,
) -> Result<EvalReport> {
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for c in clips {
        let outs = run_video(&c.frames, ild, pld, basis, nms)?;
        gt.extend(clip_records(c));
        pred.extend(prediction_records(&c.name, &outs, &c.grid));
    }
    evaluate(&gt, &pred, stripe_width)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub report: EvalReport,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub methods: Vec<MethodReport>,
}

impl ExperimentReport {
    pub fn get(&self, method: &str) -> Option<&EvalReport> {
        self.methods.iter().find(|m| m.method == method).map(|m| &m.report)
    }

    pub fn table(&self) -> String {
        let mut s =
            format!("{:<12} {:>8} {:>8} {:>8} {:>8} {:>8}\n", "method", "f1_050", "f1_080", "miou", "rf_050", "rm_050");
        for m in &self.methods {
            let r = &m.report;
            s += &format!(
                "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                m.method, r.f1_050, r.f1_080, r.miou, r.rf_050, r.rm_050
            );
        }
        s
    }
}

fn tail_mean(trace: &[f64]) -> f64 {
    let n = (trace.len() / 10).max(1).min(trace.len());
    if n == 0 {
        return f64::NAN;
    }
    trace[trace.len() - n..].iter().sum::<f64>() / n as f64
}

/// The trained artifacts of an experiment.
pub struct Trained {
    pub basis: EigenlaneBasis,
    pub ild: IldModel,
    pub pld: Vec<(String, PldModel)>,
    pub losses: Vec<(String, f64)>,
}

/// Train the basis, the single-frame detector and every predictive variant on
/// the training split.
pub fn train_all(cfg: &RunConfig, train: &[SynthClip]) -> Result<Trained> {
    cfg.validate()?;
    let basis = fit_basis(train, cfg.ild.m)?;
    let targets = clip_targets(train, &basis, &cfg.ild)?;
    let mut losses = Vec::new();

    let mut ild = IldModel::new(&cfg.ild, cfg.stage_seed("ild-init"))?;
    let samples = ild_samples(train, &targets);
    log::info!("training single-frame detector on {} frames", samples.len());
    let trace = train_ild(&mut ild, &samples, &basis, &cfg.train_config(&cfg.ild_train, "ild-train"))?;
    losses.push(("ild".to_string(), tail_mean(&trace)));

    let units = pld_units(train, &targets);
    let mut variants: Vec<(String, Option<Ablation>)> = vec![("rvld".into(), None)];
    variants.extend(cfg.ablations.iter().map(|a| (a.to_string(), Some(*a))));
    let mut pld = Vec::new();
    for (name, ab) in variants {
        let pc = cfg.pld.clone().with_ablation(ab);
        let mut model = PldModel::new(&pc, cfg.ild.k, cfg.stage_seed("pld-init"))?;
        log::info!("training predictive detector {name} on {} units", units.len());
        let trace =
            train_pld(&mut model, &ild, &units, &basis, &cfg.nms, &cfg.train_config(&cfg.pld_train, "pld-train"))?;
        losses.push((name.clone(), tail_mean(&trace)));
        pld.push((name, model));
    }
    Ok(Trained { basis, ild, pld, losses })
}

/// A finished experiment with everything needed to rerun inference.
pub struct Experiment {
    pub report: ExperimentReport,
    pub trained: Trained,
    pub test: Vec<SynthClip>,
}

/// Synthesize both splits, train everything and score every method on the
/// test split.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentReport> {
    Ok(experiment(cfg)?.report)
}

pub fn experiment(cfg: &RunConfig) -> Result<Experiment> {
    let train = generate_split(cfg.data.profile, cfg.data.train_clips, cfg.stage_seed("train-data"))?;
    let test = generate_split(cfg.data.profile, cfg.data.test_clips, cfg.stage_seed("test-data"))?;
    let t = train_all(cfg, &train)?;
    drop(train);
    let loss = |name: &str| t.losses.iter().find(|(n, _)| n == name).map_or(f64::NAN, |(_, l)| *l);
    let mut methods = vec![MethodReport {
        method: "ild".into(),
        report: evaluate_method(&test, &t.ild, None, &t.basis, &cfg.nms, cfg.stripe_width)?,
        final_train_loss: loss("ild"),
    }];
    for (name, model) in &t.pld {
        methods.push(MethodReport {
            method: name.clone(),
            report: evaluate_method(&test, &t.ild, Some(model), &t.basis, &cfg.nms, cfg.stripe_width)?,
            final_train_loss: loss(name),
        });
    }
    Ok(Experiment { report: ExperimentReport { methods }, trained: t, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap(), cfg);
        let partial =
            RunConfig::from_toml_str("seed = 3\nablations = [\"no_guidance\"]\n[nms]\nmax_lanes = 4\n").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.ablations, vec![Ablation::NoGuidance]);
        assert_eq!(partial.nms.max_lanes, 4);
        assert_eq!(partial.ild, IldConfig::default());
    }

    #[test]
    fn unknown_and_invalid_keys_are_rejected() {
        for text in
            ["learning_rate = 0.1", "[ild]\nkk = 3", "[pld]\nradius = 2\nwarp = false", "[data]\nprofile = \"foggy\""]
        {
            assert!(matches!(RunConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
        assert!(RunConfig::from_toml_str("stripe_width = 0.0").is_err());
        assert!(RunConfig::from_toml_str("[nms]\nprob_threshold = 1.5").is_err());
    }

    #[test]
    fn stage_seeds_differ_by_stage_and_seed() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 8, ..RunConfig::default() };
        let stages = ["train-data", "test-data", "ild-init", "ild-train", "pld-init", "pld-train"];
        let seeds: std::collections::HashSet<u64> = stages.iter().map(|s| a.stage_seed(s)).collect();
        assert_eq!(seeds.len(), stages.len());
        assert_eq!(a.stage_seed("ild-train"), RunConfig::default().stage_seed("ild-train"));
        assert_ne!(a.stage_seed("ild-train"), b.stage_seed("ild-train"));
    }

    #[test]
    fn units_cover_every_three_frame_window() {
        let clips = generate_split(Profile::Easy, 2, 1).unwrap();
        let basis = fit_basis(&clips, 4).unwrap();
        let targets = clip_targets(&clips, &basis, &IldConfig::default()).unwrap();
        assert_eq!(ild_samples(&clips, &targets).len(), 18);
        let units = pld_units(&clips, &targets);
        assert_eq!(units.len(), 14);
        assert!(std::ptr::eq(units[8].frames[0], &clips[1].frames[1]));
    }
}
