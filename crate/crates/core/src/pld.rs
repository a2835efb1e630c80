//! Predictive detector: warps the previous frame's refined features and lane
//! mask onto the current frame, lifts the mask to guidance features, refines
//! the current features and decodes them with the frozen single-frame heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::eigenlane::EigenlaneBasis;
use crate::error::{shape_err, Error, Result};
use crate::ild::{checkpoint_config, ild_loss_graph, GtMaps, IldModel, Sampler, Stepper, TrainConfig};
use crate::io::Checkpoint;
use crate::motion::{self, FIELD_DOWNSAMPLE};
use crate::nms::{lane_mask, map_grid, nms, Detection, NmsConfig};
use crate::nn::{run_stack, Act, Conv, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PldConfig {
    /// Correlation search radius `s`.
    pub radius: usize,
    pub motion_hidden: usize,
    /// Weight of the flow loss.
    pub flow_weight: f64,
    /// Skip motion estimation; the state is used unaligned.
    pub no_warp: bool,
    /// Replace the guidance features with zeros.
    pub no_guidance: bool,
    /// Carry the unrefined encoder features to the next frame.
    pub no_reuse: bool,
}

impl Default for PldConfig {
    fn default() -> Self {
        Self { radius: 3, motion_hidden: 16, flow_weight: 1.0, no_warp: false, no_guidance: false, no_reuse: false }
    }
}

/// Named ablation of the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoWarp,
    NoGuidance,
    NoReuse,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_warp" | "no-warp" => Ok(Self::NoWarp),
            "no_guidance" | "no-guidance" => Ok(Self::NoGuidance),
            "no_reuse" | "no-reuse" => Ok(Self::NoReuse),
            _ => Err(Error::Config(format!("unknown ablation {s:?}; expected no_warp, no_guidance or no_reuse"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::NoWarp => "no_warp",
            Self::NoGuidance => "no_guidance",
            Self::NoReuse => "no_reuse",
        })
    }
}

impl PldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius == 0 || self.motion_hidden == 0 {
            return Err(Error::Config("radius and motion_hidden must be positive".into()));
        }
        if !(self.flow_weight >= 0.0) {
            return Err(Error::Config("flow_weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_ablation(mut self, a: Option<Ablation>) -> Self {
        match a {
            Some(Ablation::NoWarp) => self.no_warp = true,
            Some(Ablation::NoGuidance) => self.no_guidance = true,
            Some(Ablation::NoReuse) => self.no_reuse = true,
            None => {}
        }
        self
    }

    pub fn ablation(&self) -> Option<Ablation> {
        match (self.no_warp, self.no_guidance, self.no_reuse) {
            (true, _, _) => Some(Ablation::NoWarp),
            (_, true, _) => Some(Ablation::NoGuidance),
            (_, _, true) => Some(Ablation::NoReuse),
            _ => None,
        }
    }
}

/// What one frame hands to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameState {
    pub features: Tensor,
    pub lane_mask: Tensor,
}

impl FrameState {
    pub fn new(features: Tensor, lane_mask: Tensor) -> Result<Self> {
        let (_, h, w) = features.chw()?;
        if lane_mask.shape() != [1, h, w] {
            return shape_err(format!("mask {:?} does not match features {:?}", lane_mask.shape(), features.shape()));
        }
        if lane_mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return shape_err("lane mask must be binary");
        }
        Ok(Self { features, lane_mask })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: r#"{"kind":"frame_state"}"#.into(),
            tensors: vec![("features".into(), self.features.clone()), ("lane_mask".into(), self.lane_mask.clone())],
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let find = |name: &str| {
            ck.tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Config(format!("frame state lacks {name}")))
        };
        Self::new(find("features")?, find("lane_mask")?)
    }
}

/// Detections and maps of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    pub detections: Vec<Detection>,
    pub prob: Tensor,
    pub coeff: Tensor,
    /// Working-grid motion field toward the previous frame, when estimated.
    pub flow: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PldModel {
    pub cfg: PldConfig,
    pub k: usize,
    pub params: ParamSet,
    motion: Vec<Conv>,
    g: Vec<Conv>,
    h: Vec<Conv>,
}

/// Tape handles of one recursive step.
pub struct StepVars {
    pub features: Var,
    pub prob: Var,
    pub coeff: Var,
    pub flow: Option<Var>,
}

impl PldModel {
    pub fn new(cfg: &PldConfig, k: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if k < 2 {
            return Err(Error::Config("feature channels must be at least 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut ps = ParamSet::new();
        let d = 2 * cfg.radius + 1;
        let mh = cfg.motion_hidden;
        let motion = vec![
            Conv::new(&mut ps, r, "motion.0", d * d + k, mh, 3, 2, Act::Silu, 1.0, 0.0),
            Conv::new(&mut ps, r, "motion.1", mh, mh, 3, 2, Act::Silu, 1.0, 0.0),
            Conv::new(&mut ps, r, "motion.2", mh, 2, 1, 1, Act::None, 0.1, 0.0),
        ];
        let g = vec![
            Conv::new(&mut ps, r, "g.0", 1, k / 2, 3, 1, Act::Silu, 1.0, 0.0),
            Conv::new(&mut ps, r, "g.1", k / 2, k, 3, 1, Act::None, 1.0, 0.0),
        ];
        let h = vec![
            Conv::new(&mut ps, r, "h.0", 3 * k, k, 3, 1, Act::Silu, 1.0, 0.0),
            Conv::new(&mut ps, r, "h.1", k, k, 3, 1, Act::None, 1.0, 0.0),
        ];
        Ok(Self { cfg: cfg.clone(), k, params: ps, motion, g, h })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({ "kind": "pld", "k": self.k, "config": self.cfg });
        Ok(Checkpoint { meta: meta.to_string(), tensors: self.params.to_named() })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: PldConfig = checkpoint_config(ck, "pld")?;
        let meta: serde_json::Value = serde_json::from_str(&ck.meta).map_err(|e| Error::Config(e.to_string()))?;
        let k = meta["k"].as_u64().ok_or_else(|| Error::Config("pld checkpoint lacks k".into()))? as usize;
        let mut model = Self::new(&cfg, k, 0)?;
        model.params.load_from(&ck.tensors)?;
        Ok(model)
    }

    fn check_k(&self, g: &Graph, v: Var, what: &str) -> Result<(usize, usize)> {
        let (c, h, w) = g.value(v).chw()?;
        if c != self.k {
            return shape_err(format!("{what} has {c} channels, expected {}", self.k));
        }
        Ok((h, w))
    }

    /// `G = g(L_warp)`.
    pub fn guidance_graph(&self, g: &mut Graph, vars: &[Var], warped_mask: Var) -> Result<Var> {
        if g.value(warped_mask).chw()?.0 != 1 {
            return shape_err(format!("guidance expects a 1-channel mask, got {:?}", g.shape(warped_mask)));
        }
        run_stack(&self.g, g, vars, warped_mask)
    }

    /// `X = h([G, X_warp, X̃])`.
    pub fn refine_graph(&self, g: &mut Graph, vars: &[Var], guide: Var, warped: Var, current: Var) -> Result<Var> {
        let a = self.check_k(g, guide, "guidance")?;
        let b = self.check_k(g, warped, "warped features")?;
        let c = self.check_k(g, current, "current features")?;
        if a != b || b != c {
            return shape_err("refinement inputs differ in size");
        }
        let input = g.concat_channels(&[guide, warped, current])?;
        run_stack(&self.h, g, vars, input)
    }

    /// Working-grid motion field from the current to the previous frame.
    pub fn motion_graph(&self, g: &mut Graph, vars: &[Var], current: Var, previous: Var) -> Result<Var> {
        let (h, w) = self.check_k(g, current, "current features")?;
        if self.check_k(g, previous, "state features")? != (h, w) {
            return shape_err("state and frame grids differ");
        }
        if h % FIELD_DOWNSAMPLE != 0 || w % FIELD_DOWNSAMPLE != 0 {
            return shape_err(format!("feature grid {h}x{w} is not divisible by {FIELD_DOWNSAMPLE}"));
        }
        let raw = motion::correlate(g, current, previous, self.cfg.radius)?;
        let vol = motion::normalize_volume(g, raw)?;
        let down = motion::motion_head(g, &self.motion, vars, vol, current)?;
        motion::upsample_field(g, down, h, w)
    }

    /// Everything between the state and the decoded maps of one frame.
    pub fn step_graph(
        &self,
        g: &mut Graph,
        vars: &[Var],
        ild: &IldModel,
        ild_vars: &[Var],
        state_features: Var,
        state_mask: Var,
        current: Var,
    ) -> Result<StepVars> {
        let (h, w) = self.check_k(g, current, "current features")?;
        if self.check_k(g, state_features, "state features")? != (h, w) || g.shape(state_mask) != [1, h, w] {
            return shape_err("state and frame grids differ");
        }
        let (warped, warped_mask, flow) = if self.cfg.no_warp {
            (state_features, state_mask, None)
        } else {
            let f = self.motion_graph(g, vars, current, state_features)?;
            (motion::backward_warp(g, state_features, f)?, motion::backward_warp(g, state_mask, f)?, Some(f))
        };
        let guide = if self.cfg.no_guidance {
            g.constant(Tensor::zeros(&[self.k, h, w]))
        } else {
            self.guidance_graph(g, vars, warped_mask)?
        };
        let features = self.refine_graph(g, vars, guide, warped, current)?;
        let (prob, coeff) = ild.decode_graph(g, ild_vars, features)?;
        Ok(StepVars { features, prob, coeff, flow })
    }

    pub fn guidance(&self, warped_mask: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let m = g.constant(warped_mask.clone());
        let out = self.guidance_graph(&mut g, &vars, m)?;
        Ok(g.value(out).clone())
    }

    pub fn refine(&self, guide: &Tensor, warped: &Tensor, current: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let (a, b, c) = (g.constant(guide.clone()), g.constant(warped.clone()), g.constant(current.clone()));
        let out = self.refine_graph(&mut g, &vars, a, b, c)?;
        Ok(g.value(out).clone())
    }
}

fn detections_and_mask(
    p: &Tensor,
    c: &Tensor,
    basis: &EigenlaneBasis,
    cfg: &NmsConfig,
) -> Result<(Vec<Detection>, Tensor)> {
    let dets = nms(p, c, basis, cfg)?;
    let (_, h, w) = p.chw()?;
    let (grid, factor) = map_grid(basis, h, w)?;
    let mask = lane_mask(&dets, &grid, factor, cfg.mask_halfwidth)?;
    Ok((dets, mask))
}

/// First frame of a video: single-frame detection seeds the state.
pub fn ild_step(
    frame: &Tensor,
    ild: &IldModel,
    basis: &EigenlaneBasis,
    cfg: &NmsConfig,
) -> Result<(FrameOutput, FrameState)> {
    let x = ild.encode(frame)?;
    let (prob, coeff) = ild.decode(&x)?;
    let (detections, mask) = detections_and_mask(&prob, &coeff, basis, cfg)?;
    Ok((FrameOutput { detections, prob, coeff, flow: None }, FrameState { features: x, lane_mask: mask }))
}

pub fn pld_step(
    state: &FrameState,
    frame: &Tensor,
    ild: &IldModel,
    pld: &PldModel,
    basis: &EigenlaneBasis,
    cfg: &NmsConfig,
) -> Result<(FrameOutput, FrameState)> {
    let current = ild.encode(frame)?;
    if current.shape() != state.features.shape() {
        return shape_err(format!("frame features {:?} vs state {:?}", current.shape(), state.features.shape()));
    }
    let mut g = Graph::new();
    let vars = pld.params.bind(&mut g, false);
    let ild_vars = ild.params.bind(&mut g, false);
    let sx = g.constant(state.features.clone());
    let sm = g.constant(state.lane_mask.clone());
    let cur = g.constant(current.clone());
    let sv = pld.step_graph(&mut g, &vars, ild, &ild_vars, sx, sm, cur)?;
    let prob = g.value(sv.prob).clone();
    let coeff = g.value(sv.coeff).clone();
    let flow = sv.flow.map(|f| g.value(f).clone());
    let (detections, mask) = detections_and_mask(&prob, &coeff, basis, cfg)?;
    let features = if pld.cfg.no_reuse { current } else { g.value(sv.features).clone() };
    Ok((FrameOutput { detections, prob, coeff, flow }, FrameState { features, lane_mask: mask }))
}

/// Per-frame outputs of a whole video; without a predictive model every frame
/// is detected independently.
pub fn run_video(
    frames: &[Tensor],
    ild: &IldModel,
    pld: Option<&PldModel>,
    basis: &EigenlaneBasis,
    cfg: &NmsConfig,
) -> Result<Vec<FrameOutput>> {
    let Some((first, rest)) = frames.split_first() else {
        return Err(Error::EmptyVideo);
    };
    let (out, state) = ild_step(first, ild, basis, cfg)?;
    let mut outs = vec![out];
    match pld {
        None => {
            for f in rest {
                outs.push(ild_step(f, ild, basis, cfg)?.0);
            }
        }
        Some(pld) => outs.extend(resume_video(state, rest, ild, pld, basis, cfg)?.0),
    }
    Ok(outs)
}

/// Continue a video from a saved state; returns the outputs and the final
/// state.
pub fn resume_video(
    mut state: FrameState,
    frames: &[Tensor],
    ild: &IldModel,
    pld: &PldModel,
    basis: &EigenlaneBasis,
    cfg: &NmsConfig,
) -> Result<(Vec<FrameOutput>, FrameState)> {
    let mut outs = Vec::with_capacity(frames.len());
    for f in frames {
        let (o, s) = pld_step(&state, f, ild, pld, basis, cfg)?;
        outs.push(o);
        state = s;
    }
    Ok((outs, state))
}

/// Three consecutive frames with their targets.
#[derive(Clone, Copy, Debug)]
pub struct PldUnit<'a> {
    pub frames: [&'a Tensor; 3],
    pub gt: [&'a GtMaps; 3],
}

/// Loss and gradients of one unit. The first frame goes through the frozen
/// single-frame detector; the other two are predicted recursively and scored.
pub fn pld_unit_grads(
    pld: &PldModel,
    ild: &IldModel,
    unit: &PldUnit<'_>,
    basis: &EigenlaneBasis,
    cfg: &NmsConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let encoded = unit.frames.iter().map(|f| ild.encode(f)).collect::<Result<Vec<_>>>()?;
    let (p0, c0) = ild.decode(&encoded[0])?;
    let (_, mask0) = detections_and_mask(&p0, &c0, basis, cfg)?;

    let mut g = Graph::new();
    let vars = pld.params.bind(&mut g, true);
    let ild_vars = ild.params.bind(&mut g, false);
    let mut state_x = g.constant(encoded[0].clone());
    let mut state_m = g.constant(mask0);
    let mut total: Option<Var> = None;
    for t in 1..3 {
        let cur = g.constant(encoded[t].clone());
        let sv = pld.step_graph(&mut g, &vars, ild, &ild_vars, state_x, state_m, cur)?;
        let mut loss = ild_loss_graph(&mut g, sv.prob, sv.coeff, &unit.gt[t], basis, &ild.cfg)?;
        if let Some(f) = sv.flow {
            if pld.cfg.flow_weight > 0.0 {
                let fl = motion::flow_loss(&mut g, &unit.gt[t - 1].prob, &unit.gt[t].prob, f)?;
                let fl = g.scale(fl, pld.cfg.flow_weight);
                loss = g.add(loss, fl)?;
            }
        }
        total = Some(match total {
            None => loss,
            Some(acc) => g.add(acc, loss)?,
        });
        if t < 2 {
            let (p, c) = (g.value(sv.prob).clone(), g.value(sv.coeff).clone());
            let (_, m) = detections_and_mask(&p, &c, basis, cfg)?;
            state_m = g.constant(m);
            state_x = if pld.cfg.no_reuse { cur } else { sv.features };
        }
    }
    let total = total.expect("two scored frames");
    g.backward(total)?;
    Ok((g.value(total).data()[0], ParamSet::grads(&g, &vars)))
}

/// Train the predictive modules in place with the single-frame model frozen.
pub fn train_pld(
    pld: &mut PldModel,
    ild: &IldModel,
    units: &[PldUnit<'_>],
    basis: &EigenlaneBasis,
    cfg: &NmsConfig,
    tc: &TrainConfig,
) -> Result<Vec<f64>> {
    if units.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if pld.k != ild.cfg.k {
        return Err(Error::InvalidDimension(format!("PLD K={} vs ILD K={}", pld.k, ild.cfg.k)));
    }
    let mut sampler = Sampler::new(units.len(), tc.seed);
    let mut stepper = Stepper::new(tc);
    let batch = tc.batch.max(1);
    let mut trace = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut acc: Option<Vec<Vec<f64>>> = None;
        let mut loss = 0.0;
        for _ in 0..batch {
            let (l, gr) = pld_unit_grads(pld, ild, &units[sampler.next_index()], basis, cfg)?;
            loss += l;
            match &mut acc {
                None => acc = Some(gr),
                Some(a) => a.iter_mut().flatten().zip(gr.iter().flatten()).for_each(|(x, y)| *x += y),
            }
        }
        let mut grads = acc.expect("batch >= 1");
        grads.iter_mut().flatten().for_each(|v| *v /= batch as f64);
        stepper.apply(&mut pld.params, grads);
        trace.push(loss / batch as f64);
        if step % 100 == 0 {
            log::debug!("pld step {step}: loss {:.5}", loss / batch as f64);
        }
    }
    Ok(trace)
}
