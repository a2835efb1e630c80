//! Single-frame lane detector: a small convolutional encoder, the probability
//! head `f1`, the coefficient head `f2` fed with the probability map and a
//! fixed positional bias, plus the training losses.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{cosine_lr, focal_term, liou_terms, Adam, Graph, LiouSample, Sgd, Tensor, Var};
use crate::eigenlane::EigenlaneBasis;
use crate::error::{shape_err, Error, Result};
use crate::geometry::{rasterize_stripe, LanePolyline};
use crate::io::Checkpoint;
use crate::nms::map_grid;
use crate::nn::{run_stack, Act, Conv, ParamSet};

/// Spatial reduction between the input frame and the working grid.
pub const DOWNSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IldConfig {
    /// Feature channels of the encoder output.
    pub k: usize,
    /// Eigenlane dimension.
    pub m: usize,
    pub enc_channels: [usize; 2],
    pub head_hidden: usize,
    /// Number of hidden 3×3 layers in `f2`.
    pub f2_depth: usize,
    /// Multiplier applied to the raw `f2` output.
    pub coeff_scale: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// LIoU half-width in working-grid pixels.
    pub liou_half_width: f64,
    /// GT stripe width in working-grid pixels.
    pub gt_width: f64,
    pub reg_weight: f64,
}

impl Default for IldConfig {
    fn default() -> Self {
        Self {
            k: 32,
            m: 4,
            enc_channels: [16, 32],
            head_hidden: 16,
            f2_depth: 4,
            coeff_scale: 160.0,
            alpha: 0.25,
            gamma: 2.0,
            liou_half_width: 2.0,
            gt_width: 3.0,
            reg_weight: 1.0,
        }
    }
}

impl IldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 || self.head_hidden == 0 || self.enc_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.liou_half_width > 0.0 && self.gt_width >= 1.0 && self.coeff_scale > 0.0) {
            return Err(Error::Config("liou_half_width, gt_width and coeff_scale must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.gamma >= 0.0 && self.reg_weight >= 0.0) {
            return Err(Error::Config("invalid focal/regression weights".into()));
        }
        Ok(())
    }
}

/// Optimizer settings shared by both training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Samples whose gradients are averaged per step.
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 1,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 0.0,
            clip: 0.0,
            optimizer: Optimizer::Sgd,
            seed: 0,
        }
    }
}

/// Momentum SGD or Adam behind one interface, with cosine decay and clipping.
pub(crate) struct Stepper {
    cfg: TrainConfig,
    sgd: Sgd,
    adam: Adam,
    step: usize,
}

impl Stepper {
    pub(crate) fn new(cfg: &TrainConfig) -> Self {
        Self { cfg: cfg.clone(), sgd: Sgd::new(cfg.momentum, cfg.weight_decay), adam: Adam::default(), step: 0 }
    }

    pub(crate) fn apply(&mut self, params: &mut ParamSet, mut grads: Vec<Vec<f64>>) {
        if self.cfg.clip > 0.0 {
            let norm = ParamSet::grad_norm(&grads);
            if norm > self.cfg.clip {
                let s = self.cfg.clip / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let lr = cosine_lr(self.cfg.lr, self.step, self.cfg.steps);
        match self.cfg.optimizer {
            Optimizer::Sgd => self.sgd.step(params.tensors_mut(), &grads, lr),
            Optimizer::Adam => self.adam.step(params.tensors_mut(), &grads, lr),
        }
        self.step += 1;
    }
}

/// Four fixed channels: normalized x, normalized y, `sin 2πx`, `sin 2πy`.
pub fn positional_bias(h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0; 4 * h * w];
    let nx = |x: usize| if w > 1 { x as f64 / (w - 1) as f64 } else { 0.0 };
    let ny = |y: usize| if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            data[p] = nx(x);
            data[h * w + p] = ny(y);
            data[2 * h * w + p] = (TAU * nx(x)).sin();
            data[3 * h * w + p] = (TAU * ny(y)).sin();
        }
    }
    Tensor::new(&[4, h, w], data).expect("shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct IldModel {
    pub cfg: IldConfig,
    pub params: ParamSet,
    encoder: Vec<Conv>,
    f1: Vec<Conv>,
    f2: Vec<Conv>,
}

impl IldModel {
    pub fn new(cfg: &IldConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let [c1, c2] = cfg.enc_channels;
        let r = &mut rng;
        let encoder = vec![
            Conv::new(&mut ps, r, "enc.0", 3, c1, 3, 2, Act::Silu, 1.0, 0.0),
            Conv::new(&mut ps, r, "enc.1", c1, c1, 3, 1, Act::Silu, 1.0, 0.0),
            Conv::new(&mut ps, r, "enc.2", c1, c2, 3, 2, Act::Silu, 1.0, 0.0),
            Conv::new(&mut ps, r, "enc.3", c2, c2, 3, 1, Act::Silu, 1.0, 0.0),
            Conv::new(&mut ps, r, "enc.4", c2, c2, 3, 1, Act::Silu, 1.0, 0.0),
            Conv::new(&mut ps, r, "enc.5", c2, cfg.k, 3, 1, Act::None, 1.0, 0.0),
        ];
        let hd = cfg.head_hidden;
        let f1 = vec![
            Conv::new(&mut ps, r, "f1.0", cfg.k, hd, 3, 1, Act::Silu, 1.0, 0.0),
            Conv::new(&mut ps, r, "f1.1", hd, 1, 1, 1, Act::None, 0.5, -2.0),
        ];
        let mut f2 = vec![Conv::new(&mut ps, r, "f2.0", 5, hd, 3, 1, Act::Silu, 1.0, 0.0)];
        for i in 1..cfg.f2_depth.max(1) {
            f2.push(Conv::new(&mut ps, r, &format!("f2.{i}"), hd, hd, 3, 1, Act::Silu, 1.0, 0.0));
        }
        let last = cfg.f2_depth.max(1);
        f2.push(Conv::new(&mut ps, r, &format!("f2.{last}"), hd, cfg.m, 1, 1, Act::None, 0.5, 0.0));
        Ok(Self { cfg: cfg.clone(), params: ps, encoder, f1, f2 })
    }

    /// Feature map `X` (`K × H/4 × W/4`) of a `3 × H × W` image.
    pub fn encode_graph(&self, g: &mut Graph, vars: &[Var], image: Var) -> Result<Var> {
        let (c, h, w) = g.value(image).chw()?;
        if c != 3 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return shape_err(format!(
                "expected a 3-channel image with sides divisible by 4, got {:?}",
                g.shape(image)
            ));
        }
        run_stack(&self.encoder, g, vars, image)
    }

    /// `P = σ(f1(X))`, `C = f2([P, B])`.
    pub fn decode_graph(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<(Var, Var)> {
        let (k, h, w) = g.value(x).chw()?;
        if k != self.cfg.k {
            return shape_err(format!("decoder expects {} channels, got {k}", self.cfg.k));
        }
        let logits = run_stack(&self.f1, g, vars, x)?;
        let p = g.sigmoid(logits);
        let bias = g.constant(positional_bias(h, w));
        let input = g.concat_channels(&[p, bias])?;
        let raw = run_stack(&self.f2, g, vars, input)?;
        let c = g.scale(raw, self.cfg.coeff_scale);
        Ok((p, c))
    }

    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let img = g.constant(image.clone());
        let x = self.encode_graph(&mut g, &vars, img)?;
        Ok(g.value(x).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({ "kind": "ild", "config": self.cfg });
        Ok(Checkpoint { meta: meta.to_string(), tensors: self.params.to_named() })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: IldConfig = checkpoint_config(ck, "ild")?;
        let mut model = Self::new(&cfg, 0)?;
        model.params.load_from(&ck.tensors)?;
        Ok(model)
    }

    pub fn decode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (p, c) = self.decode_graph(&mut g, &vars, xv)?;
        Ok((g.value(p).clone(), g.value(c).clone()))
    }
}

/// Model configuration stored in a checkpoint of the given kind.
pub(crate) fn checkpoint_config<T: serde::de::DeserializeOwned>(ck: &Checkpoint, kind: &str) -> Result<T> {
    let meta: serde_json::Value =
        serde_json::from_str(&ck.meta).map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
    if meta["kind"] != kind {
        return Err(Error::Config(format!("expected a {kind} checkpoint, found {}", meta["kind"])));
    }
    serde_json::from_value(meta["config"].clone()).map_err(|e| Error::Config(format!("checkpoint config: {e}")))
}

/// Training targets on the working grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GtMaps {
    /// `1 × H × W` binary lane raster.
    pub prob: Tensor,
    /// `M × H × W`, coefficients of the owning lane at foreground pixels.
    pub coeff: Tensor,
    /// Owning lane index per pixel.
    pub owner: Vec<Option<usize>>,
    /// The GT lanes, in basis coordinates.
    pub lanes: Vec<LanePolyline>,
}

impl GtMaps {
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.owner.iter().enumerate().filter_map(|(i, o)| o.map(|l| (i, l)))
    }

    pub fn foreground_count(&self) -> usize {
        self.owner.iter().filter(|o| o.is_some()).count()
    }
}

/// Rasterize GT lanes `gt_width` map pixels wide; overlapping pixels belong to
/// the lane whose center is nearer (lower index on ties).
pub fn make_gt_maps(
    lanes: &[LanePolyline],
    basis: &EigenlaneBasis,
    h: usize,
    w: usize,
    gt_width: f64,
) -> Result<GtMaps> {
    let (grid, factor) = map_grid(basis, h, w)?;
    let m = basis.dim();
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    let mut best = vec![f64::INFINITY; h * w];
    let mut coeffs = Vec::with_capacity(lanes.len());
    for (li, lane) in lanes.iter().enumerate() {
        let c = basis.encode(lane).map_err(|e| Error::InvalidLane(format!("GT lane {li}: {e}")))?;
        coeffs.push(c);
        let small = lane.downscaled(factor);
        let stripe = rasterize_stripe(&small, gt_width, &grid)?;
        for row in 0..h {
            let Some(x) = small.x_at(row as f64, &grid) else { continue };
            for col in 0..w {
                let i = row * w + col;
                if !stripe.bits[i] {
                    continue;
                }
                let d = (col as f64 - x).abs();
                if d < best[i] {
                    best[i] = d;
                    owner[i] = Some(li);
                }
            }
        }
    }
    let mut prob = vec![0.0; h * w];
    let mut coeff = vec![0.0; m * h * w];
    for (i, o) in owner.iter().enumerate() {
        if let Some(l) = *o {
            prob[i] = 1.0;
            for k in 0..m {
                coeff[k * h * w + i] = coeffs[l].0[k];
            }
        }
    }
    Ok(GtMaps {
        prob: Tensor::new(&[1, h, w], prob)?,
        coeff: Tensor::new(&[m, h, w], coeff)?,
        owner,
        lanes: lanes.to_vec(),
    })
}

/// Mean over elements of `−α (1 − p_t)^γ ln p_t`.
pub fn focal_loss(p: &[f64], target: &[f64], alpha: f64, gamma: f64) -> Result<f64> {
    if p.len() != target.len() {
        return shape_err(format!("{} probabilities, {} targets", p.len(), target.len()));
    }
    let total: f64 = p.iter().zip(target).map(|(&p, &t)| focal_term(p, t, alpha, gamma).0).sum();
    Ok(total / p.len().max(1) as f64)
}

/// `1 − ΣI / ΣU` over rows, with signed per-row segment overlaps of
/// half-width `e`.
pub fn liou_loss(r: &LanePolyline, target: &LanePolyline, e: f64) -> Result<f64> {
    if !r.is_complete() || !target.is_complete() {
        return Err(Error::IncompleteLane("LIoU needs fully valid lanes".into()));
    }
    if r.len() != target.len() {
        return Err(Error::InvalidLane("lanes have different lengths".into()));
    }
    if !(e > 0.0) {
        return Err(Error::Config("LIoU half-width must be positive".into()));
    }
    let (i, u) = liou_terms(&r.xs, &target.xs, e);
    Ok(1.0 - i / u)
}

/// Classification plus regression loss on the tape. Returns the scalar loss.
pub fn ild_loss_graph(
    g: &mut Graph,
    p: Var,
    c: Var,
    gt: &GtMaps,
    basis: &EigenlaneBasis,
    cfg: &IldConfig,
) -> Result<Var> {
    if g.shape(p) != gt.prob.shape() {
        return shape_err(format!("probability map {:?} vs GT {:?}", g.shape(p), gt.prob.shape()));
    }
    let (_, h, _) = gt.prob.chw()?;
    let factor = basis.grid().height / h;
    let cls = g.focal_loss(p, gt.prob.data(), cfg.alpha, cfg.gamma)?;
    if gt.foreground_count() == 0 || cfg.reg_weight == 0.0 {
        return Ok(cls);
    }
    let samples = gt.foreground().map(|(pixel, target)| LiouSample { pixel, target }).collect();
    let targets = gt.lanes.iter().map(|l| l.xs.clone()).collect();
    let e = cfg.liou_half_width * factor as f64;
    let reg = g.liou_map_loss(c, &basis.row_major(), samples, targets, e)?;
    let reg = g.scale(reg, cfg.reg_weight);
    g.add(cls, reg)
}

/// Value of [`ild_loss_graph`] on fixed maps.
pub fn ild_loss(p: &Tensor, c: &Tensor, gt: &GtMaps, basis: &EigenlaneBasis, cfg: &IldConfig) -> Result<f64> {
    let mut g = Graph::new();
    let pv = g.constant(p.clone());
    let cv = g.constant(c.clone());
    let l = ild_loss_graph(&mut g, pv, cv, gt, basis, cfg)?;
    Ok(g.value(l).data()[0])
}

/// One training frame.
#[derive(Clone, Copy, Debug)]
pub struct IldSample<'a> {
    pub image: &'a Tensor,
    pub gt: &'a GtMaps,
}

/// Seeded index stream cycling through shuffled epochs.
pub(crate) struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..n).collect(), pos: n }
    }

    pub(crate) fn next_index(&mut self) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Loss and parameter gradients for one frame.
pub fn ild_sample_grads(
    model: &IldModel,
    sample: &IldSample<'_>,
    basis: &EigenlaneBasis,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g, true);
    let img = g.constant(sample.image.clone());
    let x = model.encode_graph(&mut g, &vars, img)?;
    let (p, c) = model.decode_graph(&mut g, &vars, x)?;
    let loss = ild_loss_graph(&mut g, p, c, &sample.gt, basis, &model.cfg)?;
    g.backward(loss)?;
    Ok((g.value(loss).data()[0], ParamSet::grads(&g, &vars)))
}

/// Train in place; returns the per-step mean loss.
pub fn train_ild(
    model: &mut IldModel,
    data: &[IldSample<'_>],
    basis: &EigenlaneBasis,
    tc: &TrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if basis.dim() != model.cfg.m {
        return Err(Error::InvalidDimension(format!("basis has M={}, model M={}", basis.dim(), model.cfg.m)));
    }
    let mut sampler = Sampler::new(data.len(), tc.seed);
    let mut stepper = Stepper::new(tc);
    let batch = tc.batch.max(1);
    let mut trace = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut acc: Option<Vec<Vec<f64>>> = None;
        let mut loss = 0.0;
        for _ in 0..batch {
            let (l, gr) = ild_sample_grads(model, &data[sampler.next_index()], basis)?;
            loss += l;
            match &mut acc {
                None => acc = Some(gr),
                Some(a) => a.iter_mut().flatten().zip(gr.iter().flatten()).for_each(|(x, y)| *x += y),
            }
        }
        let mut grads = acc.expect("batch >= 1");
        grads.iter_mut().flatten().for_each(|v| *v /= batch as f64);
        stepper.apply(&mut model.params, grads);
        trace.push(loss / batch as f64);
        if step % 100 == 0 {
            log::debug!("ild step {step}: loss {:.5}", loss / batch as f64);
        }
    }
    Ok(trace)
}
