//! Seeded synthetic road videos with exact lane geometry, persistent track ids,
//! ego-motion and vehicle-like occluders.
//!
//! Lanes follow `x(y') = a + b·y' + c·y'²` with `y' = y / (H − 1)`. Ego motion
//! shifts every lane by `yaw(t) + lat(t)·y'`, which keeps the family closed.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{LanePolyline, SampleGrid, StripeMask};
use crate::io::{
    frame_path, group_by_video, load_frame, parse_annotations, save_png, tensor_to_rgb, write_annotations,
    write_atomic, AnnotationLane, AnnotationRecord,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Easy,
    Occluded,
    Night,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Profile::Easy),
            "occluded" => Ok(Profile::Occluded),
            "night" => Ok(Profile::Night),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Easy => "easy",
            Profile::Occluded => "occluded",
            Profile::Night => "night",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub lanes: [usize; 2],
    /// Bound on the lateral bend of the road at the top row, pixels.
    pub curvature: f64,
    pub top_spacing: [f64; 2],
    pub bottom_spacing: [f64; 2],
    pub center_offset: f64,
    /// Amplitudes of the uniform (yaw) and row-proportional (lateral) shifts.
    pub yaw_amplitude: f64,
    pub lateral_amplitude: f64,
    /// Angular speeds of the two oscillations, radians per frame.
    pub yaw_rate: f64,
    pub lateral_rate: f64,
    /// Occlusion events per clip, each over one of the two outermost lanes.
    pub occluders: [usize; 2],
    /// Fraction of the image height covered by one vehicle.
    pub occlusion_fraction: [f64; 2],
    pub occlusion_frames: [usize; 2],
    pub occlusion_start: usize,
    pub occluder_opacity: f64,
    /// Lateral offset bound of an occluder from its lane, as a fraction of
    /// the vehicle half-width.
    pub occluder_jitter: f64,
    /// Vehicles driving just outside the outermost markings, per clip.
    pub distractors: [usize; 2],
    /// Relative spread of the gaps between adjacent markings.
    pub gap_jitter: f64,
    pub dashed_probability: f64,
    pub marking_brightness: [f64; 2],
    /// Marking width at the top and bottom rows.
    pub marking_width: [f64; 2],
    pub road_brightness: f64,
    pub texture: f64,
    pub noise: f64,
    pub dash_speed: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 160,
            height: 64,
            frames: 9,
            lanes: [3, 4],
            curvature: 14.0,
            top_spacing: [12.0, 20.0],
            bottom_spacing: [50.0, 55.0],
            center_offset: 10.0,
            yaw_amplitude: 8.0,
            lateral_amplitude: 22.0,
            yaw_rate: 0.6,
            lateral_rate: 0.45,
            occluders: [0, 0],
            occlusion_fraction: [0.6, 1.0],
            occlusion_frames: [2, 4],
            occlusion_start: 1,
            occluder_opacity: 1.0,
            occluder_jitter: 0.4,
            distractors: [0, 0],
            gap_jitter: 0.0,
            dashed_probability: 0.5,
            marking_brightness: [0.75, 0.95],
            marking_width: [1.2, 3.4],
            road_brightness: 0.25,
            texture: 0.05,
            noise: 0.02,
            dash_speed: 0.3,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn profile(p: Profile) -> Self {
        let base = Self::default();
        match p {
            Profile::Easy => base,
            Profile::Occluded => Self {
                occluders: [2, 3],
                occlusion_fraction: [1.0, 1.0],
                distractors: [4, 6],
                gap_jitter: 0.25,
                ..base
            },
            Profile::Night => Self { marking_brightness: [0.3, 0.45], road_brightness: 0.08, noise: 0.04, ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.width < 8 || self.height < 8 || self.frames == 0 {
            return bad("frame size and clip length must be positive");
        }
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if self.lanes[0] == 0 || self.lanes[0] > self.lanes[1] {
            return bad("lane count range must be ordered and positive");
        }
        if !ordered(self.top_spacing) || !ordered(self.bottom_spacing) || self.top_spacing[0] <= 0.0 {
            return bad("spacing ranges must be ordered and positive");
        }
        if !ordered(self.occlusion_fraction) || self.occlusion_fraction[0] < 0.0 || self.occlusion_fraction[1] > 1.0 {
            return bad("occlusion_fraction must be an ordered range inside [0, 1]");
        }
        if self.occluders[0] > self.occluders[1]
            || self.occlusion_frames[0] > self.occlusion_frames[1]
            || self.distractors[0] > self.distractors[1]
        {
            return bad("occluder ranges must be ordered");
        }
        if self.occluders[1] > 0 && self.occlusion_frames[0] == 0 {
            return bad("occlusions must last at least one frame");
        }
        if !ordered(self.marking_brightness) || !ordered(self.marking_width) || self.marking_width[0] <= 0.0 {
            return bad("marking ranges must be ordered and positive");
        }
        if !(0.0..=1.0).contains(&self.dashed_probability)
            || !(0.0..=1.0).contains(&self.occluder_opacity)
            || !(0.0..=1.0).contains(&self.occluder_jitter)
            || !(0.0..1.0).contains(&self.gap_jitter)
        {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.curvature < 0.0 || self.noise < 0.0 || self.texture < 0.0 {
            return bad("curvature, noise and texture must be non-negative");
        }
        Ok(())
    }

    /// The sampling grid used for annotations of these frames.
    pub fn grid(&self, n: usize) -> SampleGrid {
        let margin = 1.5 * self.height as f64 / 64.0;
        SampleGrid {
            n,
            y_top: margin,
            y_bottom: self.height as f64 - 1.0 - margin,
            height: self.height,
            width: self.width,
        }
    }
}

/// Default annotation grid for 160×64 frames: 16 rows from 1.5 to 61.5.
pub fn default_grid() -> SampleGrid {
    SampleGrid { n: 16, y_top: 1.5, y_bottom: 61.5, height: 64, width: 160 }
}

/// A lane visible in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct GtLane {
    pub track_id: u32,
    pub lane: LanePolyline,
}

/// One occlusion event.
#[derive(Clone, Debug, PartialEq)]
pub struct Occluder {
    pub lane: usize,
    pub start: usize,
    pub frames: usize,
    /// Covered image rows `[row0, row1)`.
    pub rows: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct SynthClip {
    pub name: String,
    /// `3 × H × W` images quantized to multiples of 1/255.
    pub frames: Vec<Tensor>,
    pub gt: Vec<Vec<GtLane>>,
    pub occlusion: Vec<StripeMask>,
    pub occluders: Vec<Occluder>,
    /// Per-frame `(yaw, lateral)` shift.
    pub shifts: Vec<(f64, f64)>,
    pub grid: SampleGrid,
}

impl SynthClip {
    /// Horizontal backward motion at image row `y` from frame `t` to `t − 1`,
    /// in full-resolution pixels.
    pub fn true_flow(&self, t: usize, y: f64) -> f64 {
        if t == 0 {
            return 0.0;
        }
        let yn = y / (self.grid.height - 1) as f64;
        let (a0, b0) = self.shifts[t - 1];
        let (a1, b1) = self.shifts[t];
        (a0 + b0 * yn) - (a1 + b1 * yn)
    }
}

struct Vehicle {
    /// Lateral position in lane-spacing units, like a marking offset.
    offset: f64,
    /// Shift from `offset` as a fraction of the vehicle half-width.
    jitter: f64,
    start: usize,
    frames: usize,
    rows: (usize, usize),
    color: [f64; 3],
}

fn vehicle_color(rng: &mut impl Rng) -> [f64; 3] {
    let v = rng.gen_range(0.02..0.18);
    [v + rng.gen_range(0.0..0.1), v, v + rng.gen_range(0.0..0.1)]
}

struct LaneSpec {
    offset: f64,
    dashed: bool,
    brightness: f64,
    yellow: bool,
    dash_phase: f64,
}

struct Scene {
    center: f64,
    bend: f64,
    top: f64,
    bottom: f64,
    lanes: Vec<LaneSpec>,
}

impl Scene {
    fn offset_x(&self, offset: f64, yn: f64, shift: (f64, f64)) -> f64 {
        let spacing = self.top + (self.bottom - self.top) * yn;
        let c = self.center + self.bend * (1.0 - yn) * (1.0 - yn);
        c + offset * spacing + shift.0 + shift.1 * yn
    }

    fn lane_x(&self, i: usize, yn: f64, shift: (f64, f64)) -> f64 {
        self.offset_x(self.lanes[i].offset, yn, shift)
    }
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn uniform_usize(rng: &mut impl Rng, r: [usize; 2]) -> usize {
    rng.gen_range(r[0]..=r[1])
}

/// Smooth world texture: sum of a few random sinusoids.
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut impl Rng) -> Self {
        let waves = (0..6)
            .map(|_| {
                (
                    rng.gen_range(0.05..0.35),
                    rng.gen_range(0.05..0.5),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.3..1.0),
                )
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self.waves.iter().map(|&(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin()).sum();
        s / self.waves.len() as f64
    }
}

/// Render one clip.
pub fn generate_clip(cfg: &SceneConfig) -> Result<SynthClip> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width, cfg.height);
    let sx = w as f64 / 160.0;
    let grid = cfg.grid(16);

    let n_lanes = uniform_usize(&mut rng, cfg.lanes);
    let gap = |rng: &mut ChaCha8Rng| 1.0 + rng.gen_range(-1.0..=1.0) * cfg.gap_jitter;
    let mut offsets = vec![0.0];
    for i in 1..n_lanes {
        offsets.push(offsets[i - 1] + gap(&mut rng));
    }
    let mid = offsets[n_lanes - 1] / 2.0;
    let mut lanes = Vec::with_capacity(n_lanes);
    for (i, off) in offsets.iter().enumerate() {
        let outer = i == 0 || i + 1 == n_lanes;
        lanes.push(LaneSpec {
            offset: off - mid,
            dashed: !outer && rng.gen_bool(cfg.dashed_probability),
            brightness: uniform(&mut rng, cfg.marking_brightness),
            yellow: rng.gen_bool(0.2),
            dash_phase: rng.gen_range(0.0..1.0),
        });
    }
    let scene = Scene {
        center: w as f64 / 2.0 - 0.5 + rng.gen_range(-1.0..=1.0) * cfg.center_offset * sx,
        bend: rng.gen_range(-1.0..=1.0) * cfg.curvature * sx,
        top: uniform(&mut rng, cfg.top_spacing) * sx,
        bottom: uniform(&mut rng, cfg.bottom_spacing) * sx,
        lanes,
    };
    let phases = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU));
    let shifts: Vec<(f64, f64)> = (0..cfg.frames)
        .map(|t| {
            let t = t as f64;
            (
                cfg.yaw_amplitude * sx * ((cfg.yaw_rate * t + phases.0).sin() - phases.0.sin()),
                cfg.lateral_amplitude * sx * ((cfg.lateral_rate * t + phases.1).sin() - phases.1.sin()),
            )
        })
        .collect();

    let mut occluders = Vec::new();
    let mut vehicles = Vec::new();
    let n_occ = uniform_usize(&mut rng, cfg.occluders);
    for _ in 0..n_occ {
        if cfg.frames <= cfg.occlusion_start {
            break;
        }
        let lane = if rng.gen_bool(0.5) { 0 } else { n_lanes - 1 };
        let start = rng.gen_range(cfg.occlusion_start..cfg.frames);
        let frames = uniform_usize(&mut rng, cfg.occlusion_frames).min(cfg.frames - start);
        let len = ((uniform(&mut rng, cfg.occlusion_fraction) * h as f64).round() as usize).clamp(1, h);
        let row0 = rng.gen_range(0..=h - len);
        let jitter = rng.gen_range(-1.0..=1.0) * cfg.occluder_jitter;
        let o = Occluder { lane, start, frames, rows: (row0, row0 + len) };
        vehicles.push(Vehicle {
            offset: scene.lanes[lane].offset,
            jitter,
            start,
            frames,
            rows: o.rows,
            color: vehicle_color(&mut rng),
        });
        occluders.push(o);
    }
    for _ in 0..uniform_usize(&mut rng, cfg.distractors) {
        let offset = if rng.gen_bool(0.5) {
            scene.lanes[0].offset - gap(&mut rng)
        } else {
            scene.lanes[n_lanes - 1].offset + gap(&mut rng)
        };
        if cfg.frames <= cfg.occlusion_start {
            break;
        }
        let start = rng.gen_range(cfg.occlusion_start..cfg.frames);
        let frames = uniform_usize(&mut rng, cfg.occlusion_frames).min(cfg.frames - start);
        let len = ((uniform(&mut rng, cfg.occlusion_fraction) * h as f64).round() as usize).clamp(1, h);
        let row0 = rng.gen_range(0..=h - len);
        let jitter = rng.gen_range(-1.0..=1.0) * cfg.occluder_jitter;
        vehicles.push(Vehicle {
            offset,
            jitter,
            start,
            frames,
            rows: (row0, row0 + len),
            color: vehicle_color(&mut rng),
        });
    }

    let texture = Texture::new(&mut rng);
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("finite sigma");
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut gts = Vec::with_capacity(cfg.frames);
    let mut occl = Vec::with_capacity(cfg.frames);
    for (t, &shift) in shifts.iter().enumerate() {
        let mut img = vec![0.0; 3 * h * w];
        for y in 0..h {
            let yn = y as f64 / (h - 1) as f64;
            let world_shift = shift.0 + shift.1 * yn;
            let half_w = (cfg.marking_width[0] + (cfg.marking_width[1] - cfg.marking_width[0]) * yn) * sx / 2.0;
            let xs: Vec<f64> = (0..scene.lanes.len()).map(|i| scene.lane_x(i, yn, shift)).collect();
            for x in 0..w {
                let base = cfg.road_brightness + cfg.texture * texture.at(x as f64 - world_shift, y as f64);
                let mut rgb = [base; 3];
                for (i, spec) in scene.lanes.iter().enumerate() {
                    let cover = (half_w + 0.5 - (x as f64 - xs[i]).abs()).clamp(0.0, 1.0);
                    if cover == 0.0 {
                        continue;
                    }
                    if spec.dashed {
                        let u = 3.0 * yn + cfg.dash_speed * t as f64 + spec.dash_phase;
                        if u.rem_euclid(1.0) >= 0.55 {
                            continue;
                        }
                    }
                    let color = if spec.yellow {
                        [spec.brightness, spec.brightness * 0.85, spec.brightness * 0.3]
                    } else {
                        [spec.brightness; 3]
                    };
                    for c in 0..3 {
                        rgb[c] = rgb[c] * (1.0 - cover) + color[c] * cover;
                    }
                }
                for c in 0..3 {
                    img[(c * h + y) * w + x] = rgb[c];
                }
            }
        }
        let mut mask = StripeMask::empty(h, w);
        for v in &vehicles {
            if t < v.start || t >= v.start + v.frames {
                continue;
            }
            for y in v.rows.0..v.rows.1 {
                let yn = y as f64 / (h - 1) as f64;
                let hw = (4.0 + 8.0 * yn) * sx;
                let xc = scene.offset_x(v.offset, yn, shift) + v.jitter * hw;
                let lo = (xc - hw).ceil().max(0.0);
                let hi = (xc + hw).floor().min((w - 1) as f64);
                if hi < lo {
                    continue;
                }
                for x in lo as usize..=hi as usize {
                    mask.bits[y * w + x] = true;
                    let rel = (x as f64 - xc) / hw;
                    let shade = if rel.abs() < 0.6 && (y % 7) < 3 { 1.6 } else { 1.0 };
                    for c in 0..3 {
                        let i = (c * h + y) * w + x;
                        img[i] = img[i] * (1.0 - cfg.occluder_opacity) + v.color[c] * shade * cfg.occluder_opacity;
                    }
                }
            }
        }
        for v in img.iter_mut() {
            let n = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            *v = ((*v + n).clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        frames.push(Tensor::new(&[3, h, w], img)?);

        let mut gt = Vec::new();
        for i in 0..scene.lanes.len() {
            let xs: Vec<f64> = (0..grid.n).map(|k| scene.lane_x(i, grid.row_y(k) / (h - 1) as f64, shift)).collect();
            let inside = xs.iter().filter(|&&x| x >= 0.0 && x <= (w - 1) as f64).count();
            if 2 * inside >= grid.n {
                gt.push(GtLane { track_id: i as u32, lane: LanePolyline::complete(xs) });
            }
        }
        gts.push(gt);
        occl.push(mask);
    }
    Ok(SynthClip { name: String::new(), frames, gt: gts, occlusion: occl, occluders, shifts, grid })
}

/// Seed of clip `index` in a split seeded with `seed`.
pub fn clip_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.gen()
}

/// `n` clips of a profile, named `clip_0000`, `clip_0001`, ...
pub fn generate_split(profile: Profile, n: usize, seed: u64) -> Result<Vec<SynthClip>> {
    generate_split_with(&SceneConfig::profile(profile), n, seed)
}

pub fn generate_split_with(cfg: &SceneConfig, n: usize, seed: u64) -> Result<Vec<SynthClip>> {
    (0..n)
        .map(|i| {
            let c = SceneConfig { seed: clip_seed(seed, i), ..cfg.clone() };
            let mut clip = generate_clip(&c)?;
            clip.name = format!("clip_{i:04}");
            Ok(clip)
        })
        .collect()
}

/// Index of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub profile: Profile,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub frames_per_clip: usize,
    pub clips: Vec<ManifestClip>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestClip {
    pub name: String,
    pub seed: u64,
    pub shifts: Vec<(f64, f64)>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATION_FILE: &str = "annotations.jsonl";
pub const IMAGE_DIR: &str = "images";

/// Write `n` clips as PNG frames plus one annotation file and a manifest.
pub fn generate_benchmark(root: &Path, profile: Profile, n: usize, seed: u64) -> Result<Manifest> {
    let cfg = SceneConfig::profile(profile);
    fs::create_dir_all(root)?;
    let mut records = Vec::new();
    let mut clips = Vec::with_capacity(n);
    for i in 0..n {
        let c = SceneConfig { seed: clip_seed(seed, i), ..cfg.clone() };
        let mut clip = generate_clip(&c)?;
        clip.name = format!("clip_{i:04}");
        for (t, f) in clip.frames.iter().enumerate() {
            save_png(&frame_path(&root.join(IMAGE_DIR), &clip.name, t), &tensor_to_rgb(f)?)?;
        }
        records.extend(clip_records(&clip));
        clips.push(ManifestClip { name: clip.name.clone(), seed: c.seed, shifts: clip.shifts.clone() });
    }
    write_annotations(&root.join(ANNOTATION_FILE), &records)?;
    let manifest = Manifest { profile, seed, width: cfg.width, height: cfg.height, frames_per_clip: cfg.frames, clips };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&root.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

/// GT of a clip in the annotation format.
pub fn clip_records(clip: &SynthClip) -> Vec<AnnotationRecord> {
    clip.gt
        .iter()
        .enumerate()
        .map(|(frame, lanes)| AnnotationRecord {
            video: clip.name.clone(),
            frame,
            grid: clip.grid,
            lanes: lanes.iter().map(|g| AnnotationLane::from_polyline(Some(g.track_id), &g.lane, None)).collect(),
        })
        .collect()
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(root.join(MANIFEST_FILE))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })
}

/// Read a dataset written by [`generate_benchmark`]. Occlusion masks and
/// occluder events are not stored and come back empty.
pub fn load_benchmark(root: &Path) -> Result<Vec<SynthClip>> {
    let manifest = load_manifest(root)?;
    let records = parse_annotations(&root.join(ANNOTATION_FILE))?;
    let grouped = group_by_video(&records);
    let mut out = Vec::with_capacity(manifest.clips.len());
    for mc in &manifest.clips {
        let Some((_, recs)) = grouped.iter().find(|(v, _)| *v == mc.name) else {
            return Err(Error::Config(format!("no annotations for {}", mc.name)));
        };
        let frames = (0..recs.len())
            .map(|t| load_frame(&frame_path(&root.join(IMAGE_DIR), &mc.name, t)))
            .collect::<Result<Vec<_>>>()?;
        let gt = recs
            .iter()
            .map(|r| {
                r.lanes
                    .iter()
                    .map(|l| {
                        let track_id = l.track_id.ok_or(Error::TrackIdRequired)?;
                        Ok(GtLane { track_id, lane: l.polyline() })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(SynthClip {
            name: mc.name.clone(),
            frames,
            gt,
            occlusion: Vec::new(),
            occluders: Vec::new(),
            shifts: mc.shifts.clone(),
            grid: recs[0].grid,
        });
    }
    Ok(out)
}
