//! On-disk formats: line-delimited JSON annotations and predictions, binary
//! named-tensor checkpoints, the text basis file, PNG frames and overlays.
//! Every writer goes through a temporary file followed by a rename.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::eigenlane::EigenlaneBasis;
use crate::error::{Error, Result};
use crate::geometry::{rasterize_stripe, LanePolyline, SampleGrid};

/// Write `bytes` to a sibling temporary file, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationLane {
    /// Identity of the lane across frames of a video, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<u32>,
    pub xs: Vec<f64>,
    pub valid: Vec<bool>,
    /// Detector confidence; absent in ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl AnnotationLane {
    pub fn polyline(&self) -> LanePolyline {
        LanePolyline { xs: self.xs.clone(), valid: self.valid.clone() }
    }

    pub fn from_polyline(track_id: Option<u32>, lane: &LanePolyline, score: Option<f64>) -> Self {
        Self { track_id, xs: lane.xs.clone(), valid: lane.valid.clone(), score }
    }
}

/// One frame of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub video: String,
    pub frame: usize,
    pub grid: SampleGrid,
    pub lanes: Vec<AnnotationLane>,
}

impl AnnotationRecord {
    fn check(&self) -> std::result::Result<(), String> {
        self.grid.validate().map_err(|e| e.to_string())?;
        for (i, l) in self.lanes.iter().enumerate() {
            if l.xs.len() != self.grid.n || l.valid.len() != self.grid.n {
                return Err(format!(
                    "lane {i} has {} xs and {} valid flags, grid declares N={}",
                    l.xs.len(),
                    l.valid.len(),
                    self.grid.n
                ));
            }
            if l.xs.iter().any(|x| !x.is_finite()) {
                return Err(format!("lane {i} has a non-finite coordinate"));
            }
        }
        Ok(())
    }
}

/// Canonical text: one compact JSON object per line.
pub fn annotations_to_string(records: &[AnnotationRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    write_atomic(path, annotations_to_string(records)?.as_bytes())
}

/// Strict parse; blank lines are skipped. Frame indices must increase by one
/// within each video.
pub fn parse_annotations_str(text: &str) -> Result<Vec<AnnotationRecord>> {
    let mut out: Vec<AnnotationRecord> = Vec::new();
    let mut last: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(raw).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        rec.check().map_err(|msg| Error::Schema { line, msg })?;
        if let Some(&prev) = last.get(&rec.video) {
            if rec.frame != prev + 1 {
                return Err(Error::Schema {
                    line,
                    msg: format!("video {} jumps from frame {prev} to {}", rec.video, rec.frame),
                });
            }
        }
        last.insert(rec.video.clone(), rec.frame);
        out.push(rec);
    }
    Ok(out)
}

pub fn parse_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    parse_annotations_str(&fs::read_to_string(path)?)
}

/// Group records by video, preserving first-appearance order.
pub fn group_by_video(records: &[AnnotationRecord]) -> Vec<(String, Vec<&AnnotationRecord>)> {
    let mut order: Vec<(String, Vec<&AnnotationRecord>)> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for r in records {
        let i = *index.entry(r.video.as_str()).or_insert_with(|| {
            order.push((r.video.clone(), Vec::new()));
            order.len() - 1
        });
        order[i].1.push(r);
    }
    order
}

const CKPT_MAGIC: &[u8; 8] = b"RVLDCKPT";
const CKPT_VERSION: u32 = 1;

/// Named tensors plus a JSON metadata string.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Layout (little endian): magic, `u32` version, `u32` metadata length,
    /// metadata bytes, `u32` tensor count, then per tensor `u32` name length,
    /// name, `u32` rank, `u64` dims, `f64` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CKPT_MAGIC);
        b.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        b.extend_from_slice(self.meta.as_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::Config("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|e| Error::Config(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::Config(e.to_string()))?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let len: usize = dims.iter().product();
            if len > bytes.len() / 8 {
                return Err(Error::Config(format!("tensor {name} is larger than the file")));
            }
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            tensors.push((name, Tensor::new(&dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Config("trailing bytes after checkpoint".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::Config("truncated checkpoint".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Header `N M y_top y_bottom H W`, then the singular values, then `U` row by row.
pub fn basis_to_string(b: &EigenlaneBasis) -> String {
    let g = b.grid();
    let join = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    let mut s = format!("{} {} {} {} {} {}\n", g.n, b.dim(), g.y_top, g.y_bottom, g.height, g.width);
    s.push_str(&join(&mut b.singular_values().iter().copied()));
    s.push('\n');
    for i in 0..b.n() {
        s.push_str(&join(&mut (0..b.dim()).map(|j| b.matrix()[(i, j)])));
        s.push('\n');
    }
    s
}

pub fn parse_basis(text: &str) -> Result<EigenlaneBasis> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut next = |what: &str| -> Result<(usize, Vec<&str>)> {
        let (i, l) = lines.next().ok_or_else(|| Error::Parse { line: 0, msg: format!("missing {what}") })?;
        Ok((i + 1, l.split_whitespace().collect()))
    };
    let num = |line: usize, s: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|e| Error::Parse { line, msg: format!("{s:?}: {e}") })
    };
    let (hl, header) = next("header")?;
    if header.len() != 6 {
        return Err(Error::Schema { line: hl, msg: "header needs N M y_top y_bottom H W".into() });
    }
    let int = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse { line: hl, msg: format!("{s:?}: {e}") });
    let (n, m) = (int(header[0])?, int(header[1])?);
    let grid = SampleGrid::new(n, num(hl, header[2])?, num(hl, header[3])?, int(header[4])?, int(header[5])?)
        .map_err(|e| Error::Schema { line: hl, msg: e.to_string() })?;
    let (sl, sv) = next("singular values")?;
    if sv.len() != m {
        return Err(Error::Schema { line: sl, msg: format!("expected {m} singular values") });
    }
    let sv = sv.iter().map(|s| num(sl, s)).collect::<Result<Vec<_>>>()?;
    let mut u = DMatrix::zeros(n, m);
    for i in 0..n {
        let (rl, row) = next("basis row")?;
        if row.len() != m {
            return Err(Error::Schema { line: rl, msg: format!("expected {m} values") });
        }
        for j in 0..m {
            u[(i, j)] = num(rl, row[j])?;
        }
    }
    EigenlaneBasis::from_parts(u, sv, grid)
}

pub fn save_basis(path: &Path, b: &EigenlaneBasis) -> Result<()> {
    write_atomic(path, basis_to_string(b).as_bytes())
}

pub fn load_basis(path: &Path) -> Result<EigenlaneBasis> {
    parse_basis(&fs::read_to_string(path)?)
}

/// `3 × H × W` tensor in `[0, 1]` to an 8-bit RGB image.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.chw()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([q(t.data()[i]), q(t.data()[h * w + i]), q(t.data()[2 * h * w + i])])
    }))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = p.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("shape")
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    write_atomic(path, &encode_png(img)?)
}

pub fn load_frame(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

/// Frame file of `video` / `frame` inside a dataset directory.
pub fn frame_path(root: &Path, video: &str, frame: usize) -> PathBuf {
    root.join(video).join(format!("{frame:05}.png"))
}

pub const DETECTION_COLOR: [u8; 3] = [255, 40, 40];
pub const GT_COLOR: [u8; 3] = [40, 220, 60];
pub const FLOW_COLOR: [u8; 3] = [255, 220, 0];

/// Draw GT (optional) and detected lanes as stripes of `width` pixels, plus
/// a sparse arrow field for a `2 × h × w` motion field given in pixels of its
/// own grid.
pub fn render_overlay(
    frame: &Tensor,
    detections: &[LanePolyline],
    gt: Option<&[LanePolyline]>,
    grid: &SampleGrid,
    width: f64,
    flow: Option<&Tensor>,
) -> Result<RgbImage> {
    let mut img = tensor_to_rgb(frame)?;
    if img.width() as usize != grid.width || img.height() as usize != grid.height {
        return Err(Error::Shape("frame and grid sizes differ".into()));
    }
    let mut paint = |lanes: &[LanePolyline], color: [u8; 3]| -> Result<()> {
        for l in lanes {
            if l.valid_count() < 2 {
                continue;
            }
            let m = rasterize_stripe(l, width, grid)?;
            for (i, &b) in m.bits.iter().enumerate() {
                if b {
                    img.put_pixel((i % grid.width) as u32, (i / grid.width) as u32, Rgb(color));
                }
            }
        }
        Ok(())
    };
    if let Some(gt) = gt {
        paint(gt, GT_COLOR)?;
    }
    paint(detections, DETECTION_COLOR)?;
    if let Some(f) = flow {
        let (c, fh, fw) = f.chw()?;
        if c != 2 || grid.height % fh != 0 || grid.height / fh != grid.width / fw {
            return Err(Error::Shape(format!("motion field {:?} does not tile the frame", f.shape())));
        }
        let s = (grid.height / fh) as f64;
        let step = (fh / 4).max(1);
        for y in (step / 2..fh).step_by(step) {
            for x in (step / 2..fw).step_by(step) {
                let dx = f.at(0, y, x) * s;
                let dy = f.at(1, y, x) * s;
                let (x0, y0) = ((x as f64 + 0.5) * s - 0.5, (y as f64 + 0.5) * s - 0.5);
                let n = (dx.abs().max(dy.abs()).ceil() as usize).max(1);
                for k in 0..=n {
                    let t = k as f64 / n as f64;
                    let (px, py) = ((x0 + t * dx).round(), (y0 + t * dy).round());
                    if px >= 0.0 && py >= 0.0 && (px as u32) < img.width() && (py as u32) < img.height() {
                        img.put_pixel(px as u32, py as u32, Rgb(FLOW_COLOR));
                    }
                }
            }
        }
    }
    Ok(img)
}
