//! Image metrics (precision, recall, F1 at an IoU threshold, mIoU) on
//! full-resolution lane stripes, and the video flickering/missing rates.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::{rasterize_stripe, stripe_iou, LanePolyline, SampleGrid, StripeMask};
use crate::io::{group_by_video, AnnotationRecord};

/// Stripe width used when comparing lanes, in input pixels.
pub const STRIPE_WIDTH: f64 = 30.0;
/// Minimum IoU linking GT lanes of adjacent frames when track ids are absent.
pub const FALLBACK_ASSOCIATION_IOU: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameEval {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub matched_ious: Vec<f64>,
    /// Matched prediction of each GT lane, in GT order.
    pub match_map: Vec<Option<usize>>,
}

fn masks(lanes: &[LanePolyline], grid: &SampleGrid, width: f64) -> Result<Vec<StripeMask>> {
    lanes.iter().map(|l| rasterize_stripe(l, width, grid)).collect()
}

/// `ious[p][g]` between every prediction and every GT lane.
pub fn iou_matrix(
    preds: &[LanePolyline],
    gts: &[LanePolyline],
    grid: &SampleGrid,
    width: f64,
) -> Result<Vec<Vec<f64>>> {
    let pm = masks(preds, grid, width)?;
    let gm = masks(gts, grid, width)?;
    pm.iter().map(|p| gm.iter().map(|g| stripe_iou(p, g)).collect()).collect()
}

/// One-to-one matching taking pairs in order of descending IoU (ties by
/// prediction, then GT index) while both ends are free and IoU exceeds `tau`.
/// Returns the matched prediction per GT lane.
pub fn greedy_match(ious: &[Vec<f64>], n_gt: usize, tau: f64) -> Vec<Option<usize>> {
    let mut pairs: Vec<(usize, usize, f64)> = ious
        .iter()
        .enumerate()
        .flat_map(|(p, row)| row.iter().enumerate().map(move |(g, &v)| (p, g, v)))
        .filter(|&(_, _, v)| v > tau)
        .collect();
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut pred_used = vec![false; ious.len()];
    let mut out = vec![None; n_gt];
    for (p, g, _) in pairs {
        if !pred_used[p] && out[g].is_none() {
            pred_used[p] = true;
            out[g] = Some(p);
        }
    }
    out
}

pub fn match_frame(
    preds: &[LanePolyline],
    gts: &[LanePolyline],
    tau: f64,
    grid: &SampleGrid,
    stripe_width: f64,
) -> Result<FrameEval> {
    let ious = iou_matrix(preds, gts, grid, stripe_width)?;
    Ok(eval_from_ious(&ious, gts.len(), tau))
}

pub fn eval_from_ious(ious: &[Vec<f64>], n_gt: usize, tau: f64) -> FrameEval {
    let match_map = greedy_match(ious, n_gt, tau);
    let matched_ious: Vec<f64> = match_map.iter().enumerate().filter_map(|(g, m)| m.map(|p| ious[p][g])).collect();
    let tp = matched_ious.len();
    FrameEval { tp, fp: ious.len() - tp, fn_: n_gt - tp, matched_ious, match_map }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub miou: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Counts summed over all frames before the ratios are taken.
pub fn f1_scores(evals: &[FrameEval]) -> Scores {
    let tp: usize = evals.iter().map(|e| e.tp).sum();
    let fp: usize = evals.iter().map(|e| e.fp).sum();
    let fn_: usize = evals.iter().map(|e| e.fn_).sum();
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    let ious: Vec<f64> = evals.iter().flat_map(|e| e.matched_ious.iter().copied()).collect();
    let miou = if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };
    Scores { precision, recall, f1, miou }
}

/// Stable, flickering and missing counts over pairs of adjacent frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoEval {
    pub n_s: usize,
    pub n_f: usize,
    pub n_m: usize,
}

impl VideoEval {
    pub fn n(&self) -> usize {
        self.n_s + self.n_f + self.n_m
    }

    /// `(R_F, R_M)`; zero when no pair exists.
    pub fn rates(&self) -> (f64, f64) {
        (ratio(self.n_f, self.n()), ratio(self.n_m, self.n()))
    }

    pub fn merge(&mut self, other: &VideoEval) {
        self.n_s += other.n_s;
        self.n_f += other.n_f;
        self.n_m += other.n_m;
    }
}

/// GT identities and detection outcomes of one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameTracks {
    pub track_ids: Vec<Option<u32>>,
    pub detected: Vec<bool>,
}

impl FrameTracks {
    pub fn new(track_ids: Vec<Option<u32>>, eval: &FrameEval) -> Self {
        Self { track_ids, detected: eval.match_map.iter().map(Option::is_some).collect() }
    }
}

/// Classify every GT track present in two consecutive frames.
pub fn video_rates(frames: &[FrameTracks]) -> Result<VideoEval> {
    let mut prev: HashMap<u32, bool> = HashMap::new();
    let mut out = VideoEval::default();
    for f in frames {
        if f.track_ids.len() != f.detected.len() {
            return shape_err("track ids and detection flags differ in length");
        }
        let mut cur = HashMap::new();
        for (id, &hit) in f.track_ids.iter().zip(&f.detected) {
            let id = id.ok_or(Error::TrackIdRequired)?;
            if cur.insert(id, hit).is_some() {
                return Err(Error::Config(format!("track id {id} repeats within a frame")));
            }
            if let Some(&was) = prev.get(&id) {
                match (was, hit) {
                    (true, true) => out.n_s += 1,
                    (false, false) => out.n_m += 1,
                    _ => out.n_f += 1,
                }
            }
        }
        prev = cur;
    }
    Ok(out)
}

/// Give GT lanes identities by chaining adjacent frames: a lane continues the
/// previous-frame track it overlaps most, if the IoU exceeds
/// [`FALLBACK_ASSOCIATION_IOU`]; everything else starts a new track.
pub fn associate_tracks(frames: &[Vec<LanePolyline>], grid: &SampleGrid, width: f64) -> Result<Vec<Vec<Option<u32>>>> {
    let mut next = 0u32;
    let mut out: Vec<Vec<Option<u32>>> = Vec::with_capacity(frames.len());
    let mut prev_lanes: &[LanePolyline] = &[];
    for lanes in frames {
        let ious = iou_matrix(lanes, prev_lanes, grid, width)?;
        let links = greedy_match(&ious, prev_lanes.len(), FALLBACK_ASSOCIATION_IOU);
        let mut ids = vec![None; lanes.len()];
        for (pg, cur) in links.iter().enumerate() {
            if let Some(c) = *cur {
                ids[c] = out.last().and_then(|p| p[pg]);
            }
        }
        for id in ids.iter_mut().filter(|i| i.is_none()) {
            *id = Some(next);
            next += 1;
        }
        out.push(ids);
        prev_lanes = lanes;
    }
    Ok(out)
}

/// Headline numbers plus per-video breakdown.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1_050: f64,
    pub f1_080: f64,
    pub precision_050: f64,
    pub recall_050: f64,
    pub miou: f64,
    pub rf_050: f64,
    pub rm_050: f64,
    pub rf_080: f64,
    pub rm_080: f64,
    pub frames: usize,
    /// Set when some GT video lacked track ids and lanes were linked by IoU.
    pub fallback_association: bool,
    pub videos: Vec<VideoReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VideoReport {
    pub video: String,
    pub f1_050: f64,
    pub rf_050: f64,
    pub rm_050: f64,
}

impl EvalReport {
    /// `name = value` lines for the headline fields.
    pub fn summary(&self) -> String {
        format!(
            "f1_050 = {:.6}\nf1_080 = {:.6}\nmiou = {:.6}\nrf_050 = {:.6}\nrm_050 = {:.6}\nrf_080 = {:.6}\nrm_080 = {:.6}\n",
            self.f1_050, self.f1_080, self.miou, self.rf_050, self.rm_050, self.rf_080, self.rm_080
        )
    }
}

struct Accum {
    evals: Vec<FrameEval>,
    video: VideoEval,
}

/// Score predictions against GT. Videos and frames are taken from the GT; a
/// frame without a prediction record counts as having no detections.
pub fn evaluate(gt: &[AnnotationRecord], pred: &[AnnotationRecord], stripe_width: f64) -> Result<EvalReport> {
    let mut preds: BTreeMap<(&str, usize), &AnnotationRecord> = BTreeMap::new();
    for p in pred {
        if preds.insert((p.video.as_str(), p.frame), p).is_some() {
            return Err(Error::Config(format!("duplicate prediction for {} frame {}", p.video, p.frame)));
        }
    }
    let taus = [0.5, 0.8];
    let mut all: Vec<Accum> = taus.iter().map(|_| Accum { evals: Vec::new(), video: VideoEval::default() }).collect();
    let mut report = EvalReport::default();
    for (video, recs) in group_by_video(gt) {
        let grid = recs[0].grid;
        let gt_lanes: Vec<Vec<LanePolyline>> =
            recs.iter().map(|r| r.lanes.iter().map(|l| l.polyline()).collect()).collect();
        let mut ids: Vec<Vec<Option<u32>>> =
            recs.iter().map(|r| r.lanes.iter().map(|l| l.track_id).collect()).collect();
        if ids.iter().flatten().any(Option::is_none) {
            log::warn!("video {video}: GT lacks track ids, linking lanes by stripe IoU");
            report.fallback_association = true;
            ids = associate_tracks(&gt_lanes, &grid, stripe_width)?;
        }
        let mut per_video: Vec<Accum> =
            taus.iter().map(|_| Accum { evals: Vec::new(), video: VideoEval::default() }).collect();
        for (ti, &tau) in taus.iter().enumerate() {
            let mut tracks = Vec::with_capacity(recs.len());
            for (fi, r) in recs.iter().enumerate() {
                let p: Vec<LanePolyline> = match preds.get(&(video.as_str(), r.frame)) {
                    Some(p) if p.grid.n != grid.n => {
                        return shape_err(format!(
                            "{video} frame {}: prediction N={} vs GT N={}",
                            r.frame, p.grid.n, grid.n
                        ))
                    }
                    Some(p) => p.lanes.iter().map(|l| l.polyline()).collect(),
                    None => Vec::new(),
                };
                let e = match_frame(&p, &gt_lanes[fi], tau, &grid, stripe_width)?;
                tracks.push(FrameTracks::new(ids[fi].clone(), &e));
                per_video[ti].evals.push(e);
            }
            per_video[ti].video = video_rates(&tracks)?;
        }
        let s = f1_scores(&per_video[0].evals);
        let (rf, rm) = per_video[0].video.rates();
        report.videos.push(VideoReport { video: video.clone(), f1_050: s.f1, rf_050: rf, rm_050: rm });
        for (acc, v) in all.iter_mut().zip(per_video) {
            acc.evals.extend(v.evals);
            acc.video.merge(&v.video);
        }
    }
    let s5 = f1_scores(&all[0].evals);
    let s8 = f1_scores(&all[1].evals);
    let (rf5, rm5) = all[0].video.rates();
    let (rf8, rm8) = all[1].video.rates();
    report.f1_050 = s5.f1;
    report.f1_080 = s8.f1;
    report.precision_050 = s5.precision;
    report.recall_050 = s5.recall;
    report.miou = s5.miou;
    report.rf_050 = rf5;
    report.rm_050 = rm5;
    report.rf_080 = rf8;
    report.rm_080 = rm8;
    report.frames = all[0].evals.len();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> SampleGrid {
        SampleGrid::new(8, 4.0, 60.0, 64, 160).unwrap()
    }

    fn straight(x: f64) -> LanePolyline {
        LanePolyline::complete(vec![x; 8])
    }

    /// Best assignment by exhaustive search: most matches, then largest IoU
    /// sum.
    fn brute_force(ious: &[Vec<f64>], n_gt: usize, tau: f64) -> (usize, f64) {
        fn go(ious: &[Vec<f64>], tau: f64, p: usize, used: &mut Vec<bool>) -> (usize, f64) {
            if p == ious.len() {
                return (0, 0.0);
            }
            let mut best = go(ious, tau, p + 1, used);
            for g in 0..used.len() {
                if !used[g] && ious[p][g] > tau {
                    used[g] = true;
                    let (n, s) = go(ious, tau, p + 1, used);
                    used[g] = false;
                    let cand = (n + 1, s + ious[p][g]);
                    if cand.0 > best.0 || (cand.0 == best.0 && cand.1 > best.1) {
                        best = cand;
                    }
                }
            }
            best
        }
        go(ious, tau, 0, &mut vec![false; n_gt])
    }

    #[test]
    fn identity_and_empty() {
        let gts = vec![straight(40.0), straight(110.0)];
        let e = match_frame(&gts, &gts, 0.5, &grid(), STRIPE_WIDTH).unwrap();
        assert_eq!((e.tp, e.fp, e.fn_), (2, 0, 0));
        assert_eq!(e.matched_ious, vec![1.0, 1.0]);
        let three = vec![straight(20.0), straight(80.0), straight(140.0)];
        let e = match_frame(&[], &three, 0.5, &grid(), STRIPE_WIDTH).unwrap();
        assert_eq!((e.tp, e.fp, e.fn_), (0, 0, 3));
    }

    #[test]
    fn two_predictions_near_one_gt() {
        let gts = vec![straight(80.0)];
        let preds = vec![straight(84.0), straight(82.0)];
        let ious = iou_matrix(&preds, &gts, &grid(), STRIPE_WIDTH).unwrap();
        assert!(ious[0][0] > 0.5 && ious[1][0] > ious[0][0]);
        let e = eval_from_ious(&ious, 1, 0.5);
        assert_eq!((e.tp, e.fp, e.fn_), (1, 1, 0));
        assert_eq!(e.match_map, vec![Some(1)]);
        let (n, s) = brute_force(&ious, 1, 0.5);
        assert_eq!(n, 1);
        assert_eq!(s, ious[1][0]);
    }

    #[test]
    fn f1_arithmetic() {
        let e = FrameEval { tp: 2, fp: 1, fn_: 1, matched_ious: vec![0.6, 0.8], match_map: vec![] };
        let s = f1_scores(&[e]);
        assert_eq!(s.precision, 2.0 / 3.0);
        assert_eq!(s.recall, 2.0 / 3.0);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.miou - 0.7).abs() < 1e-15);
        assert_eq!(f1_scores(&[]), Scores::default());
    }

    fn tracks(hits: &[&[(u32, bool)]]) -> Vec<FrameTracks> {
        hits.iter()
            .map(|f| FrameTracks {
                track_ids: f.iter().map(|&(i, _)| Some(i)).collect(),
                detected: f.iter().map(|&(_, h)| h).collect(),
            })
            .collect()
    }

    #[test]
    fn pair_counting() {
        let one: &[(u32, bool)] = &[(0, true)];
        let always = tracks(&[one; 5]);
        assert_eq!(video_rates(&always).unwrap(), VideoEval { n_s: 4, n_f: 0, n_m: 0 });
        let hmh = tracks(&[&[(0, true)], &[(0, false)], &[(0, true)]]);
        assert_eq!(video_rates(&hmh).unwrap(), VideoEval { n_s: 0, n_f: 2, n_m: 0 });
        let v = VideoEval { n_s: 2, n_f: 1, n_m: 1 };
        assert_eq!(v.rates(), (0.25, 0.25));
        let missing = vec![FrameTracks { track_ids: vec![None], detected: vec![true] }];
        assert!(matches!(video_rates(&missing), Err(Error::TrackIdRequired)));
    }

    #[test]
    fn new_lanes_do_not_pair_at_first_frame() {
        let t = tracks(&[&[(0, true)], &[(0, true), (1, false)], &[(1, false)]]);
        assert_eq!(video_rates(&t).unwrap(), VideoEval { n_s: 1, n_f: 0, n_m: 1 });
    }

    #[test]
    fn fallback_links_overlapping_lanes() {
        let frames =
            vec![vec![straight(40.0), straight(100.0)], vec![straight(102.0), straight(41.0)], vec![straight(150.0)]];
        let ids = associate_tracks(&frames, &grid(), STRIPE_WIDTH).unwrap();
        assert_eq!(ids, vec![vec![Some(0), Some(1)], vec![Some(1), Some(0)], vec![Some(2)]]);
    }

    proptest! {
        #[test]
        fn greedy_agrees_with_exhaustive_search(
            gaps in prop::collection::vec(30.0f64..45.0, 0..4),
            px in prop::collection::vec(10.0f64..150.0, 0..5),
            tau in prop::sample::select(vec![0.5, 0.8]),
        ) {
            // GT lanes at least one stripe apart, as in the synthetic scenes.
            let gts: Vec<_> = gaps.iter().scan(0.0, |x, g| { *x += g; Some(straight(*x)) }).collect();
            let preds: Vec<_> = px.iter().map(|&x| straight(x)).collect();
            let ious = iou_matrix(&preds, &gts, &grid(), STRIPE_WIDTH).unwrap();
            let e = eval_from_ious(&ious, gts.len(), tau);
            let (n, _) = brute_force(&ious, gts.len(), tau);
            prop_assert_eq!(e.tp, n);
            prop_assert_eq!(e.tp + e.fn_, gts.len());
            prop_assert_eq!(e.tp + e.fp, preds.len());
            let mut seen = std::collections::HashSet::new();
            for m in e.match_map.iter().flatten() {
                prop_assert!(seen.insert(*m));
            }
            let s = f1_scores(&[e]);
            prop_assert!((0.0..=1.0).contains(&s.f1));
            if s.f1 > 0.0 { prop_assert!(s.miou > tau); }
        }
    }
}
