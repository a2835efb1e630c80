//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rvld::autograd::{check_gradients, Graph, LiouSample, Tensor, Var};
use rvld::completion::{als_complete, objective, CompletionConfig, IncompleteLaneMatrix};
use rvld::eigenlane::{build_basis, mean_reconstruction_error};
use rvld::geometry::{LanePolyline, SampleGrid};
use rvld::io::{AnnotationLane, AnnotationRecord};
use rvld::metrics::{evaluate, f1_scores, match_frame, video_rates, FrameTracks, STRIPE_WIDTH};
use rvld::motion::{correlation_volume, flow_loss, volume_argmax, warp_tensor};
use rvld::nms::{nms, nms_naive, NmsConfig};
use rvld::pipeline::{experiment, Experiment, RunConfig};
use rvld::pld::{ild_step, resume_video, run_video, FrameOutput, FrameState, PldConfig, PldModel};
use rvld::synth::{default_grid, generate_split, Profile};
use rvld::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn scaled(mut t: Tensor, s: f64) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v *= s);
    t
}

/// Random linear probe so every output element affects the loss differently.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let r = g.constant(random(&shape, &mut rng));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn gradcheck(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    Ok(check_gradients(inputs, 1e-5, 1e-6, build)?.worst())
}

/// Gradcheck over selected model parameters plus extra inputs.
fn model_gradcheck(
    m: &PldModel,
    prefix: &str,
    extra: Vec<Tensor>,
    build: impl Fn(&PldModel, &mut Graph, &[Var], &[Var]) -> Result<Var>,
) -> Result<f64> {
    let names = m.params.names();
    let picked: Vec<usize> = (0..names.len()).filter(|&i| names[i].starts_with(prefix)).collect();
    let mut inputs: Vec<Tensor> = picked.iter().map(|&i| m.params.tensors()[i].clone()).collect();
    let n = inputs.len();
    inputs.extend(extra);
    gradcheck(&inputs, |g, vs| {
        let params: Vec<Var> = (0..names.len())
            .map(|i| match picked.iter().position(|&p| p == i) {
                Some(j) => vs[j],
                None => g.constant(m.params.tensors()[i].clone()),
            })
            .collect();
        let out = build(m, g, &params, &vs[n..])?;
        probe(g, out, 99)
    })
}

fn criterion_1() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = &mut rng;
    let (h, w) = (8, 16);
    let mut errs: Vec<(&str, f64)> = Vec::new();

    let x = random(&[2, h, w], r);
    let k = random(&[3, 2, 3, 3], r);
    let b = random(&[3], r);
    errs.push((
        "conv2d",
        gradcheck(&[x, k, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            probe(g, y, 1)
        })?,
    ));
    let x = random(&[2, h, w], r);
    let k = random(&[3, 2, 3, 3], r);
    errs.push((
        "conv2d stride 2",
        gradcheck(&[x, k], |g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, 1)?;
            probe(g, y, 2)
        })?,
    ));
    let x = scaled(random(&[2, h, w], r), 4.0);
    errs.push((
        "sigmoid",
        gradcheck(&[x], |g, v| {
            let y = g.sigmoid(v[0]);
            probe(g, y, 3)
        })?,
    ));
    let x = scaled(random(&[4, h, w], r), 3.0);
    errs.push((
        "softmax_channels",
        gradcheck(&[x], |g, v| {
            let y = g.softmax_channels(v[0])?;
            probe(g, y, 4)
        })?,
    ));
    let x = random(&[2, h, w], r);
    errs.push((
        "bilinear_resize",
        gradcheck(&[x], |g, v| {
            let up = g.bilinear_resize(v[0], 2 * h, 2 * w, true)?;
            let down = g.bilinear_resize(v[0], h / 2, w / 2, false)?;
            let a = probe(g, up, 5)?;
            let b = probe(g, down, 6)?;
            g.add(a, b)
        })?,
    ));
    let map = random(&[3, h, w], r);
    let field = scaled(random(&[2, h, w], r), 2.5);
    errs.push((
        "backward_warp",
        gradcheck(&[map, field], |g, v| {
            let y = g.backward_warp(v[0], v[1])?;
            probe(g, y, 7)
        })?,
    ));
    let logits = scaled(random(&[1, h, w], r), 3.0);
    let target: Vec<f64> = (0..h * w).map(|_| if r.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
    errs.push((
        "focal_loss",
        gradcheck(&[logits], |g, v| {
            let p = g.sigmoid(v[0]);
            g.focal_loss(p, &target, 0.25, 2.0)
        })?,
    ));
    let basis: Vec<f64> = random(&[6, 3], r).data().to_vec();
    let targets = vec![vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0], vec![-2.0; 6]];
    let samples: Vec<LiouSample> = (0..6).map(|i| LiouSample { pixel: r.gen_range(0..h * w), target: i % 2 }).collect();
    let coeff = scaled(random(&[3, h, w], r), 3.0);
    errs.push((
        "liou_loss",
        gradcheck(&[coeff], |g, v| g.liou_map_loss(v[0], &basis, samples.clone(), targets.clone(), 0.8))?,
    ));
    let prev_gt = Tensor::new(&[1, h, w], (0..h * w).map(|_| r.gen_range(0.0..1.0)).collect())?;
    let cur_gt = Tensor::new(&[1, h, w], (0..h * w).map(|_| r.gen_range(0.0..1.0)).collect())?;
    let field = scaled(random(&[2, h, w], r), 2.0);
    errs.push(("flow_loss", gradcheck(&[field], |g, v| flow_loss(g, &prev_gt, &cur_gt, v[0]))?));

    let k = 8;
    let m = PldModel::new(&PldConfig { radius: 1, motion_hidden: 4, ..PldConfig::default() }, k, 3)?;
    let mask = Tensor::new(&[1, h, w], (0..h * w).map(|_| r.gen_range(0.0..1.0)).collect())?;
    errs.push(("guidance", model_gradcheck(&m, "g.", vec![mask], |m, g, p, x| m.guidance_graph(g, p, x[0]))?));
    let xs = vec![random(&[k, h, w], r), random(&[k, h, w], r), random(&[k, h, w], r)];
    errs.push(("refine", model_gradcheck(&m, "h.", xs, |m, g, p, x| m.refine_graph(g, p, x[0], x[1], x[2]))?));
    let xs = vec![random(&[k, h, w], r), random(&[k, h, w], r)];
    errs.push(("motion_head", model_gradcheck(&m, "motion.", xs, |m, g, p, x| m.motion_graph(g, p, x[0], x[1]))?));

    let worst = errs.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let failing: Vec<String> = errs.iter().filter(|e| !(e.1 < 1e-4)).map(|e| format!("{} {:.2e}", e.0, e.1)).collect();
    let detail = if failing.is_empty() {
        format!("{} ops, worst {} {:.2e}", errs.len(), worst.0, worst.1)
    } else {
        format!("over 1e-4: {}", failing.join(", "))
    };
    Ok(outcome(failing.is_empty(), detail))
}

fn criterion_2() -> Result<Outcome> {
    let (n, l, rank) = (50, 200, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u: Vec<f64> = (0..n * rank).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..l * rank).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let truth: Vec<f64> =
        (0..n * l).map(|p| (0..rank).map(|k| u[(p / l) * rank + k] * v[(p % l) * rank + k]).sum()).collect();
    let observed: Vec<bool> = (0..n * l).map(|_| rng.gen_bool(0.4)).collect();
    let m = IncompleteLaneMatrix::new(n, l, truth.clone(), observed.clone())?;
    let cfg = CompletionConfig { rank, lambda: 1e-3, seed: 5, ..CompletionConfig::default() };
    let c = als_complete(&m, &cfg)?;
    let (mut num, mut den) = (0.0, 0.0);
    for p in (0..n * l).filter(|&p| !observed[p]) {
        num += (c.values[p] - truth[p]).powi(2);
        den += truth[p].powi(2);
    }
    let rmse = (num / den).sqrt();
    let rises = c.trace.windows(2).filter(|w| w[1] > w[0]).count();
    let final_obj = objective(&m, &c.factors)?;
    Ok(outcome(
        rmse < 1e-2 && rises == 0 && final_obj == *c.trace.last().unwrap(),
        format!(
            "held-out relative RMSE {rmse:.2e}, {} half-steps, {rises} increases, objective {:.3e} -> {final_obj:.3e}",
            c.trace.len() - 1,
            c.trace[0]
        ),
    ))
}

fn criterion_3() -> Result<Outcome> {
    let clips = generate_split(Profile::Occluded, 20, 3)?;
    let held = generate_split(Profile::Occluded, 5, 4)?;
    let lanes = |cs: &[rvld::synth::SynthClip]| -> Vec<LanePolyline> {
        cs.iter().flat_map(|c| c.gt.iter().flatten().map(|g| g.lane.clone())).collect()
    };
    let (train, test) = (lanes(&clips), lanes(&held));
    let grid = clips[0].grid;
    let errs: Vec<f64> = (1..=grid.n)
        .map(|m| mean_reconstruction_error(&build_basis(&train, m, &grid)?, &train))
        .collect::<Result<_>>()?;
    // Past the family's rank the error is rounding noise around zero.
    let monotone = errs.windows(2).all(|w| w[1] <= w[0] + 1e-9);
    let m4 = mean_reconstruction_error(&build_basis(&train, 4, &grid)?, &test)?;
    let full = build_basis(&train, grid.n, &grid)?;
    let exact = test
        .iter()
        .map(|lane| Ok(full.reconstruct(lane)?.xs.iter().zip(&lane.xs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(outcome(
        monotone && errs[3] < 0.5 && m4 < 0.5 && exact < 1e-9,
        format!(
            "{} lanes, error M=1 {:.3} M=2 {:.3} M=3 {:.1e} M=4 {:.1e} (held-out {m4:.1e}) px, non-increasing {monotone}, M=N max error {exact:.1e}",
            train.len(),
            errs[0],
            errs[1],
            errs[2],
            errs[3]
        ),
    ))
}

/// `out(x) = t(x - shift)`, zero where undefined.
fn shifted(t: &Tensor, dx: isize, dy: isize) -> Tensor {
    let (c, h, w) = t.chw().unwrap();
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (sy, sx) = (y - dy, x - dx);
                if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                    out.data_mut()[(ch * h + y as usize) * w + x as usize] =
                        t.data()[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

fn criterion_4() -> Result<Outcome> {
    let (c, h, w, s) = (16, 16, 40, 3isize);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cur = random(&[c, h, w], &mut rng);
    for p in 0..h * w {
        let norm = (0..c).map(|ch| cur.data()[ch * h * w + p].powi(2)).sum::<f64>().sqrt();
        (0..c).for_each(|ch| cur.data_mut()[ch * h * w + p] /= norm);
    }
    let mut wrong = 0;
    let mut checked = 0;
    for dy in -s..=s {
        for dx in -s..=s {
            let prev = shifted(&cur, dx, dy);
            let am = volume_argmax(&correlation_volume(&cur, &prev, s as usize)?, s as usize)?;
            // Every candidate x + d and its source x + d - δ stay inside the map.
            let m = 2 * s;
            for y in m..h as isize - m {
                for x in m..w as isize - m {
                    checked += 1;
                    if am[y as usize * w + x as usize] != (dx, dy) {
                        wrong += 1;
                    }
                }
            }
        }
    }
    let map = random(&[c, h, w], &mut rng);
    let identity = warp_tensor(&map, &Tensor::zeros(&[2, h, w]))? == map;
    Ok(outcome(
        wrong == 0 && identity,
        format!(
            "{} shifts, {checked} pixel checks, {wrong} wrong; zero-field warp identical {identity}",
            (2 * s + 1).pow(2)
        ),
    ))
}

fn criterion_5() -> Result<Outcome> {
    let (h, w) = (16, 32);
    let grid = SampleGrid::new(h, 0.0, (h - 1) as f64, h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let quad = |a: f64, b: f64, c: f64| {
        LanePolyline::complete((0..h).map(|i| a + b * i as f64 + c * (i * i) as f64).collect())
    };
    let family: Vec<LanePolyline> =
        (0..12).map(|_| quad(rng.gen_range(0.0..32.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.03..0.03))).collect();
    let basis = build_basis(&family, 3, &grid)?;
    let mut mismatches = 0;
    let mut total_dets = 0;
    for _ in 0..200 {
        let levels = rng.gen_range(5..25);
        let p =
            Tensor::new(&[1, h, w], (0..h * w).map(|_| rng.gen_range(0..=levels) as f64 / levels as f64).collect())?;
        let mut c = Tensor::zeros(&[3, h, w]);
        for i in 0..h * w {
            let lane = quad(rng.gen_range(-8.0..40.0), rng.gen_range(-0.8..0.8), rng.gen_range(-0.02..0.02));
            let coeff = basis.encode(&lane)?;
            for k in 0..3 {
                c.data_mut()[k * h * w + i] = coeff.0[k];
            }
        }
        let cfg = NmsConfig {
            prob_threshold: rng.gen_range(0.3..0.9),
            removal_halfwidth: rng.gen_range(1.0..6.0),
            max_lanes: rng.gen_range(1..8),
            mask_halfwidth: 2.0,
        };
        let fast = nms(&p, &c, &basis, &cfg)?;
        total_dets += fast.len();
        if fast != nms_naive(&p, &c, &basis, &cfg)? {
            mismatches += 1;
        }
    }
    Ok(outcome(mismatches == 0, format!("200 pairs, {total_dets} detections, {mismatches} mismatches")))
}

/// One scripted video: GT track ids per frame and which of them are detected,
/// plus unmatched false positives and predictions shifted sideways.
struct Scenario {
    name: &'static str,
    /// `(track id, detection)` per GT lane per frame. Detection is `None` for
    /// a miss, otherwise the lateral offset of the prediction in pixels.
    frames: Vec<Vec<(u32, Option<f64>)>>,
    false_positives: Vec<usize>,
    /// Expected `(tp, fp, fn)` and `(stable, flickering, missing)` at 0.5 and 0.8.
    at_050: ([usize; 3], [usize; 3]),
    at_080: ([usize; 3], [usize; 3]),
}

fn lane_x(id: u32) -> f64 {
    20.0 + 40.0 * id as f64
}

fn vertical(x: f64) -> LanePolyline {
    LanePolyline::complete(vec![x; default_grid().n])
}

fn scenario_records(s: &Scenario) -> (Vec<AnnotationRecord>, Vec<AnnotationRecord>) {
    let grid = default_grid();
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for (t, lanes) in s.frames.iter().enumerate() {
        gt.push(AnnotationRecord {
            video: s.name.into(),
            frame: t,
            grid,
            lanes: lanes
                .iter()
                .map(|&(id, _)| AnnotationLane::from_polyline(Some(id), &vertical(lane_x(id)), None))
                .collect(),
        });
        let mut p: Vec<AnnotationLane> = lanes
            .iter()
            .filter_map(|&(id, d)| {
                d.map(|off| AnnotationLane::from_polyline(None, &vertical(lane_x(id) + off), Some(0.9)))
            })
            .collect();
        if s.false_positives.contains(&t) {
            // Midway between two lane positions, IoU 0.2 with each.
            p.push(AnnotationLane::from_polyline(None, &vertical(lane_x(1) + 20.0), Some(0.6)));
        }
        pred.push(AnnotationRecord { video: s.name.into(), frame: t, grid, lanes: p });
    }
    (gt, pred)
}

fn scenarios() -> Vec<Scenario> {
    let hit = Some(0.0);
    let all = |n: u32| (0..n).map(|id| (id, hit)).collect::<Vec<_>>();
    vec![
        Scenario {
            name: "stable",
            frames: vec![all(4), all(4), all(4)],
            false_positives: vec![],
            at_050: ([12, 0, 0], [8, 0, 0]),
            at_080: ([12, 0, 0], [8, 0, 0]),
        },
        Scenario {
            name: "flicker",
            frames: vec![all(4), vec![(0, hit), (1, None), (2, hit), (3, hit)], all(4)],
            false_positives: vec![],
            at_050: ([11, 0, 1], [6, 2, 0]),
            at_080: ([11, 0, 1], [6, 2, 0]),
        },
        Scenario {
            name: "missing",
            frames: vec![vec![(0, hit), (1, hit), (2, None), (3, hit)]; 3],
            false_positives: vec![0, 1, 2],
            at_050: ([9, 3, 3], [6, 0, 2]),
            at_080: ([9, 3, 3], [6, 0, 2]),
        },
        Scenario {
            name: "tracks_enter_and_leave",
            frames: vec![vec![(0, hit), (1, None)], vec![(0, hit), (1, hit), (2, None)], vec![(1, None), (2, None)]],
            false_positives: vec![1],
            at_050: ([3, 1, 4], [1, 2, 1]),
            at_080: ([3, 1, 4], [1, 2, 1]),
        },
        Scenario {
            // A 6 px offset gives stripe IoU 24/36: a match at 0.5 but not at 0.8.
            name: "threshold",
            frames: vec![vec![(0, Some(6.0)), (2, hit)], vec![(0, hit), (2, Some(6.0))], vec![(0, hit), (2, hit)]],
            false_positives: vec![],
            at_050: ([6, 0, 0], [4, 0, 0]),
            at_080: ([4, 2, 2], [1, 3, 0]),
        },
    ]
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn criterion_6() -> Result<Outcome> {
    let grid = default_grid();
    let mut bad = Vec::new();
    for s in scenarios() {
        let (gt, pred) = scenario_records(&s);
        for (tau, (want_c, want_v)) in [(0.5, s.at_050), (0.8, s.at_080)] {
            let mut evals = Vec::new();
            let mut tracks = Vec::new();
            for (g, p) in gt.iter().zip(&pred) {
                let gl: Vec<LanePolyline> = g.lanes.iter().map(|l| l.polyline()).collect();
                let pl: Vec<LanePolyline> = p.lanes.iter().map(|l| l.polyline()).collect();
                let e = match_frame(&pl, &gl, tau, &grid, STRIPE_WIDTH)?;
                tracks.push(FrameTracks::new(g.lanes.iter().map(|l| l.track_id).collect(), &e));
                evals.push(e);
            }
            let counts = evals.iter().fold([0; 3], |a, e| [a[0] + e.tp, a[1] + e.fp, a[2] + e.fn_]);
            let v = video_rates(&tracks)?;
            let got_v = [v.n_s, v.n_f, v.n_m];
            if counts != want_c || got_v != want_v {
                bad.push(format!("{} at {tau}: counts {counts:?} pairs {got_v:?}", s.name));
            }

            let [tp, fp, fn_] = want_c;
            let [ns, nf, nm] = want_v;
            let sc = f1_scores(&evals);
            let want_f1 = ratio(2 * tp, 2 * tp + fp + fn_);
            let report = evaluate(&gt, &pred, STRIPE_WIDTH)?;
            let (rf, rm, f1) = if tau == 0.5 {
                (report.rf_050, report.rm_050, report.f1_050)
            } else {
                (report.rf_080, report.rm_080, report.f1_080)
            };
            let pairs = ns + nf + nm;
            if sc.precision != ratio(tp, tp + fp)
                || sc.recall != ratio(tp, tp + fn_)
                || (sc.f1 - want_f1).abs() > 1e-15
                || (f1 - want_f1).abs() > 1e-15
                || rf != ratio(nf, pairs)
                || rm != ratio(nm, pairs)
            {
                bad.push(format!("{} at {tau}: rates differ", s.name));
            }
        }
    }
    Ok(outcome(
        bad.is_empty(),
        if bad.is_empty() { "5 scenarios at tau 0.5 and 0.8 match".into() } else { bad.join("; ") },
    ))
}

fn criterion_7(exp: &Experiment, elapsed: Duration) -> Outcome {
    let r = &exp.report;
    let (Some(ild), Some(full)) = (r.get("ild"), r.get("rvld")) else {
        return outcome(false, "report lacks ild or rvld");
    };
    let mut fails = Vec::new();
    if !(full.f1_050 >= ild.f1_050 + 0.02) {
        fails.push("F1 gain under 0.02");
    }
    if !(full.rf_050 <= 0.7 * ild.rf_050) {
        fails.push("R_F not reduced to 0.7x");
    }
    for (name, msg) in [("no_warp", "F1 below no_warp"), ("no_reuse", "F1 below no_reuse")] {
        match r.get(name) {
            Some(v) if full.f1_050 >= v.f1_050 => {}
            _ => fails.push(msg),
        }
    }
    if elapsed >= Duration::from_secs(3600) {
        fails.push("over 60 minutes");
    }
    let f = |name: &str| {
        r.get(name).map_or("n/a".to_string(), |e| format!("{name} F1 {:.4} R_F {:.4}", e.f1_050, e.rf_050))
    };
    let detail = format!(
        "{}; {}; {}; {}; {:.0}s{}",
        f("ild"),
        f("rvld"),
        f("no_warp"),
        f("no_reuse"),
        elapsed.as_secs_f64(),
        if fails.is_empty() { String::new() } else { format!(" [{}]", fails.join(", ")) }
    );
    outcome(fails.is_empty(), detail)
}

fn criterion_8(cfg: &RunConfig, first: &Experiment) -> Result<Outcome> {
    let again = experiment(cfg)?;
    let same_report = serde_json::to_vec(&again.report).unwrap() == serde_json::to_vec(&first.report).unwrap();
    let same_values = again.report == first.report;

    let t = &first.trained;
    let pld = &t.pld.iter().find(|(n, _)| n == "rvld").expect("rvld trained").1;
    let mut resumed_ok = 0;
    let mut resumed_bad = 0;
    for clip in first.test.iter().take(10) {
        let frames = &clip.frames;
        let whole = run_video(frames, &t.ild, Some(pld), &t.basis, &cfg.nms)?;
        for cut in [1, frames.len() / 2, frames.len() - 1] {
            let (o0, s0) = ild_step(&frames[0], &t.ild, &t.basis, &cfg.nms)?;
            let (head, state) = resume_video(s0, &frames[1..cut], &t.ild, pld, &t.basis, &cfg.nms)?;
            let bytes = state.to_checkpoint().to_bytes();
            let restored = FrameState::from_checkpoint(&rvld::io::Checkpoint::from_bytes(&bytes)?)?;
            let (tail, _) = resume_video(restored, &frames[cut..], &t.ild, pld, &t.basis, &cfg.nms)?;
            let joined: Vec<FrameOutput> = std::iter::once(o0).chain(head).chain(tail).collect();
            if joined == whole {
                resumed_ok += 1;
            } else {
                resumed_bad += 1;
            }
        }
    }
    Ok(outcome(
        same_report && same_values && resumed_bad == 0,
        format!("rerun report identical {same_report}; {resumed_ok} resumed videos identical, {resumed_bad} differ"),
    ))
}

fn report(n: usize, o: &Result<Outcome>, elapsed: Duration, failed: &mut bool) {
    match o {
        Ok(o) => {
            *failed |= !o.pass;
            println!(
                "criterion {n}: {} ({}; {:.1}s)",
                if o.pass { "PASS" } else { "FAIL" },
                o.detail,
                elapsed.as_secs_f64()
            );
        }
        Err(e) => {
            *failed = true;
            println!("criterion {n}: FAIL (error: {e})");
        }
    }
}

fn main() -> ExitCode {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| picked.is_empty() || picked.contains(&n);
    let mut failed = false;
    let quick: [(usize, fn() -> Result<Outcome>, u64); 6] = [
        (1, criterion_1, 120),
        (2, criterion_2, 30),
        (3, criterion_3, 600),
        (4, criterion_4, 600),
        (5, criterion_5, 600),
        (6, criterion_6, 600),
    ];
    for (n, f, budget) in quick {
        if !want(n) {
            continue;
        }
        let start = Instant::now();
        let mut o = f();
        let elapsed = start.elapsed();
        if let Ok(o) = &mut o {
            if elapsed > Duration::from_secs(budget) {
                o.pass = false;
                o.detail += &format!(", over the {budget}s budget");
            }
        }
        report(n, &o, elapsed, &mut failed);
    }
    if want(7) || want(8) {
        let cfg = RunConfig::default();
        let start = Instant::now();
        match experiment(&cfg) {
            Ok(exp) => {
                let elapsed = start.elapsed();
                println!("{}", exp.report.table().trim_end());
                if want(7) {
                    report(7, &Ok(criterion_7(&exp, elapsed)), elapsed, &mut failed);
                }
                if want(8) {
                    let start = Instant::now();
                    let o = criterion_8(&cfg, &exp);
                    report(8, &o, start.elapsed(), &mut failed);
                }
            }
            Err(e) => {
                for n in [7, 8].into_iter().filter(|&n| want(n)) {
                    report(
                        n,
                        &Err(rvld::Error::Config(format!("experiment failed: {e}"))),
                        start.elapsed(),
                        &mut failed,
                    );
                }
            }
        }
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
