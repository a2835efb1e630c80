//! WebAssembly entry points for the browser demo. Each function returns a
//! JSON string so the page needs no bindings beyond strings and byte arrays.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use rvld::completion::{complete_lanes, CompletionConfig};
use rvld::eigenlane::{build_basis, mean_reconstruction_error};
use rvld::geometry::LanePolyline;
use rvld::io::{render_overlay, tensor_to_rgb};
use rvld::synth::{generate_clip, Profile, SceneConfig, SynthClip};

fn profile(name: &str) -> Result<Profile, String> {
    match name {
        "easy" => Ok(Profile::Easy),
        "occluded" => Ok(Profile::Occluded),
        other => Err(format!("unknown profile {other}")),
    }
}

fn clip(name: &str, seed: u64) -> Result<SynthClip, String> {
    let cfg = SceneConfig { seed, ..SceneConfig::profile(profile(name)?) };
    generate_clip(&cfg).map_err(|e| e.to_string())
}

fn lanes_of(clips: &[SynthClip]) -> Vec<LanePolyline> {
    clips.iter().flat_map(|c| c.gt.iter().flatten().map(|g| g.lane.clone())).collect()
}

#[derive(Serialize)]
struct Frame {
    width: usize,
    height: usize,
    frames: usize,
    /// RGBA bytes, row-major.
    rgba: Vec<u8>,
    lanes: usize,
    occluded_lanes: usize,
}

/// Render frame `t` of a synthetic clip, optionally with its GT lanes drawn.
pub fn frame(profile_name: &str, seed: u64, t: usize, show_gt: bool) -> Result<String, String> {
    let c = clip(profile_name, seed)?;
    let t = t.min(c.frames.len() - 1);
    let gt: Vec<LanePolyline> = c.gt[t].iter().map(|g| g.lane.clone()).collect();
    let img = if show_gt {
        render_overlay(&c.frames[t], &[], Some(&gt), &c.grid, 1.0, None)
    } else {
        tensor_to_rgb(&c.frames[t])
    }
    .map_err(|e| e.to_string())?;
    let rgba = img.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect();
    let occluded_lanes = c.occluders.iter().filter(|o| (o.start..o.start + o.frames).contains(&t)).count();
    let f = Frame {
        width: c.grid.width,
        height: c.grid.height,
        frames: c.frames.len(),
        rgba,
        lanes: gt.len(),
        occluded_lanes,
    };
    serde_json::to_string(&f).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Reconstruction {
    ys: Vec<f64>,
    original: Vec<Vec<f64>>,
    reconstructed: Vec<Vec<f64>>,
    /// Mean per-point error for M = 1..=N.
    errors: Vec<f64>,
}

/// Fit an M-dimensional eigenlane basis on a few clips and reconstruct some
/// held-out lanes with it.
pub fn eigenlanes(seed: u64, m: usize) -> Result<String, String> {
    let train: Vec<SynthClip> = (0..6).map(|i| clip("easy", seed * 100 + i)).collect::<Result<_, _>>()?;
    let held = clip("easy", seed * 100 + 99)?;
    let lanes = lanes_of(&train);
    let grid = train[0].grid;
    let errors = (1..=grid.n)
        .map(|k| build_basis(&lanes, k, &grid).and_then(|b| mean_reconstruction_error(&b, &lanes)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let basis = build_basis(&lanes, m.clamp(1, grid.n), &grid).map_err(|e| e.to_string())?;
    let original: Vec<LanePolyline> = held.gt[0].iter().map(|g| g.lane.clone()).collect();
    let reconstructed = original
        .iter()
        .map(|l| basis.reconstruct(l).map(|r| r.xs))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let r = Reconstruction {
        ys: (0..grid.n).map(|k| grid.row_y(k)).collect(),
        original: original.into_iter().map(|l| l.xs).collect(),
        reconstructed,
        errors,
    };
    serde_json::to_string(&r).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Repair {
    ys: Vec<f64>,
    truth: Vec<Vec<f64>>,
    observed: Vec<Vec<bool>>,
    completed: Vec<Vec<f64>>,
    hole_error: f64,
    iterations: usize,
}

/// Hide a fraction of the points of every lane in a clip and fill them back
/// in by low-rank completion.
pub fn completion(seed: u64, hidden: f64, rank: usize) -> Result<String, String> {
    let c = clip("easy", seed)?;
    let truth = lanes_of(std::slice::from_ref(&c));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let hidden = hidden.clamp(0.0, 0.9);
    let damaged: Vec<LanePolyline> = truth
        .iter()
        .map(|l| {
            let mut valid: Vec<bool> = (0..l.len()).map(|_| !rng.gen_bool(hidden)).collect();
            // Two points keep every lane anchored.
            valid[0] = true;
            valid[l.len() - 1] = true;
            LanePolyline::new(l.xs.clone(), valid).expect("same length")
        })
        .collect();
    let cfg = CompletionConfig { rank: rank.max(1), ..CompletionConfig::default() };
    let (done, info) = complete_lanes(&damaged, c.grid.width as f64, &cfg).map_err(|e| e.to_string())?;
    let mut err = 0.0;
    let mut holes = 0;
    for ((t, d), o) in truth.iter().zip(&damaged).zip(&done) {
        for i in (0..t.len()).filter(|&i| !d.valid[i]) {
            err += (t.xs[i] - o.xs[i]).abs();
            holes += 1;
        }
    }
    let r = Repair {
        ys: (0..c.grid.n).map(|k| c.grid.row_y(k)).collect(),
        truth: truth.iter().map(|l| l.xs.clone()).collect(),
        observed: damaged.iter().map(|l| l.valid.clone()).collect(),
        completed: done.into_iter().map(|l| l.xs).collect(),
        hole_error: if holes == 0 { 0.0 } else { err / holes as f64 },
        iterations: info.iterations,
    };
    serde_json::to_string(&r).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = renderFrame)]
pub fn render_frame(profile: &str, seed: u32, t: u32, show_gt: bool) -> Result<String, JsError> {
    frame(profile, seed as u64, t as usize, show_gt).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = eigenlaneReconstruction)]
pub fn eigenlane_reconstruction(seed: u32, m: u32) -> Result<String, JsError> {
    eigenlanes(seed as u64, m as usize).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = completeLanes)]
pub fn complete(seed: u32, hidden: f64, rank: u32) -> Result<String, JsError> {
    completion(seed as u64, hidden, rank as usize).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_has_one_rgba_quad_per_pixel() {
        let v: serde_json::Value = serde_json::from_str(&frame("occluded", 3, 4, true).unwrap()).unwrap();
        let (w, h) = (v["width"].as_u64().unwrap(), v["height"].as_u64().unwrap());
        assert_eq!(v["rgba"].as_array().unwrap().len() as u64, w * h * 4);
        assert!(frame("foggy", 3, 0, false).is_err());
    }

    #[test]
    fn reconstruction_error_falls_with_m() {
        let v: serde_json::Value = serde_json::from_str(&eigenlanes(1, 3).unwrap()).unwrap();
        let errs: Vec<f64> = v["errors"].as_array().unwrap().iter().map(|e| e.as_f64().unwrap()).collect();
        assert!(errs[2] < 0.5 && errs[0] > errs[2]);
    }

    #[test]
    fn completion_fills_holes() {
        let v: serde_json::Value = serde_json::from_str(&completion(2, 0.4, 3).unwrap()).unwrap();
        assert!(v["hole_error"].as_f64().unwrap() < 0.5, "{v}");
    }
}
