//! Motion between adjacent frames: a local-correlation cost volume, a small
//! strided head predicting a quarter-resolution field, bilinear upsampling,
//! backward warping and the flow loss.

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::nn::{run_stack, Conv};

/// Spatial reduction of the predicted field relative to the feature grid.
pub const FIELD_DOWNSAMPLE: usize = 4;

/// Raw volume: channel `(dy + s)·D + (dx + s)` at `x` holds
/// `prev(x + d) · cur(x)`.
pub fn correlate(g: &mut Graph, cur: Var, prev: Var, radius: usize) -> Result<Var> {
    g.local_correlation(cur, prev, radius)
}

/// Per-pixel softmax over displacements.
pub fn normalize_volume(g: &mut Graph, raw: Var) -> Result<Var> {
    g.softmax_channels(raw)
}

/// `[V, X̃]` through the strided stack; returns the down-sampled field.
pub fn motion_head(g: &mut Graph, layers: &[Conv], vars: &[Var], volume: Var, cur: Var) -> Result<Var> {
    let input = g.concat_channels(&[volume, cur])?;
    let f = run_stack(layers, g, vars, input)?;
    if g.value(f).chw()?.0 != 2 {
        return shape_err("motion head must output 2 channels");
    }
    Ok(f)
}

/// Bilinear resize to `h × w`, vectors rescaled to the new pixel size.
pub fn upsample_field(g: &mut Graph, field: Var, h: usize, w: usize) -> Result<Var> {
    g.bilinear_resize(field, h, w, true)
}

pub fn backward_warp(g: &mut Graph, map: Var, field: Var) -> Result<Var> {
    g.backward_warp(map, field)
}

/// Mean squared difference between the previous GT map warped by `field` and
/// the current GT map.
pub fn flow_loss(g: &mut Graph, prev_gt: &Tensor, cur_gt: &Tensor, field: Var) -> Result<Var> {
    if prev_gt.shape() != cur_gt.shape() {
        return shape_err(format!("GT maps {:?} and {:?} differ", prev_gt.shape(), cur_gt.shape()));
    }
    let prev = g.constant(prev_gt.clone());
    let warped = g.backward_warp(prev, field)?;
    g.mse(warped, cur_gt.data())
}

/// Raw cost volume of two fixed feature maps.
pub fn correlation_volume(cur: &Tensor, prev: &Tensor, radius: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let (c, p) = (g.constant(cur.clone()), g.constant(prev.clone()));
    let v = g.local_correlation(c, p, radius)?;
    Ok(g.value(v).clone())
}

/// Displacement `(dx, dy)` of the best-scoring channel at every pixel.
pub fn volume_argmax(volume: &Tensor, radius: usize) -> Result<Vec<(isize, isize)>> {
    let (d2, h, w) = volume.chw()?;
    let d = 2 * radius + 1;
    if d2 != d * d {
        return shape_err(format!("volume has {d2} channels, radius {radius} needs {}", d * d));
    }
    let hw = h * w;
    Ok((0..hw)
        .map(|p| {
            let mut best = 0;
            for ch in 1..d2 {
                if volume.data()[ch * hw + p] > volume.data()[best * hw + p] {
                    best = ch;
                }
            }
            ((best % d) as isize - radius as isize, (best / d) as isize - radius as isize)
        })
        .collect())
}

pub fn warp_tensor(map: &Tensor, field: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (m, f) = (g.constant(map.clone()), g.constant(field.clone()));
    let out = g.backward_warp(m, f)?;
    Ok(g.value(out).clone())
}

pub fn upsample_tensor(field: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.constant(field.clone());
    let out = g.bilinear_resize(f, h, w, true)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Random field with unit-length feature vectors, so each vector matches
    /// itself strictly better than any other.
    fn distinctive(shape: &[usize], seed: u64) -> Tensor {
        let mut t = random(shape, seed);
        let (c, h, w) = t.chw().unwrap();
        for p in 0..h * w {
            let n = (0..c).map(|ch| t.data()[ch * h * w + p].powi(2)).sum::<f64>().sqrt();
            (0..c).for_each(|ch| t.data_mut()[ch * h * w + p] /= n);
        }
        t
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

    #[test]
    fn identical_maps_peak_at_zero_and_shift_is_recovered() {
        let x = distinctive(&[8, 12, 16], 1);
        let v = correlation_volume(&x, &x, 3).unwrap();
        let am = volume_argmax(&v, 3).unwrap();
        for y in 3..9 {
            for xx in 3..13 {
                assert_eq!(am[y * 16 + xx], (0, 0));
            }
        }
        let prev = shifted(&x, 1, 0);
        let am = volume_argmax(&correlation_volume(&x, &prev, 3).unwrap(), 3).unwrap();
        for y in 3..9 {
            for xx in 3..13 {
                assert_eq!(am[y * 16 + xx], (1, 0));
            }
        }
    }

    #[test]
    fn constant_features_give_equal_scores() {
        let x = Tensor::full(&[4, 9, 9], 0.5);
        let v = correlation_volume(&x, &x, 2).unwrap();
        let p = 4 * 9 + 4;
        let first = v.data()[p];
        assert!((0..25).all(|c| v.data()[c * 81 + p] == first));
    }

    #[test]
    fn field_upsampling_rules() {
        let zero = Tensor::zeros(&[2, 4, 10]);
        assert!(upsample_tensor(&zero, 16, 40).unwrap().data().iter().all(|&v| v == 0.0));
        let mut c = Tensor::zeros(&[2, 4, 10]);
        c.data_mut()[..40].iter_mut().for_each(|v| *v = 0.5);
        c.data_mut()[40..].iter_mut().for_each(|v| *v = -0.25);
        let up = upsample_tensor(&c, 16, 40).unwrap();
        assert!(up.channel(0).iter().all(|&v| v == 2.0));
        assert!(up.channel(1).iter().all(|&v| v == -1.0));

        let mut ramp = Tensor::zeros(&[2, 1, 2]);
        ramp.data_mut()[1] = 1.0;
        let up = upsample_tensor(&ramp, 1, 4).unwrap();
        // Source positions of the output columns: -0.25, 0.25, 0.75, 1.25.
        let want = [0.0, 0.25, 0.75, 1.0].map(|v| v * 2.0);
        for (a, b) in up.channel(0).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_examples() {
        let m = random(&[3, 6, 7], 2);
        let zero = Tensor::zeros(&[2, 6, 7]);
        assert_eq!(warp_tensor(&m, &zero).unwrap(), m);

        let mut one = Tensor::zeros(&[2, 6, 7]);
        one.data_mut()[..42].iter_mut().for_each(|v| *v = 1.0);
        let out = warp_tensor(&m, &one).unwrap();
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..6 {
                    assert_eq!(out.at(c, y, x), m.at(c, y, x + 1));
                }
                assert_eq!(out.at(c, y, 6), 0.0);
            }
        }

        let ramp = Tensor::new(&[1, 1, 5], vec![0.0, 2.0, 4.0, 6.0, 8.0]).unwrap();
        let mut half = Tensor::zeros(&[2, 1, 5]);
        half.data_mut()[..5].iter_mut().for_each(|v| *v = 0.5);
        let out = warp_tensor(&ramp, &half).unwrap();
        for x in 0..4 {
            assert!((out.data()[x] - (ramp.data()[x] + ramp.data()[x + 1]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flow_loss_examples() {
        let a = random(&[1, 5, 6], 3);
        let zero = Tensor::zeros(&[2, 5, 6]);
        let loss = |prev: &Tensor, cur: &Tensor, f: &Tensor| {
            let mut g = Graph::new();
            let fv = g.constant(f.clone());
            let l = flow_loss(&mut g, prev, cur, fv).unwrap();
            g.value(l).data()[0]
        };
        assert_eq!(loss(&a, &a, &zero), 0.0);

        let mut b = Tensor::zeros(&[1, 5, 6]);
        for y in 0..5 {
            for x in 0..6 {
                b.data_mut()[y * 6 + x] = if x == 2 || x == 3 { 1.0 } else { 0.0 };
            }
        }
        let prev = shifted(&b, 1, 0);
        let mut f = Tensor::zeros(&[2, 5, 6]);
        f.data_mut()[..30].iter_mut().for_each(|v| *v = 1.0);
        assert_eq!(loss(&prev, &b, &f), 0.0);

        let c = random(&[1, 5, 6], 4);
        let want: f64 = a.data().iter().zip(c.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 30.0;
        assert!((loss(&a, &c, &zero) - want).abs() < 1e-15);
    }
}
