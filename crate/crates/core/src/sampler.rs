//! Differentiable glimpse extraction: an affine sample grid driven by
//! center/scale parameters, and bilinear interpolation of a feature map at
//! those grid points. Both stages propagate gradients, so the loss can move
//! glimpse locations.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Regular lattice coordinate over [-1, 1]; a size-1 axis collapses to 0.
fn lattice<S: Scalar>(i: usize, n: usize) -> S {
    if n <= 1 {
        S::zero()
    } else {
        S::lit(-1.0) + S::lit(2.0) * S::from_usize(i).expect("axis fits scalar")
            / S::from_usize(n - 1).expect("axis fits scalar")
    }
}

impl<S: Scalar> Tape<S> {
    /// Source sample coordinates for a glimpse described by l = [x, y, s_x, s_y]:
    /// xs = s_x * xt + x, ys = s_y * yt + y over a target lattice spanning
    /// [-1, 1] in both axes. Output [out_h, out_w, 2], last axis (xs, ys).
    pub fn affine_grid(&self, l: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
        if l.shape() != [4] {
            return Err(Error::parameter(
                "affine_grid",
                format!("glimpse params must be [4], got {:?}", l.shape()),
            ));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::parameter("affine_grid", "empty output grid"));
        }
        let (x, y, sx, sy) = (l.data()[0], l.data()[1], l.data()[2], l.data()[3]);
        let mut data = Vec::with_capacity(out_h * out_w * 2);
        for i in 0..out_h {
            let yt = lattice::<S>(i, out_h);
            for j in 0..out_w {
                let xt = lattice::<S>(j, out_w);
                data.push(sx * xt + x);
                data.push(sy * yt + y);
            }
        }
        let (out, track) = self.finish(&[l], Tensor::from_vec(&[out_h, out_w, 2], data)?);
        if track {
            let (l, o) = (l.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    let mut dl = [S::zero(); 4];
                    let mut p = 0;
                    for i in 0..out_h {
                        let yt = lattice::<S>(i, out_h);
                        for j in 0..out_w {
                            let xt = lattice::<S>(j, out_w);
                            dl[0] = dl[0] + g[p];
                            dl[2] = dl[2] + g[p] * xt;
                            dl[1] = dl[1] + g[p + 1];
                            dl[3] = dl[3] + g[p + 1] * yt;
                            p += 2;
                        }
                    }
                    l.accumulate_grad(&dl);
                }
            });
        }
        Ok(out)
    }

    /// Samples a [H, W, C] map at normalized coordinates [oh, ow, 2].
    /// Pixel position p = (c + 1)/2 * (N - 1); each sample is the hat-kernel
    /// blend of its up-to-four in-range neighbors, so points drifting off the
    /// map fade to zero instead of clamping.
    pub fn bilinear_sample(&self, map: &Tensor<S>, coords: &Tensor<S>) -> Result<Tensor<S>> {
        if map.shape().len() != 3 {
            return Err(Error::parameter(
                "bilinear_sample",
                format!("map must be [H,W,C], got {:?}", map.shape()),
            ));
        }
        if coords.shape().len() != 3 || coords.shape()[2] != 2 {
            return Err(Error::parameter(
                "bilinear_sample",
                format!("coords must be [h,w,2], got {:?}", coords.shape()),
            ));
        }
        let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let (oh, ow) = (coords.shape()[0], coords.shape()[1]);
        let forward = |md: &[S], cd: &[S]| -> Vec<S> {
            let mut out = vec![S::zero(); oh * ow * c];
            for p in 0..oh * ow {
                let px = to_pixel(cd[2 * p], w);
                let py = to_pixel(cd[2 * p + 1], h);
                let o = &mut out[p * c..(p + 1) * c];
                for (iy, wy) in neighbors(py, h) {
                    for (ix, wx) in neighbors(px, w) {
                        let base = (iy * w + ix) * c;
                        let wgt = wy * wx;
                        for ch in 0..c {
                            o[ch] = o[ch] + md[base + ch] * wgt;
                        }
                    }
                }
            }
            out
        };
        let data = forward(map.data(), coords.data());
        let (out, track) = self.finish(&[map, coords], Tensor::from_vec(&[oh, ow, c], data)?);
        if track {
            let (map, coords, o) = (map.clone(), coords.clone(), out.clone());
            self.push_node(&out, move || {
                let g = match o.grad() {
                    Some(g) => g,
                    None => return,
                };
                let md = map.data();
                let cd = coords.data();
                let mut dmap = vec![S::zero(); md.len()];
                let mut dcoords = vec![S::zero(); cd.len()];
                let half_w = S::lit(0.5) * S::from_usize(w.saturating_sub(1)).expect("fits");
                let half_h = S::lit(0.5) * S::from_usize(h.saturating_sub(1)).expect("fits");
                for p in 0..oh * ow {
                    let px = to_pixel(cd[2 * p], w);
                    let py = to_pixel(cd[2 * p + 1], h);
                    let go = &g[p * c..(p + 1) * c];
                    let mut dpx = S::zero();
                    let mut dpy = S::zero();
                    for (iy, wy, dwy) in neighbors_d(py, h) {
                        for (ix, wx, dwx) in neighbors_d(px, w) {
                            let base = (iy * w + ix) * c;
                            for ch in 0..c {
                                let gv = go[ch];
                                dmap[base + ch] = dmap[base + ch] + gv * wy * wx;
                                dpx = dpx + gv * wy * dwx * md[base + ch];
                                dpy = dpy + gv * dwy * wx * md[base + ch];
                            }
                        }
                    }
                    // d pixel / d normalized = (N - 1) / 2
                    dcoords[2 * p] = dpx * half_w;
                    dcoords[2 * p + 1] = dpy * half_h;
                }
                map.accumulate_grad(&dmap);
                coords.accumulate_grad(&dcoords);
            });
        }
        Ok(out)
    }
}

fn to_pixel<S: Scalar>(norm: S, n: usize) -> S {
    (norm + S::one()) * S::lit(0.5) * S::from_usize(n.saturating_sub(1)).expect("fits scalar")
}

/// In-range integer neighbors of pixel position p with their hat weights.
fn neighbors<S: Scalar>(p: S, n: usize) -> impl Iterator<Item = (usize, S)> {
    neighbors_d(p, n).map(|(i, w, _)| (i, w))
}

/// Neighbors with weight and d(weight)/d(p). The floor neighbor's weight
/// 1 - (p - i0) falls with p, the ceil neighbor's rises.
fn neighbors_d<S: Scalar>(p: S, n: usize) -> impl Iterator<Item = (usize, S, S)> {
    let i0 = p.floor();
    let frac = p - i0;
    let lo = (i0.to_f64_lossy(), S::one() - frac, -S::one());
    let hi = (i0.to_f64_lossy() + 1.0, frac, S::one());
    [lo, hi].into_iter().filter_map(move |(idx, wgt, dw)| {
        if idx >= 0.0 && idx < n as f64 {
            Some((idx as usize, wgt, dw))
        } else {
            None
        }
    })
}
