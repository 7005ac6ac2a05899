//! 3D convolution over [T, H, W, C] video tensors.
//!
//! Temporal stride is always 1 and temporal padding of (kT-1)/2 preserves the
//! frame count, so per-frame feature maps stay aligned with input frames.
//! Spatial stride and padding are free. Channels sit on the fastest axis,
//! which keeps the inner products contiguous.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Replicates a 2D kernel [kH, kW, Cin, Cout] across kT temporal slices,
/// dividing by kT so a constant-in-time input yields the 2D response.
pub fn inflate_kernel<S: Scalar>(k2d: &Tensor<S>, kt: usize) -> Result<Tensor<S>> {
    if k2d.shape().len() != 4 {
        return Err(Error::parameter(
            "inflate_kernel",
            format!("expects [kH,kW,Cin,Cout], got shape {:?}", k2d.shape()),
        ));
    }
    if kt == 0 || kt % 2 == 0 {
        return Err(Error::parameter(
            "inflate_kernel",
            format!("temporal extent must be odd and positive, got {}", kt),
        ));
    }
    let inv = S::one() / S::from_usize(kt).expect("kt fits scalar");
    let slice: Vec<S> = k2d.data().iter().map(|v| *v * inv).collect();
    let mut data = Vec::with_capacity(slice.len() * kt);
    for _ in 0..kt {
        data.extend_from_slice(&slice);
    }
    let mut shape = vec![kt];
    shape.extend_from_slice(k2d.shape());
    Tensor::from_vec(&shape, data)
}

struct ConvDims {
    t: usize,
    h: usize,
    w: usize,
    cin: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    to: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pt: usize,
    ph: usize,
    pw: usize,
}

fn conv_dims<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: usize,
    pad: (usize, usize, usize),
) -> Result<ConvDims> {
    if input.shape().len() != 4 || kernel.shape().len() != 5 {
        return Err(Error::shape("conv3d", input.shape(), kernel.shape()));
    }
    let (t, h, w, cin) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (kt, kh, kw, kcin, cout) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
        kernel.shape()[4],
    );
    if kcin != cin {
        return Err(Error::shape("conv3d", input.shape(), kernel.shape()));
    }
    if kt % 2 == 0 {
        return Err(Error::parameter(
            "conv3d",
            format!("temporal extent must be odd to preserve frame alignment, got {}", kt),
        ));
    }
    if stride == 0 {
        return Err(Error::parameter("conv3d", "spatial stride must be >= 1"));
    }
    let (pt, ph, pw) = pad;
    if t + 2 * pt < kt || h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(Error::parameter(
            "conv3d",
            format!(
                "kernel {:?} larger than padded input {:?}",
                kernel.shape(),
                input.shape()
            ),
        ));
    }
    Ok(ConvDims {
        t,
        h,
        w,
        cin,
        kt,
        kh,
        kw,
        cout,
        to: t + 2 * pt - kt + 1,
        ho: (h + 2 * ph - kh) / stride + 1,
        wo: (w + 2 * pw - kw) / stride + 1,
        stride,
        pt,
        ph,
        pw,
    })
}

// Tap ranges that keep an input coordinate in bounds: for output position o,
// valid k satisfy 0 <= o*stride + k - pad < extent.
fn tap_range(o: usize, stride: usize, pad: usize, k: usize, extent: usize) -> (usize, usize) {
    let base = o * stride;
    let lo = pad.saturating_sub(base);
    let hi = k.min((extent + pad).saturating_sub(base));
    (lo, hi.max(lo))
}

fn conv_forward<S: Scalar>(id: &[S], kd: &[S], d: &ConvDims) -> Vec<S> {
    let mut out = vec![S::zero(); d.to * d.ho * d.wo * d.cout];
    let mut acc = vec![S::zero(); d.cout];
    for to in 0..d.to {
        let (kt_lo, kt_hi) = tap_range(to, 1, d.pt, d.kt, d.t);
        for ho in 0..d.ho {
            let (kh_lo, kh_hi) = tap_range(ho, d.stride, d.ph, d.kh, d.h);
            for wo in 0..d.wo {
                let (kw_lo, kw_hi) = tap_range(wo, d.stride, d.pw, d.kw, d.w);
                acc.iter_mut().for_each(|v| *v = S::zero());
                for kt in kt_lo..kt_hi {
                    let ti = to + kt - d.pt;
                    for kh in kh_lo..kh_hi {
                        let hi = ho * d.stride + kh - d.ph;
                        for kw in kw_lo..kw_hi {
                            let wi = wo * d.stride + kw - d.pw;
                            let ibase = (((ti * d.h) + hi) * d.w + wi) * d.cin;
                            let kbase = ((((kt * d.kh) + kh) * d.kw + kw) * d.cin) * d.cout;
                            for ci in 0..d.cin {
                                let x = id[ibase + ci];
                                let krow = &kd[kbase + ci * d.cout..kbase + (ci + 1) * d.cout];
                                crate::ops::axpy(&mut acc, x, krow);
                            }
                        }
                    }
                }
                let obase = (((to * d.ho) + ho) * d.wo + wo) * d.cout;
                out[obase..obase + d.cout].copy_from_slice(&acc);
            }
        }
    }
    out
}

fn conv_backward<S: Scalar>(
    id: &[S],
    kd: &[S],
    g: &[S],
    d: &ConvDims,
    need_input: bool,
    need_kernel: bool,
) -> (Vec<S>, Vec<S>) {
    let mut din = vec![S::zero(); if need_input { id.len() } else { 0 }];
    let mut dker = vec![S::zero(); if need_kernel { kd.len() } else { 0 }];
    for to in 0..d.to {
        let (kt_lo, kt_hi) = tap_range(to, 1, d.pt, d.kt, d.t);
        for ho in 0..d.ho {
            let (kh_lo, kh_hi) = tap_range(ho, d.stride, d.ph, d.kh, d.h);
            for wo in 0..d.wo {
                let (kw_lo, kw_hi) = tap_range(wo, d.stride, d.pw, d.kw, d.w);
                let obase = (((to * d.ho) + ho) * d.wo + wo) * d.cout;
                let grow = &g[obase..obase + d.cout];
                for kt in kt_lo..kt_hi {
                    let ti = to + kt - d.pt;
                    for kh in kh_lo..kh_hi {
                        let hi = ho * d.stride + kh - d.ph;
                        for kw in kw_lo..kw_hi {
                            let wi = wo * d.stride + kw - d.pw;
                            let ibase = (((ti * d.h) + hi) * d.w + wi) * d.cin;
                            let kbase = ((((kt * d.kh) + kh) * d.kw + kw) * d.cin) * d.cout;
                            for ci in 0..d.cin {
                                let krange = kbase + ci * d.cout..kbase + (ci + 1) * d.cout;
                                if need_input {
                                    din[ibase + ci] =
                                        din[ibase + ci] + crate::ops::dot(&kd[krange.clone()], grow);
                                }
                                if need_kernel {
                                    crate::ops::axpy(&mut dker[krange], id[ibase + ci], grow);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (din, dker)
}

impl<S: Scalar> Tape<S> {
    /// 3D convolution: input [T,H,W,Cin] * kernel [kT,kH,kW,Cin,Cout] with
    /// spatial stride and zero padding (pt, ph, pw). Temporal stride is 1;
    /// kT must be odd.
    pub fn conv3d(
        &self,
        input: &Tensor<S>,
        kernel: &Tensor<S>,
        stride: usize,
        pad: (usize, usize, usize),
    ) -> Result<Tensor<S>> {
        let d = conv_dims(input, kernel, stride, pad)?;
        let data = conv_forward(input.data(), kernel.data(), &d);
        let (out, track) = {
            let out = Tensor::from_vec(&[d.to, d.ho, d.wo, d.cout], data)?;
            let track = self.track(&[input, kernel]);
            let mut out = out;
            out.set_requires_grad(track);
            (out, track)
        };
        if track {
            let (input, kernel, o) = (input.clone(), kernel.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    let need_i = input.requires_grad();
                    let need_k = kernel.requires_grad();
                    let (din, dker) =
                        conv_backward(input.data(), kernel.data(), &g, &d, need_i, need_k);
                    if need_i {
                        input.accumulate_grad(&din);
                    }
                    if need_k {
                        kernel.accumulate_grad(&dker);
                    }
                }
            });
        }
        Ok(out)
    }
}
