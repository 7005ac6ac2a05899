//! Video feature extractor: a stack of 3D conv blocks with spatial stride 2,
//! plus the per-frame context vector and the pose regression head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels per block; the last entry is the feature-map depth,
    /// the one before it the context-vector depth.
    pub channels: Vec<usize>,
    pub kernel: (usize, usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            channels: vec![8, 16, 32, 64],
            kernel: (3, 3, 3),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::parameter(
                "backbone",
                "needs at least two blocks so a penultimate map exists",
            ));
        }
        if self.kernel.0 % 2 == 0 {
            return Err(Error::parameter("backbone", "temporal kernel must be odd"));
        }
        Ok(())
    }

    /// Channel count of the map entering the final block.
    pub fn context_dim(&self) -> usize {
        self.channels[self.channels.len() - 2]
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    fn block_in(&self, i: usize) -> usize {
        if i == 0 {
            self.in_channels
        } else {
            self.channels[i - 1]
        }
    }
}

pub fn init_backbone<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &BackboneConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let (kt, kh, kw) = cfg.kernel;
    for (i, &cout) in cfg.channels.iter().enumerate() {
        let cin = cfg.block_in(i);
        let fan_in = kt * kh * kw * cin;
        store.init_uniform(
            &format!("backbone.block{}.kernel", i),
            &[kt, kh, kw, cin, cout],
            fan_in,
            rng,
        )?;
        store.insert_values(
            &format!("backbone.block{}.bias", i),
            &[cout],
            vec![S::zero(); cout],
        )?;
    }
    Ok(())
}

pub struct BackboneOut<S: Scalar> {
    /// Final map, [T, H', W', C'].
    pub features: Tensor<S>,
    /// Map entering the final block, [T, h, w, C_pen].
    pub penultimate: Tensor<S>,
}

/// Runs the conv blocks on a [T, H, W, Cin] video. Spatial stride 2 per
/// block, temporal stride 1, half-kernel zero padding, ReLU after bias.
pub fn backbone_forward<S: Scalar>(
    tape: &Tape<S>,
    store: &ParamStore<S>,
    cfg: &BackboneConfig,
    video: &Tensor<S>,
) -> Result<BackboneOut<S>> {
    cfg.validate()?;
    if video.shape().len() != 4 || video.shape()[3] != cfg.in_channels {
        return Err(Error::parameter(
            "backbone",
            format!(
                "expected video [T,H,W,{}], got {:?}",
                cfg.in_channels,
                video.shape()
            ),
        ));
    }
    let (kt, kh, kw) = cfg.kernel;
    let pad = (kt / 2, kh / 2, kw / 2);
    let mut x = video.clone();
    let mut penultimate = None;
    for i in 0..cfg.channels.len() {
        if i == cfg.channels.len() - 1 {
            penultimate = Some(x.clone());
        }
        let k = store.get(&format!("backbone.block{}.kernel", i))?;
        let b = store.get(&format!("backbone.block{}.bias", i))?;
        let y = tape.conv3d(&x, k, 2, pad)?;
        x = tape.relu(&tape.bias_channels(&y, b)?);
    }
    Ok(BackboneOut {
        features: x,
        penultimate: penultimate.expect("at least two blocks"),
    })
}

/// Spatial mean of one frame of a [T, h, w, C] map.
pub fn context_vector<S: Scalar>(
    tape: &Tape<S>,
    map: &Tensor<S>,
    t: usize,
) -> Result<Tensor<S>> {
    let shp = map.shape();
    if shp.len() != 4 {
        return Err(Error::parameter(
            "context_vector",
            format!("expected rank-4 map, got {:?}", shp),
        ));
    }
    let (frames, h, w, c) = (shp[0], shp[1], shp[2], shp[3]);
    if t >= frames {
        return Err(Error::parameter(
            "context_vector",
            format!("frame {} out of range for {} frames", t, frames),
        ));
    }
    let frame = tape.slice(map, t * h * w * c, &[h, w, c])?;
    tape.mean_leading(&frame)
}

/// All per-frame context vectors of a map.
pub fn context_vectors<S: Scalar>(tape: &Tape<S>, map: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
    (0..map.shape()[0])
        .map(|t| context_vector(tape, map, t))
        .collect()
}

pub fn init_pose_head<S: Scalar>(
    store: &mut ParamStore<S>,
    context_dim: usize,
    joints: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.init_uniform("pose.w", &[2 * joints, context_dim], context_dim, rng)?;
    Ok(())
}

/// Per-frame keypoint estimate from a context vector, flattened [2J].
pub fn pose_head<S: Scalar>(
    tape: &Tape<S>,
    store: &ParamStore<S>,
    c_t: &Tensor<S>,
) -> Result<Tensor<S>> {
    tape.linear(store.get("pose.w")?, c_t, None)
}

pub fn init_gap_classifier<S: Scalar>(
    store: &mut ParamStore<S>,
    feature_dim: usize,
    classes: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.init_uniform("gap.w", &[classes, feature_dim], feature_dim, rng)?;
    Ok(())
}

/// Clip-level logits from the mean of the final feature map.
pub fn gap_logits<S: Scalar>(
    tape: &Tape<S>,
    store: &ParamStore<S>,
    features: &Tensor<S>,
) -> Result<Tensor<S>> {
    let pooled = tape.mean_leading(features)?;
    tape.linear(store.get("gap.w")?, &pooled, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::pseudo_random;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            in_channels: 2,
            channels: vec![3, 4],
            kernel: (3, 3, 3),
        }
    }

    fn build<S: Scalar>(cfg: &BackboneConfig, seed: u64) -> ParamStore<S> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_backbone(&mut store, cfg, &mut rng).unwrap();
        store
    }

    #[test]
    fn default_config_shapes() {
        let cfg = BackboneConfig::default();
        let store = build::<f64>(&cfg, 1);
        let tape = Tape::no_grad();
        let video = Tensor::from_vec(&[2, 64, 64, 3], pseudo_random(2 * 64 * 64 * 3, 5)).unwrap();
        let out = backbone_forward(&tape, &store, &cfg, &video).unwrap();
        assert_eq!(out.features.shape(), &[2, 4, 4, 64]);
        assert_eq!(out.penultimate.shape(), &[2, 8, 8, 32]);
    }

    #[test]
    fn zero_video_gives_zero_features() {
        let cfg = tiny_cfg();
        let store = build::<f64>(&cfg, 2);
        let tape = Tape::no_grad();
        let video = Tensor::zeros(&[3, 8, 8, 2]);
        let out = backbone_forward(&tape, &store, &cfg, &video).unwrap();
        assert!(out.features.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn temporal_receptive_field_is_one_frame_per_block_per_side() {
        let cfg = BackboneConfig {
            in_channels: 2,
            channels: vec![2, 3, 4, 5],
            kernel: (3, 3, 3),
        };
        let store = build::<f64>(&cfg, 3);
        let tape = Tape::no_grad();
        let t = 8;
        let base = pseudo_random(t * 16 * 16 * 2, 11);
        let mut bumped = base.clone();
        // Perturb the last frame only.
        let frame_len = 16 * 16 * 2;
        for v in &mut bumped[(t - 1) * frame_len..] {
            *v += 0.7;
        }
        let va = Tensor::from_vec(&[t, 16, 16, 2], base).unwrap();
        let vb = Tensor::from_vec(&[t, 16, 16, 2], bumped).unwrap();
        let oa = backbone_forward(&tape, &store, &cfg, &va).unwrap().features;
        let ob = backbone_forward(&tape, &store, &cfg, &vb).unwrap().features;
        let fl: usize = oa.shape()[1..].iter().product();
        // 4 blocks of temporal extent 3 reach 4 frames each way; frames more
        // than 4 steps from the edit are bit-identical, a close one moves.
        for fr in 0..3 {
            assert_eq!(
                oa.data()[fr * fl..(fr + 1) * fl],
                ob.data()[fr * fl..(fr + 1) * fl],
                "frame {} inside the unaffected zone changed",
                fr
            );
        }
        let last = (t - 1) * fl;
        assert_ne!(oa.data()[last..], ob.data()[last..]);
    }

    #[test]
    fn context_vector_matches_brute_force_mean() {
        let tape = Tape::no_grad();
        let const_map = Tensor::<f64>::filled(&[2, 3, 3, 4], 5.0);
        let c = context_vector(&tape, &const_map, 1).unwrap();
        assert!(c.data().iter().all(|v| *v == 5.0));

        let quad = Tensor::<f64>::from_vec(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(context_vector(&tape, &quad, 0).unwrap().data()[0], 2.5);

        for trial in 0..10 {
            let (t, h, w, c) = (3, 4, 5, 6);
            let map =
                Tensor::<f64>::from_vec(&[t, h, w, c], pseudo_random(t * h * w * c, 90 + trial))
                    .unwrap();
            let fr = 2usize;
            for ch in 0..c {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        acc += map.data()[((fr * h + y) * w + x) * c + ch];
                    }
                }
                let expect = acc / (h * w) as f64;
                let got = context_vector(&tape, &map, fr).unwrap().data()[ch];
                assert!((got - expect).abs() < 1e-12, "{} vs {}", got, expect);
            }
        }
        assert!(context_vector(&tape, &const_map, 2).is_err());
    }

    #[test]
    fn pose_head_one_hot_selects_a_context_channel() {
        let tape = Tape::no_grad();
        let mut store = ParamStore::<f64>::new();
        let mut w = vec![0.0; 4 * 3];
        w[0 * 3 + 2] = 1.0; // first output coordinate reads channel 2
        store.insert_values("pose.w", &[4, 3], w).unwrap();
        let c_t = Tensor::from_vec(&[3], vec![0.1, 0.2, 0.9]).unwrap();
        let y = pose_head(&tape, &store, &c_t).unwrap();
        assert_eq!(y.data()[0], 0.9);
        assert!(y.data()[1..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn every_default_block_matches_its_2d_kernel_on_constant_input() {
        // Constant-in-time input through an inflated kernel must reproduce
        // the per-frame 2D convolution away from the temporal boundary.
        let cfg = BackboneConfig::default();
        let tape = Tape::no_grad();
        for i in 0..cfg.channels.len() {
            let cin = cfg.block_in(i);
            let cout = cfg.channels[i];
            let k2d =
                Tensor::<f64>::from_vec(&[3, 3, cin, cout], pseudo_random(9 * cin * cout, 40 + i as u64))
                    .unwrap();
            let k3d = crate::conv::inflate_kernel(&k2d, 3).unwrap();
            let (h, w) = (6, 6);
            let frame = pseudo_random(h * w * cin, 60 + i as u64);
            let t = 5;
            let mut vid = Vec::with_capacity(t * frame.len());
            for _ in 0..t {
                vid.extend_from_slice(&frame);
            }
            let video = Tensor::from_vec(&[t, h, w, cin], vid).unwrap();
            let out3 = tape.conv3d(&video, &k3d, 2, (1, 1, 1)).unwrap();
            let image = Tensor::from_vec(&[1, h, w, cin], frame).unwrap();
            let k2d_as_3d = {
                let mut d = k2d.data().to_vec();
                d.shrink_to_fit();
                Tensor::from_vec(&[1, 3, 3, cin, cout], d).unwrap()
            };
            let out2 = tape.conv3d(&image, &k2d_as_3d, 2, (0, 1, 1)).unwrap();
            let per_frame: usize = out3.shape()[1..].iter().product();
            let mid = 2; // interior frame, full temporal support
            for (a, b) in out3.data()[mid * per_frame..(mid + 1) * per_frame]
                .iter()
                .zip(out2.data().iter())
            {
                assert!((a - b).abs() < 1e-10, "block {}: {} vs {}", i, a, b);
            }
        }
    }

    #[test]
    fn rejects_wrong_input_channels_and_single_block() {
        let cfg = tiny_cfg();
        let store = build::<f64>(&cfg, 4);
        let tape = Tape::no_grad();
        let bad = Tensor::<f64>::zeros(&[2, 8, 8, 3]);
        assert!(backbone_forward(&tape, &store, &cfg, &bad).is_err());
        let one = BackboneConfig {
            in_channels: 2,
            channels: vec![4],
            kernel: (3, 3, 3),
        };
        assert!(one.validate().is_err());
    }
}
