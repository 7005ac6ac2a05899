//! Full recognizer assembly: backbone, per-frame glimpse production under
//! the selected variant, worker recurrence, and the classification heads.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{
    extract_glimpse, glimpse_frame, init_attention, init_loc_embed, AttentionConfig, GlimpseOut,
};
use crate::backbone::{
    backbone_forward, context_vector, gap_logits, init_backbone, init_gap_classifier,
    init_pose_head, pose_head, BackboneConfig,
};
use crate::error::{Error, Result};
use crate::gru::{gru_cell, gru_from_store, init_gru};
use crate::loss::LossWeights;
use crate::memory::MemoryBank;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::workers::{classify, init_workers, process_frame, zero_worker_states, WorkerConfig};

/// Model wiring selector. The two loss-knockout variants share the full
/// wiring and differ only in the weights they train under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Global,
    Full,
    NoPoseLoss,
    NoPlacementLoss,
    SummedGru,
    RandomLocations,
    SaliencyLocations,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Global,
        Variant::Full,
        Variant::NoPoseLoss,
        Variant::NoPlacementLoss,
        Variant::SummedGru,
        Variant::RandomLocations,
        Variant::SaliencyLocations,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Global => "global",
            Variant::Full => "glimpse_full",
            Variant::NoPoseLoss => "glimpse_no_LP",
            Variant::NoPlacementLoss => "glimpse_no_LG",
            Variant::SummedGru => "sum_glimpses_gru",
            Variant::RandomLocations => "random_glimpses",
            Variant::SaliencyLocations => "saliency_glimpses",
        }
    }

    pub fn uses_glimpses(&self) -> bool {
        !matches!(self, Variant::Global)
    }

    /// Whether locations come from the recurrent proposal loop.
    pub fn recurrent_attention(&self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::NoPoseLoss | Variant::NoPlacementLoss | Variant::SummedGru
        )
    }

    pub fn uses_workers(&self) -> bool {
        matches!(
            self,
            Variant::Full
                | Variant::NoPoseLoss
                | Variant::NoPlacementLoss
                | Variant::RandomLocations
                | Variant::SaliencyLocations
        )
    }

    /// Training weights after this variant's knockouts. The pooled baseline
    /// optimizes classification alone; the glimpse-loss terms have no
    /// meaning without locations.
    pub fn apply_to_weights(&self, base: LossWeights) -> LossWeights {
        match self {
            Variant::Global => LossWeights {
                pose: 0.0,
                spread: 0.0,
                anchor: 0.0,
                ..base
            },
            Variant::NoPoseLoss => LossWeights { pose: 0.0, ..base },
            Variant::NoPlacementLoss => LossWeights {
                spread: 0.0,
                anchor: 0.0,
                ..base
            },
            _ => base,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Variant::ALL.iter().map(|v| v.as_str()).collect();
                Error::parameter(
                    "variant",
                    format!("unknown variant {:?}, expected one of {}", s, known.join(", ")),
                )
            })
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    pub workers: WorkerConfig,
    pub classes: usize,
    pub joints: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            attention: AttentionConfig::default(),
            workers: WorkerConfig::default(),
            classes: 5,
            joints: 2,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.classes < 2 {
            return Err(Error::parameter("model", "need at least two classes"));
        }
        if self.joints == 0 {
            return Err(Error::parameter("model", "need at least one annotated point"));
        }
        if self.variant.uses_glimpses() {
            self.attention.validate()?;
        }
        if self.variant.uses_workers() {
            self.workers.validate(self.attention.glimpses)?;
        }
        Ok(())
    }
}

/// Registers every parameter the variant trains. Creation order is fixed so
/// a seeded build is reproducible.
pub fn init_model<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    init_backbone(store, &cfg.backbone, rng)?;
    init_pose_head(store, cfg.backbone.context_dim(), cfg.joints, rng)?;
    init_gap_classifier(store, cfg.backbone.feature_dim(), cfg.classes, rng)?;
    let feat = cfg.backbone.feature_dim();
    let ctx = cfg.backbone.context_dim();
    match cfg.variant {
        Variant::Global => {}
        Variant::Full | Variant::NoPoseLoss | Variant::NoPlacementLoss => {
            init_attention(store, &cfg.attention, feat, ctx, cfg.workers.hidden, rng)?;
            init_workers(store, &cfg.workers, feat, cfg.classes, rng)?;
        }
        Variant::SummedGru => {
            init_attention(store, &cfg.attention, feat, ctx, cfg.workers.hidden, rng)?;
            init_gru(store, "sumgru.gru", cfg.workers.hidden, feat, rng)?;
            store.init_uniform(
                "sumgru.cls.w",
                &[cfg.classes, cfg.workers.hidden],
                cfg.workers.hidden,
                rng,
            )?;
        }
        Variant::RandomLocations => {
            init_loc_embed(store, &cfg.attention, feat, rng)?;
            init_workers(store, &cfg.workers, feat, cfg.classes, rng)?;
        }
        Variant::SaliencyLocations => {
            init_loc_embed(store, &cfg.attention, feat, rng)?;
            store.init_uniform("saliency.w", &[4 * cfg.attention.glimpses, ctx], ctx, rng)?;
            init_workers(store, &cfg.workers, feat, cfg.classes, rng)?;
        }
    }
    Ok(())
}

/// Mean-pooled classification path: the whole backbone output averaged into
/// one vector. Used by the first training stage and the pooled baseline.
pub struct PooledForward<S: Scalar> {
    pub logits: Tensor<S>,
    pub probs: Tensor<S>,
    pub pose: Vec<Tensor<S>>,
}

pub fn forward_pooled<S: Scalar>(
    tape: &Tape<S>,
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    video: &Tensor<S>,
) -> Result<PooledForward<S>> {
    let out = backbone_forward(tape, store, &cfg.backbone, video)?;
    let logits = gap_logits(tape, store, &out.features)?;
    let probs = tape.softmax_temp(&logits, S::one())?;
    let t_len = video.shape()[0];
    let mut pose = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let c_t = context_vector(tape, &out.penultimate, t)?;
        pose.push(pose_head(tape, store, &c_t)?);
    }
    Ok(PooledForward { logits, probs, pose })
}

pub struct GlimpseForward<S: Scalar> {
    pub logits: Tensor<S>,
    pub probs: Tensor<S>,
    pub pose: Vec<Tensor<S>>,
    /// Per frame, per glimpse location [x, y, sx, sy].
    pub locations: Vec<Vec<Tensor<S>>>,
    /// Per frame, per glimpse fused feature vector, as fed to the workers.
    /// The distance metric is pretrained from these.
    pub glimpse_features: Vec<Vec<Tensor<S>>>,
}

/// Glimpse-pipeline classification path. `rng` drives the random-location
/// variant and is ignored by every other one; labels and annotations are
/// never consulted here.
pub fn forward_glimpse<S: Scalar>(
    tape: &Tape<S>,
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    video: &Tensor<S>,
    mut rng: Option<&mut dyn rand::RngCore>,
) -> Result<GlimpseForward<S>> {
    if !cfg.variant.uses_glimpses() {
        return Err(Error::parameter(
            "forward",
            "the pooled variant has no glimpse path",
        ));
    }
    let acfg = &cfg.attention;
    let wcfg = &cfg.workers;
    let out = backbone_forward(tape, store, &cfg.backbone, video)?;
    let fshape = out.features.shape().to_vec();
    let (t_len, fh, fw, fc) = (fshape[0], fshape[1], fshape[2], fshape[3]);

    let mut attn_h = Tensor::zeros(&[acfg.hidden]);
    let mut z_prev = Tensor::zeros(&[fc]);
    let mut r_prev = Tensor::zeros(&[wcfg.hidden]);
    let mut worker_states = zero_worker_states::<S>(wcfg);
    let mut bank = MemoryBank::new(wcfg.capacity)?;
    let use_workers = cfg.variant.uses_workers();

    let mut pose = Vec::with_capacity(t_len);
    let mut locations = Vec::with_capacity(t_len);
    let mut glimpse_features = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let c_t = context_vector(tape, &out.penultimate, t)?;
        let z_t = tape.slice(&out.features, t * fh * fw * fc, &[fh, fw, fc])?;

        let gs: Vec<GlimpseOut<S>> = if cfg.variant.recurrent_attention() {
            let (h_new, z_last, gs) =
                glimpse_frame(tape, store, acfg, &attn_h, &z_prev, &r_prev, &z_t, &c_t)?;
            attn_h = h_new;
            z_prev = z_last;
            gs
        } else if cfg.variant == Variant::RandomLocations {
            let rng = rng.as_deref_mut().ok_or_else(|| {
                Error::parameter("forward", "random locations need a sampling rng")
            })?;
            let mut gs = Vec::with_capacity(acfg.glimpses);
            for _ in 0..acfg.glimpses {
                let l = random_location::<S>(acfg, rng);
                gs.push(extract_glimpse(tape, store, acfg, &z_t, &l)?);
            }
            gs
        } else {
            let raw_all = tape.linear(store.get("saliency.w")?, &c_t, None)?;
            let mut gs = Vec::with_capacity(acfg.glimpses);
            for g in 0..acfg.glimpses {
                let raw = tape.slice(&raw_all, 4 * g, &[4])?;
                let l = tape.squash_glimpse(
                    &raw,
                    S::lit(acfg.s_min),
                    S::lit(acfg.s_max),
                    acfg.tie_scales,
                )?;
                gs.push(extract_glimpse(tape, store, acfg, &z_t, &l)?);
            }
            gs
        };

        if use_workers {
            let (next, r_t, _) =
                process_frame(tape, store, wcfg, &gs, &mut bank, &worker_states, t + 1)?;
            worker_states = next;
            r_prev = r_t;
        } else {
            let vs: Vec<&Tensor<S>> = gs.iter().map(|g| &g.v).collect();
            let v_sum = tape.add_many(&vs)?;
            let gru = gru_from_store(store, "sumgru.gru")?;
            r_prev = gru_cell(tape, &r_prev, &v_sum, &gru)?;
        }

        pose.push(pose_head(tape, store, &c_t)?);
        let (vs, ls): (Vec<Tensor<S>>, Vec<Tensor<S>>) =
            gs.into_iter().map(|g| (g.v, g.l)).unzip();
        glimpse_features.push(vs);
        locations.push(ls);
    }

    let (logits, probs) = if use_workers {
        classify(tape, store, wcfg, &worker_states)?
    } else {
        let logits = tape.linear(store.get("sumgru.cls.w")?, &r_prev, None)?;
        let probs = tape.softmax_temp(&logits, S::one())?;
        (logits, probs)
    };
    Ok(GlimpseForward {
        logits,
        probs,
        pose,
        locations,
        glimpse_features,
    })
}

/// Uniform location draw over the squashed ranges: centers in (-1, 1),
/// scales in [s_min, s_max].
fn random_location<S: Scalar>(cfg: &AttentionConfig, rng: &mut dyn rand::RngCore) -> Tensor<S> {
    let x = rng.gen::<f64>() * 2.0 - 1.0;
    let y = rng.gen::<f64>() * 2.0 - 1.0;
    let sx = cfg.s_min + (cfg.s_max - cfg.s_min) * rng.gen::<f64>();
    let sy = if cfg.tie_scales {
        sx
    } else {
        cfg.s_min + (cfg.s_max - cfg.s_min) * rng.gen::<f64>()
    };
    Tensor::from_vec(&[4], vec![S::lit(x), S::lit(y), S::lit(sx), S::lit(sy)])
        .expect("fixed shape")
}

/// Average of per-window logits, for whole-sequence evaluation.
pub fn average_logits<S: Scalar>(tape: &Tape<S>, window_logits: &[Tensor<S>]) -> Result<Tensor<S>> {
    let refs: Vec<&Tensor<S>> = window_logits.iter().collect();
    let sum = tape.add_many(&refs)?;
    let n = S::from_usize(window_logits.len()).expect("fits scalar");
    Ok(tape.affine(&sum, S::one() / n, S::zero()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::pseudo_random;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                in_channels: 2,
                channels: vec![3, 4],
                kernel: (3, 3, 3),
            },
            attention: AttentionConfig {
                hidden: 5,
                glimpses: 2,
                s_min: 0.1,
                s_max: 1.0,
                tie_scales: false,
                crop: 2,
                loc_embed_hidden: 3,
            },
            workers: WorkerConfig {
                workers: 2,
                hidden: 4,
                capacity: 6,
                alpha: 0.5,
                lambda_decay: 0.5,
            },
            classes: 3,
            joints: 2,
            variant,
        }
    }

    fn tiny_video(seed: u64) -> Tensor<f64> {
        let t = 4;
        let (h, w, c) = (8, 8, 2);
        Tensor::from_vec(&[t, h, w, c], pseudo_random(t * h * w * c, seed)).unwrap()
    }

    fn built(variant: Variant, seed: u64) -> (ParamStore<f64>, ModelConfig) {
        let cfg = tiny_config(variant);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_model(&mut store, &cfg, &mut rng).unwrap();
        (store, cfg)
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("glimpse".parse::<Variant>().is_err());
    }

    #[test]
    fn knockout_weights_zero_their_terms() {
        let base = LossWeights::default();
        let no_pose = Variant::NoPoseLoss.apply_to_weights(base);
        assert_eq!(no_pose.pose, 0.0);
        assert_eq!(no_pose.classify, 1.0);
        let no_place = Variant::NoPlacementLoss.apply_to_weights(base);
        assert_eq!(no_place.spread, 0.0);
        assert_eq!(no_place.anchor, 0.0);
        let pooled = Variant::Global.apply_to_weights(base);
        assert_eq!(
            (pooled.classify, pooled.pose, pooled.spread, pooled.anchor),
            (1.0, 0.0, 0.0, 0.0)
        );
        assert_eq!(Variant::Full.apply_to_weights(base), base);
    }

    #[test]
    fn every_variant_runs_forward() {
        let video = tiny_video(11);
        for variant in Variant::ALL {
            let (store, cfg) = built(variant, 21);
            let tape = Tape::no_grad();
            if variant == Variant::Global {
                let out = forward_pooled(&tape, &store, &cfg, &video).unwrap();
                assert_eq!(out.logits.shape(), [3]);
                assert_eq!(out.pose.len(), 4);
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let out =
                forward_glimpse(&tape, &store, &cfg, &video, Some(&mut rng)).unwrap();
            assert_eq!(out.logits.shape(), [3]);
            let psum: f64 = out.probs.data().iter().sum();
            assert!((psum - 1.0).abs() < 1e-12, "{}: {}", variant, psum);
            assert_eq!(out.pose.len(), 4);
            assert_eq!(out.locations.len(), 4);
            for frame in &out.locations {
                assert_eq!(frame.len(), 2);
                for l in frame {
                    let d = l.data();
                    assert!(d[0].abs() <= 1.0 && d[1].abs() <= 1.0);
                    assert!((0.1..=1.0).contains(&d[2]) && (0.1..=1.0).contains(&d[3]));
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic_given_params() {
        let video = tiny_video(31);
        let (store, cfg) = built(Variant::Full, 41);
        let run = || {
            let tape = Tape::no_grad();
            let out = forward_glimpse(&tape, &store, &cfg, &video, None).unwrap();
            (out.logits.data().to_vec(), out.probs.data().to_vec())
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn random_locations_follow_the_supplied_rng() {
        let video = tiny_video(51);
        let (store, cfg) = built(Variant::RandomLocations, 61);
        let tape = Tape::no_grad();
        let collect = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = forward_glimpse(&tape, &store, &cfg, &video, Some(&mut rng)).unwrap();
            out.locations
                .iter()
                .flat_map(|f| f.iter().flat_map(|l| l.data().to_vec()))
                .collect::<Vec<f64>>()
        };
        assert_eq!(collect(7), collect(7));
        assert_ne!(collect(7), collect(8));
        assert!(forward_glimpse(&tape, &store, &cfg, &video, None).is_err());
    }

    #[test]
    fn saliency_locations_ignore_the_rng() {
        let video = tiny_video(71);
        let (store, cfg) = built(Variant::SaliencyLocations, 81);
        let tape = Tape::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = forward_glimpse(&tape, &store, &cfg, &video, Some(&mut rng)).unwrap();
        let b = forward_glimpse(&tape, &store, &cfg, &video, None).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn knockout_variants_share_the_full_wiring() {
        let video = tiny_video(91);
        let tape = Tape::no_grad();
        let (store, cfg) = built(Variant::Full, 101);
        let base = forward_glimpse(&tape, &store, &cfg, &video, None).unwrap();
        for variant in [Variant::NoPoseLoss, Variant::NoPlacementLoss] {
            let (other_store, mut other_cfg) = built(variant, 101);
            other_cfg.variant = variant;
            // Same seed, same parameter creation order, same wiring.
            let out = forward_glimpse(&tape, &other_store, &other_cfg, &video, None).unwrap();
            assert_eq!(out.logits.data(), base.logits.data());
        }
    }

    #[test]
    fn window_logit_average_matches_manual_mean() {
        let tape = Tape::<f64>::no_grad();
        let a = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![-1.0, 0.0, 5.0]).unwrap();
        let avg = average_logits(&tape, &[a, b]).unwrap();
        for (got, want) in avg.data().iter().zip([0.0, 1.0, 4.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn pooled_logits_ignore_frame_order_only_in_pooling() {
        // The mean over frames makes the pooled logits invariant to frame
        // permutation of the *feature map*; with a temporal backbone the
        // video itself is not, so just pin the shape contract here.
        let video = tiny_video(111);
        let (store, cfg) = built(Variant::Global, 121);
        let tape = Tape::no_grad();
        let out = forward_pooled(&tape, &store, &cfg, &video).unwrap();
        assert_eq!(out.probs.shape(), [3]);
        assert_eq!(out.pose[0].shape(), [4]);
    }

    #[test]
    fn glimpse_gradients_reach_attention_and_distance() {
        let (mut store, cfg) = built(Variant::Full, 131);
        let video = tiny_video(141);
        let mut coords = vec![
            ("attn.loc.w".to_string(), 0),
            ("attn.loc.w".to_string(), 7),
            ("dist.d".to_string(), 0),
            ("dist.d".to_string(), 5),
            ("worker0.gru.wz".to_string(), 3),
            ("backbone.block0.kernel".to_string(), 11),
        ];
        coords.dedup();
        let report = crate::gradcheck::check_params(&mut store, &coords, 1e-5, |s| {
            let tape = Tape::new();
            let out = forward_glimpse(&tape, s, &cfg, &video, None)?;
            let loss = tape.neg_log_indexed(&out.probs, 1, 1e-12)?;
            Ok((tape, loss))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "worst {:?}", report.worst);
    }
}
