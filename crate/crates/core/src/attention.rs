//! Recurrent spatial attention: a GRU runs over the glimpse sequence of the
//! whole video (never reset at frame boundaries) and a linear head proposes
//! where to look next. Each proposal is cropped from the frame's feature map,
//! pooled, and fused with an embedding of its own location.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gru::{gru_cell, gru_from_store, init_gru, GruParams};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AttentionConfig {
    /// Hidden width of the glimpse GRU.
    pub hidden: usize,
    /// Glimpses proposed per frame.
    pub glimpses: usize,
    pub s_min: f64,
    pub s_max: f64,
    pub tie_scales: bool,
    /// Side length of the sampled crop before pooling.
    pub crop: usize,
    /// Hidden width of the location embedding.
    pub loc_embed_hidden: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            hidden: 1024,
            glimpses: 3,
            s_min: 0.1,
            s_max: 1.0,
            tie_scales: false,
            crop: 3,
            loc_embed_hidden: 256,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.glimpses == 0 || self.crop == 0 || self.hidden == 0 {
            return Err(Error::parameter(
                "attention",
                "glimpses, crop and hidden must be positive",
            ));
        }
        if !(self.s_min > 0.0 && self.s_max > self.s_min) {
            return Err(Error::parameter(
                "attention",
                format!("need 0 < s_min < s_max, got ({}, {})", self.s_min, self.s_max),
            ));
        }
        Ok(())
    }
}

/// One glimpse's outputs: fused feature v, pooled appearance z, location l.
pub struct GlimpseOut<S: Scalar> {
    pub v: Tensor<S>,
    pub z: Tensor<S>,
    pub l: Tensor<S>,
}

pub fn init_attention<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &AttentionConfig,
    feature_dim: usize,
    context_dim: usize,
    worker_hidden: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    init_gru(store, "attn.gru", cfg.hidden, feature_dim + worker_hidden, rng)?;
    let loc_in = cfg.hidden + context_dim;
    store.init_uniform("attn.loc.w", &[4, loc_in], loc_in, rng)?;
    init_loc_embed(store, cfg, feature_dim, rng)
}

/// The location embedding is shared by every glimpse-producing variant, so
/// variants that replace the attention GRU still register it.
pub fn init_loc_embed<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &AttentionConfig,
    feature_dim: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let h = cfg.loc_embed_hidden;
    store.init_uniform("attn.embed.w1", &[h, 4], 4, rng)?;
    store.insert_values("attn.embed.b1", &[h], vec![S::zero(); h])?;
    store.init_uniform("attn.embed.w2", &[feature_dim, h], h, rng)?;
    store.insert_values("attn.embed.b2", &[feature_dim], vec![S::zero(); feature_dim])?;
    Ok(())
}

pub fn attention_gru<S: Scalar>(store: &ParamStore<S>) -> Result<GruParams<S>> {
    gru_from_store(store, "attn.gru")
}

/// Advances the glimpse GRU one step and proposes the next location.
/// Inputs: previous pooled glimpse (zero vector at the start of a video) and
/// the previous frame's aggregated worker state.
pub fn attention_step<S: Scalar>(
    tape: &Tape<S>,
    store: &ParamStore<S>,
    cfg: &AttentionConfig,
    h: &Tensor<S>,
    z_prev: &Tensor<S>,
    r_prev: &Tensor<S>,
    c_t: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let gru = attention_gru(store)?;
    let x = tape.concat1d(&[z_prev, r_prev])?;
    let h_new = gru_cell(tape, h, &x, &gru)?;
    let hc = tape.concat1d(&[&h_new, c_t])?;
    let raw = tape.linear(store.get("attn.loc.w")?, &hc, None)?;
    let l = tape.squash_glimpse(&raw, S::lit(cfg.s_min), S::lit(cfg.s_max), cfg.tie_scales)?;
    Ok((h_new, l))
}

/// Embeds a location with one hidden ReLU layer; linear output.
pub fn loc_embed<S: Scalar>(
    tape: &Tape<S>,
    store: &ParamStore<S>,
    l: &Tensor<S>,
) -> Result<Tensor<S>> {
    let h = tape.relu(&tape.linear(
        store.get("attn.embed.w1")?,
        l,
        Some(store.get("attn.embed.b1")?),
    )?);
    tape.linear(
        store.get("attn.embed.w2")?,
        &h,
        Some(store.get("attn.embed.b2")?),
    )
}

/// Appearance-location fusion: v = z (Hadamard) embed(l).
pub fn what_where<S: Scalar>(
    tape: &Tape<S>,
    store: &ParamStore<S>,
    z: &Tensor<S>,
    l: &Tensor<S>,
) -> Result<Tensor<S>> {
    let e = loc_embed(tape, store, l)?;
    tape.mul(z, &e)
}

/// Crops one glimpse from a frame's [H', W', C'] feature map and produces
/// its pooled and fused features. Shared by all location-producing variants.
pub fn extract_glimpse<S: Scalar>(
    tape: &Tape<S>,
    store: &ParamStore<S>,
    cfg: &AttentionConfig,
    z_t: &Tensor<S>,
    l: &Tensor<S>,
) -> Result<GlimpseOut<S>> {
    let grid = tape.affine_grid(l, cfg.crop, cfg.crop)?;
    let crop = tape.bilinear_sample(z_t, &grid)?;
    let z = tape.mean_leading(&crop)?;
    let v = what_where(tape, store, &z, l)?;
    Ok(GlimpseOut {
        v,
        z,
        l: l.clone(),
    })
}

/// Runs the attention process for one frame: proposes `cfg.glimpses`
/// locations in sequence, threading each pooled glimpse into the next step.
/// Returns the advanced hidden state, the last pooled glimpse, and the
/// glimpses in proposal order.
pub fn glimpse_frame<S: Scalar>(
    tape: &Tape<S>,
    store: &ParamStore<S>,
    cfg: &AttentionConfig,
    h: &Tensor<S>,
    z_prev: &Tensor<S>,
    r_prev: &Tensor<S>,
    z_t: &Tensor<S>,
    c_t: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Vec<GlimpseOut<S>>)> {
    let mut h = h.clone();
    let mut z_prev = z_prev.clone();
    let mut out = Vec::with_capacity(cfg.glimpses);
    for _ in 0..cfg.glimpses {
        let (h_new, l) = attention_step(tape, store, cfg, &h, &z_prev, r_prev, c_t)?;
        let glimpse = extract_glimpse(tape, store, cfg, z_t, &l)?;
        h = h_new;
        z_prev = glimpse.z.clone();
        out.push(glimpse);
    }
    Ok((h, z_prev, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::pseudo_random;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> AttentionConfig {
        AttentionConfig {
            hidden: 5,
            glimpses: 3,
            s_min: 0.1,
            s_max: 1.0,
            tie_scales: false,
            crop: 3,
            loc_embed_hidden: 6,
        }
    }

    const FEAT: usize = 3;
    const CTX: usize = 4;
    const WORKER: usize = 2;

    fn build(seed: u64) -> (ParamStore<f64>, AttentionConfig) {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_attention(&mut store, &cfg, FEAT, CTX, WORKER, &mut rng).unwrap();
        (store, cfg)
    }

    fn zero_store() -> (ParamStore<f64>, AttentionConfig) {
        let (mut store, cfg) = build(1);
        let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
        for n in names {
            let t = store.get_mut(&n).unwrap();
            let len = t.numel();
            t.data_mut().copy_from_slice(&vec![0.0; len]);
        }
        (store, cfg)
    }

    #[test]
    fn zero_parameters_propose_centered_midscale_glimpses() {
        let (store, cfg) = zero_store();
        let tape = Tape::no_grad();
        let h = Tensor::zeros(&[cfg.hidden]);
        let z_prev = Tensor::zeros(&[FEAT]);
        let r_prev = Tensor::zeros(&[WORKER]);
        let c_t = Tensor::from_vec(&[CTX], pseudo_random(CTX, 3)).unwrap();
        let (h2, l) = attention_step(&tape, &store, &cfg, &h, &z_prev, &r_prev, &c_t).unwrap();
        assert!(h2.data().iter().all(|v| *v == 0.0));
        assert_eq!(l.data()[0], 0.0);
        assert_eq!(l.data()[1], 0.0);
        assert!((l.data()[2] - 0.55).abs() < 1e-15);
        assert!((l.data()[3] - 0.55).abs() < 1e-15);
    }

    #[test]
    fn frame_emits_requested_glimpse_count_in_order() {
        let (store, cfg) = build(7);
        let tape = Tape::no_grad();
        let h = Tensor::zeros(&[cfg.hidden]);
        let z0 = Tensor::zeros(&[FEAT]);
        let r = Tensor::from_vec(&[WORKER], pseudo_random(WORKER, 11)).unwrap();
        let z_t = Tensor::from_vec(&[4, 4, FEAT], pseudo_random(16 * FEAT, 12)).unwrap();
        let c_t = Tensor::from_vec(&[CTX], pseudo_random(CTX, 13)).unwrap();
        let (h2, z_last, gs) =
            glimpse_frame(&tape, &store, &cfg, &h, &z0, &r, &z_t, &c_t).unwrap();
        assert_eq!(gs.len(), 3);
        // The threaded z_prev is the last glimpse's pooled feature.
        assert_eq!(z_last.data(), gs[2].z.data());
        assert_ne!(h2.data(), h.data());
        // Locations vary across the sequence (z_prev threading feeds back).
        assert_ne!(gs[0].l.data(), gs[1].l.data());
        for g in &gs {
            assert_eq!(g.v.shape(), &[FEAT]);
            assert!(g.l.data()[2] > cfg.s_min && g.l.data()[2] <= cfg.s_max);
        }
    }

    #[test]
    fn hidden_state_carries_across_frames() {
        let (store, cfg) = build(21);
        let tape = Tape::no_grad();
        let z0 = Tensor::zeros(&[FEAT]);
        let r = Tensor::zeros(&[WORKER]);
        let z_t = Tensor::from_vec(&[4, 4, FEAT], pseudo_random(16 * FEAT, 22)).unwrap();
        let c_t = Tensor::from_vec(&[CTX], pseudo_random(CTX, 23)).unwrap();
        let fresh = Tensor::zeros(&[cfg.hidden]);
        let (h1, z1, _) =
            glimpse_frame(&tape, &store, &cfg, &fresh, &z0, &r, &z_t, &c_t).unwrap();
        // Same frame again: carried state proposes differently than a reset one.
        let (_, _, carried) =
            glimpse_frame(&tape, &store, &cfg, &h1, &z1, &r, &z_t, &c_t).unwrap();
        let (_, _, reset) =
            glimpse_frame(&tape, &store, &cfg, &fresh, &z0, &r, &z_t, &c_t).unwrap();
        assert_ne!(carried[0].l.data(), reset[0].l.data());
    }

    #[test]
    fn unit_embedding_passes_appearance_through() {
        let (mut store, cfg) = zero_store();
        // ReLU hidden layer emits zeros; an all-ones output bias makes the
        // embedding identically one.
        let len = store.get("attn.embed.b2").unwrap().numel();
        store
            .get_mut("attn.embed.b2")
            .unwrap()
            .data_mut()
            .copy_from_slice(&vec![1.0; len]);
        let tape = Tape::no_grad();
        let z = Tensor::from_vec(&[FEAT], pseudo_random(FEAT, 31)).unwrap();
        let l = Tensor::from_vec(&[4], vec![0.2, -0.3, 0.5, 0.5]).unwrap();
        let v = what_where(&tape, &store, &z, &l).unwrap();
        assert_eq!(v.data(), z.data());
        let _ = cfg;
    }

    #[test]
    fn zero_appearance_zeroes_the_fused_feature() {
        let (store, _) = build(41);
        let tape = Tape::no_grad();
        let z = Tensor::zeros(&[FEAT]);
        let l = Tensor::from_vec(&[4], vec![0.2, -0.3, 0.5, 0.5]).unwrap();
        let v = what_where(&tape, &store, &z, &l).unwrap();
        assert!(v.data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn what_where_gradients_match_finite_differences() {
        let (mut store, _) = build(51);
        let coords = crate::gradcheck::strided_coords(&store, 3);
        let keep: Vec<(String, usize)> = coords
            .into_iter()
            .filter(|(n, _)| n.starts_with("attn.embed"))
            .collect();
        let z0 = pseudo_random(FEAT, 52);
        let l0 = vec![0.2, -0.3, 0.5, 0.7];
        let report = crate::gradcheck::check_params(&mut store, &keep, 1e-6, |s| {
            let tape = Tape::new();
            let z = Tensor::from_vec(&[FEAT], z0.clone())?;
            let l = Tensor::from_vec(&[4], l0.clone())?;
            let v = what_where(&tape, s, &z, &l)?;
            let proj = Tensor::from_vec(&[FEAT], vec![0.7, -1.1, 0.4])?;
            let loss = tape.sum_all(&tape.mul(&v, &proj)?)?;
            Ok((tape, loss))
        })
        .unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "worst {:?}",
            report.worst
        );
    }

    #[test]
    fn frame_gradient_reaches_the_location_head() {
        let (mut store, cfg) = build(61);
        let z_t0 = pseudo_random(16 * FEAT, 62);
        let c_t0 = pseudo_random(CTX, 63);
        let r0 = pseudo_random(WORKER, 64);
        let coords: Vec<(String, usize)> = (0..4)
            .flat_map(|row| {
                let w = 5 + CTX;
                [(("attn.loc.w").to_string(), row * w), ("attn.loc.w".to_string(), row * w + 3)]
            })
            .collect();
        let report = crate::gradcheck::check_params(&mut store, &coords, 1e-5, |s| {
            let tape = Tape::new();
            let h = Tensor::zeros(&[cfg.hidden]);
            let z0 = Tensor::zeros(&[FEAT]);
            let r = Tensor::from_vec(&[WORKER], r0.clone())?;
            let z_t = Tensor::from_vec(&[4, 4, FEAT], z_t0.clone())?;
            let c_t = Tensor::from_vec(&[CTX], c_t0.clone())?;
            let (_, _, gs) = glimpse_frame(&tape, s, &cfg, &h, &z0, &r, &z_t, &c_t)?;
            let vs: Vec<&Tensor<f64>> = gs.iter().map(|g| &g.v).collect();
            let total = tape.add_many(&vs)?;
            let loss = tape.sum_all(&total)?;
            Ok((tape, loss))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "worst {:?}", report.worst);
        // The attention path must actually matter.
        let got = report.worst.expect("coords checked");
        assert!(got.analytic != 0.0 || got.numeric != 0.0);
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let mut cfg = tiny_cfg();
        cfg.s_min = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg2 = tiny_cfg();
        cfg2.glimpses = 0;
        assert!(cfg2.validate().is_err());
    }
}
