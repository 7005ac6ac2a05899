//! Training objective: classification, masked pose regression, and the two
//! glimpse placement terms (mutual spread, anchoring to annotated points).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Probability floor inside the log, so certain-miss predictions stay finite.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub classify: f64,
    pub pose: f64,
    pub spread: f64,
    pub anchor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            classify: 1.0,
            pose: 1.0,
            spread: 1.0,
            anchor: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("classify", self.classify),
            ("pose", self.pose),
            ("spread", self.spread),
            ("anchor", self.anchor),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::parameter(
                    "loss_weights",
                    format!("weight {} must be finite and >= 0, got {}", name, w),
                ));
            }
        }
        Ok(())
    }
}

/// The weighted terms and their sum. `total` is built by adding the stored
/// terms in field order, so it reproduces bit for bit from the parts.
pub struct LossBreakdown<S: Scalar> {
    pub total: Tensor<S>,
    pub classify: Tensor<S>,
    pub pose: Tensor<S>,
    pub spread: Tensor<S>,
    pub anchor: Tensor<S>,
}

pub fn cross_entropy<S: Scalar>(
    tape: &Tape<S>,
    probs: &Tensor<S>,
    label: usize,
) -> Result<Tensor<S>> {
    tape.neg_log_indexed(probs, label, S::lit(PROB_FLOOR))
}

/// Mean squared error over the coordinates with a positive mask entry,
/// across all frames at once. All-masked-out input yields a constant zero.
pub fn pose_loss<S: Scalar>(
    tape: &Tape<S>,
    preds: &[Tensor<S>],
    targets: &[Tensor<S>],
    masks: &[Tensor<S>],
) -> Result<Tensor<S>> {
    if preds.len() != targets.len() || preds.len() != masks.len() {
        return Err(Error::parameter(
            "pose_loss",
            format!(
                "{} predictions, {} targets, {} masks",
                preds.len(),
                targets.len(),
                masks.len()
            ),
        ));
    }
    let mut valid = 0usize;
    for m in masks {
        valid += m.data().iter().filter(|v| **v > S::zero()).count();
    }
    if valid == 0 {
        return Ok(Tensor::zeros(&[1]));
    }
    let mut frame_sums = Vec::with_capacity(preds.len());
    for ((p, t), m) in preds.iter().zip(targets).zip(masks) {
        frame_sums.push(tape.masked_sq_err(p, t, m)?);
    }
    let refs: Vec<&Tensor<S>> = frame_sums.iter().collect();
    let sum = tape.add_many(&refs)?;
    Ok(tape.affine(
        &sum,
        S::one() / S::from_usize(valid).expect("fits scalar"),
        S::zero(),
    ))
}

fn center<S: Scalar>(tape: &Tape<S>, l: &Tensor<S>) -> Result<Tensor<S>> {
    if l.numel() != 4 {
        return Err(Error::parameter(
            "glimpse_loss",
            format!("location has {} values, expected 4", l.numel()),
        ));
    }
    tape.slice(l, 0, &[2])
}

/// 1 / (1 + sum of pairwise center distances), small when this frame's
/// glimpses stay apart. The pair sum runs over every ordered pair, the
/// coincident diagonal contributing zero.
pub fn glimpse_spread<S: Scalar>(tape: &Tape<S>, ls: &[Tensor<S>]) -> Result<Tensor<S>> {
    if ls.is_empty() {
        return Err(Error::parameter("glimpse_spread", "no glimpses"));
    }
    let centers: Vec<Tensor<S>> = ls
        .iter()
        .map(|l| center(tape, l))
        .collect::<Result<_>>()?;
    let mut dists = Vec::with_capacity(centers.len() * centers.len());
    for a in &centers {
        for b in &centers {
            dists.push(tape.euclid(a, b)?);
        }
    }
    let refs: Vec<&Tensor<S>> = dists.iter().collect();
    let total = tape.sum_all(&tape.concat1d(&refs)?)?;
    tape.inv1p(&total)
}

/// Sum over glimpses of the distance to the nearest annotated point.
/// No annotated points means nothing to anchor to: a constant zero.
pub fn glimpse_anchor<S: Scalar>(
    tape: &Tape<S>,
    ls: &[Tensor<S>],
    points: &[Tensor<S>],
) -> Result<Tensor<S>> {
    if ls.is_empty() {
        return Err(Error::parameter("glimpse_anchor", "no glimpses"));
    }
    if points.is_empty() {
        return Ok(Tensor::zeros(&[1]));
    }
    let mut mins = Vec::with_capacity(ls.len());
    for l in ls {
        let c = center(tape, l)?;
        let dists: Vec<Tensor<S>> = points
            .iter()
            .map(|p| tape.euclid(&c, p))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<S>> = dists.iter().collect();
        mins.push(tape.min_stack(&refs)?);
    }
    let refs: Vec<&Tensor<S>> = mins.iter().collect();
    tape.sum_all(&tape.concat1d(&refs)?)
}

/// Applies the weights and sums the four terms in a fixed order.
pub fn combine<S: Scalar>(
    tape: &Tape<S>,
    weights: &LossWeights,
    classify: &Tensor<S>,
    pose: &Tensor<S>,
    spread: &Tensor<S>,
    anchor: &Tensor<S>,
) -> Result<LossBreakdown<S>> {
    let wc = tape.affine(classify, S::lit(weights.classify), S::zero());
    let wp = tape.affine(pose, S::lit(weights.pose), S::zero());
    let ws = tape.affine(spread, S::lit(weights.spread), S::zero());
    let wa = tape.affine(anchor, S::lit(weights.anchor), S::zero());
    let total = tape.add(&tape.add(&tape.add(&wc, &wp)?, &ws)?, &wa)?;
    Ok(LossBreakdown {
        total,
        classify: wc,
        pose: wp,
        spread: ws,
        anchor: wa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::params::ParamStore;

    fn t(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn uniform_prediction_costs_log_of_class_count() {
        let tape = Tape::<f64>::no_grad();
        let probs = t(&[0.25, 0.25, 0.25, 0.25]);
        let l = cross_entropy(&tape, &probs, 2).unwrap();
        assert!((l.scalar_value() - 4.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_probability_is_floored() {
        let tape = Tape::<f64>::no_grad();
        let probs = t(&[1.0, 0.0]);
        let l = cross_entropy(&tape, &probs, 1).unwrap();
        assert!(l.scalar_value().is_finite());
        assert!((l.scalar_value() - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn pose_error_averages_over_visible_coordinates() {
        let tape = Tape::<f64>::no_grad();
        let unit = pose_loss(
            &tape,
            &[t(&[1.0, 1.0])],
            &[t(&[0.0, 0.0])],
            &[t(&[1.0, 1.0])],
        )
        .unwrap();
        assert!((unit.scalar_value() - 1.0).abs() < 1e-15);

        let partial = pose_loss(
            &tape,
            &[t(&[2.0, 0.0, 5.0])],
            &[t(&[0.0, 0.0, 1.0])],
            &[t(&[1.0, 0.0, 1.0])],
        )
        .unwrap();
        assert!((partial.scalar_value() - 10.0).abs() < 1e-12);

        let two_frames = pose_loss(
            &tape,
            &[t(&[1.0, 1.0]), t(&[3.0, 0.0])],
            &[t(&[0.0, 0.0]), t(&[0.0, 0.0])],
            &[t(&[1.0, 1.0]), t(&[1.0, 0.0])],
        )
        .unwrap();
        assert!((two_frames.scalar_value() - 11.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_pose_is_zero_and_gradient_free() {
        let tape = Tape::<f64>::new();
        let pred = t(&[5.0, -3.0]).with_grad();
        let l = pose_loss(
            &tape,
            &[pred.clone()],
            &[t(&[0.0, 0.0])],
            &[t(&[0.0, 0.0])],
        )
        .unwrap();
        assert_eq!(l.scalar_value(), 0.0);
        assert!(!l.requires_grad());
    }

    #[test]
    fn spread_reciprocal_of_pair_distances() {
        let tape = Tape::<f64>::no_grad();
        let ls = [t(&[0.0, 0.0, 0.5, 0.5]), t(&[3.0, 4.0, 0.5, 0.5])];
        let l = glimpse_spread(&tape, &ls).unwrap();
        // Ordered pairs: two zeros on the diagonal, 5 each way.
        assert!((l.scalar_value() - 1.0 / 11.0).abs() < 1e-15);

        let single = glimpse_spread(&tape, &ls[..1]).unwrap();
        assert!((single.scalar_value() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn anchor_sums_nearest_point_distances() {
        let tape = Tape::<f64>::no_grad();
        let points = [t(&[1.0, 0.0]), t(&[0.0, 2.0])];
        let one = glimpse_anchor(&tape, &[t(&[0.0, 0.0, 0.5, 0.5])], &points).unwrap();
        assert!((one.scalar_value() - 1.0).abs() < 1e-15);

        let two = glimpse_anchor(
            &tape,
            &[t(&[0.0, 0.0, 0.5, 0.5]), t(&[0.0, 3.0, 0.5, 0.5])],
            &points,
        )
        .unwrap();
        assert!((two.scalar_value() - 2.0).abs() < 1e-12);

        let none = glimpse_anchor(&tape, &[t(&[0.0, 0.0, 0.5, 0.5])], &[]).unwrap();
        assert_eq!(none.scalar_value(), 0.0);
    }

    #[test]
    fn total_reproduces_from_stored_parts() {
        let tape = Tape::<f64>::no_grad();
        for weights in [
            LossWeights::default(),
            LossWeights {
                classify: 0.3,
                pose: 0.7,
                spread: 0.2,
                anchor: 0.5,
            },
            LossWeights {
                classify: 1.0,
                pose: 0.0,
                spread: 0.0,
                anchor: 0.0,
            },
        ] {
            let b = combine(
                &tape,
                &weights,
                &t(&[1.3]),
                &t(&[0.071]),
                &t(&[0.00912]),
                &t(&[2.41]),
            )
            .unwrap();
            let recomputed = ((b.classify.scalar_value() + b.pose.scalar_value())
                + b.spread.scalar_value())
                + b.anchor.scalar_value();
            assert_eq!(b.total.scalar_value().to_bits(), recomputed.to_bits());
        }
    }

    #[test]
    fn placement_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert_values("l0", &[4], vec![0.31, -0.22, 0.4, 0.6])
            .unwrap();
        store
            .insert_values("l1", &[4], vec![-0.57, 0.18, 0.7, 0.3])
            .unwrap();
        let coords: Vec<(String, usize)> = ["l0", "l1"]
            .iter()
            .flat_map(|n| (0..4).map(move |i| (n.to_string(), i)))
            .collect();
        let points = [
            Tensor::from_vec(&[2], vec![0.8, 0.1]).unwrap(),
            Tensor::from_vec(&[2], vec![-0.4, -0.9]).unwrap(),
        ];
        let report = check_params(&mut store, &coords, 1e-6, |s| {
            let tape = Tape::new();
            let ls = [s.get("l0")?.clone(), s.get("l1")?.clone()];
            let spread = glimpse_spread(&tape, &ls)?;
            let anchor = glimpse_anchor(&tape, &ls, &points)?;
            let sum = tape.add(&spread, &anchor)?;
            Ok((tape, sum))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "worst {:?}", report.worst);
        // Scale coordinates never touch either term.
        let w = report.worst.unwrap();
        assert!(w.index < 2, "worst coordinate should be a center, got {:?}", w);
    }
}
