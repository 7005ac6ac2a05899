//! Class-conditioned entity trajectories in the unit square.
//!
//! The initial scene (positions, headings, speeds) is drawn from the rng in
//! the same order for every class, so frame 0 carries no label signal; the
//! class only decides how the first two entities evolve. Extra entities
//! always bounce independently.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::CLASS_NAMES;
use saccade::{Error, Result};

/// Entities keep this distance from the frame edge.
pub const MARGIN: f64 = 0.12;
/// Frames the trailing entity lags behind in the follow class.
pub const FOLLOW_LAG: usize = 3;

const LO: f64 = MARGIN;
const HI: f64 = 1.0 - MARGIN;

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

#[derive(Clone, Copy)]
struct Body {
    pos: [f64; 2],
    vel: [f64; 2],
}

impl Body {
    fn bounce(&mut self) {
        for a in 0..2 {
            self.pos[a] += self.vel[a];
            if self.pos[a] > HI {
                self.pos[a] = 2.0 * HI - self.pos[a];
                self.vel[a] = -self.vel[a];
            }
            if self.pos[a] < LO {
                self.pos[a] = 2.0 * LO - self.pos[a];
                self.vel[a] = -self.vel[a];
            }
        }
    }
}

fn clamp_pos(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(LO, HI), p[1].clamp(LO, HI)]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Per-frame entity centers in unit coordinates, flattened [frames, entities, 2].
/// Positions always lie inside the margin box.
pub fn entity_tracks(
    class: usize,
    rng: &mut ChaCha8Rng,
    frames: usize,
    entities: usize,
) -> Result<Vec<f64>> {
    if class >= CLASS_NAMES.len() {
        return Err(Error::parameter(
            "entity_tracks",
            format!("unknown class index {}", class),
        ));
    }
    // Common draws, identical order for every class.
    let (p0, p1) = loop {
        let a = [uniform(rng, 0.18, 0.82), uniform(rng, 0.18, 0.82)];
        let b = [uniform(rng, 0.18, 0.82), uniform(rng, 0.18, 0.82)];
        let d = dist(a, b);
        if (0.35..=0.70).contains(&d) {
            break (a, b);
        }
    };
    let mut bodies = Vec::with_capacity(entities);
    for e in 0..entities {
        let pos = match e {
            0 => p0,
            1 => p1,
            _ => [uniform(rng, 0.18, 0.82), uniform(rng, 0.18, 0.82)],
        };
        let heading = uniform(rng, 0.0, std::f64::consts::TAU);
        let speed = uniform(rng, 0.018, 0.045);
        bodies.push(Body {
            pos,
            vel: [speed * heading.cos(), speed * heading.sin()],
        });
    }

    let mut out = vec![0.0; frames * entities * 2];
    let record = |t: usize, tracks: &[Body], out: &mut Vec<f64>| {
        for (e, b) in tracks.iter().enumerate() {
            out[(t * entities + e) * 2] = b.pos[0];
            out[(t * entities + e) * 2 + 1] = b.pos[1];
        }
    };
    record(0, &bodies, &mut out);

    match CLASS_NAMES[class] {
        "approach" => {
            let speed = uniform(rng, 0.020, 0.040);
            for t in 1..frames {
                let gap = dist(bodies[0].pos, bodies[1].pos);
                if gap > 0.08 {
                    let step = speed.min((gap - 0.08) * 0.5);
                    for (i, j) in [(0usize, 1usize), (1, 0)] {
                        let toward = [
                            bodies[j].pos[0] - bodies[i].pos[0],
                            bodies[j].pos[1] - bodies[i].pos[1],
                        ];
                        bodies[i].pos[0] += step * toward[0] / gap;
                        bodies[i].pos[1] += step * toward[1] / gap;
                        bodies[i].pos = clamp_pos(bodies[i].pos);
                    }
                }
                for b in bodies.iter_mut().skip(2) {
                    b.bounce();
                }
                record(t, &bodies, &mut out);
            }
        }
        "avoid" => {
            let speed = uniform(rng, 0.020, 0.040);
            for t in 1..frames {
                let gap = dist(bodies[0].pos, bodies[1].pos).max(1e-9);
                for (i, j) in [(0usize, 1usize), (1, 0)] {
                    let away = [
                        bodies[i].pos[0] - bodies[j].pos[0],
                        bodies[i].pos[1] - bodies[j].pos[1],
                    ];
                    bodies[i].pos[0] += speed * away[0] / gap;
                    bodies[i].pos[1] += speed * away[1] / gap;
                    bodies[i].pos = clamp_pos(bodies[i].pos);
                }
                for b in bodies.iter_mut().skip(2) {
                    b.bounce();
                }
                record(t, &bodies, &mut out);
            }
        }
        "orbit" => {
            let omega = uniform(rng, 0.35, 0.55);
            let sign = if rng.gen::<f64>() < 0.5 { 1.0 } else { -1.0 };
            let mut angle = (bodies[1].pos[1] - bodies[0].pos[1])
                .atan2(bodies[1].pos[0] - bodies[0].pos[0]);
            // Static anchor. The satellite spirals in fast to a radius that
            // clears the walls; setting positions directly from the angle
            // (never clamping) keeps the angle sweep exactly monotone. The
            // spiral may briefly leave the margin box but never the frame.
            let anchor = bodies[0].pos;
            let wall = (anchor[0] - LO)
                .min(HI - anchor[0])
                .min(anchor[1] - LO)
                .min(HI - anchor[1]);
            let frame_dist = wall + MARGIN;
            let mut radius = dist(anchor, bodies[1].pos);
            let settled = radius.min(wall - 0.005);
            for t in 1..frames {
                radius = settled.max((radius * 0.55).min(frame_dist - 0.01));
                angle += sign * omega;
                bodies[1].pos = [
                    anchor[0] + radius * angle.cos(),
                    anchor[1] + radius * angle.sin(),
                ];
                for b in bodies.iter_mut().skip(2) {
                    b.bounce();
                }
                record(t, &bodies, &mut out);
            }
        }
        "follow" => {
            // The leader's whole path first, then the trailer replays it
            // with a lag while its initial offset decays.
            let mut leader_path = Vec::with_capacity(frames);
            leader_path.push(bodies[0].pos);
            let mut leader = bodies[0];
            for _ in 1..frames {
                leader.bounce();
                leader_path.push(leader.pos);
            }
            let offset = [
                bodies[1].pos[0] - bodies[0].pos[0],
                bodies[1].pos[1] - bodies[0].pos[1],
            ];
            for t in 1..frames {
                bodies[0].pos = leader_path[t];
                let src = leader_path[t.saturating_sub(FOLLOW_LAG)];
                let decay = 0.8f64.powi(t as i32);
                bodies[1].pos =
                    clamp_pos([src[0] + offset[0] * decay, src[1] + offset[1] * decay]);
                for b in bodies.iter_mut().skip(2) {
                    b.bounce();
                }
                record(t, &bodies, &mut out);
            }
        }
        "independent" => {
            for t in 1..frames {
                for b in bodies.iter_mut() {
                    b.bounce();
                }
                record(t, &bodies, &mut out);
            }
        }
        other => unreachable!("class table covers {}", other),
    }
    Ok(out)
}
