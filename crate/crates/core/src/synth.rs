//! Procedural two-hand motion used for tests, benchmarks and the `synth`
//! command.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Quat, RigidTransform, Vec3};
use crate::representation::{FrameParams, HandPair, MotionSequence, DEFAULT_FPS};
use crate::skeleton::{HandParams, TemplatePair, NUM_ROTATED, SHAPE_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MotionFamily {
    Clasp,
    Tutting,
    ApproachRetreat,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub frames: usize,
    /// 0 keeps the hands well apart; anything above 0.5 brings them into contact.
    pub interaction_intensity: f64,
    pub family: MotionFamily,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            frames: 120,
            interaction_intensity: 0.8,
            family: MotionFamily::Clasp,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 10 {
            return Err(Error::SequenceTooShort {
                what: "synthetic sequence",
                min: 10,
                got: self.frames,
            });
        }
        if !(0.0..=1.0).contains(&self.interaction_intensity) {
            return Err(Error::invalid(format!(
                "interaction intensity must be in [0, 1], got {}",
                self.interaction_intensity
            )));
        }
        Ok(())
    }
}

/// Wrist offset from the midline when the hands are far apart / touching.
const FAR_OFFSET: f64 = 0.25;
const NEAR_OFFSET: f64 = 0.041;
/// Flexion axis of the synthetic template (curls fingers towards the palm).
const FLEX_AXIS: Vec3 = Vec3::new(0.0, 1.0, 0.0);

/// Deterministic procedural sequence.
///
/// Wrists approach and retreat along y on a raised-cosine profile whose depth
/// grows with the interaction intensity; fingers curl with per-finger phase
/// offsets. The whole scene is then moved by a seeded rigid transform so
/// normalization has something to undo.
pub fn synth_sequence(cfg: &SynthConfig, templates: &TemplatePair) -> Result<MotionSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let beta = HandPair::new(random_beta(&mut rng, 0.5), random_beta(&mut rng, 0.5));
    let phases: Vec<f64> = (0..2 * NUM_ROTATED).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let amp_jitter: f64 = rng.random_range(0.8..1.2);
    let cycles = if cfg.frames >= 60 { 2.0 } else { 1.0 };
    let scene = RigidTransform::new(random_rotation(&mut rng), random_vec(&mut rng, 0.3));

    let rest_wrist = HandPair::new(
        templates.left.rest_joints(&beta.left)?.get(0),
        templates.right.rest_joints(&beta.right)?.get(0),
    );
    let closeness = (2.0 * cfg.interaction_intensity).min(1.0);
    let intensity = cfg.interaction_intensity;
    let last = (cfg.frames - 1) as f64;

    let frames = (0..cfg.frames)
        .map(|n| {
            let s = n as f64 / last;
            // plateau at the peak so at least one frame reaches full approach
            let profile = (1.2 * (0.5 - 0.5 * (2.0 * PI * cycles * s).cos())).min(1.0);
            let offset = FAR_OFFSET - (FAR_OFFSET - NEAR_OFFSET) * closeness * profile;
            let (twist, curl_gain, sway) = match cfg.family {
                MotionFamily::ApproachRetreat => (0.15 * intensity * (1.0 - profile), 0.3, 0.0),
                MotionFamily::Clasp => (0.1 * intensity * (1.0 - profile), 0.3 + 0.6 * profile, 0.0),
                MotionFamily::Tutting => (
                    0.6 * intensity * (1.0 - profile) * (2.0 * PI * s).sin(),
                    0.25,
                    0.02 * intensity * (4.0 * PI * s).sin(),
                ),
            };
            let hand = |side: f64, phase_off: usize, beta: &Vec<f64>, rest_wrist: Vec3| {
                let mut local_rots = [Quat::IDENTITY; NUM_ROTATED];
                for (k, q) in local_rots.iter_mut().enumerate() {
                    let osc = 0.5 - 0.5 * (2.0 * PI * 1.5 * s + phases[phase_off + k]).cos();
                    let angle = amp_jitter * curl_gain * (0.2 + 0.8 * osc);
                    *q = Quat::from_axis_angle(&FLEX_AXIS, angle);
                }
                let rot = Quat::from_axis_angle(&Vec3::x(), side * twist);
                let wrist = Vec3::new(sway * side, side * offset, 0.0);
                let params = HandParams {
                    beta: beta.clone(),
                    global_rot: rot,
                    translation: wrist - rot.rotate(&rest_wrist),
                    local_rots,
                };
                HandParams {
                    global_rot: scene.rotation * params.global_rot,
                    translation: scene.apply(&params.translation),
                    ..params
                }
            };
            HandPair::new(
                hand(-1.0, 0, &beta.left, rest_wrist.left),
                hand(1.0, NUM_ROTATED, &beta.right, rest_wrist.right),
            )
        })
        .collect::<Vec<FrameParams>>();
    MotionSequence::new(frames, DEFAULT_FPS)
}

fn random_beta(rng: &mut impl Rng, scale: f64) -> Vec<f64> {
    (0..SHAPE_DIM).map(|_| rng.random_range(-1.0..1.0) * scale).collect()
}

fn random_vec(rng: &mut impl Rng, scale: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ) * scale
}

/// Uniformly distributed rotation.
pub fn random_rotation(rng: &mut impl Rng) -> Quat {
    loop {
        let v: [f64; 4] = [
            rng.sample(rand_distr::StandardNormal),
            rng.sample(rand_distr::StandardNormal),
            rng.sample(rand_distr::StandardNormal),
            rng.sample(rand_distr::StandardNormal),
        ];
        if let Some(q) = Quat::from_array(v) {
            return q;
        }
    }
}

/// Random but plausible hand parameters. `pose_scale` scales the finger
/// articulation (1.0 ≈ up to ~1 rad of flexion per joint).
pub fn random_hand_params(rng: &mut impl Rng, pose_scale: f64) -> HandParams {
    let mut local_rots = [Quat::IDENTITY; NUM_ROTATED];
    for q in local_rots.iter_mut() {
        let flex = rng.random_range(-0.1..1.0) * pose_scale;
        let v = FLEX_AXIS * flex + random_vec(rng, 0.25 * pose_scale);
        *q = Quat::from_rotation_vector(&v);
    }
    HandParams {
        beta: random_beta(rng, 1.0),
        global_rot: random_rotation(rng),
        translation: random_vec(rng, 0.5),
        local_rots,
    }
}

/// Smooth random sequence: poses interpolated between two random keyframes
/// per hand, shape fixed per hand.
pub fn random_sequence(rng: &mut impl Rng, frames: usize) -> MotionSequence {
    let keys: Vec<(HandParams, HandParams)> = (0..2)
        .map(|_| {
            let a = random_hand_params(rng, 1.0);
            let mut b = random_hand_params(rng, 1.0);
            b.beta = a.beta.clone();
            (a, b)
        })
        .collect();
    let lerp_rot = |a: Quat, b: Quat, s: f64| {
        let delta = (a.inverse() * b).to_rotation_vector();
        a * Quat::from_rotation_vector(&(delta * s))
    };
    let frames = (0..frames.max(1))
        .map(|n| {
            let s = if frames > 1 { n as f64 / (frames - 1) as f64 } else { 0.0 };
            let interp = |(a, b): &(HandParams, HandParams)| {
                let mut local_rots = a.local_rots;
                for (k, q) in local_rots.iter_mut().enumerate() {
                    *q = lerp_rot(a.local_rots[k], b.local_rots[k], s);
                }
                HandParams {
                    beta: a.beta.clone(),
                    global_rot: lerp_rot(a.global_rot, b.global_rot, s),
                    translation: a.translation * (1.0 - s) + b.translation * s,
                    local_rots,
                }
            };
            HandPair::new(interp(&keys[0]), interp(&keys[1]))
        })
        .collect();
    MotionSequence::new(frames, DEFAULT_FPS).expect("at least one frame")
}

/// Smallest distance between any left and any right joint in one frame.
pub fn min_inter_hand_distance(frame: &HandPair<crate::skeleton::JointSet>) -> f64 {
    frame
        .left
        .positions()
        .iter()
        .flat_map(|l| frame.right.positions().iter().map(move |r| (l - r).norm()))
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(intensity: f64, family: MotionFamily, seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            frames: 40,
            interaction_intensity: intensity,
            family,
        }
    }

    const FAMILIES: [MotionFamily; 3] = [MotionFamily::Clasp, MotionFamily::Tutting, MotionFamily::ApproachRetreat];

    #[test]
    fn same_seed_same_sequence() {
        let t = TemplatePair::synthetic();
        let a = synth_sequence(&cfg(0.7, MotionFamily::Tutting, 5), &t).unwrap();
        let b = synth_sequence(&cfg(0.7, MotionFamily::Tutting, 5), &t).unwrap();
        assert_eq!(a, b);
        let c = synth_sequence(&cfg(0.7, MotionFamily::Tutting, 6), &t).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_intensity_keeps_hands_apart() {
        let t = TemplatePair::synthetic();
        for family in FAMILIES {
            for seed in 0..5 {
                let seq = synth_sequence(&cfg(0.0, family, seed), &t).unwrap();
                for f in seq.joints(&t).unwrap() {
                    assert!(min_inter_hand_distance(&f) > 0.1);
                }
            }
        }
    }

    #[test]
    fn high_intensity_reaches_contact() {
        let t = TemplatePair::synthetic();
        for family in FAMILIES {
            for seed in 0..5 {
                for intensity in [0.51, 0.8, 1.0] {
                    for frames in [10, 11, 40, 121] {
                        let c = SynthConfig { frames, ..cfg(intensity, family, seed) };
                        let seq = synth_sequence(&c, &t).unwrap();
                        let min = seq
                            .joints(&t)
                            .unwrap()
                            .iter()
                            .map(min_inter_hand_distance)
                            .fold(f64::INFINITY, f64::min);
                        assert!(min < 0.02, "{family:?} seed {seed} I={intensity} N={frames}: {min}");
                    }
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        let t = TemplatePair::synthetic();
        let short = SynthConfig { frames: 9, ..SynthConfig::default() };
        assert!(synth_sequence(&short, &t).is_err());
        let bad = SynthConfig { interaction_intensity: 1.5, ..SynthConfig::default() };
        assert!(synth_sequence(&bad, &t).is_err());
    }
}
