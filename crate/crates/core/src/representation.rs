//! Two-hand motion sequences and their matrix representations.
//!
//! Both representations are row-per-frame matrices with the left hand first.
//!
//! Local (393 columns):
//!
//! ```text
//! left  [  0..193)  Ṙ(4) Ṫ(3) J_local(63) J̇_local(63) θ(60)
//! right [193..393)  R_init(4) T_init(3) Ṙ(4) Ṫ(3) J_local(63) J̇_local(63) θ(60)
//! ```
//!
//! Global (372 columns), per hand: `J_global(63) J̇_global(63) θ(60)`.
//!
//! Velocities are per-frame backward differences with identity/zero at frame
//! 0. `Ṙ_n = R_{n-1}⁻¹ R_n`. `J_local` is expressed in the wrist frame.
//! `R_init`/`T_init` (the right wrist's frame-0 pose) repeat on every row.
//! The left hand needs no initial pose: after [`normalize_sequence`] its
//! frame-0 wrist sits at the origin with identity orientation.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::{kabsch, Quat, RigidTransform, Vec3};
use crate::par;
use crate::skeleton::{
    HandParams, Handedness, JointSet, SkeletonTemplate, TemplatePair, NUM_JOINTS, NUM_ROTATED, PROXIMAL,
};

/// A value per hand.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct HandPair<T> {
    pub left: T,
    pub right: T,
}

impl<T> HandPair<T> {
    pub fn new(left: T, right: T) -> Self {
        HandPair { left, right }
    }

    pub fn get(&self, hand: Handedness) -> &T {
        match hand {
            Handedness::Left => &self.left,
            Handedness::Right => &self.right,
        }
    }

    pub fn get_mut(&mut self, hand: Handedness) -> &mut T {
        match hand {
            Handedness::Left => &mut self.left,
            Handedness::Right => &mut self.right,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> HandPair<U> {
        HandPair {
            left: f(&self.left),
            right: f(&self.right),
        }
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(Handedness, &T) -> Result<U, E>) -> Result<HandPair<U>, E> {
        Ok(HandPair {
            left: f(Handedness::Left, &self.left)?,
            right: f(Handedness::Right, &self.right)?,
        })
    }
}

pub const HANDS: [Handedness; 2] = [Handedness::Left, Handedness::Right];

pub type FrameParams = HandPair<HandParams>;
pub type FrameJoints = HandPair<JointSet>;

pub const DEFAULT_FPS: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub frames: Vec<FrameParams>,
    pub fps: f64,
    /// World joints per frame. When present these are authoritative for
    /// joint-level consumers (metrics, encoders); sequences built from
    /// parameters should leave this `None` or fill it from FK.
    pub joints: Option<Vec<FrameJoints>>,
}

impl MotionSequence {
    pub fn new(frames: Vec<FrameParams>, fps: f64) -> Result<MotionSequence> {
        if frames.is_empty() {
            return Err(Error::SequenceTooShort {
                what: "motion sequence",
                min: 1,
                got: 0,
            });
        }
        Ok(MotionSequence {
            frames,
            fps,
            joints: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Joint positions per frame: the cache if present, FK otherwise.
    pub fn joints(&self, templates: &TemplatePair) -> Result<Vec<FrameJoints>> {
        if let Some(j) = &self.joints {
            return Ok(j.clone());
        }
        fk_frames(&self.frames, templates)
    }

    /// Fill the joint cache from FK.
    pub fn with_cached_joints(mut self, templates: &TemplatePair) -> Result<MotionSequence> {
        self.joints = Some(fk_frames(&self.frames, templates)?);
        Ok(self)
    }

    /// Apply one rigid transform to every frame and both hands.
    pub fn transformed(&self, t: &RigidTransform) -> MotionSequence {
        let frames = self
            .frames
            .iter()
            .map(|f| {
                f.map(|p| HandParams {
                    global_rot: t.rotation * p.global_rot,
                    translation: t.apply(&p.translation),
                    ..p.clone()
                })
            })
            .collect();
        let joints = self
            .joints
            .as_ref()
            .map(|js| js.iter().map(|f| f.map(|j| j.transformed(t))).collect());
        MotionSequence {
            frames,
            fps: self.fps,
            joints,
        }
    }

    /// Frames in reverse order.
    pub fn reversed(&self) -> MotionSequence {
        MotionSequence {
            frames: self.frames.iter().rev().cloned().collect(),
            fps: self.fps,
            joints: self.joints.as_ref().map(|j| j.iter().rev().cloned().collect()),
        }
    }
}

fn fk_frames(frames: &[FrameParams], templates: &TemplatePair) -> Result<Vec<FrameJoints>> {
    par::map_slice(frames, |f| {
        Ok(HandPair {
            left: templates.left.forward_kinematics(&f.left)?,
            right: templates.right.forward_kinematics(&f.right)?,
        })
    })
    .into_iter()
    .collect()
}

/// World → canonical transform applied by [`normalize_sequence`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationInfo {
    pub transform: RigidTransform,
}

/// The left wrist's local +x axis, which normalization maps onto world +x.
pub const HEADING_AXIS: Vec3 = Vec3::new(1.0, 0.0, 0.0);

/// Move the frame-0 left wrist to the origin and align its orientation with
/// the world axes (so its heading axis becomes `(1, 0, 0)`). The same rigid
/// transform is applied to every frame and both hands.
pub fn normalize_sequence(seq: &MotionSequence, templates: &TemplatePair) -> Result<(MotionSequence, NormalizationInfo)> {
    let first = seq.frames.first().ok_or(Error::SequenceTooShort {
        what: "normalization",
        min: 1,
        got: 0,
    })?;
    let wrist = match &seq.joints {
        Some(j) => j[0].left.get(0),
        None => templates.left.forward_kinematics(&first.left)?.get(0),
    };
    let rot = first.left.global_rot.inverse();
    let transform = RigidTransform::new(rot, -rot.rotate(&wrist));
    Ok((seq.transformed(&transform), NormalizationInfo { transform }))
}

fn check_normalized(seq: &MotionSequence, templates: &TemplatePair) -> Result<()> {
    let first = &seq.frames[0].left;
    let wrist = templates.left.forward_kinematics(first)?.get(0);
    let angle = first.global_rot.angle_to(Quat::IDENTITY);
    if wrist.norm() > 1e-6 || angle > 1e-6 {
        return Err(Error::NotNormalized(format!(
            "frame-0 left wrist at {:.3e} m from origin, rotated {:.3e} rad",
            wrist.norm(),
            angle
        )));
    }
    Ok(())
}

pub mod local_layout {
    pub const JOINT_CH: usize = 63;
    pub const THETA_CH: usize = 60;
    pub const LEFT_WIDTH: usize = 4 + 3 + 2 * JOINT_CH + THETA_CH;
    pub const RIGHT_WIDTH: usize = 7 + LEFT_WIDTH;
    pub const WIDTH: usize = LEFT_WIDTH + RIGHT_WIDTH;

    /// Start of the velocity block (Ṙ Ṫ J J̇ θ) of each hand.
    pub const LEFT_BASE: usize = 0;
    pub const RIGHT_INIT: usize = LEFT_WIDTH;
    pub const RIGHT_BASE: usize = LEFT_WIDTH + 7;

    pub const ROT_VEL: usize = 0;
    pub const TRANS_VEL: usize = 4;
    pub const JOINTS: usize = 7;
    pub const JOINT_VEL: usize = 7 + JOINT_CH;
    pub const THETA: usize = 7 + 2 * JOINT_CH;

    /// The 14 root-velocity channels: left Ṙ Ṫ then right Ṙ Ṫ.
    pub const ROOT_CHANNELS: [usize; 14] = [
        0,
        1,
        2,
        3,
        4,
        5,
        6,
        RIGHT_BASE,
        RIGHT_BASE + 1,
        RIGHT_BASE + 2,
        RIGHT_BASE + 3,
        RIGHT_BASE + 4,
        RIGHT_BASE + 5,
        RIGHT_BASE + 6,
    ];
}

pub mod global_layout {
    pub const JOINT_CH: usize = 63;
    pub const HAND_WIDTH: usize = 2 * JOINT_CH + 60;
    pub const WIDTH: usize = 2 * HAND_WIDTH;
    pub const JOINTS: usize = 0;
    pub const JOINT_VEL: usize = JOINT_CH;
    pub const THETA: usize = 2 * JOINT_CH;
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalRepMatrix {
    data: DMatrix<f64>,
    pub fps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalRepMatrix {
    data: DMatrix<f64>,
    pub fps: f64,
}

macro_rules! rep_matrix {
    ($ty:ident, $width:expr, $what:literal) => {
        impl $ty {
            pub const WIDTH: usize = $width;

            pub fn new(data: DMatrix<f64>, fps: f64) -> Result<Self> {
                if data.ncols() != $width {
                    return Err(Error::DimensionMismatch {
                        what: $what,
                        expected: $width,
                        got: data.ncols(),
                    });
                }
                if data.nrows() == 0 {
                    return Err(Error::SequenceTooShort {
                        what: $what,
                        min: 1,
                        got: 0,
                    });
                }
                Ok($ty { data, fps })
            }

            pub fn data(&self) -> &DMatrix<f64> {
                &self.data
            }

            pub fn into_data(self) -> DMatrix<f64> {
                self.data
            }

            pub fn frames(&self) -> usize {
                self.data.nrows()
            }
        }
    };
}

rep_matrix!(LocalRepMatrix, local_layout::WIDTH, "local representation width");
rep_matrix!(GlobalRepMatrix, global_layout::WIDTH, "global representation width");

struct HandTrack {
    joints: Vec<Vec<Vec3>>,
    root_rots: Vec<Quat>,
}

fn hand_track(seq: &MotionSequence, template: &SkeletonTemplate, hand: Handedness) -> Result<HandTrack> {
    let fk: Vec<Result<(Vec<Vec3>, Quat)>> = par::map_range(seq.len(), |n| {
        let params = seq.frames[n].get(hand);
        let joints = match &seq.joints {
            Some(j) => j[n].get(hand).positions()[..NUM_JOINTS].to_vec(),
            None => template.forward_kinematics(params)?.into_positions(),
        };
        Ok((joints, params.global_rot))
    });
    let mut joints = Vec::with_capacity(seq.len());
    let mut root_rots = Vec::with_capacity(seq.len());
    for r in fk {
        let (j, q) = r?;
        joints.push(j);
        root_rots.push(q);
    }
    Ok(HandTrack { joints, root_rots })
}

fn put_quat(row: &mut [f64], at: usize, q: Quat) {
    row[at..at + 4].copy_from_slice(&q.to_array());
}

fn put_vec(row: &mut [f64], at: usize, v: &Vec3) {
    row[at..at + 3].copy_from_slice(v.as_slice());
}

fn get_vec(row: &[f64], at: usize) -> Vec3 {
    Vec3::new(row[at], row[at + 1], row[at + 2])
}

fn get_quat(row: &[f64], at: usize, what: &str, frame: usize) -> Result<Quat> {
    Quat::from_array([row[at], row[at + 1], row[at + 2], row[at + 3]]).ok_or_else(|| Error::ZeroQuaternion {
        what: format!("{what} (frame {frame})"),
    })
}

fn matrix_from_rows(rows: Vec<Vec<f64>>, width: usize) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, width, |r, c| rows[r][c])
}

/// Velocity block `Ṙ Ṫ J J̇ θ` for frame `n` of one hand.
fn write_local_block(row: &mut [f64], base: usize, track: &HandTrack, params: &HandParams, n: usize) {
    use local_layout::*;
    let rot = track.root_rots[n];
    let wrist = track.joints[n][0];
    let (rot_vel, trans_vel) = if n == 0 {
        (Quat::IDENTITY, Vec3::zeros())
    } else {
        (track.root_rots[n - 1].inverse() * rot, wrist - track.joints[n - 1][0])
    };
    put_quat(row, base + ROT_VEL, rot_vel);
    put_vec(row, base + TRANS_VEL, &trans_vel);
    let inv = rot.inverse();
    let local = |m: usize, j: usize| -> Vec3 {
        let r = track.root_rots[m].inverse();
        r.rotate(&(track.joints[m][j] - track.joints[m][0]))
    };
    for j in 0..NUM_JOINTS {
        let cur = inv.rotate(&(track.joints[n][j] - wrist));
        put_vec(row, base + JOINTS + 3 * j, &cur);
        let vel = if n == 0 { Vec3::zeros() } else { cur - local(n - 1, j) };
        put_vec(row, base + JOINT_VEL + 3 * j, &vel);
    }
    for (k, q) in params.local_rots.iter().enumerate() {
        put_quat(row, base + THETA + 4 * k, *q);
    }
}

/// Encode a normalized sequence into the local representation.
pub fn encode_local(seq: &MotionSequence, templates: &TemplatePair) -> Result<LocalRepMatrix> {
    use local_layout::*;
    check_normalized(seq, templates)?;
    let left = hand_track(seq, &templates.left, Handedness::Left)?;
    let right = hand_track(seq, &templates.right, Handedness::Right)?;
    let (r_init, t_init) = (right.root_rots[0], right.joints[0][0]);
    let rows = par::map_range(seq.len(), |n| {
        let mut row = vec![0.0; WIDTH];
        write_local_block(&mut row, LEFT_BASE, &left, &seq.frames[n].left, n);
        put_quat(&mut row, RIGHT_INIT, r_init);
        put_vec(&mut row, RIGHT_INIT + 4, &t_init);
        write_local_block(&mut row, RIGHT_BASE, &right, &seq.frames[n].right, n);
        row
    });
    LocalRepMatrix::new(matrix_from_rows(rows, WIDTH), seq.fps)
}

struct DecodedHand {
    joints: Vec<Vec<Vec3>>,
    root_rots: Vec<Quat>,
    local_rots: Vec<[Quat; NUM_ROTATED]>,
}

fn read_thetas(m: &DMatrix<f64>, at: usize) -> Result<Vec<[Quat; NUM_ROTATED]>> {
    (0..m.nrows())
        .map(|n| {
            let row: Vec<f64> = m.row(n).iter().copied().collect();
            let mut out = [Quat::IDENTITY; NUM_ROTATED];
            for (k, q) in out.iter_mut().enumerate() {
                *q = get_quat(&row, at + 4 * k, "joint rotation", n)?;
            }
            Ok(out)
        })
        .collect()
}

/// Recover per-frame parameters for one hand from world joints, root
/// rotations and local rotations. The shape is shared across frames.
fn params_from_decoded(template: &SkeletonTemplate, hand: &DecodedHand) -> Result<Vec<HandParams>> {
    let frames: Vec<_> = hand
        .root_rots
        .iter()
        .zip(&hand.local_rots)
        .zip(&hand.joints)
        .map(|((g, l), j)| (template.world_rotations(*g, l), j.as_slice()))
        .collect();
    let beta = template.estimate_shape(&frames)?;
    let rest0 = template.rest_joints(&beta)?.get(0);
    Ok(hand
        .root_rots
        .iter()
        .zip(&hand.local_rots)
        .zip(&hand.joints)
        .map(|((g, l), j)| HandParams {
            beta: beta.clone(),
            global_rot: *g,
            translation: j[0] - g.rotate(&rest0),
            local_rots: *l,
        })
        .collect())
}

fn assemble(left: (DecodedHand, Vec<HandParams>), right: (DecodedHand, Vec<HandParams>), fps: f64) -> Result<MotionSequence> {
    let (ldec, lp) = left;
    let (rdec, rp) = right;
    let frames: Vec<FrameParams> = lp.into_iter().zip(rp).map(|(l, r)| HandPair::new(l, r)).collect();
    let joints = ldec
        .joints
        .into_iter()
        .zip(rdec.joints)
        .map(|(l, r)| Ok(HandPair::new(JointSet::new(l)?, JointSet::new(r)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut seq = MotionSequence::new(frames, fps)?;
    seq.joints = Some(joints);
    Ok(seq)
}

/// Decode the local representation by integrating the root velocities.
///
/// The returned sequence carries the decoded joints as its joint cache and
/// parameters with a shape fitted to them.
pub fn decode_local(m: &LocalRepMatrix, templates: &TemplatePair) -> Result<MotionSequence> {
    use local_layout::*;
    let data = m.data();
    let n = data.nrows();
    let row0: Vec<f64> = data.row(0).iter().copied().collect();
    let inits = [
        (Quat::IDENTITY, Vec3::zeros(), LEFT_BASE),
        (
            get_quat(&row0, RIGHT_INIT, "R_init", 0)?,
            get_vec(&row0, RIGHT_INIT + 4),
            RIGHT_BASE,
        ),
    ];
    let mut decoded = Vec::with_capacity(2);
    for (hand, (rot0, pos0, base)) in HANDS.iter().zip(inits) {
        let mut rot = rot0;
        let mut wrist = pos0;
        let mut joints = Vec::with_capacity(n);
        let mut root_rots = Vec::with_capacity(n);
        for f in 0..n {
            let row: Vec<f64> = data.row(f).iter().copied().collect();
            rot = rot * get_quat(&row, base + ROT_VEL, "root rotation velocity", f)?;
            wrist += get_vec(&row, base + TRANS_VEL);
            joints.push(
                (0..NUM_JOINTS)
                    .map(|j| wrist + rot.rotate(&get_vec(&row, base + JOINTS + 3 * j)))
                    .collect::<Vec<_>>(),
            );
            root_rots.push(rot);
        }
        let dec = DecodedHand {
            joints,
            root_rots,
            local_rots: read_thetas(data, base + THETA)?,
        };
        let params = params_from_decoded(templates.get(*hand), &dec)?;
        decoded.push((dec, params));
    }
    let right = decoded.pop().expect("two hands");
    let left = decoded.pop().expect("two hands");
    assemble(left, right, m.fps)
}

/// Encode into the global representation (canonical-space joints).
pub fn encode_global(seq: &MotionSequence, templates: &TemplatePair) -> Result<GlobalRepMatrix> {
    use global_layout::*;
    let tracks = [
        hand_track(seq, &templates.left, Handedness::Left)?,
        hand_track(seq, &templates.right, Handedness::Right)?,
    ];
    let rows = par::map_range(seq.len(), |n| {
        let mut row = vec![0.0; WIDTH];
        for (h, (track, hand)) in tracks.iter().zip(HANDS).enumerate() {
            let base = h * HAND_WIDTH;
            for j in 0..NUM_JOINTS {
                let p = track.joints[n][j];
                put_vec(&mut row, base + JOINTS + 3 * j, &p);
                let v = if n == 0 { Vec3::zeros() } else { p - track.joints[n - 1][j] };
                put_vec(&mut row, base + JOINT_VEL + 3 * j, &v);
            }
            for (k, q) in seq.frames[n].get(hand).local_rots.iter().enumerate() {
                put_quat(&mut row, base + THETA + 4 * k, *q);
            }
        }
        row
    });
    GlobalRepMatrix::new(matrix_from_rows(rows, WIDTH), seq.fps)
}

/// Decode the global representation. Joints come back verbatim; wrist
/// orientation and shape are recovered by alternating a rigid Procrustes fit
/// of the proximal joints (wrist + MCPs) with a linear shape solve.
pub fn decode_global(m: &GlobalRepMatrix, templates: &TemplatePair) -> Result<MotionSequence> {
    use global_layout::*;
    let data = m.data();
    let n = data.nrows();
    let mut decoded = Vec::with_capacity(2);
    for (h, hand) in HANDS.iter().enumerate() {
        let template = templates.get(*hand);
        let base = h * HAND_WIDTH;
        let joints: Vec<Vec<Vec3>> = (0..n)
            .map(|f| (0..NUM_JOINTS).map(|j| Vec3::new(data[(f, base + 3 * j)], data[(f, base + 3 * j + 1)], data[(f, base + 3 * j + 2)])).collect())
            .collect();
        let local_rots = read_thetas(data, base + THETA)?;
        let mut beta = vec![0.0; template.shape_dim()];
        let mut root_rots = vec![Quat::IDENTITY; n];
        for _ in 0..50 {
            let rest = template.rest_joints(&beta)?;
            let src: Vec<Vec3> = PROXIMAL.iter().map(|&j| rest.get(j) - rest.get(0)).collect();
            root_rots = par::map_range(n, |f| {
                let dst: Vec<Vec3> = PROXIMAL.iter().map(|&j| joints[f][j] - joints[f][0]).collect();
                kabsch(&src, &dst)
                    .map(|t| t.rotation)
                    .ok_or_else(|| Error::DegenerateGeometry(format!("collinear proximal joints in frame {f}")))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let frames: Vec<_> = root_rots
                .iter()
                .zip(&local_rots)
                .zip(&joints)
                .map(|((g, l), j)| (template.world_rotations(*g, l), j.as_slice()))
                .collect();
            let next = template.estimate_shape(&frames)?;
            let delta = next.iter().zip(&beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            beta = next;
            if delta < 1e-12 {
                break;
            }
        }
        let dec = DecodedHand {
            joints,
            root_rots,
            local_rots,
        };
        let rest0 = template.rest_joints(&beta)?.get(0);
        let params = dec
            .root_rots
            .iter()
            .zip(&dec.local_rots)
            .zip(&dec.joints)
            .map(|((g, l), j)| HandParams {
                beta: beta.clone(),
                global_rot: *g,
                translation: j[0] - g.rotate(&rest0),
                local_rots: *l,
            })
            .collect();
        decoded.push((dec, params));
    }
    let right = decoded.pop().expect("two hands");
    let left = decoded.pop().expect("two hands");
    assemble(left, right, m.fps)
}
