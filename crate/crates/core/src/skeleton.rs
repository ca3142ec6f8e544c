//! Joints-only hand model.
//!
//! Rest joint positions are linear in the shape coefficients through a
//! per-joint shape basis, so evaluating a shaped skeleton costs `O(B · 21)`
//! instead of going through a vertex mesh. Joint layout (21 joints):
//!
//! ```text
//! 0            wrist
//! 1  2  3  4   thumb  MCP PIP DIP tip
//! 5  6  7  8   index  MCP PIP DIP tip
//! 9  10 11 12  middle MCP PIP DIP tip
//! 13 14 15 16  ring   MCP PIP DIP tip
//! 17 18 19 20  pinky  MCP PIP DIP tip
//! ```
//!
//! The 15 rotated joints are MCP, PIP and DIP of each finger; fingertips are
//! leaves that inherit their parent's rotation. The palm-sampled 25-joint set
//! appends the midpoints between the wrist and the index/middle/ring/pinky
//! MCPs.
//!
//! # Template files
//!
//! JSON: `{"version":1,"handedness":"left"|"right","rest_joints":[[x,y,z];21],
//! "shape_basis":[[[x,y,z];21];B],"parents":[-1,0,...],"joint_names":[..21]}`.
//!
//! Binary (little-endian), in order:
//!
//! | field        | type                 |
//! |--------------|----------------------|
//! | magic        | `b"HDSK"`            |
//! | version      | u16 (= 1)            |
//! | handedness   | u8 (0 left, 1 right) |
//! | reserved     | u8                   |
//! | shape dims B | u16                  |
//! | joint count  | u16 (= 21)           |
//! | rest joints  | 21 × 3 f32           |
//! | shape basis  | B × 21 × 3 f32       |
//! | parents      | 21 × i16 (-1 = root) |
//! | joint names  | 21 × (u8 len, utf-8) |

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Quat, RigidTransform, Vec3};

pub const NUM_JOINTS: usize = 21;
pub const NUM_PALM_JOINTS: usize = 25;
pub const NUM_ROTATED: usize = 15;
pub const NUM_BONES: usize = 20;
pub const SHAPE_DIM: usize = 10;
pub const NUM_FINGERS: usize = 5;

pub const WRIST: usize = 0;
pub const MCPS: [usize; 5] = [1, 5, 9, 13, 17];
pub const TIPS: [usize; 5] = [4, 8, 12, 16, 20];
/// MCPs used for palm sampling (thumb excluded).
pub const PALM_MCPS: [usize; 4] = [5, 9, 13, 17];
/// Wrist plus the five MCPs; rigidly attached to the root.
pub const PROXIMAL: [usize; 6] = [0, 1, 5, 9, 13, 17];

pub const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(0),
    Some(5),
    Some(6),
    Some(7),
    Some(0),
    Some(9),
    Some(10),
    Some(11),
    Some(0),
    Some(13),
    Some(14),
    Some(15),
    Some(0),
    Some(17),
    Some(18),
    Some(19),
];

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "wrist", "thumb1", "thumb2", "thumb3", "thumb_tip", "index1", "index2", "index3", "index_tip",
    "middle1", "middle2", "middle3", "middle_tip", "ring1", "ring2", "ring3", "ring_tip", "pinky1",
    "pinky2", "pinky3", "pinky_tip",
];

/// Joint index of rotated joint `k` (0..15): finger `k / 3`, level `k % 3`.
pub const fn rotated_joint(k: usize) -> usize {
    1 + 4 * (k / 3) + k % 3
}

/// Inverse of [`rotated_joint`]; `None` for the wrist and fingertips.
pub const fn rotation_slot(joint: usize) -> Option<usize> {
    if joint == 0 {
        return None;
    }
    let level = (joint - 1) % 4;
    if level == 3 {
        None
    } else {
        Some((joint - 1) / 4 * 3 + level)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Handedness {
    Left,
    Right,
}

/// Shape-dependent hand skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonTemplate {
    pub handedness: Handedness,
    pub rest_joints: Vec<Vec3>,
    /// `shape_basis[b][j]`: displacement of joint `j` per unit of `beta[b]`.
    pub shape_basis: Vec<Vec<Vec3>>,
    pub parents: [Option<usize>; NUM_JOINTS],
    pub joint_names: Vec<String>,
}

/// Per-hand parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HandParams {
    pub beta: Vec<f64>,
    pub global_rot: Quat,
    pub translation: Vec3,
    /// One rotation per rotated joint, see [`rotated_joint`].
    pub local_rots: [Quat; NUM_ROTATED],
}

/// Per-hand flat width in the params file layout: β, root quat, translation, 15 quats.
pub const PARAMS_WIDTH: usize = SHAPE_DIM + 4 + 3 + 4 * NUM_ROTATED;

impl Default for HandParams {
    fn default() -> Self {
        HandParams::rest(SHAPE_DIM)
    }
}

impl HandParams {
    pub fn rest(shape_dim: usize) -> Self {
        HandParams {
            beta: vec![0.0; shape_dim],
            global_rot: Quat::IDENTITY,
            translation: Vec3::zeros(),
            local_rots: [Quat::IDENTITY; NUM_ROTATED],
        }
    }

    pub fn root_transform(&self) -> RigidTransform {
        RigidTransform::new(self.global_rot, self.translation)
    }

    /// Clamp every shape coefficient into `[-limit, limit]`.
    pub fn clamp_beta(&mut self, limit: f64) {
        for b in &mut self.beta {
            *b = b.clamp(-limit, limit);
        }
    }

    pub fn validate(&self, beta_limit: f64) -> Result<()> {
        if let Some(b) = self.beta.iter().find(|b| !b.is_finite() || b.abs() > beta_limit) {
            return Err(Error::invalid(format!("shape coefficient {b} outside ±{beta_limit}")));
        }
        let quats = std::iter::once(&self.global_rot).chain(self.local_rots.iter());
        if quats.into_iter().any(|q| !q.is_unit(1e-9)) {
            return Err(Error::invalid("hand parameters contain a non-unit quaternion"));
        }
        Ok(())
    }

    /// Flatten as `[β(10) | root quat(4) | translation(3) | local quats(60)]`.
    pub fn to_flat(&self) -> Result<Vec<f64>> {
        if self.beta.len() != SHAPE_DIM {
            return Err(Error::DimensionMismatch {
                what: "beta",
                expected: SHAPE_DIM,
                got: self.beta.len(),
            });
        }
        let mut out = Vec::with_capacity(PARAMS_WIDTH);
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.global_rot.to_array());
        out.extend_from_slice(self.translation.as_slice());
        for q in &self.local_rots {
            out.extend_from_slice(&q.to_array());
        }
        Ok(out)
    }

    pub fn from_flat(v: &[f64]) -> Result<HandParams> {
        if v.len() != PARAMS_WIDTH {
            return Err(Error::DimensionMismatch {
                what: "hand parameter row",
                expected: PARAMS_WIDTH,
                got: v.len(),
            });
        }
        let quat = |at: usize, what: &str| {
            Quat::from_array([v[at], v[at + 1], v[at + 2], v[at + 3]])
                .ok_or_else(|| Error::ZeroQuaternion { what: what.to_string() })
        };
        let mut local_rots = [Quat::IDENTITY; NUM_ROTATED];
        for (k, q) in local_rots.iter_mut().enumerate() {
            *q = quat(SHAPE_DIM + 7 + 4 * k, "local rotation")?;
        }
        Ok(HandParams {
            beta: v[..SHAPE_DIM].to_vec(),
            global_rot: quat(SHAPE_DIM, "global rotation")?,
            translation: Vec3::new(v[SHAPE_DIM + 4], v[SHAPE_DIM + 5], v[SHAPE_DIM + 6]),
            local_rots,
        })
    }
}

/// 21 or 25 joint positions.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSet {
    positions: Vec<Vec3>,
}

impl JointSet {
    pub fn new(positions: Vec<Vec3>) -> Result<JointSet> {
        if positions.len() != NUM_JOINTS && positions.len() != NUM_PALM_JOINTS {
            return Err(Error::invalid(format!(
                "joint set must have 21 or 25 joints, got {}",
                positions.len()
            )));
        }
        if positions.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("joint set contains non-finite coordinates"));
        }
        Ok(JointSet { positions })
    }

    pub fn count(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn get(&self, i: usize) -> Vec3 {
        self.positions[i]
    }

    pub fn into_positions(self) -> Vec<Vec3> {
        self.positions
    }

    pub fn transformed(&self, t: &RigidTransform) -> JointSet {
        JointSet {
            positions: self.positions.iter().map(|p| t.apply(p)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> JointSet {
        JointSet {
            positions: self.positions.iter().map(|p| p * s).collect(),
        }
    }

    pub(crate) fn from_raw(positions: Vec<Vec3>) -> JointSet {
        debug_assert!(positions.len() == NUM_JOINTS || positions.len() == NUM_PALM_JOINTS);
        JointSet { positions }
    }
}

/// Left/right template pair.
pub type TemplatePair = crate::representation::HandPair<SkeletonTemplate>;

impl TemplatePair {
    /// The built-in synthetic templates.
    pub fn synthetic() -> TemplatePair {
        crate::representation::HandPair {
            left: SkeletonTemplate::synthetic(Handedness::Left),
            right: SkeletonTemplate::synthetic(Handedness::Right),
        }
    }
}

/// Right-hand rest pose of the synthetic template: fingers along +x, thumb
/// towards +y, palm facing -z. Meters.
const SYNTHETIC_REST_RIGHT: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.025, 0.025, -0.005],
    [0.048, 0.045, -0.008],
    [0.068, 0.060, -0.010],
    [0.085, 0.072, -0.011],
    [0.092, 0.026, 0.0],
    [0.132, 0.028, 0.002],
    [0.157, 0.029, 0.003],
    [0.177, 0.030, 0.003],
    [0.095, 0.005, 0.002],
    [0.139, 0.005, 0.004],
    [0.168, 0.005, 0.005],
    [0.190, 0.005, 0.005],
    [0.089, -0.014, 0.001],
    [0.129, -0.016, 0.003],
    [0.156, -0.017, 0.004],
    [0.177, -0.018, 0.004],
    [0.080, -0.031, -0.002],
    [0.112, -0.035, 0.0],
    [0.132, -0.037, 0.001],
    [0.149, -0.039, 0.001],
];

impl SkeletonTemplate {
    /// Synthetic MANO-topology template. The left hand mirrors the right one
    /// across the xz-plane, so the two hands have identical bone lengths for
    /// equal shape coefficients.
    pub fn synthetic(handedness: Handedness) -> SkeletonTemplate {
        let rest: Vec<Vec3> = SYNTHETIC_REST_RIGHT.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect();
        let mut basis = Vec::with_capacity(SHAPE_DIM);
        // overall scale, 2% per unit
        basis.push(rest.iter().map(|p| p * 0.02).collect::<Vec<_>>());
        // finger length, 3% of the MCP-relative offset per unit
        basis.push(
            (0..NUM_JOINTS)
                .map(|j| match j {
                    0 => Vec3::zeros(),
                    _ => {
                        let mcp = MCPS[(j - 1) / 4];
                        (rest[j] - rest[mcp]) * 0.03
                    }
                })
                .collect(),
        );
        // palm width: spread fingers sideways with their MCP
        basis.push(
            (0..NUM_JOINTS)
                .map(|j| match j {
                    0 => Vec3::zeros(),
                    _ => Vec3::new(0.0, rest[MCPS[(j - 1) / 4]].y * 0.04, 0.0),
                })
                .collect(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0x4841_4e44);
        while basis.len() < SHAPE_DIM {
            basis.push(
                (0..NUM_JOINTS)
                    .map(|j| {
                        if j == WRIST {
                            Vec3::zeros()
                        } else {
                            Vec3::new(
                                rng.random_range(-1.0..1.0),
                                rng.random_range(-1.0..1.0),
                                rng.random_range(-1.0..1.0),
                            ) * 8e-4
                        }
                    })
                    .collect(),
            );
        }
        let mut t = SkeletonTemplate {
            handedness: Handedness::Right,
            rest_joints: rest,
            shape_basis: basis,
            parents: PARENTS,
            joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        };
        if handedness == Handedness::Left {
            t = t.mirrored();
        }
        t
    }

    /// Reflect across the xz-plane and swap handedness.
    pub fn mirrored(&self) -> SkeletonTemplate {
        let m = |p: &Vec3| Vec3::new(p.x, -p.y, p.z);
        SkeletonTemplate {
            handedness: match self.handedness {
                Handedness::Left => Handedness::Right,
                Handedness::Right => Handedness::Left,
            },
            rest_joints: self.rest_joints.iter().map(m).collect(),
            shape_basis: self.shape_basis.iter().map(|s| s.iter().map(m).collect()).collect(),
            parents: self.parents,
            joint_names: self.joint_names.clone(),
        }
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_basis.len()
    }

    /// Check the structural invariants: the fixed 21-joint tree and basis shape.
    pub fn validate(&self) -> Result<()> {
        if self.rest_joints.len() != NUM_JOINTS {
            return Err(Error::DimensionMismatch {
                what: "rest joints",
                expected: NUM_JOINTS,
                got: self.rest_joints.len(),
            });
        }
        if self.shape_basis.len() != SHAPE_DIM {
            return Err(Error::DimensionMismatch {
                what: "shape basis slices",
                expected: SHAPE_DIM,
                got: self.shape_basis.len(),
            });
        }
        if let Some(s) = self.shape_basis.iter().find(|s| s.len() != NUM_JOINTS) {
            return Err(Error::DimensionMismatch {
                what: "shape basis slice",
                expected: NUM_JOINTS,
                got: s.len(),
            });
        }
        if self.parents != PARENTS {
            return Err(Error::invalid("parents do not describe the 21-joint hand tree"));
        }
        if self.joint_names.len() != NUM_JOINTS {
            return Err(Error::DimensionMismatch {
                what: "joint names",
                expected: NUM_JOINTS,
                got: self.joint_names.len(),
            });
        }
        let finite = self
            .rest_joints
            .iter()
            .chain(self.shape_basis.iter().flatten())
            .all(|p| p.iter().all(|c| c.is_finite()));
        if !finite {
            return Err(Error::invalid("template contains non-finite values"));
        }
        Ok(())
    }

    /// Rest joints for shape `beta`: `rest + Σ_b beta_b · basis_b`.
    pub fn rest_joints(&self, beta: &[f64]) -> Result<JointSet> {
        if beta.len() != self.shape_dim() {
            return Err(Error::DimensionMismatch {
                what: "beta",
                expected: self.shape_dim(),
                got: beta.len(),
            });
        }
        let mut out = self.rest_joints.clone();
        for (b, slice) in beta.iter().zip(&self.shape_basis) {
            if *b == 0.0 {
                continue;
            }
            for (p, d) in out.iter_mut().zip(slice) {
                *p += d * *b;
            }
        }
        Ok(JointSet::from_raw(out))
    }

    /// World-space joints and per-joint world rotations.
    pub fn forward_kinematics_full(&self, params: &HandParams) -> Result<(JointSet, [Quat; NUM_JOINTS])> {
        let rest = self.rest_joints(&params.beta)?;
        let rest = rest.positions();
        let mut rots = [Quat::IDENTITY; NUM_JOINTS];
        let mut pos = vec![Vec3::zeros(); NUM_JOINTS];
        rots[0] = params.global_rot;
        pos[0] = params.global_rot.rotate(&rest[0]) + params.translation;
        for j in 1..NUM_JOINTS {
            let p = self.parents[j].expect("non-root joint has a parent");
            pos[j] = pos[p] + rots[p].rotate(&(rest[j] - rest[p]));
            rots[j] = match rotation_slot(j) {
                Some(k) => rots[p] * params.local_rots[k],
                None => rots[p],
            };
        }
        Ok((JointSet::from_raw(pos), rots))
    }

    pub fn forward_kinematics(&self, params: &HandParams) -> Result<JointSet> {
        self.forward_kinematics_full(params).map(|(j, _)| j)
    }

    /// Bone lengths ordered by child joint index (1..=20).
    pub fn bone_lengths(&self, joints: &JointSet) -> Result<[f64; NUM_BONES]> {
        bone_lengths_of(joints, &self.parents)
    }

    /// World rotations for each joint given the root and local rotations.
    /// Independent of shape.
    pub fn world_rotations(&self, global_rot: Quat, local_rots: &[Quat; NUM_ROTATED]) -> [Quat; NUM_JOINTS] {
        let mut rots = [Quat::IDENTITY; NUM_JOINTS];
        rots[0] = global_rot;
        for j in 1..NUM_JOINTS {
            let p = self.parents[j].expect("non-root joint has a parent");
            rots[j] = match rotation_slot(j) {
                Some(k) => rots[p] * local_rots[k],
                None => rots[p],
            };
        }
        rots
    }

    /// Linear model of wrist-relative joint positions in the shape coefficients.
    ///
    /// For fixed joint rotations, `p_j - p_wrist = offset_j + Σ_b beta_b · column_b_j`.
    pub fn shape_design(&self, rots: &[Quat; NUM_JOINTS]) -> (Vec<Vec3>, Vec<Vec<Vec3>>) {
        let bdim = self.shape_dim();
        let mut offset = vec![Vec3::zeros(); NUM_JOINTS];
        let mut cols = vec![vec![Vec3::zeros(); bdim]; NUM_JOINTS];
        for j in 1..NUM_JOINTS {
            let p = self.parents[j].expect("non-root joint has a parent");
            offset[j] = offset[p] + rots[p].rotate(&(self.rest_joints[j] - self.rest_joints[p]));
            for b in 0..bdim {
                let d = self.shape_basis[b][j] - self.shape_basis[b][p];
                cols[j][b] = cols[p][b] + rots[p].rotate(&d);
            }
        }
        (offset, cols)
    }

    /// Least-squares shape coefficients from wrist-relative joint positions
    /// observed under known joint rotations, one `(rotations, joints)` pair per
    /// frame. Solved with an SVD so rank-deficient designs still return the
    /// minimum-norm solution.
    pub fn estimate_shape(&self, frames: &[([Quat; NUM_JOINTS], &[Vec3])]) -> Result<Vec<f64>> {
        let bdim = self.shape_dim();
        let rows = frames.len() * (NUM_JOINTS - 1) * 3;
        if rows == 0 {
            return Ok(vec![0.0; bdim]);
        }
        let mut a = DMatrix::<f64>::zeros(rows, bdim);
        let mut y = DVector::<f64>::zeros(rows);
        let mut r = 0;
        for (rots, joints) in frames {
            if joints.len() < NUM_JOINTS {
                return Err(Error::DimensionMismatch {
                    what: "joints",
                    expected: NUM_JOINTS,
                    got: joints.len(),
                });
            }
            let (offset, cols) = self.shape_design(rots);
            for j in 1..NUM_JOINTS {
                let target = joints[j] - joints[0] - offset[j];
                for c in 0..3 {
                    for b in 0..bdim {
                        a[(r, b)] = cols[j][b][c];
                    }
                    y[r] = target[c];
                    r += 1;
                }
            }
        }
        let svd = a.svd(true, true);
        let max_sv = svd.singular_values.max();
        let sol = svd
            .solve(&y, max_sv * 1e-10)
            .map_err(|e| Error::NumericalRank(e.to_string()))?;
        Ok(sol.iter().copied().collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&TemplateJson::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<SkeletonTemplate> {
        let raw: TemplateJson = serde_json::from_str(s)?;
        raw.try_into()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TEMPLATE_MAGIC);
        out.extend_from_slice(&TEMPLATE_VERSION.to_le_bytes());
        out.push(match self.handedness {
            Handedness::Left => 0,
            Handedness::Right => 1,
        });
        out.push(0);
        out.extend_from_slice(&(self.shape_dim() as u16).to_le_bytes());
        out.extend_from_slice(&(NUM_JOINTS as u16).to_le_bytes());
        for p in self.rest_joints.iter().chain(self.shape_basis.iter().flatten()) {
            for c in p.iter() {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        for p in &self.parents {
            let v: i16 = p.map_or(-1, |p| p as i16);
            out.extend_from_slice(&v.to_le_bytes());
        }
        for name in &self.joint_names {
            let b = name.as_bytes();
            let len = b.len().min(255);
            out.push(len as u8);
            out.extend_from_slice(&b[..len]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SkeletonTemplate> {
        let mut r = crate::io::ByteReader::new(bytes);
        let magic = r.array4()?;
        if &magic != TEMPLATE_MAGIC {
            return Err(Error::BadMagic {
                expected: *TEMPLATE_MAGIC,
                found: magic,
            });
        }
        let version = r.u16()?;
        if version != TEMPLATE_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: TEMPLATE_VERSION,
            });
        }
        let handedness = match r.u8()? {
            0 => Handedness::Left,
            1 => Handedness::Right,
            h => return Err(Error::Format(format!("unknown handedness code {h}"))),
        };
        r.u8()?;
        let bdim = r.u16()? as usize;
        let nj = r.u16()? as usize;
        if nj != NUM_JOINTS {
            return Err(Error::DimensionMismatch {
                what: "template joint count",
                expected: NUM_JOINTS,
                got: nj,
            });
        }
        let read_joints = |r: &mut crate::io::ByteReader| -> Result<Vec<Vec3>> {
            (0..NUM_JOINTS)
                .map(|_| Ok(Vec3::new(r.f32()? as f64, r.f32()? as f64, r.f32()? as f64)))
                .collect()
        };
        let rest = read_joints(&mut r)?;
        let basis = (0..bdim).map(|_| read_joints(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut parents = [None; NUM_JOINTS];
        for p in parents.iter_mut() {
            let v = r.i16()?;
            *p = if v < 0 { None } else { Some(v as usize) };
        }
        let mut names = Vec::with_capacity(NUM_JOINTS);
        for _ in 0..NUM_JOINTS {
            let len = r.u8()? as usize;
            let b = r.take(len)?;
            names.push(String::from_utf8(b.to_vec()).map_err(|e| Error::Format(e.to_string()))?);
        }
        r.finish()?;
        let t = SkeletonTemplate {
            handedness,
            rest_joints: rest,
            shape_basis: basis,
            parents,
            joint_names: names,
        };
        t.validate()?;
        Ok(t)
    }

    /// Load from a `.json` file or the binary format (detected by magic).
    pub fn load(path: &Path) -> Result<SkeletonTemplate> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(TEMPLATE_MAGIC) {
            SkeletonTemplate::from_bytes(&bytes)
        } else {
            SkeletonTemplate::from_json(std::str::from_utf8(&bytes).map_err(|e| Error::Format(e.to_string()))?)
        }
    }
}

pub const TEMPLATE_MAGIC: &[u8; 4] = b"HDSK";
pub const TEMPLATE_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct TemplateJson {
    version: u16,
    handedness: Handedness,
    rest_joints: Vec<[f64; 3]>,
    shape_basis: Vec<Vec<[f64; 3]>>,
    parents: Vec<i32>,
    joint_names: Vec<String>,
}

impl From<&SkeletonTemplate> for TemplateJson {
    fn from(t: &SkeletonTemplate) -> Self {
        let arr = |p: &Vec3| [p.x, p.y, p.z];
        TemplateJson {
            version: TEMPLATE_VERSION,
            handedness: t.handedness,
            rest_joints: t.rest_joints.iter().map(arr).collect(),
            shape_basis: t.shape_basis.iter().map(|s| s.iter().map(arr).collect()).collect(),
            parents: t.parents.iter().map(|p| p.map_or(-1, |p| p as i32)).collect(),
            joint_names: t.joint_names.clone(),
        }
    }
}

impl TryFrom<TemplateJson> for SkeletonTemplate {
    type Error = Error;

    fn try_from(raw: TemplateJson) -> Result<Self> {
        if raw.version != TEMPLATE_VERSION {
            return Err(Error::UnsupportedVersion {
                found: raw.version,
                supported: TEMPLATE_VERSION,
            });
        }
        if raw.parents.len() != NUM_JOINTS {
            return Err(Error::DimensionMismatch {
                what: "parents",
                expected: NUM_JOINTS,
                got: raw.parents.len(),
            });
        }
        let v = |p: &[f64; 3]| Vec3::new(p[0], p[1], p[2]);
        let mut parents = [None; NUM_JOINTS];
        for (dst, p) in parents.iter_mut().zip(&raw.parents) {
            *dst = usize::try_from(*p).ok();
        }
        let t = SkeletonTemplate {
            handedness: raw.handedness,
            rest_joints: raw.rest_joints.iter().map(v).collect(),
            shape_basis: raw.shape_basis.iter().map(|s| s.iter().map(v).collect()).collect(),
            parents,
            joint_names: raw.joint_names,
        };
        t.validate()?;
        Ok(t)
    }
}

pub fn bone_lengths_of(joints: &JointSet, parents: &[Option<usize>; NUM_JOINTS]) -> Result<[f64; NUM_BONES]> {
    if joints.count() < NUM_JOINTS {
        return Err(Error::DimensionMismatch {
            what: "joints",
            expected: NUM_JOINTS,
            got: joints.count(),
        });
    }
    let p = joints.positions();
    let mut out = [0.0; NUM_BONES];
    for c in 1..NUM_JOINTS {
        let parent = parents[c].expect("non-root joint has a parent");
        out[c - 1] = (p[c] - p[parent]).norm();
    }
    Ok(out)
}

/// Append the four palm points (wrist↔MCP midpoints) to a 21-joint set.
pub fn palm_sample(joints: &JointSet) -> Result<JointSet> {
    if joints.count() != NUM_JOINTS {
        return Err(Error::DimensionMismatch {
            what: "palm sampling input",
            expected: NUM_JOINTS,
            got: joints.count(),
        });
    }
    let p = joints.positions();
    let mut out = p.to_vec();
    out.extend(PALM_MCPS.iter().map(|&m| (p[WRIST] + p[m]) * 0.5));
    Ok(JointSet::from_raw(out))
}
