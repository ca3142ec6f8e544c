//! Contact, shape, penetration and distribution metrics.
//!
//! Frame-level inputs are [`FrameJoints`]. Joint sets may hold 21 joints (in
//! which case the four palm points are appended on the fly) or 25.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{capsule_signed_distance, Capsule, Vec3};
use crate::par;
use crate::representation::{global_layout, FrameJoints, GlobalRepMatrix};
use crate::skeleton::{bone_lengths_of, palm_sample, JointSet, NUM_BONES, NUM_JOINTS, NUM_PALM_JOINTS, PARENTS};

const P: usize = NUM_PALM_JOINTS;

/// Pairwise offsets `right_j − left_i` between two 25-point sets.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectedDistanceMatrix {
    vectors: Vec<Vec3>,
    norms: Vec<f64>,
}

impl DirectedDistanceMatrix {
    pub fn vector(&self, i: usize, j: usize) -> Vec3 {
        self.vectors[i * P + j]
    }

    pub fn norm(&self, i: usize, j: usize) -> f64 {
        self.norms[i * P + j]
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }
}

fn with_palm(j: &JointSet) -> Result<std::borrow::Cow<'_, JointSet>> {
    match j.count() {
        NUM_PALM_JOINTS => Ok(std::borrow::Cow::Borrowed(j)),
        _ => Ok(std::borrow::Cow::Owned(palm_sample(j)?)),
    }
}

pub fn directed_distance_matrix(left: &JointSet, right: &JointSet) -> Result<DirectedDistanceMatrix> {
    for s in [left, right] {
        if s.count() != P {
            return Err(Error::DimensionMismatch {
                what: "distance matrix joint count",
                expected: P,
                got: s.count(),
            });
        }
    }
    let mut vectors = Vec::with_capacity(P * P);
    for l in left.positions() {
        for r in right.positions() {
            vectors.push(r - l);
        }
    }
    let norms = vectors.iter().map(|v| v.norm()).collect();
    Ok(DirectedDistanceMatrix { vectors, norms })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DirectionWeight {
    /// `2 − cos`: 1 for aligned offsets, 3 for opposed ones.
    #[default]
    Dot,
    /// `1 + |d̂_pred × d̂_gt|`.
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactParams {
    pub stiffness: f64,
    pub threshold: f64,
    pub direction_weight: DirectionWeight,
}

impl Default for ContactParams {
    fn default() -> Self {
        ContactParams {
            stiffness: 1.0,
            threshold: 0.02,
            direction_weight: DirectionWeight::Dot,
        }
    }
}

impl ContactParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || !(self.stiffness >= 0.0) {
            return Err(Error::invalid(format!(
                "contact params need K ≥ 0 and τ > 0, got K={} τ={}",
                self.stiffness, self.threshold
            )));
        }
        Ok(())
    }

    fn potential(&self, d: f64) -> f64 {
        let g = (self.threshold - d).max(0.0);
        0.5 * self.stiffness * g * g
    }

    fn weight(&self, dp: &Vec3, np: f64, dg: &Vec3, ng: f64) -> f64 {
        let tau = self.threshold;
        if !(np < tau && ng < tau && np > 1e-9 && ng > 1e-9) {
            return 1.0;
        }
        let (up, ug) = (dp / np, dg / ng);
        match self.direction_weight {
            DirectionWeight::Dot => 2.0 - up.dot(&ug),
            DirectionWeight::Cross => 1.0 + up.cross(&ug).norm(),
        }
    }
}

/// Row-major 25×25 potentials.
pub fn contact_potential(d: &DirectedDistanceMatrix, p: &ContactParams) -> Result<Vec<f64>> {
    p.validate()?;
    Ok(d.norms.iter().map(|&n| p.potential(n)).collect())
}

fn frame_interaction(pred: &FrameJoints, gt: &FrameJoints, p: &ContactParams) -> Result<f64> {
    let dp = directed_distance_matrix(&*with_palm(&pred.left)?, &*with_palm(&pred.right)?)?;
    let dg = directed_distance_matrix(&*with_palm(&gt.left)?, &*with_palm(&gt.right)?)?;
    let mut sum = 0.0;
    for e in 0..P * P {
        let (np, ng) = (dp.norms[e], dg.norms[e]);
        let diff = (p.potential(np) - p.potential(ng)).abs();
        if diff > 0.0 {
            sum += diff * p.weight(&dp.vectors[e], np, &dg.vectors[e], ng);
        }
    }
    Ok(sum)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            what: "frame count (pred vs gt)",
            expected: b,
            got: a,
        });
    }
    if a == 0 {
        return Err(Error::SequenceTooShort {
            what: "metric input",
            min: 1,
            got: 0,
        });
    }
    Ok(())
}

/// Potential mismatch weighted by offset direction, summed over the 25×25
/// entries and averaged over frames.
pub fn interaction_loss(pred: &[FrameJoints], gt: &[FrameJoints], p: &ContactParams) -> Result<f64> {
    p.validate()?;
    check_lengths(pred.len(), gt.len())?;
    let per_frame = par::try_map_range(pred.len(), |n| frame_interaction(&pred[n], &gt[n], p))?;
    Ok(par::compensated_sum(per_frame) / pred.len() as f64)
}

fn bones(j: &JointSet) -> Result<[f64; NUM_BONES]> {
    bone_lengths_of(j, &PARENTS)
}

fn l1(a: &[f64; NUM_BONES], b: &[f64; NUM_BONES]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Left/right bone-length mismatch of the prediction plus prediction/ground
/// truth mismatch of both hands, averaged over frames.
pub fn shape_loss(pred: &[FrameJoints], gt: &[FrameJoints]) -> Result<f64> {
    check_lengths(pred.len(), gt.len())?;
    let per_frame = par::try_map_range(pred.len(), |n| -> Result<f64> {
        let (pl, pr) = (bones(&pred[n].left)?, bones(&pred[n].right)?);
        let (gl, gr) = (bones(&gt[n].left)?, bones(&gt[n].right)?);
        Ok(l1(&pl, &pr) + l1(&pl, &gl) + l1(&pr, &gr))
    })?;
    Ok(par::compensated_sum(per_frame) / pred.len() as f64)
}

pub const DEFAULT_SDF_RADIUS: f64 = 0.008;

fn capsules(j: &JointSet, radius: f64) -> Result<Vec<Capsule>> {
    let p = j.positions();
    (1..NUM_JOINTS)
        .map(|c| Capsule::new(p[PARENTS[c].expect("non-root")], p[c], radius))
        .collect()
}

fn penetration_into(points: &JointSet, hand: &JointSet, radius: f64) -> Result<f64> {
    let caps = capsules(hand, radius)?;
    Ok(points
        .positions()
        .iter()
        .map(|x| {
            let sdf = caps.iter().map(|c| capsule_signed_distance(x, c)).fold(f64::INFINITY, f64::min);
            (-sdf).max(0.0)
        })
        .sum())
}

/// Penetration depth of one frame: each hand's 25 sample points against the
/// capsule union of the other hand's bones.
pub fn frame_penetration(frame: &FrameJoints, radius: f64) -> Result<f64> {
    let (l, r) = (with_palm(&frame.left)?, with_palm(&frame.right)?);
    Ok(penetration_into(&r, &l, radius)? + penetration_into(&l, &r, radius)?)
}

/// Mean per-frame penetration over the frames that penetrate at all (0 when
/// none do).
pub fn sdf_penetration(frames: &[FrameJoints], radius: f64) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("capsule radius must be positive, got {radius}")));
    }
    let per_frame = par::try_map_range(frames.len(), |n| frame_penetration(&frames[n], radius))?;
    let hits: Vec<f64> = per_frame.into_iter().filter(|v| *v > 0.0).collect();
    if hits.is_empty() {
        return Ok(0.0);
    }
    let n = hits.len() as f64;
    Ok(par::compensated_sum(hits) / n)
}

/// Mean and covariance of a feature population.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl FeatureStats {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<FeatureStats> {
        let d = mean.len();
        if covariance.shape() != (d, d) {
            return Err(Error::DimensionMismatch {
                what: "covariance size",
                expected: d,
                got: covariance.nrows(),
            });
        }
        let asym = (&covariance - covariance.transpose()).abs().max();
        if asym > 1e-9 {
            return Err(Error::invalid(format!("covariance is not symmetric (max |C − Cᵀ| = {asym:e})")));
        }
        Ok(FeatureStats { mean, covariance })
    }

    /// Sample statistics of the rows of `features` (unbiased covariance).
    pub fn from_samples(features: &DMatrix<f64>) -> Result<FeatureStats> {
        let m = features.nrows();
        if m < 2 {
            return Err(Error::invalid(format!("need at least 2 feature samples, got {m}")));
        }
        let mean = features.row_mean().transpose();
        let mut centered = features.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / (m - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        FeatureStats::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Symmetric eigendecomposition with a PSD check.
fn psd_eigen(c: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let e = SymmetricEigen::new(c.clone());
    let scale = e.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let min = e.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-9 * scale {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    Ok(e)
}

fn sqrt_psd(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = psd_eigen(c)?;
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// `|μa − μb|² + tr(Ca + Cb − 2·(Ca Cb)^½)`, with the trace of the square
/// root taken from the symmetric matrix `Ca^½ Cb Ca^½`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            what: "feature dimension",
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    if a.covariance == b.covariance {
        // identical covariances: the trace term is exactly zero
        psd_eigen(&a.covariance)?;
        return Ok(mean_term);
    }
    let sa = sqrt_psd(&a.covariance)?;
    psd_eigen(&b.covariance)?;
    let mut m = &sa * &b.covariance * &sa;
    m = (&m + m.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let fid = mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    Ok(fid.max(0.0))
}

/// Mean distance between element-wise pairs of two disjoint random subsets.
pub fn diversity(features: &DMatrix<f64>, subset: usize, seed: u64) -> Result<f64> {
    let m = features.nrows();
    if subset == 0 || m < 2 * subset {
        return Err(Error::invalid(format!(
            "diversity needs at least 2·{subset} samples (and a non-empty subset), got {m}"
        )));
    }
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let dists = (0..subset).map(|k| (features.row(idx[k]) - features.row(idx[subset + k])).norm());
    Ok(par::compensated_sum(dists) / subset as f64)
}

/// Maps a global-representation motion to a fixed-length feature vector.
pub trait FeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn extract(&self, rep: &GlobalRepMatrix) -> DVector<f64>;

    /// One feature vector per row of the output.
    fn extract_all(&self, reps: &[GlobalRepMatrix]) -> DMatrix<f64> {
        let rows = par::map_slice(reps, |r| self.extract(r));
        DMatrix::from_fn(rows.len(), self.dim(), |i, j| rows[i][j])
    }
}

/// Per-channel mean followed by per-channel population standard deviation.
#[derive(Clone, Copy, Debug, Default)]
pub struct StatisticalFeaturizer;

impl FeatureExtractor for StatisticalFeaturizer {
    fn dim(&self) -> usize {
        2 * global_layout::WIDTH
    }

    fn extract(&self, rep: &GlobalRepMatrix) -> DVector<f64> {
        let data = rep.data();
        let n = data.nrows() as f64;
        let w = global_layout::WIDTH;
        let mut out = DVector::zeros(2 * w);
        for c in 0..w {
            let col = data.column(c);
            let mean = par::compensated_sum(col.iter().copied()) / n;
            let var = par::compensated_sum(col.iter().map(|v| (v - mean) * (v - mean))) / n;
            out[c] = mean;
            out[w + c] = var.sqrt();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportParams {
    #[serde(rename = "K")]
    pub stiffness: f64,
    #[serde(rename = "tau")]
    pub threshold: f64,
    pub radius: f64,
    pub seed: u64,
}

/// Serialized metric report. `fid` and `diversity` are `null` when there
/// are too few feature samples to compute them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: Option<f64>,
    pub diversity: Option<f64>,
    pub sdf_penetration: f64,
    pub interaction_loss: f64,
    pub shape_loss: f64,
    pub params: ReportParams,
}
