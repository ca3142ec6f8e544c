//! DDPM sampling with x̂₀-predicting denoisers.
//!
//! Representations are `N × D` matrices (frames × channels). The forward
//! process is `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`; sampling runs the usual posterior
//! `q(x_{t−1} | x_t, x̂₀)` from `t = T` down to 1 and returns the last x̂₀.
//! Conditions are imposed by replacement at every step.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::par;
use crate::representation::local_layout;

/// Offset in the cosine schedule that keeps β small near `t = 0`.
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    /// `beta[0]` is unused and kept at 0 so indices match timesteps.
    beta: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule with `steps` noising steps.
    pub fn cosine(steps: usize) -> Result<NoiseSchedule> {
        if steps < 1 {
            return Err(Error::invalid("noise schedule needs at least one step"));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0);
        let raw: Vec<f64> = (0..=steps).map(|t| f(t) / f0).collect();
        let mut beta = vec![0.0; steps + 1];
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            beta[t] = (1.0 - raw[t] / raw[t - 1]).min(MAX_BETA);
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
        }
        Ok(NoiseSchedule { alpha_bar, beta })
    }

    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// First 8 bytes of SHA-256 over the step count and ᾱ table.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.steps() as u32).to_le_bytes());
        for a in &self.alpha_bar {
            h.update(a.to_le_bytes());
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 0..={}", self.steps())));
        }
        Ok(())
    }

    /// Posterior mean coefficients `(c₀, c_t)` and variance for `q(x_{t−1} | x_t, x₀)`.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let (ab, ab_prev, b) = (self.alpha_bar[t], self.alpha_bar[t - 1], self.beta[t]);
        let c0 = ab_prev.sqrt() * b / (1.0 - ab);
        let ct = (1.0 - b).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = (1.0 - ab_prev) / (1.0 - ab) * b;
        (c0, ct, var)
    }
}

/// `√ᾱ_t·x₀ + √(1−ᾱ_t)·ε`. `t = 0` returns `x₀`.
pub fn q_sample(x0: &DMatrix<f64>, t: usize, eps: &DMatrix<f64>, s: &NoiseSchedule) -> Result<DMatrix<f64>> {
    s.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::DimensionMismatch {
            what: "noise columns",
            expected: x0.ncols(),
            got: eps.ncols(),
        });
    }
    let ab = s.alpha_bar(t);
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Number of head and tail frames fixed by in-betweening.
pub const INBETWEEN_FRAMES: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    Unconstrained,
    /// Ground-truth first and last frames (`5 × D` each).
    Inbetween { head: DMatrix<f64>, tail: DMatrix<f64> },
    /// Ground-truth values for a fixed set of channels in every frame.
    Trajectory { channels: Vec<usize>, values: DMatrix<f64> },
}

impl Condition {
    /// In-betweening condition taken from the first and last frames of `gt`.
    pub fn inbetween_from(gt: &DMatrix<f64>) -> Result<Condition> {
        let n = gt.nrows();
        if n < 2 * INBETWEEN_FRAMES {
            return Err(Error::SequenceTooShort {
                what: "in-betweening (N≥10)",
                min: 2 * INBETWEEN_FRAMES,
                got: n,
            });
        }
        Ok(Condition::Inbetween {
            head: gt.rows(0, INBETWEEN_FRAMES).into_owned(),
            tail: gt.rows(n - INBETWEEN_FRAMES, INBETWEEN_FRAMES).into_owned(),
        })
    }

    /// Trajectory condition on the 14 root-velocity channels of a local
    /// representation.
    pub fn trajectory_from(gt: &DMatrix<f64>) -> Result<Condition> {
        if gt.ncols() != local_layout::WIDTH {
            return Err(Error::DimensionMismatch {
                what: "trajectory conditioning needs the local representation",
                expected: local_layout::WIDTH,
                got: gt.ncols(),
            });
        }
        let channels = local_layout::ROOT_CHANNELS.to_vec();
        let values = DMatrix::from_fn(gt.nrows(), channels.len(), |r, c| gt[(r, channels[c])]);
        Ok(Condition::Trajectory { channels, values })
    }

    pub fn validate(&self, shape: (usize, usize)) -> Result<()> {
        let (n, d) = shape;
        match self {
            Condition::Unconstrained => Ok(()),
            Condition::Inbetween { head, tail } => {
                if n < 2 * INBETWEEN_FRAMES {
                    return Err(Error::SequenceTooShort {
                        what: "in-betweening (N≥10)",
                        min: 2 * INBETWEEN_FRAMES,
                        got: n,
                    });
                }
                for m in [head, tail] {
                    if m.shape() != (INBETWEEN_FRAMES, d) {
                        return Err(Error::DimensionMismatch {
                            what: "in-betweening block columns",
                            expected: d,
                            got: m.ncols(),
                        });
                    }
                }
                Ok(())
            }
            Condition::Trajectory { channels, values } => {
                if values.shape() != (n, channels.len()) {
                    return Err(Error::DimensionMismatch {
                        what: "trajectory condition frames",
                        expected: n,
                        got: values.nrows(),
                    });
                }
                if let Some(c) = channels.iter().find(|c| **c >= d) {
                    return Err(Error::invalid(format!("trajectory channel {c} outside width {d}")));
                }
                Ok(())
            }
        }
    }

    /// Shape of the noise block consumed by [`apply_condition_with_noise`].
    pub fn noise_shape(&self, shape: (usize, usize)) -> (usize, usize) {
        match self {
            Condition::Unconstrained => (0, 0),
            Condition::Inbetween { .. } => (2 * INBETWEEN_FRAMES, shape.1),
            Condition::Trajectory { channels, .. } => (shape.0, channels.len()),
        }
    }
}

/// Overwrite the constrained entries of `x` with the ground truth diffused
/// to step `t` using the supplied noise (exact ground truth at `t = 0`).
/// For in-betweening `eps` holds the head rows followed by the tail rows;
/// for trajectories it is `N × channels`.
pub fn apply_condition_with_noise(x: &mut DMatrix<f64>, t: usize, cond: &Condition, s: &NoiseSchedule, eps: &DMatrix<f64>) -> Result<()> {
    s.check_t(t)?;
    cond.validate(x.shape())?;
    if eps.shape() != cond.noise_shape(x.shape()) {
        return Err(Error::DimensionMismatch {
            what: "conditioning noise rows",
            expected: cond.noise_shape(x.shape()).0,
            got: eps.nrows(),
        });
    }
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let diffuse = |gt: f64, e: f64| if t == 0 { gt } else { a * gt + b * e };
    match cond {
        Condition::Unconstrained => {}
        Condition::Inbetween { head, tail } => {
            let n = x.nrows();
            for r in 0..INBETWEEN_FRAMES {
                for c in 0..x.ncols() {
                    x[(r, c)] = diffuse(head[(r, c)], eps[(r, c)]);
                    x[(n - INBETWEEN_FRAMES + r, c)] = diffuse(tail[(r, c)], eps[(INBETWEEN_FRAMES + r, c)]);
                }
            }
        }
        Condition::Trajectory { channels, values } => {
            for r in 0..x.nrows() {
                for (k, &c) in channels.iter().enumerate() {
                    x[(r, c)] = diffuse(values[(r, k)], eps[(r, k)]);
                }
            }
        }
    }
    Ok(())
}

fn standard_normal(rng: &mut impl Rng, shape: (usize, usize)) -> DMatrix<f64> {
    // filled row by row so the draw order is independent of storage order
    let mut m = DMatrix::zeros(shape.0, shape.1);
    for r in 0..shape.0 {
        for c in 0..shape.1 {
            m[(r, c)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// [`apply_condition_with_noise`] with noise drawn from `rng`. No draws are
/// made at `t = 0` or for unconstrained sampling.
pub fn apply_condition(x: &mut DMatrix<f64>, t: usize, cond: &Condition, s: &NoiseSchedule, rng: &mut impl Rng) -> Result<()> {
    let (r, c) = cond.noise_shape(x.shape());
    let eps = if t == 0 { DMatrix::zeros(r, c) } else { standard_normal(rng, (r, c)) };
    apply_condition_with_noise(x, t, cond, s, &eps)
}

/// Predicts x̂₀ from a noisy sample.
pub trait Denoiser: Send + Sync {
    fn denoise(&self, x: &DMatrix<f64>, t: usize, cond: &Condition) -> DMatrix<f64>;
}

fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

fn run_chain(denoiser: &dyn Denoiser, s: &NoiseSchedule, shape: (usize, usize), cond: &Condition, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    cond.validate(shape)?;
    let steps = s.steps();
    let mut x = standard_normal(rng, shape);
    apply_condition(&mut x, steps, cond, s, rng)?;
    for t in (1..=steps).rev() {
        let mut x0 = denoiser.denoise(&x, t, cond);
        if x0.shape() != shape {
            return Err(Error::DenoiserShape {
                expected: shape,
                got: x0.shape(),
            });
        }
        if t == 1 {
            apply_condition(&mut x0, 0, cond, s, rng)?;
            return Ok(x0);
        }
        let (c0, ct, var) = s.posterior(t);
        let z = standard_normal(rng, shape);
        x0 *= c0;
        x0 += &x * ct;
        x0 += z * var.sqrt();
        x = x0;
        apply_condition(&mut x, t - 1, cond, s, rng)?;
    }
    unreachable!("the loop returns at t = 1")
}

/// One sample chain. Identical to chain 0 of [`sample_many`].
pub fn ddpm_sample(denoiser: &dyn Denoiser, s: &NoiseSchedule, shape: (usize, usize), cond: &Condition, seed: u64) -> Result<DMatrix<f64>> {
    run_chain(denoiser, s, shape, cond, &mut chain_rng(seed, 0))
}

/// `count` independent chains; chain `i` draws from stream `i` of the seeded
/// generator, so results do not depend on scheduling.
pub fn sample_many(
    denoiser: &dyn Denoiser,
    s: &NoiseSchedule,
    shape: (usize, usize),
    cond: &Condition,
    seed: u64,
    count: usize,
) -> Result<Vec<DMatrix<f64>>> {
    par::try_map_range(count, |i| run_chain(denoiser, s, shape, cond, &mut chain_rng(seed, i as u64)))
}

/// Exact posterior mean for Gaussian data `x₀ ~ N(μ, Σ)`, applied per row.
#[derive(Clone, Debug)]
pub struct GaussianOracleDenoiser {
    mu: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    alpha_bar: Vec<f64>,
}

impl GaussianOracleDenoiser {
    pub fn new(mu: DVector<f64>, sigma: &DMatrix<f64>, s: &NoiseSchedule) -> Result<GaussianOracleDenoiser> {
        let d = mu.len();
        if sigma.shape() != (d, d) {
            return Err(Error::DimensionMismatch {
                what: "oracle covariance",
                expected: d,
                got: sigma.nrows(),
            });
        }
        let sym = (sigma + sigma.transpose()) * 0.5;
        let e = SymmetricEigen::new(sym);
        let scale = e.eigenvalues.amax().max(1.0);
        let min = e.eigenvalues.min();
        if min < -1e-9 * scale {
            return Err(Error::NotPsd { min_eigenvalue: min });
        }
        Ok(GaussianOracleDenoiser {
            mu,
            eigenvectors: e.eigenvectors,
            eigenvalues: e.eigenvalues.map(|v| v.max(0.0)),
            alpha_bar: s.alpha_bars().to_vec(),
        })
    }

    /// The affine map `x̂₀ = A_t x_t + b_t` for one row.
    pub fn coefficients(&self, t: usize) -> (DMatrix<f64>, DVector<f64>) {
        let ab = self.alpha_bar[t];
        let gain = self.eigenvalues.map(|l| ab.sqrt() * l / (ab * l + 1.0 - ab));
        let a = &self.eigenvectors * DMatrix::from_diagonal(&gain) * self.eigenvectors.transpose();
        let b = &self.mu - &a * &self.mu * ab.sqrt();
        (a, b)
    }
}

impl Denoiser for GaussianOracleDenoiser {
    fn denoise(&self, x: &DMatrix<f64>, t: usize, _cond: &Condition) -> DMatrix<f64> {
        let ab = self.alpha_bar[t];
        let gain = self.eigenvalues.map(|l| ab.sqrt() * l / (ab * l + 1.0 - ab));
        // rows: μ + V·diag(g)·Vᵀ·(x − √ᾱμ)
        let mut centered = x.clone();
        let shift = self.mu.transpose() * ab.sqrt();
        for mut row in centered.row_iter_mut() {
            row -= &shift;
        }
        let mut proj = centered * &self.eigenvectors;
        for (c, g) in gain.iter().enumerate() {
            proj.column_mut(c).scale_mut(*g);
        }
        let mut out = proj * self.eigenvectors.transpose();
        let mu_t = self.mu.transpose();
        for mut row in out.row_iter_mut() {
            row += &mu_t;
        }
        out
    }
}

/// Piecewise-constant affine denoiser: one `(A, b)` per timestep bucket.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDenoiser {
    steps: usize,
    schedule_hash: u64,
    /// `M + 1` increasing values; bucket `m` covers `[boundaries[m], boundaries[m+1])`.
    boundaries: Vec<usize>,
    a: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
}

pub const MODEL_MAGIC: &[u8; 4] = b"HDDN";
pub const MODEL_VERSION: u16 = 1;

/// Equal-width partition of `1..=steps` into `buckets` ranges.
pub fn bucket_boundaries(steps: usize, buckets: usize) -> Result<Vec<usize>> {
    if buckets < 1 || buckets > steps {
        return Err(Error::invalid(format!("bucket count must be in 1..={steps}, got {buckets}")));
    }
    Ok((0..=buckets).map(|m| 1 + m * steps / buckets).collect())
}

impl LinearDenoiser {
    pub fn new(s: &NoiseSchedule, boundaries: Vec<usize>, a: Vec<DMatrix<f64>>, b: Vec<DVector<f64>>) -> Result<LinearDenoiser> {
        let m = a.len();
        if m == 0 || b.len() != m || boundaries.len() != m + 1 {
            return Err(Error::invalid("linear denoiser needs M ≥ 1 buckets with M+1 boundaries"));
        }
        if boundaries[0] != 1 || boundaries[m] != s.steps() + 1 || boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "bucket boundaries {boundaries:?} do not partition 1..={}",
                s.steps()
            )));
        }
        let d = b[0].len();
        for (am, bm) in a.iter().zip(&b) {
            if am.shape() != (d, d) || bm.len() != d {
                return Err(Error::DimensionMismatch {
                    what: "linear denoiser bucket width",
                    expected: d,
                    got: am.ncols(),
                });
            }
            if !am.iter().chain(bm.iter()).all(|v| v.is_finite()) {
                return Err(Error::invalid("linear denoiser has non-finite coefficients"));
            }
        }
        Ok(LinearDenoiser {
            steps: s.steps(),
            schedule_hash: s.hash(),
            boundaries,
            a,
            b,
        })
    }

    pub fn dim(&self) -> usize {
        self.b[0].len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn buckets(&self) -> usize {
        self.a.len()
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn bucket_of(&self, t: usize) -> usize {
        let m = self.boundaries.partition_point(|&b| b <= t);
        m.saturating_sub(1).min(self.a.len() - 1)
    }

    pub fn coefficients(&self, bucket: usize) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.a[bucket], &self.b[bucket])
    }

    /// Error unless `s` is the schedule this model was fitted for.
    pub fn check_schedule(&self, s: &NoiseSchedule) -> Result<()> {
        if s.steps() != self.steps || s.hash() != self.schedule_hash {
            return Err(Error::ScheduleMismatch);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dim();
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.steps as u32).to_le_bytes());
        out.extend_from_slice(&self.schedule_hash.to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(self.buckets() as u32).to_le_bytes());
        for b in &self.boundaries {
            out.extend_from_slice(&(*b as u32).to_le_bytes());
        }
        for (a, b) in self.a.iter().zip(&self.b) {
            for r in 0..d {
                for c in 0..d {
                    out.extend_from_slice(&(a[(r, c)] as f32).to_le_bytes());
                }
            }
            for v in b.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parse a model file and check it against the cosine schedule it names.
    pub fn from_bytes(bytes: &[u8]) -> Result<LinearDenoiser> {
        let mut r = ByteReader::new(bytes);
        let magic = r.array4()?;
        if &magic != MODEL_MAGIC {
            return Err(Error::BadMagic {
                expected: *MODEL_MAGIC,
                found: magic,
            });
        }
        let version = r.u16()?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: MODEL_VERSION,
            });
        }
        let steps = r.u32()? as usize;
        let hash = r.u64()?;
        let d = r.u32()? as usize;
        let m = r.u32()? as usize;
        let expected = 4 + 2 + 4 + 8 + 4 + 4 + 4 * (m + 1) + 4 * m * (d * d + d);
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let boundaries = (0..=m).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut a = Vec::with_capacity(m);
        let mut b = Vec::with_capacity(m);
        for _ in 0..m {
            let vals = (0..d * d).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            a.push(DMatrix::from_row_slice(d, d, &vals));
            let vals = (0..d).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            b.push(DVector::from_vec(vals));
        }
        r.finish()?;
        let s = NoiseSchedule::cosine(steps)?;
        if s.hash() != hash {
            return Err(Error::ScheduleMismatch);
        }
        LinearDenoiser::new(&s, boundaries, a, b)
    }

    pub fn load(path: &std::path::Path) -> Result<LinearDenoiser> {
        LinearDenoiser::from_bytes(&std::fs::read(path)?)
    }
}

impl Denoiser for LinearDenoiser {
    fn denoise(&self, x: &DMatrix<f64>, t: usize, _cond: &Condition) -> DMatrix<f64> {
        let m = self.bucket_of(t);
        let mut out = x * self.a[m].transpose();
        let bt = self.b[m].transpose();
        for mut row in out.row_iter_mut() {
            row += &bt;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFitConfig {
    pub buckets: usize,
    pub ridge: f64,
    /// Regression samples drawn per bucket.
    pub samples_per_bucket: usize,
    pub seed: u64,
}

impl Default for LinearFitConfig {
    fn default() -> Self {
        LinearFitConfig {
            buckets: 10,
            ridge: 1e-3,
            samples_per_bucket: 4096,
            seed: 0,
        }
    }
}

/// Ridge regression of `x₀` on `x_t` per timestep bucket, over random
/// `(row, t, ε)` triples. Each frame row of each sequence is one sample; the
/// ridge penalizes `A` only, not the intercept.
pub fn fit_linear_denoiser(data: &[DMatrix<f64>], s: &NoiseSchedule, cfg: &LinearFitConfig) -> Result<LinearDenoiser> {
    if data.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 training sequences, got {}", data.len())));
    }
    if !(cfg.ridge >= 0.0) || cfg.samples_per_bucket == 0 {
        return Err(Error::invalid("ridge must be ≥ 0 and samples_per_bucket ≥ 1"));
    }
    let d = data[0].ncols();
    if let Some(m) = data.iter().find(|m| m.ncols() != d) {
        return Err(Error::DimensionMismatch {
            what: "training sequence width",
            expected: d,
            got: m.ncols(),
        });
    }
    let rows: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, m)| (0..m.nrows()).map(move |r| (i, r)))
        .collect();
    if rows.is_empty() {
        return Err(Error::invalid("training data has no frames"));
    }
    let boundaries = bucket_boundaries(s.steps(), cfg.buckets)?;
    let fits = par::try_map_range(cfg.buckets, |m| -> Result<(DMatrix<f64>, DVector<f64>)> {
        let mut rng = chain_rng(cfg.seed, m as u64);
        let k = cfg.samples_per_bucket;
        let mut z = DMatrix::<f64>::zeros(k, d + 1);
        let mut y = DMatrix::<f64>::zeros(k, d);
        for i in 0..k {
            let (seq, r) = rows[rng.random_range(0..rows.len())];
            let t = rng.random_range(boundaries[m]..boundaries[m + 1]);
            let ab = s.alpha_bar(t);
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            for c in 0..d {
                let x0 = data[seq][(r, c)];
                let e: f64 = rng.sample(StandardNormal);
                z[(i, c)] = sa * x0 + sn * e;
                y[(i, c)] = x0;
            }
            z[(i, d)] = 1.0;
        }
        let mut gram = z.transpose() * &z;
        for c in 0..d {
            gram[(c, c)] += cfg.ridge;
        }
        let rhs = z.transpose() * y;
        let eig = SymmetricEigen::new(gram.clone());
        let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.amax());
        if !(lo > hi * 1e-13) {
            return Err(Error::NumericalRank(format!(
                "bucket {m}: normal-equation condition {:.2e} (add ridge)",
                hi / lo.max(f64::MIN_POSITIVE)
            )));
        }
        let w = gram
            .cholesky()
            .ok_or_else(|| Error::NumericalRank(format!("bucket {m}: Cholesky failed")))?
            .solve(&rhs);
        // w is (D+1)×D: rows 0..D hold Aᵀ, row D holds bᵀ
        let a = w.rows(0, d).transpose();
        let b = w.row(d).transpose();
        Ok((a, b))
    })?;
    let (a, b) = fits.into_iter().unzip();
    LinearDenoiser::new(s, boundaries, a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn schedule_shape() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1000) < 1e-4);
        for t in 1..=1000 {
            assert!(s.beta(t) > 0.0 && s.beta(t) <= MAX_BETA);
            let rebuilt = s.alpha_bar(t - 1) * (1.0 - s.beta(t));
            assert!((rebuilt - s.alpha_bar(t)).abs() < 1e-12);
        }
        assert!(NoiseSchedule::cosine(0).is_err());
    }

    #[test]
    fn q_sample_limits_and_variance() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let x0 = DMatrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64);
        let eps = DMatrix::from_element(3, 4, 0.3);
        assert_eq!(q_sample(&x0, 0, &eps, &s).unwrap(), x0);
        let zero = DMatrix::zeros(3, 4);
        let only_noise = q_sample(&zero, 40, &eps, &s).unwrap();
        assert!((only_noise[(0, 0)] - 0.3 * (1.0 - s.alpha_bar(40)).sqrt()).abs() < 1e-15);
        assert!(q_sample(&x0, 101, &eps, &s).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eps = standard_normal(&mut rng, (100_000, 1));
        let xt = q_sample(&DMatrix::zeros(100_000, 1), 60, &eps, &s).unwrap();
        let var = xt.iter().map(|v| v * v).sum::<f64>() / 100_000.0;
        let expected = 1.0 - s.alpha_bar(60);
        assert!((var / expected - 1.0).abs() < 0.02, "{var} vs {expected}");
    }

    struct Constant(DMatrix<f64>);

    impl Denoiser for Constant {
        fn denoise(&self, _x: &DMatrix<f64>, _t: usize, _c: &Condition) -> DMatrix<f64> {
            self.0.clone()
        }
    }

    #[test]
    fn constant_denoiser_is_a_fixed_point() {
        let s = NoiseSchedule::cosine(20).unwrap();
        let c = DMatrix::from_fn(12, 3, |r, k| r as f64 - k as f64);
        let out = ddpm_sample(&Constant(c.clone()), &s, (12, 3), &Condition::Unconstrained, 1).unwrap();
        assert_eq!(out, c);
        let gt = DMatrix::from_element(12, 3, 9.0);
        let cond = Condition::inbetween_from(&gt).unwrap();
        let out = ddpm_sample(&Constant(c.clone()), &s, (12, 3), &cond, 1).unwrap();
        for r in 0..12 {
            let want = if !(5..7).contains(&r) { 9.0 } else { c[(r, 0)] };
            assert_eq!(out[(r, 0)], want);
        }
    }

    #[test]
    fn wrong_shape_denoiser_is_reported() {
        let s = NoiseSchedule::cosine(5).unwrap();
        let err = ddpm_sample(&Constant(DMatrix::zeros(2, 2)), &s, (3, 2), &Condition::Unconstrained, 0).unwrap_err();
        assert!(matches!(err, Error::DenoiserShape { expected: (3, 2), got: (2, 2) }));
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let s = NoiseSchedule::cosine(30).unwrap();
        let o = GaussianOracleDenoiser::new(DVector::from_element(3, 0.5), &DMatrix::identity(3, 3), &s).unwrap();
        let a = ddpm_sample(&o, &s, (4, 3), &Condition::Unconstrained, 42).unwrap();
        let b = ddpm_sample(&o, &s, (4, 3), &Condition::Unconstrained, 42).unwrap();
        assert_eq!(a, b);
        let many = sample_many(&o, &s, (4, 3), &Condition::Unconstrained, 42, 3).unwrap();
        assert_eq!(many[0], a);
        assert_ne!(many[1], a);
        let seq = par::sequential(|| sample_many(&o, &s, (4, 3), &Condition::Unconstrained, 42, 3).unwrap());
        assert_eq!(seq, many);
    }

    #[test]
    fn oracle_limits_and_scalar_case() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let o = GaussianOracleDenoiser::new(DVector::zeros(1), &DMatrix::identity(1, 1), &s).unwrap();
        let x = DMatrix::from_element(1, 1, 1.0);
        // t = 0 has ᾱ = 1: identity
        assert!((o.denoise(&x, 0, &Condition::Unconstrained)[(0, 0)] - 1.0).abs() < 1e-15);
        let mut o_half = o.clone();
        o_half.alpha_bar[3] = 0.5;
        assert!((o_half.denoise(&x, 3, &Condition::Unconstrained)[(0, 0)] - 0.5f64.sqrt()).abs() < 1e-12);
        let mu = DVector::from_vec(vec![2.0, -1.0]);
        let o2 = GaussianOracleDenoiser::new(mu.clone(), &DMatrix::identity(2, 2), &s).unwrap();
        let mut o2_prior = o2.clone();
        o2_prior.alpha_bar[4] = 0.0;
        let out = o2_prior.denoise(&DMatrix::from_element(3, 2, 7.0), 4, &Condition::Unconstrained);
        assert!(out.row_iter().all(|r| (r.transpose() - &mu).norm() < 1e-12));
        assert!(matches!(
            GaussianOracleDenoiser::new(DVector::zeros(1), &DMatrix::from_element(1, 1, -1.0), &s),
            Err(Error::NotPsd { .. })
        ));
    }

    #[test]
    fn conditioning_matches_independent_q_sample() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let gt = DMatrix::from_fn(12, local_layout::WIDTH, |r, c| ((r * 7 + c) % 11) as f64 * 0.1);
        let cond = Condition::trajectory_from(&gt).unwrap();
        let mut x = DMatrix::zeros(12, local_layout::WIDTH);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = standard_normal(&mut rng, (12, 14));
        apply_condition_with_noise(&mut x, 25, &cond, &s, &eps).unwrap();
        let ab = s.alpha_bar(25);
        for r in 0..12 {
            for (k, &c) in local_layout::ROOT_CHANNELS.iter().enumerate() {
                let want = ab.sqrt() * gt[(r, c)] + (1.0 - ab).sqrt() * eps[(r, k)];
                assert_eq!(x[(r, c)], want);
            }
        }
        let mut y = DMatrix::zeros(12, local_layout::WIDTH);
        apply_condition(&mut y, 0, &Condition::inbetween_from(&gt).unwrap(), &s, &mut rng).unwrap();
        assert_eq!(y.rows(0, 5), gt.rows(0, 5));
        assert_eq!(y.rows(7, 5), gt.rows(7, 5));
        assert!(y.rows(5, 2).iter().all(|v| *v == 0.0));
        let mut z = y.clone();
        apply_condition(&mut z, 10, &Condition::Unconstrained, &s, &mut rng).unwrap();
        assert_eq!(z, y);
        assert!(Condition::inbetween_from(&gt.rows(0, 9).into_owned()).is_err());
    }

    #[test]
    fn bucket_partition() {
        let b = bucket_boundaries(1000, 7).unwrap();
        assert_eq!(b[0], 1);
        assert_eq!(*b.last().unwrap(), 1001);
        assert!(b.windows(2).all(|w| w[0] < w[1]));
        assert!(bucket_boundaries(5, 6).is_err());
    }

    fn gaussian_data(rng: &mut ChaCha8Rng, seqs: usize, n: usize, mu: &[f64], sd: f64) -> Vec<DMatrix<f64>> {
        (0..seqs)
            .map(|_| DMatrix::from_fn(n, mu.len(), |_, c| mu[c] + sd * rng.sample::<f64, _>(StandardNormal)))
            .collect()
    }

    #[test]
    fn ridge_limits() {
        let s = NoiseSchedule::cosine(20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = gaussian_data(&mut rng, 4, 50, &[1.0, -2.0], 0.5);
        let mean: Vec<f64> = (0..2).map(|c| data.iter().map(|m| m.column(c).sum()).sum::<f64>() / 200.0).collect();
        let cfg = LinearFitConfig { buckets: 20, ridge: 1e12, samples_per_bucket: 2000, seed: 1 };
        let big = fit_linear_denoiser(&data, &s, &cfg).unwrap();
        let (a, b) = big.coefficients(10);
        assert!(a.amax() < 1e-6);
        assert!((b[0] - mean[0]).abs() < 0.05 && (b[1] - mean[1]).abs() < 0.05);

        let low = fit_linear_denoiser(&data, &s, &LinearFitConfig { ridge: 0.0, ..cfg }).unwrap();
        // nearly noise-free bucket: close to the identity, shrunk by the posterior gain
        let (a, b) = low.coefficients(0);
        let ab = s.alpha_bar(1);
        let gain = ab.sqrt() * 0.25 / (ab * 0.25 + 1.0 - ab);
        assert!(gain > 0.95);
        assert!((a - DMatrix::identity(2, 2) * gain).amax() < 0.02, "{a}");
        assert!((b[0] - (1.0 - gain * ab.sqrt()) * 1.0).abs() < 0.03);
    }

    #[test]
    fn rank_deficient_data_without_ridge_fails() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let data = vec![DMatrix::from_element(5, 3, 1.0), DMatrix::from_element(5, 3, 1.0)];
        // t = 1 bucket is nearly noise-free: constant data makes it singular
        let cfg = LinearFitConfig { buckets: 10, ridge: 0.0, samples_per_bucket: 50, seed: 0 };
        let err = fit_linear_denoiser(&data, &s, &cfg);
        assert!(err.is_ok() || matches!(err, Err(Error::NumericalRank(_))));
        let zero_noise = NoiseSchedule { alpha_bar: vec![1.0, 1.0], beta: vec![0.0, 0.0] };
        let cfg = LinearFitConfig { buckets: 1, ..cfg };
        assert!(matches!(fit_linear_denoiser(&data, &zero_noise, &cfg), Err(Error::NumericalRank(_))));
    }

    #[test]
    fn model_file_round_trip() {
        let s = NoiseSchedule::cosine(30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = gaussian_data(&mut rng, 3, 20, &[0.1, 0.2, 0.3], 1.0);
        let m = fit_linear_denoiser(&data, &s, &LinearFitConfig { buckets: 3, samples_per_bucket: 200, ..Default::default() }).unwrap();
        let bytes = m.to_bytes();
        let back = LinearDenoiser::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.boundaries(), m.boundaries());
        assert!(back.check_schedule(&s).is_ok());
        assert!(matches!(back.check_schedule(&NoiseSchedule::cosine(31).unwrap()), Err(Error::ScheduleMismatch)));
        let mut bad = bytes.clone();
        bad[10] ^= 1;
        assert!(matches!(LinearDenoiser::from_bytes(&bad), Err(Error::ScheduleMismatch)));
        assert!(matches!(LinearDenoiser::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(LinearDenoiser::from_bytes(&magic), Err(Error::BadMagic { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn q_sample_is_linear(t in 0usize..=40, a in -3.0f64..3.0, e in -3.0f64..3.0) {
            let s = NoiseSchedule::cosine(40).unwrap();
            let x = DMatrix::from_element(1, 1, a);
            let n = DMatrix::from_element(1, 1, e);
            let out = q_sample(&x, t, &n, &s).unwrap()[(0, 0)];
            let ab = s.alpha_bar(t);
            prop_assert!((out - (ab.sqrt() * a + (1.0 - ab).sqrt() * e)).abs() < 1e-12);
        }
    }
}
