//! Kernels, Gram matrices and the biased HSIC estimator used as the
//! expansion signal.
//!
//! The estimator is the centered-Gram V-statistic `tr(K H L H) / (m − 1)²`
//! with `H = I − 11ᵀ/m`. [`hsic_naive_oracle`] evaluates the same quantity
//! from the three expectation terms by explicit summation; the raw expectation
//! form equals `tr(KHLH) / m²`, so the oracle rescales by `m² / (m − 1)²`.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EmmError, Result};
use crate::expert::Vae;
use crate::nn::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the samples the Gram matrix is built from.
    Median,
    /// The median heuristic multiplied by a positive factor.
    ScaledMedian(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Rbf { bandwidth: Bandwidth },
    Linear,
}

impl KernelSpec {
    pub const RBF_MEDIAN: KernelSpec = KernelSpec::Rbf {
        bandwidth: Bandwidth::Median,
    };

    pub fn rbf(sigma: f64) -> Self {
        KernelSpec::Rbf {
            bandwidth: Bandwidth::Fixed(sigma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Rbf {
                bandwidth: Bandwidth::Fixed(s),
            } if !(s.is_finite() && *s > 0.0) => {
                Err(EmmError::Config(format!("rbf bandwidth must be > 0, got {s}")))
            }
            KernelSpec::Rbf {
                bandwidth: Bandwidth::ScaledMedian(f),
            } if !(f.is_finite() && *f > 0.0) => {
                Err(EmmError::Config(format!("median scale must be > 0, got {f}")))
            }
            _ => Ok(()),
        }
    }

    /// Replaces a median-heuristic bandwidth with the concrete value for `samples`.
    pub fn resolve(&self, samples: &Matrix) -> Result<KernelSpec> {
        self.validate()?;
        Ok(match self {
            KernelSpec::Rbf {
                bandwidth: Bandwidth::Median,
            } => KernelSpec::rbf(median_heuristic(samples)?),
            KernelSpec::Rbf {
                bandwidth: Bandwidth::ScaledMedian(f),
            } => KernelSpec::rbf(f * median_heuristic(samples)?),
            other => *other,
        })
    }
}

/// Symmetric `m × m` kernel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    m: usize,
    entries: Vec<f64>,
}

impl GramMatrix {
    pub fn from_entries(m: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != m * m {
            return Err(EmmError::shape(format!(
                "{} entries for a {m}x{m} Gram matrix",
                entries.len()
            )));
        }
        Ok(Self { m, entries })
    }

    pub fn identity(m: usize) -> Self {
        Self {
            m,
            entries: Matrix::identity(m).into_vec(),
        }
    }

    pub fn size(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.m + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.m {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// `vᵀ K v`
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.m {
            let row = &self.entries[i * self.m..(i + 1) * self.m];
            total += v[i] * row.iter().zip(v).map(|(k, x)| k * x).sum::<f64>();
        }
        total
    }

    /// `H K H`, subtracting row means, column means and adding back the grand mean.
    fn centered(&self) -> Vec<f64> {
        let m = self.m;
        let inv = 1.0 / m as f64;
        let mut row_means = vec![0.0; m];
        let mut col_means = vec![0.0; m];
        for i in 0..m {
            for j in 0..m {
                let v = self.entries[i * m + j];
                row_means[i] += v;
                col_means[j] += v;
            }
        }
        row_means.iter_mut().for_each(|v| *v *= inv);
        col_means.iter_mut().for_each(|v| *v *= inv);
        let grand = row_means.iter().sum::<f64>() * inv;
        let mut out = self.entries.clone();
        for i in 0..m {
            for j in 0..m {
                out[i * m + j] += grand - row_means[i] - col_means[j];
            }
        }
        out
    }
}

/// Median Euclidean distance over all distinct row pairs; 1.0 when that median is 0.
pub fn median_heuristic(samples: &Matrix) -> Result<f64> {
    let n = samples.rows();
    if n < 2 {
        return Err(EmmError::input(format!(
            "median heuristic needs at least 2 rows, got {n}"
        )));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(samples.sq_dist(i, j).sqrt());
        }
    }
    let mid = dists.len() / 2;
    let (_, upper, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    let median = if dists.len() % 2 == 1 {
        upper
    } else {
        let lower = dists[..mid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}

/// Gram matrix of `samples` under `spec`.
pub fn gram(samples: &Matrix, spec: &KernelSpec) -> Result<GramMatrix> {
    if !samples.is_finite() {
        return Err(EmmError::input("non-finite sample in Gram computation"));
    }
    let m = samples.rows();
    let mut entries = vec![0.0; m * m];
    match spec.resolve(samples)? {
        KernelSpec::Rbf {
            bandwidth: Bandwidth::Fixed(sigma),
        } => {
            let denom = 2.0 * sigma * sigma;
            for i in 0..m {
                entries[i * m + i] = 1.0;
                for j in 0..i {
                    let k = (-samples.sq_dist(i, j) / denom).exp();
                    entries[i * m + j] = k;
                    entries[j * m + i] = k;
                }
            }
        }
        KernelSpec::Linear => {
            let g = samples.matmul_t(samples)?;
            // symmetrize explicitly; gemm blocking may differ in the last bit
            for i in 0..m {
                for j in 0..=i {
                    let v = g.get(i, j);
                    entries[i * m + j] = v;
                    entries[j * m + i] = v;
                }
            }
        }
        KernelSpec::Rbf {
            bandwidth: Bandwidth::Median | Bandwidth::ScaledMedian(_),
        } => unreachable!("resolved above"),
    }
    Ok(GramMatrix { m, entries })
}

/// Biased HSIC estimate `tr(K H L H) / (m − 1)²`.
pub fn hsic_biased(k: &GramMatrix, l: &GramMatrix) -> Result<f64> {
    if k.m != l.m {
        return Err(EmmError::input(format!(
            "Gram sizes differ: {} vs {}",
            k.m, l.m
        )));
    }
    if k.m < 2 {
        return Err(EmmError::input("HSIC needs at least 2 paired samples"));
    }
    let kc = k.centered();
    let lc = l.centered();
    // tr(HKH · HLH) with both factors symmetric is the elementwise product sum
    let trace: f64 = kc.iter().zip(&lc).map(|(a, b)| a * b).sum();
    let denom = (k.m - 1) as f64;
    Ok(trace / (denom * denom))
}

/// Two row-aligned sample sets; row `i` of `left` is paired with row `i` of `right`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSampleSet {
    left: Matrix,
    right: Matrix,
}

impl PairedSampleSet {
    pub fn new(left: Matrix, right: Matrix) -> Result<Self> {
        if left.rows() != right.rows() {
            return Err(EmmError::input(format!(
                "paired sets have {} and {} rows",
                left.rows(),
                right.rows()
            )));
        }
        if left.rows() < 2 {
            return Err(EmmError::input("paired set needs at least 2 rows"));
        }
        Ok(Self { left, right })
    }

    pub fn left(&self) -> &Matrix {
        &self.left
    }

    pub fn right(&self) -> &Matrix {
        &self.right
    }

    pub fn len(&self) -> usize {
        self.left.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.left.rows() == 0
    }

    pub fn hsic(&self, kspec: &KernelSpec, lspec: &KernelSpec) -> Result<f64> {
        hsic_biased(&gram(&self.left, kspec)?, &gram(&self.right, lspec)?)
    }
}

fn scalar_kernel(spec: &KernelSpec, a: &[f64], b: &[f64]) -> f64 {
    match spec {
        KernelSpec::Rbf {
            bandwidth: Bandwidth::Fixed(s),
        } => {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            (-d2 / (2.0 * s * s)).exp()
        }
        KernelSpec::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        KernelSpec::Rbf {
            bandwidth: Bandwidth::Median | Bandwidth::ScaledMedian(_),
        } => unreachable!("resolve before evaluating"),
    }
}

/// HSIC from its expectation form, by direct summation over index pairs:
/// `Ê[k·l] + Ê[k]·Ê[l] − 2·Ê_{i}[Ê_j k(i,j) · Ê_q l(i,q)]`, rescaled by
/// `m² / (m − 1)²` onto the normalization of [`hsic_biased`].
///
/// Kernel values are evaluated pointwise here, never through [`gram`], so
/// this serves as an independent check on the centered-trace route.
pub fn hsic_naive_oracle(
    pairs: &PairedSampleSet,
    kspec: &KernelSpec,
    lspec: &KernelSpec,
) -> Result<f64> {
    let m = pairs.len();
    let kspec = kspec.resolve(&pairs.left)?;
    let lspec = lspec.resolve(&pairs.right)?;
    let k = |i: usize, j: usize| scalar_kernel(&kspec, pairs.left.row(i), pairs.left.row(j));
    let l = |i: usize, j: usize| scalar_kernel(&lspec, pairs.right.row(i), pairs.right.row(j));
    let mf = m as f64;

    let mut joint = 0.0;
    let mut k_sum = 0.0;
    let mut l_sum = 0.0;
    for i in 0..m {
        for j in 0..m {
            let (kv, lv) = (k(i, j), l(i, j));
            joint += kv * lv;
            k_sum += kv;
            l_sum += lv;
        }
    }
    let mut cross = 0.0;
    for i in 0..m {
        let mut k_row = 0.0;
        let mut l_row = 0.0;
        for j in 0..m {
            k_row += k(i, j);
            l_row += l(i, j);
        }
        cross += (k_row / mf) * (l_row / mf);
    }
    let v_stat = joint / (mf * mf) + (k_sum / (mf * mf)) * (l_sum / (mf * mf)) - 2.0 * cross / mf;
    Ok(v_stat * (mf / (mf - 1.0)).powi(2))
}

/// How replay latents and memory latents are turned into a paired sample set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Row `i` of the replay latents is paired with row `i` of the memory
    /// latents. Both sides get their own kernel and bandwidth.
    Index,
    /// Replay and memory latents are stacked into one sample whose partner is
    /// a ±1 source indicator under a linear kernel. The latent side uses one
    /// pooled bandwidth. This equals `m²·MMD²_b / (2m − 1)²` between the two
    /// latent sets, so it grows as the memory departs from the expert's replay.
    Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsicConfig {
    /// Replay and memory draws per evaluation; capped by the buffer size.
    pub samples: usize,
    pub kernel: KernelSpec,
    pub pairing: Pairing,
}

impl Default for HsicConfig {
    fn default() -> Self {
        Self {
            samples: 256,
            kernel: KernelSpec::RBF_MEDIAN,
            pairing: Pairing::Source,
        }
    }
}

impl HsicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(EmmError::Config("HSIC needs at least 2 samples".into()));
        }
        self.kernel.validate()
    }
}

/// Builds the paired set for one expert and one memory snapshot: `m` replay
/// draws pushed back through the encoder, against the encoder's posterior
/// means of `m` memory rows drawn uniformly without replacement.
pub fn expert_memory_pairs<R: Rng + ?Sized>(
    vae: &Vae,
    memory: &Matrix,
    m: usize,
    pairing: Pairing,
    rng: &mut R,
) -> Result<PairedSampleSet> {
    if m < 2 {
        return Err(EmmError::input("HSIC evaluation needs m ≥ 2"));
    }
    if memory.rows() < m {
        return Err(EmmError::input(format!(
            "memory holds {} samples, HSIC evaluation needs {m}",
            memory.rows()
        )));
    }
    let replay = vae.generate_replay(m, rng)?;
    let replay_latents = vae.infer_latents(&replay)?.values;
    let picked = sample_indices(rng, memory.rows(), m).into_vec();
    let memory_latents = vae.infer_latents(&memory.select_rows(&picked))?.values;
    match pairing {
        Pairing::Index => PairedSampleSet::new(replay_latents, memory_latents),
        Pairing::Source => {
            let stacked = replay_latents.vstack(&memory_latents)?;
            let indicator = (0..2 * m)
                .map(|i| if i < m { 1.0 } else { -1.0 })
                .collect();
            PairedSampleSet::new(stacked, Matrix::from_vec(2 * m, 1, indicator)?)
        }
    }
}

/// HSIC between an expert's generative knowledge and the memory buffer.
pub fn expert_memory_hsic<R: Rng + ?Sized>(
    vae: &Vae,
    memory: &Matrix,
    cfg: &HsicConfig,
    rng: &mut R,
) -> Result<f64> {
    let m = cfg.samples.min(memory.rows());
    let pairs = expert_memory_pairs(vae, memory, m, cfg.pairing, rng)?;
    match cfg.pairing {
        Pairing::Index => pairs.hsic(&cfg.kernel, &cfg.kernel),
        Pairing::Source => pairs.hsic(&cfg.kernel, &KernelSpec::Linear),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn median_heuristic_cases() {
        let two = Matrix::from_rows(&[[0.0, 0.0], [0.0, 2.0]]).unwrap();
        assert_eq!(median_heuristic(&two).unwrap(), 2.0);
        let same = Matrix::filled(5, 3, 0.4);
        assert_eq!(median_heuristic(&same).unwrap(), 1.0);
        assert!(median_heuristic(&Matrix::zeros(1, 3)).is_err());

        // 4 points, brute-force enumeration of the 6 pairwise distances
        let pts = [[0.0, 0.0], [3.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let mut d = Vec::new();
        for i in 0..4 {
            for j in (i + 1)..4 {
                let dx: f64 = pts[i][0] - pts[j][0];
                let dy: f64 = pts[i][1] - pts[j][1];
                d.push((dx * dx + dy * dy).sqrt());
            }
        }
        d.sort_by(f64::total_cmp);
        let expected = 0.5 * (d[2] + d[3]);
        let got = median_heuristic(&Matrix::from_rows(&pts).unwrap()).unwrap();
        assert!((got - expected).abs() < 1e-15);
        // distances {3, 1, √2, √10, √5, 1} → sorted middle pair (√2, √5)
        assert!((got - 0.5 * (2f64.sqrt() + 5f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn scaled_median_resolves_to_a_multiple() {
        let two = Matrix::from_rows(&[[0.0, 0.0], [0.0, 2.0]]).unwrap();
        let spec = KernelSpec::Rbf {
            bandwidth: Bandwidth::ScaledMedian(2.5),
        };
        assert_eq!(spec.resolve(&two).unwrap(), KernelSpec::rbf(5.0));
        for bad in [0.0, -1.0, f64::NAN] {
            let spec = KernelSpec::Rbf {
                bandwidth: Bandwidth::ScaledMedian(bad),
            };
            assert!(spec.validate().is_err());
        }
    }

    #[test]
    fn rbf_gram_cases() {
        let pts = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [1.0, 2.0]]).unwrap();
        let g = gram(&pts, &KernelSpec::rbf(1.0)).unwrap();
        for i in 0..3 {
            assert_eq!(g.get(i, i), 1.0);
        }
        // scalar exp-distance oracle
        let oracle = |d2: f64| (-d2 / 2.0_f64).exp();
        assert!((g.get(0, 1) - oracle(1.0)).abs() < 1e-15);
        assert!((g.get(0, 2) - oracle(5.0)).abs() < 1e-15);
        assert!((g.get(1, 2) - oracle(4.0)).abs() < 1e-15);
        assert_eq!(g.max_asymmetry(), 0.0);

        let wide = gram(&pts, &KernelSpec::rbf(1e8)).unwrap();
        assert!(wide.entries().iter().all(|&v| (v - 1.0).abs() < 1e-14));

        let bad = Matrix::from_rows(&[[f64::NAN, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(
            gram(&bad, &KernelSpec::RBF_MEDIAN),
            Err(EmmError::Input(_))
        ));
        assert!(gram(&pts, &KernelSpec::rbf(0.0)).is_err());
    }

    #[test]
    fn gram_is_psd_on_random_quadratic_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = randn(15, 4, &mut rng);
        for spec in [KernelSpec::RBF_MEDIAN, KernelSpec::Linear] {
            let g = gram(&x, &spec).unwrap();
            for _ in 0..50 {
                let v = randn(1, 15, &mut rng).into_vec();
                assert!(g.quadratic_form(&v) >= -1e-9);
            }
        }
    }

    #[test]
    fn constant_right_side_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let left = randn(9, 3, &mut rng);
        let right = Matrix::filled(9, 2, 0.7);
        let pairs = PairedSampleSet::new(left, right).unwrap();
        for spec in [KernelSpec::RBF_MEDIAN, KernelSpec::Linear] {
            let h = pairs.hsic(&spec, &spec).unwrap();
            assert!(h.abs() < 1e-12, "{h}");
            let o = hsic_naive_oracle(&pairs, &spec, &spec).unwrap();
            assert!(o.abs() < 1e-12, "{o}");
        }
    }

    #[test]
    fn identity_grams_with_two_samples() {
        let i2 = GramMatrix::identity(2);
        let h = hsic_biased(&i2, &i2).unwrap();
        assert!((h - 1.0).abs() < 1e-15);
        // the same configuration through the oracle: points far apart under a
        // narrow RBF give an identity Gram matrix
        let pts = Matrix::from_rows(&[[0.0], [1e3]]).unwrap();
        let pairs = PairedSampleSet::new(pts.clone(), pts).unwrap();
        let o = hsic_naive_oracle(&pairs, &KernelSpec::rbf(1.0), &KernelSpec::rbf(1.0)).unwrap();
        assert!((o - 1.0).abs() < 1e-12);
    }

    #[test]
    fn size_mismatch_and_minimum_size() {
        assert!(hsic_biased(&GramMatrix::identity(3), &GramMatrix::identity(4)).is_err());
        assert!(hsic_biased(&GramMatrix::identity(1), &GramMatrix::identity(1)).is_err());
        assert!(PairedSampleSet::new(Matrix::zeros(3, 1), Matrix::zeros(2, 1)).is_err());
        assert!(PairedSampleSet::new(Matrix::zeros(1, 1), Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn matches_oracle_for_random_m10() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pairs = PairedSampleSet::new(randn(10, 3, &mut rng), randn(10, 2, &mut rng)).unwrap();
        for spec in [KernelSpec::RBF_MEDIAN, KernelSpec::Linear] {
            let a = pairs.hsic(&spec, &spec).unwrap();
            let b = hsic_naive_oracle(&pairs, &spec, &spec).unwrap();
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    /// Monte-Carlo: for independent left/right the estimate shrinks with m.
    #[test]
    fn independent_pairs_shrink_with_sample_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mean_abs = |m: usize, rng: &mut ChaCha8Rng| {
            (0..200)
                .map(|_| {
                    let p = PairedSampleSet::new(randn(m, 2, rng), randn(m, 2, rng)).unwrap();
                    hsic_naive_oracle(&p, &KernelSpec::RBF_MEDIAN, &KernelSpec::RBF_MEDIAN)
                        .unwrap()
                        .abs()
                })
                .sum::<f64>()
                / 200.0
        };
        let small = mean_abs(8, &mut rng);
        let large = mean_abs(64, &mut rng);
        assert!(large < small, "m=64 {large} vs m=8 {small}");
    }

    #[test]
    fn source_pairing_is_scaled_mmd() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let a = randn(12, 3, &mut rng);
        let b = randn(12, 3, &mut rng).map(|v| v + 1.5);
        let stacked = a.vstack(&b).unwrap();
        let ind = Matrix::from_vec(24, 1, (0..24).map(|i| if i < 12 { 1.0 } else { -1.0 }).collect())
            .unwrap();
        let pairs = PairedSampleSet::new(stacked.clone(), ind).unwrap();
        let sigma = median_heuristic(&stacked).unwrap();
        let spec = KernelSpec::rbf(sigma);
        let h = pairs.hsic(&spec, &KernelSpec::Linear).unwrap();

        let k = |x: &[f64], y: &[f64]| scalar_kernel(&spec, x, y);
        let mean = |p: &Matrix, q: &Matrix| {
            let mut s = 0.0;
            for x in p.iter_rows() {
                for y in q.iter_rows() {
                    s += k(x, y);
                }
            }
            s / (p.rows() * q.rows()) as f64
        };
        let mmd2 = mean(&a, &a) + mean(&b, &b) - 2.0 * mean(&a, &b);
        let expected = 144.0 * mmd2 / (23.0 * 23.0);
        assert!((h - expected).abs() < 1e-12, "{h} vs {expected}");
    }
}
