//! Local descriptor post-processing: L2 normalisation, PCA whitening, L2 normalisation.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{l2_normalize, Scalar};
use crate::tensorio::{read_tensor, write_tensor, Tensor};

/// Eigenvalue floor added before the inverse square root.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Rows per block when accumulating the covariance matrix.
const COVARIANCE_BLOCK: usize = 2048;

/// Whitening projection fitted on L2-normalised descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel<S> {
    mean: Vec<S>,
    /// `out_dim × in_dim`, row-major; row `k` is the `k`-th eigenvector over `sqrt(λ_k + ε)`.
    basis: Vec<S>,
    /// Eigenvalues of the kept components, descending.
    eigenvalues: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
    epsilon: f64,
}

impl<S: Scalar> PcaModel<S> {
    /// Assembles a model from explicit parts. `basis` is `out_dim × in_dim` row-major.
    pub fn from_parts(mean: Vec<S>, basis: Vec<S>, out_dim: usize, epsilon: f64) -> Result<Self> {
        let in_dim = mean.len();
        if in_dim == 0 || out_dim == 0 || out_dim > in_dim {
            return Err(Error::InvalidParameter(format!("PCA dims in={in_dim} out={out_dim}")));
        }
        if basis.len() != in_dim * out_dim {
            return Err(Error::DimensionMismatch {
                expected: in_dim * out_dim,
                found: basis.len(),
            });
        }
        Ok(PcaModel {
            mean,
            basis,
            eigenvalues: Vec::new(),
            in_dim,
            out_dim,
            epsilon,
        })
    }

    /// Zero mean, identity basis.
    pub fn identity(dim: usize) -> Self {
        let mut basis = vec![S::zero(); dim * dim];
        for k in 0..dim {
            basis[k * dim + k] = S::one();
        }
        PcaModel {
            mean: vec![S::zero(); dim],
            basis,
            eigenvalues: vec![1.0; dim],
            in_dim: dim,
            out_dim: dim,
            epsilon: 0.0,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn mean(&self) -> &[S] {
        &self.mean
    }

    pub fn basis(&self) -> &[S] {
        &self.basis
    }

    /// Eigenvalues of the kept components (empty for models loaded from disk).
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Centres and projects an already-normalised descriptor, without the final L2 step.
    pub fn whiten(&self, normalized: &[S]) -> Vec<S> {
        debug_assert_eq!(normalized.len(), self.in_dim);
        let centered: Vec<f64> = normalized
            .iter()
            .zip(&self.mean)
            .map(|(x, m)| x.wide() - m.wide())
            .collect();
        self.basis
            .chunks_exact(self.in_dim)
            .map(|row| S::of(row.iter().zip(&centered).map(|(b, c)| b.wide() * c).sum()))
            .collect()
    }

    /// Full pipeline for one descriptor. A zero descriptor maps to the zero vector.
    pub fn postprocess(&self, descriptor: &[S]) -> Vec<S> {
        let mut normalized = descriptor.to_vec();
        if l2_normalize(&mut normalized) == 0.0 {
            return vec![S::zero(); self.out_dim];
        }
        let mut out = self.whiten(&normalized);
        l2_normalize(&mut out);
        out
    }

    /// Applies [`postprocess`](Self::postprocess) at every location of an `M × N × D` map.
    pub fn postprocess_map(&self, feature_map: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, n, d) = feature_map.shape3()?;
        if d != self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                found: d,
            });
        }
        let data: Vec<S> = feature_map
            .data()
            .par_chunks_exact(d)
            .flat_map_iter(|x| self.postprocess(x))
            .collect();
        Tensor::new(vec![m, n, self.out_dim], data)
    }
}

/// Fits a whitening PCA on `samples`, a flat row-major list of `dim`-vectors.
///
/// Callers pass L2-normalised descriptors. The covariance uses the `1/n` normalisation.
pub fn fit_pca<S: Scalar>(samples: &[S], dim: usize, out_dim: usize, epsilon: f64) -> Result<PcaModel<S>> {
    if dim == 0 || !samples.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!(
            "{} values do not split into {dim}-vectors",
            samples.len()
        )));
    }
    if out_dim == 0 || out_dim > dim {
        return Err(Error::InvalidParameter(format!(
            "out_dim {out_dim} must lie in 1..={dim}"
        )));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidParameter(format!("epsilon {epsilon} must be positive")));
    }
    let n = samples.len() / dim;
    if n < out_dim {
        return Err(Error::InsufficientSamples {
            needed: out_dim,
            got: n,
        });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "PCA samples".into(),
        });
    }

    let mut mean = vec![0.0f64; dim];
    for row in samples.chunks_exact(dim) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x.wide();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    // Block partials are summed in block order so the result does not depend on scheduling.
    let partials: Vec<DMatrix<f64>> = samples
        .par_chunks(COVARIANCE_BLOCK * dim)
        .map(|block| {
            let rows = block.len() / dim;
            let centered = DMatrix::from_fn(rows, dim, |r, c| block[r * dim + c].wide() - mean[c]);
            centered.transpose() * &centered
        })
        .collect();
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for p in &partials {
        cov += p;
    }
    cov /= n as f64;

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut basis = Vec::with_capacity(out_dim * dim);
    let mut eigenvalues = Vec::with_capacity(out_dim);
    for &k in order.iter().take(out_dim) {
        let lambda = eig.eigenvalues[k].max(0.0);
        let v = eig.eigenvectors.column(k);
        // Fix the eigenvector sign so the largest-magnitude component is positive.
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let scale = sign / (lambda + epsilon).sqrt();
        basis.extend(v.iter().map(|&x| S::of(x * scale)));
        eigenvalues.push(lambda);
    }

    Ok(PcaModel {
        mean: mean.into_iter().map(S::of).collect(),
        basis,
        eigenvalues,
        in_dim: dim,
        out_dim,
        epsilon,
    })
}

/// JSON sidecar stored next to the mean/basis tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaSidecar {
    pub in_dim: usize,
    pub out_dim: usize,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// File names of a persisted PCA model sharing one path prefix.
#[derive(Debug, Clone)]
pub struct PcaFiles {
    pub mean: PathBuf,
    pub basis: PathBuf,
    pub sidecar: PathBuf,
}

impl PcaFiles {
    pub fn new(prefix: impl AsRef<Path>) -> Self {
        let p = prefix.as_ref().as_os_str().to_owned();
        let with = |suffix: &str| {
            let mut s = p.clone();
            s.push(suffix);
            PathBuf::from(s)
        };
        PcaFiles {
            mean: with(".mean.blcf"),
            basis: with(".basis.blcf"),
            sidecar: with(".json"),
        }
    }
}

pub fn save_pca<S: Scalar>(
    prefix: impl AsRef<Path>,
    model: &PcaModel<S>,
    seed: Option<u64>,
    config_hash: Option<String>,
) -> Result<PcaFiles> {
    let files = PcaFiles::new(prefix);
    write_tensor(&files.mean, &Tensor::new(vec![1, model.in_dim], model.mean.clone())?)?;
    write_tensor(
        &files.basis,
        &Tensor::new(vec![model.out_dim, model.in_dim], model.basis.clone())?,
    )?;
    let sidecar = PcaSidecar {
        in_dim: model.in_dim,
        out_dim: model.out_dim,
        epsilon: model.epsilon,
        seed,
        config_hash,
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&files.sidecar, json + "\n").map_err(|e| Error::io(&files.sidecar, e))?;
    Ok(files)
}

pub fn read_pca_sidecar(prefix: impl AsRef<Path>) -> Result<PcaSidecar> {
    let path = PcaFiles::new(prefix).sidecar;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        message: e.to_string(),
    })
}

pub fn load_pca<S: Scalar>(prefix: impl AsRef<Path>) -> Result<(PcaModel<S>, PcaSidecar)> {
    let files = PcaFiles::new(&prefix);
    let sidecar = read_pca_sidecar(&prefix)?;
    let mean = read_tensor(&files.mean)?;
    let basis = read_tensor(&files.basis)?;
    if mean.dims() != [1, sidecar.in_dim] || basis.dims() != [sidecar.out_dim, sidecar.in_dim] {
        return Err(Error::Parse {
            path: files.sidecar,
            message: format!(
                "sidecar dims {}x{} disagree with tensors {:?} / {:?}",
                sidecar.out_dim,
                sidecar.in_dim,
                mean.dims(),
                basis.dims()
            ),
        });
    }
    let model = PcaModel::from_parts(
        mean.cast::<S>().into_data(),
        basis.cast::<S>().into_data(),
        sidecar.out_dim,
        sidecar.epsilon,
    )?;
    Ok((model, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::l2_norm;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
        (0..d)
            .map(|a| {
                (0..d)
                    .map(|b| rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / n)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn whitens_anisotropic_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<f64> = (0..1000)
            .flat_map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                [2.0 * a, b]
            })
            .collect();
        let pca = fit_pca(&samples, 2, 2, DEFAULT_EPSILON).unwrap();
        assert!(pca.eigenvalues()[0] > pca.eigenvalues()[1]);
        let white: Vec<Vec<f64>> = samples.chunks(2).map(|x| pca.whiten(x)).collect();
        let cov = covariance(&white);
        for a in 0..2 {
            for b in 0..2 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((cov[a][b] - want).abs() < 0.1, "{cov:?}");
            }
        }
    }

    #[test]
    fn constant_samples_whiten_to_zero() {
        let samples: Vec<f64> = [0.6, 0.8].repeat(50);
        let pca = fit_pca(&samples, 2, 2, DEFAULT_EPSILON).unwrap();
        assert!(pca.eigenvalues().iter().all(|&l| l.abs() < 1e-12));
        let w = pca.whiten(&[0.6, 0.8]);
        assert!(w.iter().all(|v| v.abs() < 1e-6), "{w:?}");
        assert!(pca.basis().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn standard_normal_basis_is_a_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 6;
        let samples: Vec<f64> = (0..20_000 * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let pca = fit_pca(&samples, d, d, DEFAULT_EPSILON).unwrap();
        for row in pca.basis().chunks(d) {
            let norm = l2_norm(row);
            assert!((norm - 1.0).abs() < 0.1, "row norm {norm}");
        }
        for w in pca.eigenvalues().windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(
            fit_pca(&[1.0f32, 0.0], 2, 2, DEFAULT_EPSILON),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        ));
        assert!(fit_pca(&[1.0f32, f32::NAN, 0.0, 1.0], 2, 2, DEFAULT_EPSILON).is_err());
        assert!(fit_pca(&[1.0f32, 0.0, 0.0], 2, 1, DEFAULT_EPSILON).is_err());
        assert!(fit_pca(&[1.0f32, 0.0, 0.0, 1.0], 2, 3, DEFAULT_EPSILON).is_err());
    }

    #[test]
    fn identity_postprocess_hand_values() {
        let pca = PcaModel::<f64>::identity(2);
        let out = pca.postprocess(&[3.0, 4.0]);
        assert_abs_diff_eq!(out[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn zero_descriptor_maps_to_zero() {
        let pca = PcaModel::from_parts(vec![0.5f32, 0.5], vec![1.0, 0.0, 0.0, 1.0], 2, 1e-8).unwrap();
        assert_eq!(pca.postprocess(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    fn random_model(seed: u64, d: usize) -> PcaModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<f64> = (0..200)
            .flat_map(|_| {
                let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                l2_normalize(&mut v);
                v
            })
            .collect();
        fit_pca(&samples, d, d, DEFAULT_EPSILON).unwrap()
    }

    #[test]
    fn map_matches_per_location_loop() {
        let pca = random_model(11, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<f64> = (0..3 * 4 * 8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let map = Tensor::new(vec![3, 4, 8], data).unwrap();
        let out = pca.postprocess_map(&map).unwrap();
        assert_eq!(out.dims(), &[3, 4, 8]);
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(out.descriptor(i, j), pca.postprocess(map.descriptor(i, j)).as_slice());
            }
        }

        let single = Tensor::new(vec![1, 1, 8], map.descriptor(0, 0).to_vec()).unwrap();
        assert_eq!(
            pca.postprocess_map(&single).unwrap().data(),
            pca.postprocess(map.descriptor(0, 0)).as_slice()
        );

        let constant = Tensor::new(vec![2, 2, 8], map.descriptor(1, 1).repeat(4)).unwrap();
        let out = pca.postprocess_map(&constant).unwrap();
        let first = out.descriptor(0, 0).to_vec();
        assert!(out.data().chunks(8).all(|c| c == first.as_slice()));

        let wrong = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            pca.postprocess_map(&wrong),
            Err(Error::DimensionMismatch { expected: 8, found: 3 })
        ));
    }

    #[test]
    fn persistence_round_trip() {
        let pca = random_model(5, 4).clone();
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("pca");
        save_pca(&prefix, &pca, Some(9), Some("abc".into())).unwrap();
        let (back, sidecar) = load_pca::<f64>(&prefix).unwrap();
        assert_eq!(sidecar.in_dim, 4);
        assert_eq!(sidecar.seed, Some(9));
        assert_eq!(sidecar.config_hash.as_deref(), Some("abc"));
        for (a, b) in back.basis().iter().zip(pca.basis()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-5 * b.abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn output_is_unit_norm_and_scale_invariant(
            seed in 0u64..50,
            x in prop::collection::vec(-10.0f64..10.0, 6),
            c in 0.01f64..100.0,
        ) {
            let pca = random_model(seed, 6);
            prop_assume!(l2_norm(&x) > 1e-6);
            let out = pca.postprocess(&x);
            prop_assert!((l2_norm(&out) - 1.0).abs() < 1e-5);
            let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
            let out2 = pca.postprocess(&scaled);
            for (a, b) in out.iter().zip(&out2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
