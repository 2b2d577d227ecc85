//! Principal-component projection of prompt maps to RGB.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use tdpcr_core::{Error, Result};

/// Total variance below which the prompt is treated as constant.
const VARIANCE_FLOOR: f64 = 1e-12;

/// Components fitted on `(n, C)` rows, sorted by decreasing variance.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// Columns are unit eigenvectors.
    pub components: DMatrix<f64>,
    pub variances: DVector<f64>,
}

/// Planar `[C, H·W]` map to `(H·W, C)` rows.
pub fn rows_from_planar(planar: &[f32], channels: usize) -> DMatrix<f64> {
    let n = planar.len() / channels;
    DMatrix::from_fn(n, channels, |i, c| planar[c * n + i] as f64)
}

impl Pca {
    pub fn fit(rows: &DMatrix<f64>) -> Result<Self> {
        let (n, c) = rows.shape();
        if n == 0 || c == 0 {
            return Err(Error::Argument("PCA needs at least one sample and one channel".into()));
        }
        let mean = DVector::from_fn(c, |j, _| rows.column(j).mean());
        let centered = Self::center(rows, &mean);
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let components = DMatrix::from_fn(c, c, |i, j| eig.eigenvectors[(i, order[j])]);
        let variances = DVector::from_fn(c, |j, _| eig.eigenvalues[order[j]].max(0.0));
        Ok(Self { mean, components, variances })
    }

    fn center(rows: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
        let mut x = rows.clone();
        for mut r in x.row_iter_mut() {
            r -= mean.transpose();
        }
        x
    }

    /// Scores on the first `k` components.
    pub fn project(&self, rows: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
        Self::center(rows, &self.mean) * self.components.columns(0, k)
    }

    /// Centered data rebuilt from the first `k` component scores.
    pub fn reconstruct_centered(&self, scores: &DMatrix<f64>) -> DMatrix<f64> {
        scores * self.components.columns(0, scores.ncols()).transpose()
    }

    pub fn total_variance(&self) -> f64 {
        self.variances.sum()
    }
}

/// Projected RGB image plus whether it fell back to uniform gray.
pub struct PromptImage {
    pub rgb: Vec<u8>,
    pub degenerate: bool,
}

/// Top-3 component scores of `rows`, each min-max scaled to `[0, 255]`.
pub fn prompt_to_rgb(pca: &Pca, rows: &DMatrix<f64>) -> Result<PromptImage> {
    let c = pca.mean.len();
    if c < 3 {
        return Err(Error::Argument(format!("prompt has {c} channels; an RGB projection needs at least 3")));
    }
    let n = rows.nrows();
    if pca.total_variance() < VARIANCE_FLOOR {
        return Ok(PromptImage { rgb: vec![128; n * 3], degenerate: true });
    }
    let scores = pca.project(rows, 3);
    let mut rgb = vec![0u8; n * 3];
    for k in 0..3 {
        let col = scores.column(k);
        let (lo, hi) = (col.min(), col.max());
        for i in 0..n {
            rgb[i * 3 + k] = if hi - lo > 1e-12 { ((col[i] - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 };
        }
    }
    Ok(PromptImage { rgb, degenerate: false })
}
