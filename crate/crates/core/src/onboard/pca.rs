use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Per-object linear projection `D -> D_PCA`.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    /// Zero when fitted without centring.
    pub mean: DVector<f32>,
    /// `D × D_PCA`, orthonormal columns ordered by decreasing variance.
    pub basis: DMatrix<f32>,
}

impl PcaBasis {
    pub fn input_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Largest absolute entry of `WᵀW − I`, evaluated in f64.
    pub fn orthonormality_error(&self) -> f64 {
        let w = self.basis.map(|v| v as f64);
        let g = w.transpose() * &w;
        (g - DMatrix::identity(w.ncols(), w.ncols())).amax()
    }
}

const CHUNK: usize = 4096;

/// Fits a PCA basis on the rows of `descriptors` (`M × D`).
pub fn fit_pca(descriptors: &DMatrix<f32>, out_dim: usize, center: bool) -> Result<PcaBasis> {
    let (mean, basis) = principal_axes(descriptors, out_dim, center)?;
    Ok(PcaBasis { mean: mean.map(|v| v as f32), basis: basis.map(|v| v as f32) })
}

/// Mean and top `out_dim` covariance eigenvectors in full precision.
pub(crate) fn principal_axes(
    descriptors: &DMatrix<f32>,
    out_dim: usize,
    center: bool,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (m, d) = descriptors.shape();
    if out_dim == 0 || out_dim > d {
        return Err(Error::InvalidInput(format!("PCA output dim {out_dim} must be in 1..={d}")));
    }
    if m <= out_dim {
        return Err(Error::InsufficientData(format!("{m} descriptors cannot fit a {out_dim}-dim PCA")));
    }

    let mut mean = DVector::<f64>::zeros(d);
    if center {
        for r in 0..m {
            for c in 0..d {
                mean[c] += descriptors[(r, c)] as f64;
            }
        }
        mean /= m as f64;
    }

    // scatter matrix accumulated over row chunks in f64
    let mut scatter = DMatrix::<f64>::zeros(d, d);
    let mut start = 0;
    while start < m {
        let rows = CHUNK.min(m - start);
        let chunk = DMatrix::<f64>::from_fn(rows, d, |r, c| descriptors[(start + r, c)] as f64 - mean[c]);
        scatter.gemm(1.0, &chunk.transpose(), &chunk, 1.0);
        start += rows;
    }
    scatter /= (m - 1) as f64;

    let eig = SymmetricEigen::new(scatter);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut basis = DMatrix::<f64>::zeros(d, out_dim);
    for (j, &src) in order.iter().take(out_dim).enumerate() {
        let col = eig.eigenvectors.column(src);
        let (imax, _) =
            col.iter().enumerate().fold((0, 0.0f64), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        let sign = if col[imax] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            basis[(i, j)] = sign * col[i];
        }
    }
    Ok((mean, basis))
}

/// Projected, L2-normalised rows plus the indices of the input rows kept.
/// Rows that project to zero are dropped.
pub fn project_descriptors(descriptors: &DMatrix<f32>, pca: &PcaBasis) -> Result<(DMatrix<f32>, Vec<usize>)> {
    if descriptors.ncols() != pca.input_dim() {
        return Err(Error::InvalidInput(format!(
            "descriptor dim {} does not match PCA input dim {}",
            descriptors.ncols(),
            pca.input_dim()
        )));
    }
    let mut centered = descriptors.clone();
    for mut row in centered.row_iter_mut() {
        row -= pca.mean.transpose();
    }
    let projected = centered * &pca.basis;
    let kept: Vec<usize> = (0..projected.nrows())
        .filter(|&r| {
            let n = projected.row(r).norm();
            n.is_finite() && n > 1e-12
        })
        .collect();
    if kept.len() < projected.nrows() {
        warn!("dropped {} descriptors with zero norm after projection", projected.nrows() - kept.len());
    }
    let mut out = DMatrix::<f32>::zeros(kept.len(), pca.output_dim());
    for (i, &r) in kept.iter().enumerate() {
        let row = projected.row(r);
        let n = row.norm();
        out.row_mut(i).copy_from(&(row / n));
    }
    Ok((out, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
    }

    #[test]
    fn recovers_embedded_plane() {
        // dyadic values keep every sample exactly on the plane in f32
        let coeffs = gaussian(200, 2, 1).map(|v| (v * 16.0).round() as f64);
        let a = DMatrix::<f64>::from_fn(2, 10, |r, c| (((r * 10 + c) as f64 * 0.37).sin() * 8.0).round() / 8.0);
        let offset = DVector::<f64>::from_fn(10, |i, _| i as f64 * 0.25);
        let mut data = coeffs * a;
        for mut row in data.row_iter_mut() {
            row += offset.transpose();
        }
        let input = data.map(|v| v as f32);
        let reconstruction_error = |mean: &DVector<f64>, w: &DMatrix<f64>| {
            let mut worst = 0.0f64;
            for row in input.row_iter() {
                let c = row.transpose().map(|v| v as f64) - mean;
                let rec = w * (w.transpose() * &c);
                worst = worst.max((rec - c).norm());
            }
            worst
        };
        let (mean, w) = principal_axes(&input, 2, true).unwrap();
        let full = reconstruction_error(&mean, &w);
        assert!(full < 1e-9, "reconstruction error {full}");
        // the stored basis is f32, which bounds its residual
        let pca = fit_pca(&input, 2, true).unwrap();
        let stored = reconstruction_error(&pca.mean.map(|v| v as f64), &pca.basis.map(|v| v as f64));
        assert!(stored < 1e-5, "stored reconstruction error {stored}");
        let exact = {
            let eig = SymmetricEigen::new({
                let mut centered = data.clone();
                let m = centered.row_mean();
                for mut r in centered.row_iter_mut() {
                    r -= &m;
                }
                centered.transpose() * centered
            });
            let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            ev.sort_by(|a, b| b.total_cmp(a));
            ev
        };
        assert!(exact[2] < 1e-9 * exact[0]);
    }

    #[test]
    fn isotropic_variance_fraction() {
        let data = gaussian(4000, 32, 2);
        let pca = fit_pca(&data, 8, true).unwrap();
        let w = pca.basis.map(|v| v as f64);
        let x = data.map(|v| v as f64);
        let total: f64 = x.iter().map(|v| v * v).sum();
        let captured: f64 = (&x * &w).iter().map(|v| v * v).sum();
        let frac = captured / total;
        assert!((frac - 0.25).abs() < 0.05, "captured fraction {frac}");
    }

    #[test]
    fn orthonormal_and_signed() {
        let data = gaussian(500, 40, 3);
        let pca = fit_pca(&data, 16, true).unwrap();
        assert!(pca.orthonormality_error() < 1e-6);
        for col in pca.basis.column_iter() {
            let (imax, _) = col.iamax_full();
            assert!(col[imax] > 0.0);
        }
    }

    #[test]
    fn insufficient_data() {
        let data = gaussian(8, 20, 4);
        assert!(matches!(fit_pca(&data, 8, true), Err(Error::InsufficientData(_))));
        assert!(fit_pca(&data, 21, true).is_err());
    }

    #[test]
    fn uncentered_has_zero_mean() {
        let data = gaussian(100, 10, 5);
        let pca = fit_pca(&data, 4, false).unwrap();
        assert!(pca.mean.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn projection_normalises_and_drops_zero_rows() {
        let data = gaussian(300, 12, 6);
        let pca = fit_pca(&data, 5, false).unwrap();
        let mut input = data.rows(0, 4).into_owned();
        input.row_mut(2).fill(0.0);
        let first = input.row(0).into_owned();
        input.row_mut(3).copy_from(&first);
        let (out, kept) = project_descriptors(&input, &pca).unwrap();
        assert_eq!(kept, vec![0, 1, 3]);
        for r in out.row_iter() {
            assert!((r.norm() - 1.0).abs() < 1e-6);
        }
        assert_eq!(out.row(0), out.row(2));
        assert!(project_descriptors(&DMatrix::zeros(2, 7), &pca).is_err());
    }

    #[test]
    fn in_subspace_components_survive_projection() {
        let data = gaussian(400, 16, 7);
        let pca = fit_pca(&data, 16, true).unwrap();
        // full-rank basis: reconstructing projected coefficients returns the centred input
        let x = data.rows(0, 10).map(|v| v as f64);
        let w = pca.basis.map(|v| v as f64);
        let mean = pca.mean.map(|v| v as f64);
        for row in x.row_iter() {
            let c = row.transpose() - &mean;
            let rec = &w * (w.transpose() * &c);
            assert!((rec - c).norm() < 1e-5);
        }
    }

    #[test]
    fn cosine_top1_preserved_on_clusters() {
        // 40 clusters in 768-d whose spread lives in 64 shared directions
        let centers = gaussian(40, 768, 9);
        let dirs = gaussian(64, 768, 10);
        let coeffs = gaussian(1200, 64, 11);
        let noise = gaussian(1200, 768, 12);
        let data = DMatrix::from_fn(1200, 768, |r, c| {
            let spread: f32 = (0..64).map(|k| coeffs[(r, k)] * dirs[(k, c)]).sum::<f32>() * 0.15;
            centers[(r % 40, c)] + spread + 0.02 * noise[(r, c)]
        });
        let qnoise = gaussian(200, 768, 13);
        let queries = DMatrix::from_fn(200, 768, |r, c| data[(r * 6, c)] + 0.02 * qnoise[(r, c)]);

        let pca = fit_pca(&data, 256, true).unwrap();
        let (db_proj, kept) = project_descriptors(&data, &pca).unwrap();
        assert_eq!(kept.len(), 1200);
        let (q_proj, _) = project_descriptors(&queries, &pca).unwrap();

        // brute-force cosine neighbours in the raw space, centred like the projection
        let mean = pca.mean.transpose();
        let unit = |v: nalgebra::RowDVector<f32>| {
            let n = v.norm();
            v / n
        };
        let raw_db: Vec<_> = data.row_iter().map(|r| unit(r - &mean)).collect();
        let top1 = |q: &nalgebra::RowDVector<f32>, bank: &[nalgebra::RowDVector<f32>]| {
            bank.iter()
                .enumerate()
                .map(|(j, b)| (j, q.dot(b)))
                .fold((usize::MAX, f32::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
                .0
        };
        let proj_db: Vec<_> = db_proj.row_iter().map(|r| r.into_owned()).collect();
        let agree = (0..200)
            .filter(|&q| {
                let raw_q = unit(queries.row(q) - &mean);
                top1(&raw_q, &raw_db) == top1(&q_proj.row(q).into_owned(), &proj_db)
            })
            .count();
        assert!(agree >= 198, "agreement {agree}/200");
    }
}
