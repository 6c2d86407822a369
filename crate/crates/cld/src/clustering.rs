//! Batch-local grouping on the unit sphere: spherical k-means (default) and
//! spectral clustering over the normalized Laplacian of the cosine affinity.

use crate::error::{CldError, Result};
use crate::numerics::{dot, l2_normalize, norm, DetRng, Matrix};

/// End of the Laplacian spectrum spectral clustering embeds with.
///
/// `Smallest` is the standard choice for the normalized Laplacian
/// `L = D^{-1/2}(D-W)D^{-1/2}`; `Largest` is kept as an alternative reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralEnd {
    Smallest,
    Largest,
}

/// Result of clustering a batch of unit rows.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    /// k x dim unit rows M_1..M_k.
    pub centroids: Matrix,
    /// Cluster id per input row.
    pub assignment: Vec<usize>,
    /// Final objective: sum_i (1 - cos(f_i, centroid of row i)).
    pub objective: f64,
    /// Objective after each M-step, first entry included; non-increasing.
    pub objective_history: Vec<f64>,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    /// Row indices belonging to each cluster, in input order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

fn check_unit_rows(features: &Matrix, context: &'static str) -> Result<()> {
    for i in 0..features.rows() {
        if (norm(features.row(i)) - 1.0).abs() > 1e-6 {
            return Err(CldError::InvalidArgument {
                context,
                msg: format!("row {i} is not unit-norm"),
            });
        }
    }
    Ok(())
}

/// Assign each row to the centroid with the largest cosine; ties take the
/// lowest centroid index.
fn e_step(features: &Matrix, centroids: &Matrix) -> Vec<usize> {
    let mut assign = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        let row = features.row(i);
        let mut best = 0usize;
        let mut best_cos = f64::NEG_INFINITY;
        for j in 0..centroids.rows() {
            let c = dot(row, centroids.row(j));
            if c > best_cos {
                best_cos = c;
                best = j;
            }
        }
        assign.push(best);
    }
    assign
}

/// Give every empty cluster the member row currently farthest (lowest cosine)
/// from its assigned centroid, drawn only from clusters that keep at least
/// one member.
fn repair_empty_clusters(features: &Matrix, centroids: &Matrix, assign: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &c in assign.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut victim: Option<(usize, f64)> = None;
        for (i, &c) in assign.iter().enumerate() {
            if counts[c] < 2 {
                continue;
            }
            let cos = dot(features.row(i), centroids.row(c));
            match victim {
                Some((_, best)) if cos >= best => {}
                _ => victim = Some((i, cos)),
            }
        }
        // rows >= k guarantees a donor cluster with >= 2 members exists
        let (row, _) = victim.expect("no donor row for empty cluster repair");
        assign[row] = empty;
    }
}

/// Normalized per-cluster means. Every cluster must be nonempty.
fn m_step(features: &Matrix, assign: &[usize], k: usize) -> Result<Matrix> {
    let dim = features.cols();
    let mut sums = Matrix::zeros(k, dim);
    let mut counts = vec![0usize; k];
    for (i, &c) in assign.iter().enumerate() {
        counts[c] += 1;
        let dst = sums.row_mut(c);
        for (d, &v) in dst.iter_mut().zip(features.row(i)) {
            *d += v;
        }
    }
    let mut centroids = Matrix::zeros(k, dim);
    for j in 0..k {
        if counts[j] == 0 {
            return Err(CldError::InvalidArgument {
                context: "spherical_kmeans",
                msg: format!("cluster {j} is empty"),
            });
        }
        let mean: Vec<f64> = sums.row(j).iter().map(|v| v / counts[j] as f64).collect();
        let unit = l2_normalize(&mean).map_err(|_| CldError::DegenerateNorm {
            context: "spherical_kmeans centroid".to_string(),
            row: j,
        })?;
        centroids.row_mut(j).copy_from_slice(&unit);
    }
    Ok(centroids)
}

/// Normalized mean of each cluster's member rows under a fixed assignment;
/// the M-step as a standalone operation.
pub fn centroids_for_assignment(features: &Matrix, assign: &[usize], k: usize) -> Result<Matrix> {
    m_step(features, assign, k)
}

/// k-means++ seeding adapted to cosine distance 1 - cos.
fn kmeans_pp_init(features: &Matrix, k: usize, rng: &mut DetRng) -> Matrix {
    let n = features.rows();
    let dim = features.cols();
    let mut centroids = Matrix::zeros(k, dim);
    let first = rng.index(n);
    centroids.row_mut(0).copy_from_slice(features.row(first));

    let mut min_dist: Vec<f64> = (0..n)
        .map(|i| (1.0 - dot(features.row(i), centroids.row(0))).max(0.0))
        .collect();
    for j in 1..k {
        let pick = match rng.weighted_index(&min_dist) {
            Some(p) => p,
            // All remaining mass is zero: every row coincides with a chosen
            // centroid. Fall back to the lowest not-yet-chosen index.
            None => {
                let chosen: Vec<&[f64]> = (0..j).map(|c| centroids.row(c)).collect();
                (0..n)
                    .find(|&i| !chosen.iter().any(|c| c == &features.row(i)))
                    .unwrap_or(0)
            }
        };
        centroids.row_mut(j).copy_from_slice(features.row(pick));
        for i in 0..n {
            let d = (1.0 - dot(features.row(i), centroids.row(j))).max(0.0);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    centroids
}

/// Spherical k-means by alternating assignment and normalized-mean updates.
///
/// Stops when assignments are stable or after `max_iter` E-steps. The
/// returned centroids always equal the normalized means of the returned
/// assignment, and the objective history is non-increasing.
pub fn spherical_kmeans(
    features: &Matrix,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<ClusterResult> {
    let n = features.rows();
    if k < 1 {
        return Err(CldError::InvalidArgument {
            context: "spherical_kmeans",
            msg: "k must be >= 1".to_string(),
        });
    }
    if k > n {
        return Err(CldError::InvalidArgument {
            context: "spherical_kmeans",
            msg: format!("k={k} exceeds row count {n}"),
        });
    }
    check_unit_rows(features, "spherical_kmeans")?;

    let mut rng = DetRng::new(seed);
    let init = kmeans_pp_init(features, k, &mut rng);
    let mut assign = e_step(features, &init);
    repair_empty_clusters(features, &init, &mut assign, k);

    let mut centroids = m_step(features, &assign, k)?;
    let mut history = vec![objective_of(features, &centroids, &assign)];
    for _ in 0..max_iter {
        let mut next = e_step(features, &centroids);
        repair_empty_clusters(features, &centroids, &mut next, k);
        if next == assign {
            break;
        }
        assign = next;
        centroids = m_step(features, &assign, k)?;
        history.push(objective_of(features, &centroids, &assign));
    }

    let objective = *history.last().expect("history nonempty");
    Ok(ClusterResult {
        centroids,
        assignment: assign,
        objective,
        objective_history: history,
    })
}

fn objective_of(features: &Matrix, centroids: &Matrix, assign: &[usize]) -> f64 {
    assign
        .iter()
        .enumerate()
        .map(|(i, &c)| 1.0 - dot(features.row(i), centroids.row(c)).clamp(-1.0, 1.0))
        .sum()
}

/// Clustering objective sum_i (1 - cos(f_i, centroid of row i)) for an
/// existing result; always >= 0.
pub fn kmeans_objective(features: &Matrix, result: &ClusterResult) -> f64 {
    objective_of(features, &result.centroids, &result.assignment)
}

/// Jacobi eigendecomposition of a symmetric matrix. Returns eigenvalues in
/// ascending order with matching unit eigenvectors as rows.
fn symmetric_eigen(a: &Matrix, max_sweeps: usize) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    assert_eq!(n, a.cols(), "symmetric_eigen requires a square matrix");
    let mut m = a.clone();
    // v holds accumulated rotations; columns are eigenvectors.
    let mut v = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 });

    let off = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += m.get(i, j) * m.get(i, j);
            }
        }
        s
    };
    let scale: f64 = (0..n)
        .map(|i| (0..n).map(|j| a.get(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max)
        .max(1.0);
    let tol = 1e-24 * scale * scale;

    let mut converged = false;
    for _ in 0..max_sweeps {
        if off(&m) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m.get(i, p);
                    let miq = m.get(i, q);
                    m.set(i, p, c * mip - s * miq);
                    m.set(i, q, s * mip + c * miq);
                }
                for j in 0..n {
                    let mpj = m.get(p, j);
                    let mqj = m.get(q, j);
                    m.set(p, j, c * mpj - s * mqj);
                    m.set(q, j, s * mpj + c * mqj);
                }
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }
    if !converged && off(&m) > tol {
        return Err(CldError::EigensolverDiverged { sweeps: max_sweeps });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let eigvals: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    order.sort_by(|&i, &j| eigvals[i].partial_cmp(&eigvals[j]).unwrap().then(i.cmp(&j)));

    let sorted_vals: Vec<f64> = order.iter().map(|&i| eigvals[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (r, &col) in order.iter().enumerate() {
        let dst = vectors.row_mut(r);
        for i in 0..n {
            dst[i] = v.get(i, col);
        }
        // canonical sign: largest-magnitude component positive
        let mut lead = 0usize;
        for i in 1..n {
            if dst[i].abs() > dst[lead].abs() {
                lead = i;
            }
        }
        if dst[lead] < 0.0 {
            for x in dst.iter_mut() {
                *x = -*x;
            }
        }
    }
    Ok((sorted_vals, vectors))
}

/// Spectral clustering: cosine affinity (negatives clamped to 0), normalized
/// Laplacian, k eigenvectors from the configured end of the spectrum,
/// row-normalized embedding, then spherical k-means in the embedding.
/// Centroids are reported in the original feature space as normalized
/// member means.
pub fn spectral_cluster(
    features: &Matrix,
    k: usize,
    seed: u64,
    end: SpectralEnd,
) -> Result<ClusterResult> {
    let n = features.rows();
    if k < 1 || k > n {
        return Err(CldError::InvalidArgument {
            context: "spectral_cluster",
            msg: format!("k={k} out of range for {n} rows"),
        });
    }
    check_unit_rows(features, "spectral_cluster")?;

    // Affinity with zero diagonal; isolated rows get self-affinity 1.
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let c = dot(features.row(i), features.row(j)).max(0.0);
            w.set(i, j, c);
            w.set(j, i, c);
        }
    }
    let mut degree: Vec<f64> = (0..n).map(|i| w.row(i).iter().sum()).collect();
    for i in 0..n {
        if degree[i] <= 0.0 {
            w.set(i, i, 1.0);
            degree[i] = 1.0;
        }
    }

    // L = D^{-1/2} (D - W) D^{-1/2}
    let mut lap = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d = if i == j { degree[i] } else { 0.0 };
            lap.set(i, j, (d - w.get(i, j)) / (degree[i].sqrt() * degree[j].sqrt()));
        }
    }

    let (_, eigvecs) = symmetric_eigen(&lap, 64)?;
    let mut embedding = Matrix::zeros(n, k);
    for e in 0..k {
        let idx = match end {
            SpectralEnd::Smallest => e,
            SpectralEnd::Largest => n - 1 - e,
        };
        let vec = eigvecs.row(idx);
        for i in 0..n {
            embedding.set(i, e, vec[i]);
        }
    }
    for i in 0..n {
        let row = embedding.row_mut(i);
        let nrm = norm(row);
        if nrm < crate::numerics::DEGENERATE_NORM {
            // deterministic placement for rows the spectrum says nothing about
            row[0] = 1.0;
            for x in row.iter_mut().skip(1) {
                *x = 0.0;
            }
        } else {
            for x in row.iter_mut() {
                *x /= nrm;
            }
        }
    }

    let embedded = spherical_kmeans(&embedding, k, seed, 20)?;
    let centroids = m_step(features, &embedded.assignment, k)?;
    let objective = objective_of(features, &centroids, &embedded.assignment);
    Ok(ClusterResult {
        centroids,
        assignment: embedded.assignment,
        objective,
        objective_history: vec![objective],
    })
}
