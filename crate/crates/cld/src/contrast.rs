//! Loss machinery: memory bank, instance-level NCE, cross-level
//! discrimination against batch-local centroids, and the weighted total.

use crate::clustering::ClusterResult;
use crate::encoder::ForwardCache;
use crate::error::{CldError, Result};
use crate::numerics::{dot, log_sum_exp, norm, DetRng, Matrix, DEGENERATE_NORM};

/// Whether CLD gradients flow through the centroids into the member
/// features, or stop at the centroids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidGrad {
    Through,
    Detached,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastConfig {
    /// Instance-branch temperature.
    pub t_i: f64,
    /// Group-branch temperature.
    pub t_g: f64,
    /// Weight of the cross-level term in the total loss.
    pub lambda: f64,
    /// Bank negatives per anchor; `None` resolves to min(n-1, 4096).
    pub num_negatives: Option<usize>,
    /// Clusters per batch; `None` resolves to batch_size / 2.
    pub k_groups: Option<usize>,
    pub centroid_grad: CentroidGrad,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            t_i: 0.2,
            t_g: 0.2,
            lambda: 0.25,
            num_negatives: None,
            k_groups: None,
            centroid_grad: CentroidGrad::Through,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(CldError::InvalidConfig {
                key: format!("contrast.{key}"),
                msg: msg.to_string(),
            })
        };
        if !(self.t_i > 0.0) {
            return bad("t_i", "must be > 0");
        }
        if !(self.t_g > 0.0) {
            return bad("t_g", "must be > 0");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda", "must be >= 0");
        }
        if self.num_negatives == Some(0) {
            return bad("num_negatives", "must be >= 1");
        }
        if let Some(k) = self.k_groups {
            if k < 2 {
                return bad("k_groups", "must be >= 2");
            }
        }
        Ok(())
    }

    pub fn resolved_negatives(&self, bank_len: usize) -> usize {
        self.num_negatives.unwrap_or_else(|| (bank_len - 1).min(4096))
    }

    pub fn resolved_k_groups(&self, batch_size: usize) -> usize {
        self.k_groups.unwrap_or_else(|| (batch_size / 2).max(2))
    }
}

/// One unit-length prototype row per training instance, refreshed by a
/// momentum moving average.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    vectors: Matrix,
    momentum: f64,
}

impl MemoryBank {
    /// Unit-normalized N(0, I) rows, deterministic in the seed.
    pub fn init(n: usize, dim: usize, momentum: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(CldError::InvalidConfig {
                key: "bank_momentum".to_string(),
                msg: "must be in [0, 1]".to_string(),
            });
        }
        if n == 0 || dim == 0 {
            return Err(CldError::EmptyInput("MemoryBank::init"));
        }
        let mut rng = DetRng::new(seed);
        let mut vectors = Matrix::from_fn(n, dim, |_, _| rng.normal());
        crate::numerics::l2_normalize_rows(&mut vectors, "memory bank init")?;
        Ok(MemoryBank { vectors, momentum })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    /// v_i <- normalize(m v_i + (1-m) f_i) for the given rows; untouched
    /// rows unchanged. A degenerate blend (antipodal cancellation) keeps
    /// the previous prototype.
    pub fn update(&mut self, indices: &[usize], f_rows: &Matrix) -> Result<()> {
        if f_rows.rows() != indices.len() || f_rows.cols() != self.dim() {
            return Err(CldError::DimMismatch {
                context: "MemoryBank::update".to_string(),
                expected: indices.len() * self.dim(),
                got: f_rows.rows() * f_rows.cols(),
            });
        }
        let m = self.momentum;
        if m == 1.0 {
            return Ok(());
        }
        for (b, &i) in indices.iter().enumerate() {
            let blended: Vec<f64> = self
                .vectors
                .row(i)
                .iter()
                .zip(f_rows.row(b))
                .map(|(v, f)| m * v + (1.0 - m) * f)
                .collect();
            let n = norm(&blended);
            if n < DEGENERATE_NORM {
                continue;
            }
            let dst = self.vectors.row_mut(i);
            for (d, x) in dst.iter_mut().zip(&blended) {
                *d = x / n;
            }
        }
        Ok(())
    }
}

/// Loss value and analytic gradients of one contrastive term.
#[derive(Debug, Clone)]
pub struct NceOutput {
    pub loss: f64,
    pub grad_f: Vec<f64>,
    pub grad_pos: Vec<f64>,
    pub grad_negs: Vec<Vec<f64>>,
}

/// Instance-centric contrastive loss with analytic gradients:
/// -log( exp(<f,pos>/T) / (exp(<f,pos>/T) + sum_j exp(<f,neg_j>/T)) ).
pub fn nce_loss(f: &[f64], pos: &[f64], negs: &[&[f64]], t: f64) -> Result<NceOutput> {
    if !(t > 0.0) {
        return Err(CldError::InvalidArgument {
            context: "nce_loss",
            msg: "temperature must be > 0".to_string(),
        });
    }
    let dim = f.len();
    if negs.is_empty() {
        return Ok(NceOutput {
            loss: 0.0,
            grad_f: vec![0.0; dim],
            grad_pos: vec![0.0; dim],
            grad_negs: Vec::new(),
        });
    }
    let s_pos = dot(f, pos) / t;
    let mut scores = Vec::with_capacity(negs.len() + 1);
    scores.push(s_pos);
    for n in negs {
        scores.push(dot(f, n) / t);
    }
    let lse = log_sum_exp(&scores)?;
    let loss = lse - s_pos;

    let p_pos = (s_pos - lse).exp();
    let mut grad_f: Vec<f64> = pos.iter().map(|x| (p_pos - 1.0) * x / t).collect();
    let grad_pos: Vec<f64> = f.iter().map(|x| (p_pos - 1.0) * x / t).collect();
    let mut grad_negs = Vec::with_capacity(negs.len());
    for (j, n) in negs.iter().enumerate() {
        let p_j = (scores[j + 1] - lse).exp();
        for (g, x) in grad_f.iter_mut().zip(n.iter()) {
            *g += p_j * x / t;
        }
        grad_negs.push(f.iter().map(|x| p_j * x / t).collect());
    }
    Ok(NceOutput {
        loss,
        grad_f,
        grad_pos,
        grad_negs,
    })
}

/// One fresh negative draw per instance, shared by the two views.
pub fn draw_negatives(
    rng: &mut DetRng,
    bank_len: usize,
    indices: &[usize],
    num_negatives: usize,
) -> Result<Vec<Vec<usize>>> {
    if num_negatives > bank_len.saturating_sub(1) {
        return Err(CldError::InvalidArgument {
            context: "draw_negatives",
            msg: format!(
                "num_negatives {num_negatives} exceeds bank size {bank_len} - 1"
            ),
        });
    }
    indices
        .iter()
        .map(|&i| {
            if i >= bank_len {
                return Err(CldError::InvalidArgument {
                    context: "draw_negatives",
                    msg: format!("instance index {i} outside bank of {bank_len}"),
                });
            }
            Ok(rng.sample_excluding(bank_len, num_negatives, i))
        })
        .collect()
}

/// Instance-level term over both views with pre-drawn negatives. Bank rows
/// are constants; gradients land on the instance features only.
pub fn instance_term_with_negatives(
    cache_a: &ForwardCache,
    cache_b: &ForwardCache,
    bank: &MemoryBank,
    indices: &[usize],
    negatives: &[Vec<usize>],
    t_i: f64,
) -> Result<(f64, Matrix, Matrix, Vec<f64>)> {
    let n_rows = indices.len();
    if cache_a.f_i.rows() != n_rows || cache_b.f_i.rows() != n_rows || negatives.len() != n_rows {
        return Err(CldError::DimMismatch {
            context: "instance_term batch".to_string(),
            expected: n_rows,
            got: cache_a.f_i.rows(),
        });
    }
    let dim = cache_a.f_i.cols();
    let mut loss = 0.0;
    let mut grad_a = Matrix::zeros(n_rows, dim);
    let mut grad_b = Matrix::zeros(n_rows, dim);
    let mut per_sample = vec![0.0; n_rows];
    for (b_i, (&gi, negs_idx)) in indices.iter().zip(negatives).enumerate() {
        let pos = bank.row(gi);
        let negs: Vec<&[f64]> = negs_idx.iter().map(|&j| bank.row(j)).collect();
        for (cache, grad) in [(cache_a, &mut grad_a), (cache_b, &mut grad_b)] {
            let out = nce_loss(cache.f_i.row(b_i), pos, &negs, t_i)?;
            loss += out.loss;
            per_sample[b_i] += out.loss;
            grad.row_mut(b_i).copy_from_slice(&out.grad_f);
        }
    }
    Ok((loss, grad_a, grad_b, per_sample))
}

/// Instance-level term drawing fresh negatives from `rng`.
pub fn instance_term(
    cache_a: &ForwardCache,
    cache_b: &ForwardCache,
    bank: &MemoryBank,
    indices: &[usize],
    cfg: &ContrastConfig,
    rng: &mut DetRng,
) -> Result<(f64, Matrix, Matrix, Vec<f64>)> {
    let num_negs = cfg.resolved_negatives(bank.len());
    let negatives = draw_negatives(rng, bank.len(), indices, num_negs)?;
    instance_term_with_negatives(cache_a, cache_b, bank, indices, &negatives, cfg.t_i)
}

fn check_clusters(rows: usize, clusters: &ClusterResult, name: &str) -> Result<()> {
    if clusters.assignment.len() != rows {
        return Err(CldError::DimMismatch {
            context: format!("cld_term {name} assignment"),
            expected: rows,
            got: clusters.assignment.len(),
        });
    }
    let k = clusters.k();
    let mut counts = vec![0usize; k];
    for &c in &clusters.assignment {
        counts[c] += 1;
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(CldError::InvalidArgument {
            context: "cld_term",
            msg: format!("{name} cluster {j} is empty"),
        });
    }
    Ok(())
}

/// One direction of the cross-level loss: anchors against the other view's
/// centroids under that view's assignment. Accumulates anchor gradients
/// into `grad_anchor` and returns per-centroid gradients.
fn cld_direction(
    anchors: &Matrix,
    clusters: &ClusterResult,
    t_g: f64,
    grad_anchor: &mut Matrix,
    per_sample: &mut [f64],
) -> Result<(f64, Matrix)> {
    let k = clusters.k();
    let dim = clusters.centroids.cols();
    let mut loss = 0.0;
    let mut d_centroids = Matrix::zeros(k, dim);
    for i in 0..anchors.rows() {
        let gamma = clusters.assignment[i];
        let pos = clusters.centroids.row(gamma);
        let neg_ids: Vec<usize> = (0..k).filter(|&j| j != gamma).collect();
        let negs: Vec<&[f64]> = neg_ids.iter().map(|&j| clusters.centroids.row(j)).collect();
        let out = nce_loss(anchors.row(i), pos, &negs, t_g)?;
        loss += out.loss;
        per_sample[i] += out.loss;
        for (dst, g) in grad_anchor.row_mut(i).iter_mut().zip(&out.grad_f) {
            *dst += g;
        }
        for (dst, g) in d_centroids.row_mut(gamma).iter_mut().zip(&out.grad_pos) {
            *dst += g;
        }
        for (&j, g_neg) in neg_ids.iter().zip(&out.grad_negs) {
            for (dst, g) in d_centroids.row_mut(j).iter_mut().zip(g_neg) {
                *dst += g;
            }
        }
    }
    Ok((loss, d_centroids))
}

/// Chain centroid gradients back into member features:
/// centroid = normalize(mean of members), so each member row receives
/// (I - uu^T) d_M / (||mean|| |S|).
fn backprop_centroids(
    features: &Matrix,
    clusters: &ClusterResult,
    d_centroids: &Matrix,
    grad_features: &mut Matrix,
) {
    let members = clusters.members();
    for (j, rows) in members.iter().enumerate() {
        let count = rows.len();
        if count == 0 {
            continue;
        }
        let dim = features.cols();
        let mut mean = vec![0.0; dim];
        for &r in rows {
            for (m, &v) in mean.iter_mut().zip(features.row(r)) {
                *m += v / count as f64;
            }
        }
        let mean_norm = norm(&mean);
        if mean_norm < DEGENERATE_NORM {
            continue;
        }
        let u: Vec<f64> = mean.iter().map(|x| x / mean_norm).collect();
        let g = d_centroids.row(j);
        let radial = dot(g, &u);
        let d_mean: Vec<f64> = g
            .iter()
            .zip(&u)
            .map(|(gx, ux)| (gx - radial * ux) / mean_norm)
            .collect();
        for &r in rows {
            for (dst, dm) in grad_features.row_mut(r).iter_mut().zip(&d_mean) {
                *dst += dm / count as f64;
            }
        }
    }
}

/// Cross-level discrimination over both directions. Assignments are always
/// constants; centroid gradients flow into member features only in
/// `Through` mode.
pub fn cld_term(
    f_g_a: &Matrix,
    f_g_b: &Matrix,
    clusters_a: &ClusterResult,
    clusters_b: &ClusterResult,
    cfg: &ContrastConfig,
) -> Result<(f64, Matrix, Matrix, Vec<f64>)> {
    let n = f_g_a.rows();
    if f_g_b.rows() != n {
        return Err(CldError::DimMismatch {
            context: "cld_term views".to_string(),
            expected: n,
            got: f_g_b.rows(),
        });
    }
    check_clusters(n, clusters_a, "view-a")?;
    check_clusters(n, clusters_b, "view-b")?;
    if clusters_a.k() != clusters_b.k() {
        return Err(CldError::DimMismatch {
            context: "cld_term centroid counts".to_string(),
            expected: clusters_a.k(),
            got: clusters_b.k(),
        });
    }

    let mut grad_a = Matrix::zeros(n, f_g_a.cols());
    let mut grad_b = Matrix::zeros(n, f_g_b.cols());
    let mut per_sample = vec![0.0; n];
    if clusters_a.k() == 1 {
        return Ok((0.0, grad_a, grad_b, per_sample));
    }

    // view-b anchors vs view-a centroids, then the mirror
    let (loss_ba, d_m_a) = cld_direction(f_g_b, clusters_a, cfg.t_g, &mut grad_b, &mut per_sample)?;
    let (loss_ab, d_m_b) = cld_direction(f_g_a, clusters_b, cfg.t_g, &mut grad_a, &mut per_sample)?;

    if cfg.centroid_grad == CentroidGrad::Through {
        backprop_centroids(f_g_a, clusters_a, &d_m_a, &mut grad_a);
        backprop_centroids(f_g_b, clusters_b, &d_m_b, &mut grad_b);
    }
    Ok((loss_ba + loss_ab, grad_a, grad_b, per_sample))
}

/// Cross entropy between the hard assignment of one view and the soft
/// centroid assignment of the other; equals one direction of [`cld_term`].
pub fn cross_entropy_form(f_g_b: &Matrix, clusters_a: &ClusterResult, t_g: f64) -> Result<f64> {
    check_clusters(f_g_b.rows(), clusters_a, "view-a")?;
    let k = clusters_a.k();
    let mut total = 0.0;
    for i in 0..f_g_b.rows() {
        let scores: Vec<f64> = (0..k)
            .map(|j| dot(f_g_b.row(i), clusters_a.centroids.row(j)) / t_g)
            .collect();
        let lse = log_sum_exp(&scores)?;
        total += lse - scores[clusters_a.assignment[i]];
    }
    Ok(total)
}

/// Instance loss, cross-level loss, and their weighted total, with
/// per-sample diagnostics and the per-anchor negative counts.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub instance_loss: f64,
    pub cld_loss: f64,
    pub total: f64,
    pub per_sample_instance: Vec<f64>,
    pub per_sample_cld: Vec<f64>,
    /// Bank negatives per instance anchor.
    pub instance_negatives: usize,
    /// Centroid negatives per group anchor (k - 1).
    pub cld_negatives: usize,
}

pub struct TotalLossOutput {
    pub report: LossReport,
    pub grad_f_i_a: Matrix,
    pub grad_f_i_b: Matrix,
    pub grad_f_g_a: Matrix,
    pub grad_f_g_b: Matrix,
}

/// Total objective: instance term plus lambda times the cross-level term.
/// `clusters` may be `None` only when lambda is zero (the cross-level side
/// is skipped and reported as zero).
pub fn total_loss(
    cache_a: &ForwardCache,
    cache_b: &ForwardCache,
    bank: &MemoryBank,
    indices: &[usize],
    clusters: Option<(&ClusterResult, &ClusterResult)>,
    cfg: &ContrastConfig,
    rng: &mut DetRng,
) -> Result<TotalLossOutput> {
    cfg.validate()?;
    let n = indices.len();
    let (instance_loss, grad_f_i_a, grad_f_i_b, per_sample_instance) =
        instance_term(cache_a, cache_b, bank, indices, cfg, rng)?;

    let (cld_loss, mut grad_f_g_a, mut grad_f_g_b, per_sample_cld, cld_negatives) =
        if cfg.lambda > 0.0 {
            let (ca, cb) = clusters.ok_or_else(|| CldError::InvalidArgument {
                context: "total_loss",
                msg: "clusters required when lambda > 0".to_string(),
            })?;
            let (l, ga, gb, ps) = cld_term(&cache_a.f_g, &cache_b.f_g, ca, cb, cfg)?;
            (l, ga, gb, ps, ca.k() - 1)
        } else {
            (
                0.0,
                Matrix::zeros(n, cache_a.f_g.cols()),
                Matrix::zeros(n, cache_b.f_g.cols()),
                vec![0.0; n],
                0,
            )
        };

    grad_f_g_a.scale(cfg.lambda);
    grad_f_g_b.scale(cfg.lambda);

    let report = LossReport {
        instance_loss,
        cld_loss,
        total: instance_loss + cfg.lambda * cld_loss,
        per_sample_instance,
        per_sample_cld,
        instance_negatives: cfg.resolved_negatives(bank.len()),
        cld_negatives,
    };
    Ok(TotalLossOutput {
        report,
        grad_f_i_a,
        grad_f_i_b,
        grad_f_g_a,
        grad_f_g_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::spherical_kmeans;
    use crate::numerics::l2_normalize;

    fn unit(v: &[f64]) -> Vec<f64> {
        l2_normalize(v).unwrap()
    }

    fn random_units(n: usize, dim: usize, seed: u64) -> Matrix {
        let mut rng = DetRng::new(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| unit(&rng.normal_vec(dim))).collect();
        Matrix::from_rows(&rows)
    }

    #[test]
    fn nce_empty_negatives_is_zero() {
        let f = unit(&[1.0, 0.0]);
        let out = nce_loss(&f, &f, &[], 0.2).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_f.iter().all(|&x| x == 0.0));
        assert!(out.grad_pos.iter().all(|&x| x == 0.0));
        assert!(out.grad_negs.is_empty());
    }

    #[test]
    fn nce_symmetric_scores_give_ln2() {
        // <f,pos> = <f,neg> = 0 with one negative
        let f = vec![1.0, 0.0];
        let pos = vec![0.0, 1.0];
        let neg = vec![0.0, -1.0];
        let out = nce_loss(&f, &pos, &[&neg], 0.07).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn nce_scalar_case_matches_hand_value() {
        // cos(f,pos)=1, cos(f,neg)=0, T=0.2: loss = -log(e^5/(e^5+1))
        let f = vec![1.0, 0.0];
        let neg = vec![0.0, 1.0];
        let out = nce_loss(&f, &f, &[&neg], 0.2).unwrap();
        let expect = -((5f64).exp() / ((5f64).exp() + 1.0)).ln();
        assert!((out.loss - expect).abs() < 1e-12);
        assert!((out.loss - 0.0067153).abs() < 1e-7);
    }

    #[test]
    fn nce_rejects_bad_temperature() {
        let f = vec![1.0, 0.0];
        assert!(nce_loss(&f, &f, &[], 0.0).is_err());
        assert!(nce_loss(&f, &f, &[], -1.0).is_err());
    }

    #[test]
    fn nce_gradients_match_finite_differences() {
        let mut rng = DetRng::new(17);
        let dim = 5;
        let t = 0.3;
        let f = rng.normal_vec(dim);
        let pos = rng.normal_vec(dim);
        let negs: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(dim)).collect();
        let neg_refs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
        let base = nce_loss(&f, &pos, &neg_refs, t).unwrap();

        let eps = 1e-5;
        let eval = |f: &[f64], pos: &[f64], negs: &[Vec<f64>]| -> f64 {
            let refs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
            nce_loss(f, pos, &refs, t).unwrap().loss
        };
        let check = |analytic: &[f64], bump: &mut dyn FnMut(usize, f64) -> f64| {
            for (j, &a) in analytic.iter().enumerate() {
                let plus = bump(j, eps);
                let minus = bump(j, -eps);
                let fd = (plus - minus) / (2.0 * eps);
                let rel = (a - fd).abs() / a.abs().max(1.0);
                assert!(rel < 1e-4, "coord {j}: analytic {a} fd {fd}");
            }
        };
        check(&base.grad_f, &mut |j, e| {
            let mut fp = f.clone();
            fp[j] += e;
            eval(&fp, &pos, &negs)
        });
        check(&base.grad_pos, &mut |j, e| {
            let mut pp = pos.clone();
            pp[j] += e;
            eval(&f, &pp, &negs)
        });
        for (ni, g_neg) in base.grad_negs.iter().enumerate() {
            check(g_neg, &mut |j, e| {
                let mut nn = negs.clone();
                nn[ni][j] += e;
                eval(&f, &pos, &nn)
            });
        }
    }

    fn fake_cache(f_i: Matrix, f_g: Matrix) -> ForwardCache {
        ForwardCache {
            input: Matrix::zeros(f_i.rows(), 1),
            pre_acts: vec![],
            acts: vec![],
            head_i_raw: f_i.clone(),
            head_g_raw: f_g.clone(),
            f_i,
            f_g,
        }
    }

    #[test]
    fn instance_term_matches_scalar_oracle_when_bank_equals_features() {
        // positive cos = 1, negatives orthogonal: per-term loss is
        // log(1 + m e^{-1/T}), evaluated directly.
        let t = 0.07;
        let m_negs = 16usize;
        let dim = 24;
        let n = 20;
        // orthonormal one-hot bank rows; instance i uses axis i
        let mut bank = MemoryBank::init(n, dim, 0.5, 1).unwrap();
        let mut rows = Vec::new();
        for i in 0..n {
            let mut v = vec![0.0; dim];
            v[i % dim] = 1.0;
            rows.push(v);
        }
        bank.vectors = Matrix::from_rows(&rows);

        let indices = vec![0usize];
        let f = Matrix::from_rows(&[rows[0].clone()]);
        let cache_a = fake_cache(f.clone(), f.clone());
        let cache_b = fake_cache(f.clone(), f.clone());
        // negatives 1..=m_negs are all orthogonal to axis 0
        let negatives = vec![(1..=m_negs).collect::<Vec<usize>>()];
        let (loss, _, _, _) =
            instance_term_with_negatives(&cache_a, &cache_b, &bank, &indices, &negatives, t)
                .unwrap();
        let per_term = (m_negs as f64 * (-1.0 / t).exp()).ln_1p();
        assert!((loss - 2.0 * per_term).abs() < 1e-12, "loss {loss}");
        assert!(per_term < 1e-5);
    }

    #[test]
    fn instance_term_two_instances_forced_negative() {
        let bank = MemoryBank::init(2, 4, 0.5, 3).unwrap();
        let f = random_units(2, 4, 5);
        let cache_a = fake_cache(f.clone(), f.clone());
        let cache_b = fake_cache(f.clone(), f.clone());
        let mut rng = DetRng::new(8);
        let negs = draw_negatives(&mut rng, 2, &[0, 1], 1).unwrap();
        assert_eq!(negs, vec![vec![1], vec![0]]);
        let cfg = ContrastConfig {
            num_negatives: Some(1),
            ..Default::default()
        };
        let mut rng2 = DetRng::new(8);
        let out = instance_term(&cache_a, &cache_b, &bank, &[0, 1], &cfg, &mut rng2).unwrap();
        assert!(out.0 > 0.0);
    }

    #[test]
    fn instance_term_ignores_lambda() {
        let bank = MemoryBank::init(6, 4, 0.5, 3).unwrap();
        let f = random_units(3, 4, 6);
        let cache_a = fake_cache(f.clone(), f.clone());
        let cache_b = fake_cache(f.clone(), f.clone());
        let indices = vec![0, 2, 4];
        let base = ContrastConfig {
            num_negatives: Some(3),
            ..Default::default()
        };
        let changed = ContrastConfig {
            lambda: 7.0,
            ..base.clone()
        };
        let mut r1 = DetRng::new(9);
        let mut r2 = DetRng::new(9);
        let a = instance_term(&cache_a, &cache_b, &bank, &indices, &base, &mut r1).unwrap();
        let b = instance_term(&cache_a, &cache_b, &bank, &indices, &changed, &mut r2).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn instance_term_rejects_oversized_draw() {
        let _bank = MemoryBank::init(4, 4, 0.5, 3).unwrap();
        let mut rng = DetRng::new(1);
        assert!(draw_negatives(&mut rng, 4, &[0], 4).is_err());
        assert!(draw_negatives(&mut rng, 4, &[0], 3).is_ok());
    }

    #[test]
    fn cld_term_single_cluster_is_zero() {
        let f = random_units(5, 4, 10);
        let clusters = spherical_kmeans(&f, 1, 0, 20).unwrap();
        let cfg = ContrastConfig::default();
        let (l, ga, gb, _) = cld_term(&f, &f, &clusters, &clusters, &cfg).unwrap();
        assert_eq!(l, 0.0);
        assert!(ga.data().iter().all(|&x| x == 0.0));
        assert!(gb.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cld_term_well_separated_matches_scalar_formula() {
        // k tight clusters at mutually far directions; identical views.
        // With within-cos ~ 1 and cross-cos ~ c, the per-instance loss is
        // -log(e^{1/T} / (e^{1/T} + (k-1) e^{c/T})).
        let k = 3usize;
        let t_g = 0.2;
        // three unit directions in 2D at 120 degrees: pairwise cos = -1/2
        let dirs = [
            vec![1.0, 0.0],
            vec![-0.5, 3f64.sqrt() / 2.0],
            vec![-0.5, -(3f64.sqrt()) / 2.0],
        ];
        let mut rows = Vec::new();
        for d in &dirs {
            for _ in 0..2 {
                rows.push(d.clone());
            }
        }
        let f = Matrix::from_rows(&rows);
        let clusters = spherical_kmeans(&f, k, 1, 20).unwrap();
        let cfg = ContrastConfig {
            t_g,
            ..Default::default()
        };
        let (l, _, _, per) = cld_term(&f, &f, &clusters, &clusters, &cfg).unwrap();
        let cross = -0.5f64;
        let expect_per = -((1.0 / t_g).exp()
            / ((1.0 / t_g).exp() + (k as f64 - 1.0) * (cross / t_g).exp()))
        .ln();
        // both directions contribute per instance
        assert!((l - 2.0 * 6.0 * expect_per).abs() < 1e-9, "loss {l}");
        for p in per {
            assert!((p - 2.0 * expect_per).abs() < 1e-9);
        }
    }

    /// FD oracle over both feature matrices. In Through mode centroids are
    /// recomputed from the perturbed features under the frozen assignment;
    /// in Detached mode the centroid values are frozen.
    fn cld_fd_check(centroid_grad: CentroidGrad, k: usize, seed: u64) {
        let n = 6;
        let dim = 4;
        let f_a = random_units(n, dim, seed);
        let f_b = random_units(n, dim, seed + 1);
        let base_a = spherical_kmeans(&f_a, k, seed + 2, 20).unwrap();
        let base_b = spherical_kmeans(&f_b, k, seed + 3, 20).unwrap();
        let cfg = ContrastConfig {
            centroid_grad,
            t_g: 0.25,
            ..Default::default()
        };

        let rebuild = |feats: &Matrix, base: &ClusterResult| -> ClusterResult {
            match centroid_grad {
                CentroidGrad::Through => {
                    let centroids = crate::clustering::centroids_for_assignment(
                        feats,
                        &base.assignment,
                        k,
                    )
                    .unwrap();
                    ClusterResult {
                        centroids,
                        assignment: base.assignment.clone(),
                        objective: 0.0,
                        objective_history: vec![],
                    }
                }
                CentroidGrad::Detached => base.clone(),
            }
        };
        let eval = |fa: &Matrix, fb: &Matrix| -> f64 {
            let ca = rebuild(fa, &base_a);
            let cb = rebuild(fb, &base_b);
            cld_term(fa, fb, &ca, &cb, &cfg).unwrap().0
        };

        let ca = rebuild(&f_a, &base_a);
        let cb = rebuild(&f_b, &base_b);
        let (_, ga, gb, _) = cld_term(&f_a, &f_b, &ca, &cb, &cfg).unwrap();

        let eps = 1e-6;
        for (mat, grad, is_a) in [(&f_a, &ga, true), (&f_b, &gb, false)] {
            for r in 0..n {
                for c in 0..dim {
                    let mut bumped = (*mat).clone();
                    bumped.set(r, c, mat.get(r, c) + eps);
                    let plus = if is_a { eval(&bumped, &f_b) } else { eval(&f_a, &bumped) };
                    bumped.set(r, c, mat.get(r, c) - eps);
                    let minus = if is_a { eval(&bumped, &f_b) } else { eval(&f_a, &bumped) };
                    let fd = (plus - minus) / (2.0 * eps);
                    let a = grad.get(r, c);
                    let rel = (a - fd).abs() / a.abs().max(1.0);
                    assert!(
                        rel < 1e-4,
                        "{centroid_grad:?} ({r},{c}): analytic {a} fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn cld_gradients_match_fd_through() {
        cld_fd_check(CentroidGrad::Through, 3, 30);
    }

    #[test]
    fn cld_gradients_match_fd_detached() {
        cld_fd_check(CentroidGrad::Detached, 3, 40);
    }

    #[test]
    fn cld_gradients_match_fd_singleton_clusters() {
        // k = batch: every instance is its own cluster
        cld_fd_check(CentroidGrad::Through, 6, 50);
        cld_fd_check(CentroidGrad::Detached, 6, 60);
    }

    #[test]
    fn cross_entropy_form_equals_directional_half() {
        let mut rng = DetRng::new(70);
        for trial in 0..100 {
            let n = 4 + (trial % 8);
            let k = 2 + (trial % 3);
            let f_a = random_units(n, 5, rng.next_u64());
            let f_b = random_units(n, 5, rng.next_u64());
            let ca = spherical_kmeans(&f_a, k, rng.next_u64(), 20).unwrap();
            let cb = spherical_kmeans(&f_b, k, rng.next_u64(), 20).unwrap();
            let cfg = ContrastConfig {
                t_g: 0.2,
                ..Default::default()
            };
            let (total, _, _, _) = cld_term(&f_a, &f_b, &ca, &cb, &cfg).unwrap();
            let half_1 = cross_entropy_form(&f_b, &ca, cfg.t_g).unwrap();
            let half_2 = cross_entropy_form(&f_a, &cb, cfg.t_g).unwrap();
            assert!((total - (half_1 + half_2)).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_entropy_form_uniform_scores_give_log_k() {
        // all centroid similarities equal -> per-instance term = log k
        let k = 4usize;
        let anchor = vec![0.0, 0.0, 1.0];
        // centroids all orthogonal to the anchors
        let centroids = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![-1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, -1.0, 0.0],
        ]);
        let anchors = Matrix::from_rows(&vec![anchor; 4]);
        let clusters = ClusterResult {
            centroids,
            assignment: vec![0, 1, 2, 3],
            objective: 0.0,
            objective_history: vec![],
        };
        let ce = cross_entropy_form(&anchors, &clusters, 0.2).unwrap();
        assert!((ce - 4.0 * (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn bank_update_cases() {
        let mut bank = MemoryBank::init(3, 2, 1.0, 1).unwrap();
        let before = bank.vectors().clone();
        let f = Matrix::from_rows(&[vec![0.0, 1.0]]);
        bank.update(&[1], &f).unwrap();
        assert_eq!(bank.vectors(), &before);

        let mut bank0 = MemoryBank::init(3, 2, 0.0, 1).unwrap();
        bank0.update(&[1], &f).unwrap();
        assert_eq!(bank0.row(1), &[0.0, 1.0]);

        let mut bank_half = MemoryBank::init(3, 2, 0.5, 1).unwrap();
        bank_half.vectors.row_mut(2).copy_from_slice(&[1.0, 0.0]);
        let f2 = Matrix::from_rows(&[vec![0.0, 1.0]]);
        bank_half.update(&[2], &f2).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((bank_half.row(2)[0] - s).abs() < 1e-15);
        assert!((bank_half.row(2)[1] - s).abs() < 1e-15);
    }

    #[test]
    fn bank_rows_stay_unit_over_many_updates() {
        let mut bank = MemoryBank::init(8, 6, 0.5, 2).unwrap();
        let mut rng = DetRng::new(3);
        for step in 0..10_000 {
            let i = step % 8;
            let f = Matrix::from_rows(&[unit(&rng.normal_vec(6))]);
            bank.update(&[i], &f).unwrap();
        }
        for i in 0..8 {
            assert!((norm(bank.row(i)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn total_loss_lambda_zero_reduces_to_instance() {
        let n = 6;
        let bank = MemoryBank::init(n, 4, 0.5, 1).unwrap();
        let f_i = random_units(4, 4, 2);
        let f_g = random_units(4, 4, 3);
        let cache_a = fake_cache(f_i.clone(), f_g.clone());
        let cache_b = fake_cache(random_units(4, 4, 4), random_units(4, 4, 5));
        let indices = vec![0, 1, 2, 3];
        let cfg = ContrastConfig {
            lambda: 0.0,
            num_negatives: Some(3),
            ..Default::default()
        };
        let mut rng = DetRng::new(6);
        let out = total_loss(&cache_a, &cache_b, &bank, &indices, None, &cfg, &mut rng).unwrap();
        assert_eq!(out.report.cld_loss, 0.0);
        assert_eq!(out.report.total, out.report.instance_loss);
        assert!(out.grad_f_g_a.data().iter().all(|&x| x == 0.0));
        assert!(out.grad_f_g_b.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn total_loss_lambda_scaling_and_counts() {
        let n = 8;
        let bank = MemoryBank::init(n, 4, 0.5, 1).unwrap();
        let f_a = random_units(6, 4, 7);
        let f_b = random_units(6, 4, 8);
        let cache_a = fake_cache(f_a.clone(), f_a.clone());
        let cache_b = fake_cache(f_b.clone(), f_b.clone());
        let indices: Vec<usize> = (0..6).collect();
        let ca = spherical_kmeans(&f_a, 3, 1, 20).unwrap();
        let cb = spherical_kmeans(&f_b, 3, 2, 20).unwrap();

        let run = |lambda: f64| {
            let cfg = ContrastConfig {
                lambda,
                num_negatives: Some(5),
                k_groups: Some(3),
                ..Default::default()
            };
            let mut rng = DetRng::new(10);
            total_loss(&cache_a, &cache_b, &bank, &indices, Some((&ca, &cb)), &cfg, &mut rng)
                .unwrap()
        };
        let quarter = run(0.25);
        let half = run(0.5);
        assert!((quarter.report.total
            - (quarter.report.instance_loss + 0.25 * quarter.report.cld_loss))
            .abs()
            < 1e-12);
        // doubling lambda doubles (total - instance)
        let gap_q = quarter.report.total - quarter.report.instance_loss;
        let gap_h = half.report.total - half.report.instance_loss;
        assert!((gap_h - 2.0 * gap_q).abs() < 1e-12);
        assert_eq!(quarter.report.instance_negatives, 5);
        assert_eq!(quarter.report.cld_negatives, 2);
        assert!(quarter.report.instance_loss >= 0.0);
        assert!(quarter.report.cld_loss >= 0.0);
    }

    #[test]
    fn instance_part_symmetric_under_view_swap_with_replayed_draws() {
        let bank = MemoryBank::init(10, 4, 0.5, 1).unwrap();
        let f_a = random_units(5, 4, 11);
        let f_b = random_units(5, 4, 12);
        let cache_a = fake_cache(f_a.clone(), f_a.clone());
        let cache_b = fake_cache(f_b.clone(), f_b.clone());
        let indices: Vec<usize> = (0..5).collect();
        let mut rng = DetRng::new(13);
        let negs = draw_negatives(&mut rng, 10, &indices, 4).unwrap();
        let fwd =
            instance_term_with_negatives(&cache_a, &cache_b, &bank, &indices, &negs, 0.2).unwrap();
        let rev =
            instance_term_with_negatives(&cache_b, &cache_a, &bank, &indices, &negs, 0.2).unwrap();
        assert!((fwd.0 - rev.0).abs() < 1e-12);
    }
}
