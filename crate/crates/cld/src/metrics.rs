//! Evaluation stack: weighted kNN accuracy, normalized mutual information,
//! top-1 cross-view retrieval, cosine-similarity histograms, and the
//! label-free tuning score NMI(f,f') * R(f,f').

use std::collections::HashMap;

use crate::clustering::spherical_kmeans;
use crate::error::{CldError, Result};
use crate::numerics::{dot, Matrix};

pub const KNN_DEFAULT_K: usize = 200;
pub const KNN_DEFAULT_TEMPERATURE: f64 = 0.07;
const HIST_BINS: usize = 50;

/// Cosine histograms over positive and negative cross-view pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    /// 50 bins over [-1, 1]; mass equals the pair counts.
    pub pos_hist: Vec<u64>,
    pub neg_hist: Vec<u64>,
    pub mean_pos: f64,
    pub mean_neg: f64,
    pub mean_gap: f64,
}

impl SimilarityReport {
    pub fn bin_center(i: usize) -> f64 {
        -1.0 + (i as f64 + 0.5) * 2.0 / HIST_BINS as f64
    }

    /// CSV rows of (bin_center, pos_count, neg_count).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_center,pos_count,neg_count\n");
        for i in 0..HIST_BINS {
            out.push_str(&format!(
                "{},{},{}\n",
                Self::bin_center(i),
                self.pos_hist[i],
                self.neg_hist[i]
            ));
        }
        out
    }
}

/// Full evaluation summary for one checkpoint.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub knn_top1: f64,
    pub nmi_vs_labels: f64,
    pub retrieval_top1: f64,
    /// NMI between the k-means assignments of the two augmented views.
    pub nmi_views: f64,
    /// nmi_views * retrieval_top1; uses no labels.
    pub tuning_score: f64,
    pub similarity: SimilarityReport,
}

impl EvalReport {
    /// Flat JSON object; histograms ship separately as CSV.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "knn_top1": self.knn_top1,
            "nmi_vs_labels": self.nmi_vs_labels,
            "retrieval_top1": self.retrieval_top1,
            "nmi_views": self.nmi_views,
            "tuning_score": self.tuning_score,
            "mean_pos": self.similarity.mean_pos,
            "mean_neg": self.similarity.mean_neg,
            "mean_gap": self.similarity.mean_gap,
        })
    }
}

/// Exp-weighted kNN vote over cosine similarities. Ties at the k-th
/// neighbor break by (higher cosine, lower label); prediction ties take the
/// lowest class id. `t_knn = f64::INFINITY` gives a plain majority vote.
pub fn knn_predict(
    train_feats: &Matrix,
    train_labels: &[usize],
    test_feats: &Matrix,
    k: usize,
    t_knn: f64,
) -> Result<Vec<usize>> {
    if train_feats.rows() == 0 {
        return Err(CldError::EmptyInput("knn_predict train set"));
    }
    if train_feats.rows() != train_labels.len() {
        return Err(CldError::DimMismatch {
            context: "knn_predict labels".to_string(),
            expected: train_feats.rows(),
            got: train_labels.len(),
        });
    }
    let k_eff = if k > train_feats.rows() {
        eprintln!(
            "warning: knn k={} clamped to train size {}",
            k,
            train_feats.rows()
        );
        train_feats.rows()
    } else {
        k
    };
    let num_classes = train_labels.iter().copied().max().unwrap_or(0) + 1;
    let mut predictions = Vec::with_capacity(test_feats.rows());
    for t in 0..test_feats.rows() {
        let query = test_feats.row(t);
        let mut scored: Vec<(f64, usize)> = (0..train_feats.rows())
            .map(|i| (dot(query, train_feats.row(i)), train_labels[i]))
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite cosine")
                .then(a.1.cmp(&b.1))
        });
        let mut class_scores = vec![0.0f64; num_classes];
        for &(cos, label) in scored.iter().take(k_eff) {
            let w = if t_knn.is_infinite() { 1.0 } else { (cos / t_knn).exp() };
            class_scores[label] += w;
        }
        let mut best = 0usize;
        for c in 1..num_classes {
            if class_scores[c] > class_scores[best] {
                best = c;
            }
        }
        predictions.push(best);
    }
    Ok(predictions)
}

pub fn knn_classify(
    train_feats: &Matrix,
    train_labels: &[usize],
    test_feats: &Matrix,
    test_labels: &[usize],
    k: usize,
    t_knn: f64,
) -> Result<(Vec<usize>, f64)> {
    let predictions = knn_predict(train_feats, train_labels, test_feats, k, t_knn)?;
    let hits = predictions
        .iter()
        .zip(test_labels)
        .filter(|(p, l)| p == l)
        .count();
    let accuracy = hits as f64 / test_labels.len().max(1) as f64;
    Ok((predictions, accuracy))
}

fn compact_ids(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        let next = map.len();
        let id = *map.entry(l).or_insert(next);
        out.push(id);
    }
    (out, map.len())
}

/// Normalized mutual information I(A;B)/sqrt(H(A)H(B)) from the contingency
/// table, natural logs. When either entropy is zero: 1 if the partitions
/// are identical up to relabeling, else 0.
pub fn nmi(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(CldError::DimMismatch {
            context: "nmi".to_string(),
            expected: labels_a.len(),
            got: labels_b.len(),
        });
    }
    if labels_a.is_empty() {
        return Err(CldError::EmptyInput("nmi"));
    }
    let n = labels_a.len() as f64;
    let (a, ka) = compact_ids(labels_a);
    let (b, kb) = compact_ids(labels_b);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(&b) {
        table[x][y] += 1;
    }
    let row_sums: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();

    let entropy = |sums: &[usize]| -> f64 {
        sums.iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let h_a = entropy(&row_sums);
    let h_b = entropy(&col_sums);
    if h_a == 0.0 || h_b == 0.0 {
        let bijection = table.iter().all(|r| r.iter().filter(|&&c| c > 0).count() == 1)
            && (0..kb).all(|j| table.iter().filter(|r| r[j] > 0).count() == 1);
        return Ok(if bijection { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let c = table[i][j];
            if c == 0 {
                continue;
            }
            let p = c as f64 / n;
            mi += p * ((c as f64 * n) / (row_sums[i] as f64 * col_sums[j] as f64)).ln();
        }
    }
    Ok((mi / (h_a * h_b).sqrt()).clamp(0.0, 1.0))
}

/// k-means the features (k = num_classes) and report NMI against labels.
pub fn cluster_nmi_vs_labels(
    feats: &Matrix,
    labels: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<f64> {
    let clusters = spherical_kmeans(feats, num_classes.min(feats.rows()), seed, 20)?;
    nmi(&clusters.assignment, labels)
}

/// Cluster both feature sets (shared seed) and report the NMI between the
/// two assignments.
pub fn cluster_nmi_views(
    feats_a: &Matrix,
    feats_b: &Matrix,
    k: usize,
    seed: u64,
) -> Result<f64> {
    let k = k.min(feats_a.rows());
    let ca = spherical_kmeans(feats_a, k, seed, 20)?;
    let cb = spherical_kmeans(feats_b, k, seed, 20)?;
    nmi(&ca.assignment, &cb.assignment)
}

/// Fraction of rows whose nearest (cosine) row in `feats_b` is themselves.
/// Ties resolve to the lowest index, which must be the row itself to count.
pub fn retrieval_top1(feats_a: &Matrix, feats_b: &Matrix) -> Result<f64> {
    if feats_a.rows() != feats_b.rows() {
        return Err(CldError::DimMismatch {
            context: "retrieval_top1".to_string(),
            expected: feats_a.rows(),
            got: feats_b.rows(),
        });
    }
    let n = feats_a.rows();
    let mut hits = 0usize;
    for i in 0..n {
        let query = feats_a.row(i);
        let mut best = 0usize;
        let mut best_cos = f64::NEG_INFINITY;
        for j in 0..n {
            let c = dot(query, feats_b.row(j));
            if c > best_cos {
                best_cos = c;
                best = j;
            }
        }
        if best == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / n.max(1) as f64)
}

/// Positive pairs A_ii over the diagonal, negative pairs A_ij (i != j) over
/// the full cross product; 50-bin histograms plus means and their gap.
pub fn similarity_report(feats_a: &Matrix, feats_b: &Matrix) -> Result<SimilarityReport> {
    if feats_a.rows() != feats_b.rows() {
        return Err(CldError::DimMismatch {
            context: "similarity_report".to_string(),
            expected: feats_a.rows(),
            got: feats_b.rows(),
        });
    }
    let n = feats_a.rows();
    if n < 2 {
        return Err(CldError::InvalidArgument {
            context: "similarity_report",
            msg: "needs at least 2 rows".to_string(),
        });
    }
    let bin = |v: f64| -> usize {
        let idx = ((v + 1.0) / 2.0 * HIST_BINS as f64).floor() as isize;
        idx.clamp(0, HIST_BINS as isize - 1) as usize
    };
    let mut pos_hist = vec![0u64; HIST_BINS];
    let mut neg_hist = vec![0u64; HIST_BINS];
    let mut pos_sum = 0.0;
    let mut neg_sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            let c = dot(feats_a.row(i), feats_b.row(j)).clamp(-1.0, 1.0);
            if i == j {
                pos_hist[bin(c)] += 1;
                pos_sum += c;
            } else {
                neg_hist[bin(c)] += 1;
                neg_sum += c;
            }
        }
    }
    let mean_pos = pos_sum / n as f64;
    let mean_neg = neg_sum / (n * (n - 1)) as f64;
    Ok(SimilarityReport {
        pos_hist,
        neg_hist,
        mean_pos,
        mean_neg,
        mean_gap: mean_pos - mean_neg,
    })
}

/// Label-free model-selection score over paired views:
/// NMI between per-view clusterings times top-1 retrieval.
pub fn tuning_score(feats_a: &Matrix, feats_b: &Matrix, k: usize, seed: u64) -> Result<f64> {
    let nmi_ff = cluster_nmi_views(feats_a, feats_b, k, seed)?;
    let r = retrieval_top1(feats_a, feats_b)?;
    Ok(nmi_ff * r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{l2_normalize, DetRng};
    use proptest::prelude::*;

    fn random_units(n: usize, dim: usize, seed: u64) -> Matrix {
        let mut rng = DetRng::new(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| l2_normalize(&rng.normal_vec(dim)).unwrap())
            .collect();
        Matrix::from_rows(&rows)
    }

    fn angle_row(theta_deg: f64) -> Vec<f64> {
        let t = theta_deg.to_radians();
        vec![t.cos(), t.sin()]
    }

    #[test]
    fn knn_single_train_point_always_wins() {
        let train = Matrix::from_rows(&[angle_row(0.0)]);
        let test = random_units(5, 2, 1);
        let preds = knn_predict(&train, &[3], &test, 200, 0.07).unwrap();
        assert!(preds.iter().all(|&p| p == 3));
    }

    #[test]
    fn knn_duplicate_row_k1() {
        let train = Matrix::from_rows(&[angle_row(0.0), angle_row(90.0), angle_row(180.0)]);
        let labels = vec![2, 0, 1];
        let test = Matrix::from_rows(&[angle_row(90.0)]);
        let preds = knn_predict(&train, &labels, &test, 1, 0.07).unwrap();
        assert_eq!(preds, vec![0]);
    }

    #[test]
    fn knn_exp_weighting_beats_majority() {
        // one very close class-0 neighbor against two moderate class-1
        // neighbors inside k=3: majority says 1, exp weighting says 0.
        let train = Matrix::from_rows(&[
            angle_row(0.0),   // class 0
            angle_row(60.0),  // class 1
            angle_row(65.0),  // class 1
            angle_row(180.0), // class 0, outside top-3
        ]);
        let labels = vec![0, 1, 1, 0];
        let test = Matrix::from_rows(&[angle_row(5.0)]);
        let weighted = knn_predict(&train, &labels, &test, 3, 0.07).unwrap();
        assert_eq!(weighted, vec![0]);
        let majority = knn_predict(&train, &labels, &test, 3, f64::INFINITY).unwrap();
        assert_eq!(majority, vec![1]);
    }

    #[test]
    fn knn_rejects_empty_train() {
        let train = Matrix::zeros(0, 2);
        let test = Matrix::from_rows(&[angle_row(0.0)]);
        assert!(knn_predict(&train, &[], &test, 1, 0.07).is_err());
    }

    /// Brute-force NMI from integer pair counts, written independently of
    /// the contingency-table implementation above.
    fn nmi_oracle(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len() as f64;
        let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut ca: HashMap<usize, usize> = HashMap::new();
        let mut cb: HashMap<usize, usize> = HashMap::new();
        for (&x, &y) in a.iter().zip(b) {
            *joint.entry((x, y)).or_default() += 1;
            *ca.entry(x).or_default() += 1;
            *cb.entry(y).or_default() += 1;
        }
        let h = |c: &HashMap<usize, usize>| -> f64 {
            c.values()
                .map(|&q| {
                    let p = q as f64 / n;
                    -p * p.ln()
                })
                .sum()
        };
        let (ha, hb) = (h(&ca), h(&cb));
        if ca.len() == 1 || cb.len() == 1 {
            let bij = joint.len() == ca.len() && joint.len() == cb.len();
            return if bij { 1.0 } else { 0.0 };
        }
        let mut mi = 0.0;
        for (&(x, y), &cxy) in &joint {
            let pxy = cxy as f64 / n;
            let px = ca[&x] as f64 / n;
            let py = cb[&y] as f64 / n;
            mi += pxy * (pxy / (px * py)).ln();
        }
        mi / (ha * hb).sqrt()
    }

    #[test]
    fn nmi_basic_cases() {
        assert_eq!(nmi(&[0, 1, 2, 0], &[0, 1, 2, 0]).unwrap(), 1.0);
        // relabeled identity
        assert_eq!(nmi(&[0, 1, 2, 0], &[5, 9, 7, 5]).unwrap(), 1.0);
        // constant vs balanced: zero-entropy convention
        assert_eq!(nmi(&[1, 1, 1, 1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[3, 3], &[7, 7]).unwrap(), 1.0);
        assert!(nmi(&[0, 1], &[0, 1, 2]).is_err());
    }

    #[test]
    fn nmi_matches_contingency_oracle_on_fixed_case() {
        let a = [0, 0, 1, 1, 2, 2];
        let b = [0, 0, 0, 1, 1, 1];
        let got = nmi(&a, &b).unwrap();
        let want = nmi_oracle(&a, &b);
        assert!((got - want).abs() < 1e-12);
        // independent scalar check: I = (2/3) ln 2, H = ln3, ln2
        let expect = (2.0 / 3.0) * 2f64.ln() / (3f64.ln() * 2f64.ln()).sqrt();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn nmi_matches_oracle_on_random_pairs() {
        let mut rng = DetRng::new(42);
        for _ in 0..100 {
            let n = 2 + rng.index(49);
            let ka = 1 + rng.index(5);
            let kb = 1 + rng.index(5);
            let a: Vec<usize> = (0..n).map(|_| rng.index(ka)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.index(kb)).collect();
            let got = nmi(&a, &b).unwrap();
            let want = nmi_oracle(&a, &b);
            assert!((got - want).abs() < 1e-10, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn cluster_nmi_on_orthogonal_bundles() {
        // 3 tight bundles on orthogonal axes matching the labels
        let mut rng = DetRng::new(7);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3usize {
            for _ in 0..20 {
                let mut v = vec![0.0; 6];
                v[c] = 1.0;
                for x in v.iter_mut() {
                    *x += 0.02 * rng.normal();
                }
                rows.push(l2_normalize(&v).unwrap());
                labels.push(c);
            }
        }
        let feats = Matrix::from_rows(&rows);
        let score = cluster_nmi_vs_labels(&feats, &labels, 3, 5).unwrap();
        assert!(score > 0.99, "score {score}");

        // f' = f with a shared seed gives identical clusterings
        let views = cluster_nmi_views(&feats, &feats, 3, 5).unwrap();
        assert_eq!(views, 1.0);
    }

    #[test]
    fn cluster_nmi_random_labels_near_zero() {
        let feats = {
            let mut rng = DetRng::new(8);
            let mut rows = Vec::new();
            for c in 0..3usize {
                for _ in 0..200 {
                    let mut v = vec![0.0; 8];
                    v[c] = 1.0;
                    for x in v.iter_mut() {
                        *x += 0.05 * rng.normal();
                    }
                    rows.push(l2_normalize(&v).unwrap());
                }
            }
            Matrix::from_rows(&rows)
        };
        let mut rng = DetRng::new(9);
        let random_labels: Vec<usize> = (0..600).map(|_| rng.index(3)).collect();
        let score = cluster_nmi_vs_labels(&feats, &random_labels, 3, 5).unwrap();
        assert!(score < 0.05, "score {score}");
    }

    #[test]
    fn retrieval_cases() {
        let a = random_units(10, 6, 11);
        assert_eq!(retrieval_top1(&a, &a).unwrap(), 1.0);

        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let swapped = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(retrieval_top1(&e, &swapped).unwrap(), 0.0);

        // small perturbations: nearest neighbor scan agrees with identity
        let mut rng = DetRng::new(12);
        let mut rows = Vec::new();
        for i in 0..10 {
            let jittered: Vec<f64> = a.row(i).iter().map(|x| x + 0.01 * rng.normal()).collect();
            rows.push(l2_normalize(&jittered).unwrap());
        }
        let b = Matrix::from_rows(&rows);
        assert_eq!(retrieval_top1(&a, &b).unwrap(), 1.0);
        // direct scan oracle
        for i in 0..10 {
            let mut best = 0;
            let mut best_c = f64::NEG_INFINITY;
            for j in 0..10 {
                let c = dot(a.row(i), b.row(j));
                if c > best_c {
                    best_c = c;
                    best = j;
                }
            }
            assert_eq!(best, i);
        }
    }

    #[test]
    fn similarity_report_cases() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let r = similarity_report(&e, &e).unwrap();
        assert_eq!(r.mean_pos, 1.0);
        assert_eq!(r.mean_neg, 0.0);
        assert_eq!(r.mean_gap, 1.0);
        assert_eq!(r.pos_hist.iter().sum::<u64>(), 2);
        assert_eq!(r.neg_hist.iter().sum::<u64>(), 2);

        // antipodal pairs crossed: mean_pos = -1
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let b = Matrix::from_rows(&[vec![-1.0, 0.0], vec![1.0, 0.0]]);
        let r2 = similarity_report(&a, &b).unwrap();
        assert_eq!(r2.mean_pos, -1.0);

        let single = Matrix::from_rows(&[vec![1.0, 0.0]]);
        assert!(similarity_report(&single, &single).is_err());
    }

    #[test]
    fn similarity_means_match_naive_double_loop() {
        let a = random_units(20, 8, 13);
        let b = random_units(20, 8, 14);
        let r = similarity_report(&a, &b).unwrap();
        let mut pos = 0.0;
        let mut neg = 0.0;
        for i in 0..20 {
            for j in 0..20 {
                let c = crate::numerics::cosine_similarity(a.row(i), b.row(j)).unwrap();
                if i == j {
                    pos += c;
                } else {
                    neg += c;
                }
            }
        }
        assert!((r.mean_pos - pos / 20.0).abs() < 1e-12);
        assert!((r.mean_neg - neg / 380.0).abs() < 1e-12);
        assert_eq!(r.mean_gap, r.mean_pos - r.mean_neg);
    }

    #[test]
    fn tuning_score_degrades_with_noise() {
        // median over 5 seeds is non-increasing in the view-noise level
        let mut medians = Vec::new();
        for sigma in [0.0, 0.1, 0.5] {
            let mut scores = Vec::new();
            for seed in 0..5u64 {
                let mut rng = DetRng::new(100 + seed);
                let mut rows_a = Vec::new();
                let mut rows_b = Vec::new();
                for c in 0..4usize {
                    for _ in 0..15 {
                        let mut v = vec![0.0; 8];
                        v[c] = 1.0;
                        for x in v.iter_mut() {
                            *x += 0.05 * rng.normal();
                        }
                        rows_a.push(l2_normalize(&v).unwrap());
                        let noisy: Vec<f64> =
                            v.iter().map(|x| x + sigma * rng.normal()).collect();
                        rows_b.push(l2_normalize(&noisy).unwrap());
                    }
                }
                let fa = Matrix::from_rows(&rows_a);
                let fb = Matrix::from_rows(&rows_b);
                scores.push(tuning_score(&fa, &fb, 4, seed).unwrap());
            }
            scores.sort_by(|x, y| x.partial_cmp(y).unwrap());
            medians.push(scores[2]);
        }
        assert!(medians[0] >= medians[1] && medians[1] >= medians[2], "{medians:?}");
    }

    #[test]
    fn tuning_score_shuffled_views_near_zero() {
        let a = random_units(50, 6, 15);
        let mut perm: Vec<usize> = (0..50).collect();
        let mut rng = DetRng::new(16);
        rng.shuffle(&mut perm);
        let shuffled = Matrix::from_rows(&perm.iter().map(|&i| a.row(i).to_vec()).collect::<Vec<_>>());
        let r = retrieval_top1(&a, &shuffled).unwrap();
        assert!(r <= 0.1, "retrieval {r}");
        let score = tuning_score(&a, &shuffled, 5, 3).unwrap();
        assert!(score <= 0.1, "score {score}");
    }

    proptest! {
        #[test]
        fn nmi_symmetric_and_relabel_invariant(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 2..40)
        ) {
            let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let ab = nmi(&a, &b).unwrap();
            let ba = nmi(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            // relabel a: x -> 3 - x
            let a2: Vec<usize> = a.iter().map(|&x| 3 - x).collect();
            let relabeled = nmi(&a2, &b).unwrap();
            prop_assert!((ab - relabeled).abs() < 1e-12);
        }

        #[test]
        fn knn_invariant_under_train_permutation(seed in 0u64..500) {
            let train = random_units(12, 4, seed);
            let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
            let test = random_units(6, 4, seed + 1);
            let base = knn_predict(&train, &labels, &test, 5, 0.07).unwrap();

            let mut perm: Vec<usize> = (0..12).collect();
            let mut rng = DetRng::new(seed + 2);
            rng.shuffle(&mut perm);
            let train_p = Matrix::from_rows(
                &perm.iter().map(|&i| train.row(i).to_vec()).collect::<Vec<_>>(),
            );
            let labels_p: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let permuted = knn_predict(&train_p, &labels_p, &test, 5, 0.07).unwrap();
            prop_assert_eq!(base, permuted);
        }

        #[test]
        fn retrieval_invariant_under_joint_rotation(seed in 0u64..200) {
            let a = random_units(8, 3, seed);
            let b = random_units(8, 3, seed + 1);
            let base = retrieval_top1(&a, &b).unwrap();
            // rotation in the (0,1) plane by a seed-derived angle
            let theta = (seed as f64 * 0.37).sin();
            let (c, s) = (theta.cos(), theta.sin());
            let rotate = |m: &Matrix| -> Matrix {
                Matrix::from_fn(m.rows(), 3, |i, j| match j {
                    0 => c * m.get(i, 0) - s * m.get(i, 1),
                    1 => s * m.get(i, 0) + c * m.get(i, 1),
                    _ => m.get(i, 2),
                })
            };
            let rotated = retrieval_top1(&rotate(&a), &rotate(&b)).unwrap();
            prop_assert_eq!(base, rotated);
        }
    }
}
