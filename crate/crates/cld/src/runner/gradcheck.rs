//! End-to-end gradient oracle: builds one training step's loss as a pure
//! function of the flattened parameters and compares analytic gradients
//! against central finite differences.

use crate::clustering::{centroids_for_assignment, spherical_kmeans, ClusterResult};
use crate::contrast::{
    cld_term, draw_negatives, instance_term_with_negatives, CentroidGrad, MemoryBank,
};
use crate::encoder::{backward, forward, init_params, Architecture, EncoderParams};
use crate::error::{CldError, Result};
use crate::numerics::{derive_seed, DetRng, Matrix};

use super::config::Config;

/// Error beyond which the CLI treats the check as failed (exit code 3).
pub const GRADCHECK_FAIL_THRESHOLD: f64 = 1e-3;
const MAX_PARAMS: usize = 2000;
const MIN_COORDS: usize = 200;

pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub param_count: usize,
}

fn tiny_arch(base: &Architecture) -> Architecture {
    // keep the knobs under test, shrink everything else
    Architecture {
        input_dim: 6,
        hidden_dims: vec![5],
        latent_dim: 4,
        head_dim_i: 4,
        head_dim_g: 4,
        head_kind: base.head_kind,
        renorm_head: base.renorm_head,
        shared_head: base.shared_head,
    }
}

struct Fixture {
    params: EncoderParams,
    batch_a: Matrix,
    batch_b: Matrix,
    bank: MemoryBank,
    indices: Vec<usize>,
    negatives: Vec<Vec<usize>>,
    /// Frozen assignments (Through mode recomputes centroids from them).
    frozen_a: ClusterResult,
    frozen_b: ClusterResult,
    k: usize,
}

impl Fixture {
    /// The smooth scalar the oracle differentiates: clustering assignments
    /// (and in Detached mode the centroid values) are frozen at the base
    /// point; negative draws are fixed.
    fn loss_and_grads(&self, config: &Config, flat: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut params = self.params.clone();
        params.unflatten_into(flat);
        let cache_a = forward(&params, &self.batch_a)?;
        let cache_b = forward(&params, &self.batch_b)?;
        let cfg = &config.contrast;

        let (inst_loss, g_i_a, g_i_b, _) = instance_term_with_negatives(
            &cache_a,
            &cache_b,
            &self.bank,
            &self.indices,
            &self.negatives,
            cfg.t_i,
        )?;

        let (cld_loss, mut g_g_a, mut g_g_b) = if cfg.lambda > 0.0 {
            let (ca, cb) = match cfg.centroid_grad {
                CentroidGrad::Through => {
                    let rebuild = |feats: &Matrix, frozen: &ClusterResult| -> Result<ClusterResult> {
                        Ok(ClusterResult {
                            centroids: centroids_for_assignment(feats, &frozen.assignment, self.k)?,
                            assignment: frozen.assignment.clone(),
                            objective: 0.0,
                            objective_history: Vec::new(),
                        })
                    };
                    (rebuild(&cache_a.f_g, &self.frozen_a)?, rebuild(&cache_b.f_g, &self.frozen_b)?)
                }
                CentroidGrad::Detached => (self.frozen_a.clone(), self.frozen_b.clone()),
            };
            let (l, ga, gb, _) = cld_term(&cache_a.f_g, &cache_b.f_g, &ca, &cb, cfg)?;
            (l, ga, gb)
        } else {
            (
                0.0,
                Matrix::zeros(cache_a.f_g.rows(), cache_a.f_g.cols()),
                Matrix::zeros(cache_b.f_g.rows(), cache_b.f_g.cols()),
            )
        };
        g_g_a.scale(cfg.lambda);
        g_g_b.scale(cfg.lambda);

        let mut grads = backward(&params, &cache_a, &g_i_a, &g_g_a)?;
        grads.add_assign(&backward(&params, &cache_b, &g_i_b, &g_g_b)?);
        Ok((inst_loss + cfg.lambda * cld_loss, grads.flatten()))
    }
}

/// Compare analytic parameter gradients of one training step against
/// central finite differences on randomly sampled coordinates.
pub fn gradient_check(config: &Config, batch_size: usize, eps: f64) -> Result<GradCheckReport> {
    config.contrast.validate()?;
    let batch = batch_size.clamp(2, 8);
    let mut arch = config.arch.clone();
    if arch.input_dim == 0 {
        arch.input_dim = 6;
    }
    if arch.validate().is_err() || arch.param_count() > MAX_PARAMS {
        arch = tiny_arch(&config.arch);
    }

    let seed = config.seed;
    let params = init_params(&arch, derive_seed(seed, 0x31))?;
    // Two fixed views of the same synthetic instances. The base point must
    // be generic: a sample that kills every hidden unit leaves a zero head
    // row where the renormalization is not differentiable, so reroll the
    // data until all raw head rows have healthy norms.
    let (batch_a, batch_b) = {
        let mut found = None;
        for attempt in 0..64u64 {
            let mut data_rng = DetRng::new(derive_seed(seed, 0x32 + attempt * 0x40));
            let base = Matrix::from_fn(batch, arch.input_dim, |_, _| data_rng.normal());
            let jitter = |m: &Matrix, rng: &mut DetRng| {
                Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) + 0.1 * rng.normal())
            };
            let a = jitter(&base, &mut data_rng);
            let b = jitter(&base, &mut data_rng);
            let healthy = |m: &Matrix| {
                forward(&params, m).ok().is_some_and(|c| {
                    [&c.head_i_raw, &c.head_g_raw].iter().all(|h| {
                        (0..h.rows()).all(|r| crate::numerics::norm(h.row(r)) > 0.05)
                    })
                })
            };
            if healthy(&a) && healthy(&b) {
                found = Some((a, b));
                break;
            }
        }
        found.ok_or(CldError::InvalidArgument {
            context: "gradient_check",
            msg: "could not find a generic base batch".to_string(),
        })?
    };

    let bank_len = 32.max(batch);
    let bank = MemoryBank::init(
        bank_len,
        arch.head_dim_i,
        0.5,
        derive_seed(seed, 0x33),
    )?;
    let indices: Vec<usize> = (0..batch).collect();
    let mut neg_rng = DetRng::new(derive_seed(seed, 0x34));
    let num_negs = config.contrast.resolved_negatives(bank_len).min(bank_len - 1);
    let negatives = draw_negatives(&mut neg_rng, bank_len, &indices, num_negs)?;

    let k = config
        .contrast
        .resolved_k_groups(batch)
        .min(batch)
        .max(2);
    let cache_a = forward(&params, &batch_a)?;
    let cache_b = forward(&params, &batch_b)?;
    let frozen_a = spherical_kmeans(&cache_a.f_g, k, derive_seed(seed, 0x35), 20)?;
    let frozen_b = spherical_kmeans(&cache_b.f_g, k, derive_seed(seed, 0x36), 20)?;

    let fixture = Fixture {
        params,
        batch_a,
        batch_b,
        bank,
        indices,
        negatives,
        frozen_a,
        frozen_b,
        k,
    };

    let flat = fixture.params.flatten();
    let (_, analytic) = fixture.loss_and_grads(config, &flat)?;

    let mut coord_rng = DetRng::new(derive_seed(seed, 0x37));
    let coords: Vec<usize> = if flat.len() <= MIN_COORDS {
        (0..flat.len()).collect()
    } else {
        let mut all: Vec<usize> = (0..flat.len()).collect();
        coord_rng.shuffle(&mut all);
        all.truncate(MIN_COORDS);
        all
    };

    let mut max_rel = 0.0f64;
    let mut bumped = flat.clone();
    for &j in &coords {
        bumped[j] = flat[j] + eps;
        let (plus, _) = fixture.loss_and_grads(config, &bumped)?;
        bumped[j] = flat[j] - eps;
        let (minus, _) = fixture.loss_and_grads(config, &bumped)?;
        bumped[j] = flat[j];
        let fd = (plus - minus) / (2.0 * eps);
        let rel = (analytic[j] - fd).abs() / analytic[j].abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        coords_checked: coords.len(),
        param_count: flat.len(),
    })
}
