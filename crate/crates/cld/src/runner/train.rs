//! The SGD training loop: epoch shuffles, paired views, per-view batch
//! clustering, the total loss, and memory-bank refresh. Deterministic
//! end-to-end in the run seed.

use std::path::Path;
use std::time::Instant;

use crate::clustering::{spectral_cluster, spherical_kmeans, ClusterResult};
use crate::contrast::{total_loss, LossReport, MemoryBank};
use crate::datagen::{
    apply_longtail, generate_correlated, generate_mixture, load_cifar10, load_cld1, make_views,
    Dataset, UnlabeledView,
};
use crate::encoder::{backward, forward, init_params, save_checkpoint, EncoderParams};
use crate::error::{CldError, Result};
use crate::metrics::{
    cluster_nmi_vs_labels, cluster_nmi_views, knn_classify, retrieval_top1, similarity_report,
    EvalReport,
};
use crate::numerics::{derive_seed, DetRng, Matrix};

use super::config::{ClusterMethod, Config, DataSource};
use super::optim::{lr_at, sgd_step, OptState};

// Seed-stream tags; distinct per consumer so streams never interleave.
const TAG_INIT: u64 = 1;
const TAG_BANK: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_AUGMENT: u64 = 4;
const TAG_NEGATIVES: u64 = 5;
const TAG_CLUSTER: u64 = 6;
const TAG_EVAL_SPLIT: u64 = 7;
const TAG_EVAL_VIEWS: u64 = 8;
const TAG_EVAL_CLUSTER: u64 = 9;

#[derive(Debug, Clone)]
pub struct StepRow {
    pub step: usize,
    pub epoch: usize,
    pub instance_loss: f64,
    pub cld_loss: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub epoch: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRow>,
    pub evals: Vec<EvalRow>,
    pub wall_clock_secs: f64,
    pub checkpoint_path: Option<String>,
}

impl TrainLog {
    pub fn losses_csv(&self) -> String {
        let mut out = String::from("step,instance_loss,cld_loss,total,lr\n");
        for r in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.instance_loss, r.cld_loss, r.total, r.lr
            ));
        }
        out
    }

    pub fn eval_csv(&self) -> String {
        let mut out = String::from("epoch,knn,nmi,retrieval,tuning_score\n");
        for r in &self.evals {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                r.report.knn_top1,
                r.report.nmi_vs_labels,
                r.report.retrieval_top1,
                r.report.tuning_score
            ));
        }
        out
    }
}

pub struct TrainOutput {
    pub params: EncoderParams,
    pub bank: MemoryBank,
    pub log: TrainLog,
}

/// Materialize the configured dataset source.
pub fn resolve_dataset(config: &Config) -> Result<Dataset> {
    let source = config.data.as_ref().ok_or_else(|| CldError::InvalidConfig {
        key: "data".to_string(),
        msg: "required for this command".to_string(),
    })?;
    match source {
        DataSource::Path(p) => load_cld1(p),
        DataSource::Cifar10 { batches } => load_cifar10(batches),
        DataSource::Mixture {
            classes,
            per_class,
            dim,
            sep,
            longtail_rho,
            seed,
        } => {
            let ds = generate_mixture(*classes, *per_class, *dim, *sep, *seed)?;
            match longtail_rho {
                Some(rho) => apply_longtail(&ds, *rho, derive_seed(*seed, 0x17)),
                None => Ok(ds),
            }
        }
        DataSource::Correlated {
            classes,
            groups_per_class,
            views_per_group,
            dim,
            sep,
            corr_sigma,
            seed,
        } => generate_correlated(
            *classes,
            *groups_per_class,
            *views_per_group,
            *dim,
            *sep,
            *corr_sigma,
            *seed,
        ),
    }
}

fn cluster_batch(
    config: &Config,
    features: &Matrix,
    k: usize,
    seed: u64,
) -> Result<ClusterResult> {
    match config.clustering {
        ClusterMethod::Kmeans => spherical_kmeans(features, k, seed, 20),
        ClusterMethod::Spectral => spectral_cluster(features, k, seed, config.spectral_end),
    }
}

fn rows_matrix(rows: Vec<Vec<f64>>) -> Matrix {
    Matrix::from_rows(&rows)
}

/// Train on the configured data source.
pub fn train(config: &Config) -> Result<TrainOutput> {
    let ds = resolve_dataset(config)?;
    train_on(config, &ds)
}

/// Train on an in-memory dataset. Only the label-free view of the dataset
/// reaches the loop below; labels are consumed by `evaluate` alone.
pub fn train_on(config: &Config, ds: &Dataset) -> Result<TrainOutput> {
    config.validate()?;
    let started = Instant::now();
    let data = ds.unlabeled();
    let n = data.len();

    let mut arch = config.arch.clone();
    if arch.input_dim == 0 {
        arch.input_dim = data.dim();
    }
    arch.validate()?;

    let seed = config.seed;
    let mut params = init_params(&arch, derive_seed(seed, TAG_INIT))?;
    let mut bank = MemoryBank::init(
        n,
        arch.head_dim_i,
        config.bank_momentum,
        derive_seed(seed, TAG_BANK),
    )?;
    let mut opt_state = OptState::new(&params);
    let mut shuffle_rng = DetRng::new(derive_seed(seed, TAG_SHUFFLE));
    let mut augment_rng = DetRng::new(derive_seed(seed, TAG_AUGMENT));
    let mut negative_rng = DetRng::new(derive_seed(seed, TAG_NEGATIVES));

    let batch_size = config.batch_size.min(n);
    let batches_per_epoch = n.div_ceil(batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let mut log = TrainLog::default();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            let report = train_step(
                config,
                &mut params,
                &mut bank,
                &mut opt_state,
                data,
                chunk,
                step,
                total_steps,
                epoch,
                &mut augment_rng,
                &mut negative_rng,
            )
            .map_err(|e| CldError::TrainStep {
                step,
                source: Box::new(e),
            })?;
            log.steps.push(StepRow {
                step,
                epoch,
                instance_loss: report.0.instance_loss,
                cld_loss: report.0.cld_loss,
                total: report.0.total,
                lr: report.1,
            });
            step += 1;
        }
        if config.eval_every > 0 && (epoch + 1) % config.eval_every == 0 && epoch + 1 < config.epochs
        {
            let report = evaluate(&params, ds, config)?;
            log.evals.push(EvalRow { epoch, report });
        }
    }

    let final_report = evaluate(&params, ds, config)?;
    log.evals.push(EvalRow {
        epoch: config.epochs - 1,
        report: final_report,
    });
    log.wall_clock_secs = started.elapsed().as_secs_f64();

    if let Some(dir) = &config.out_dir {
        write_outputs(dir, config, &params, &mut log)?;
    }
    Ok(TrainOutput { params, bank, log })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    config: &Config,
    params: &mut EncoderParams,
    bank: &mut MemoryBank,
    opt_state: &mut OptState,
    data: UnlabeledView<'_>,
    chunk: &[usize],
    step: usize,
    total_steps: usize,
    epoch: usize,
    augment_rng: &mut DetRng,
    negative_rng: &mut DetRng,
) -> Result<(LossReport, f64)> {
    let views = make_views(data, chunk, &config.augment, augment_rng)?;
    let batch_a = rows_matrix(views.iter().map(|v| v.view_a.clone()).collect());
    let batch_b = rows_matrix(views.iter().map(|v| v.view_b.clone()).collect());
    let cache_a = forward(params, &batch_a)?;
    let cache_b = forward(params, &batch_b)?;

    // each view is clustered independently; results are unused at lambda=0
    let clusters = if config.contrast.lambda > 0.0 {
        let k = config
            .contrast
            .resolved_k_groups(config.batch_size)
            .min(chunk.len());
        let seed_a = derive_seed(config.seed, TAG_CLUSTER + 0x100 * (2 * step as u64));
        let seed_b = derive_seed(config.seed, TAG_CLUSTER + 0x100 * (2 * step as u64 + 1));
        Some((
            cluster_batch(config, &cache_a.f_g, k, seed_a)?,
            cluster_batch(config, &cache_b.f_g, k, seed_b)?,
        ))
    } else {
        None
    };

    let out = total_loss(
        &cache_a,
        &cache_b,
        bank,
        chunk,
        clusters.as_ref().map(|(a, b)| (a, b)),
        &config.contrast,
        negative_rng,
    )?;

    let mut grads = backward(params, &cache_a, &out.grad_f_i_a, &out.grad_f_g_a)?;
    let grads_b = backward(params, &cache_b, &out.grad_f_i_b, &out.grad_f_g_b)?;
    grads.add_assign(&grads_b);

    let lr_t = lr_at(&config.optim, step, total_steps, epoch);
    sgd_step(params, &grads, opt_state, &config.optim, lr_t)?;
    bank.update(chunk, &cache_a.f_i)?;
    Ok((out.report, lr_t))
}

/// Embed every sample without augmentation through the instance branch.
pub fn embed_all(params: &EncoderParams, samples: &[Vec<f64>]) -> Result<Matrix> {
    let dim = params.arch.head_dim_i;
    let mut out = Matrix::zeros(samples.len(), dim);
    for (start, block) in samples.chunks(512).enumerate() {
        let batch = rows_matrix(block.to_vec());
        let cache = forward(params, &batch)?;
        for (i, row) in cache.f_i.iter_rows().enumerate() {
            out.row_mut(start * 512 + i).copy_from_slice(row);
        }
    }
    Ok(out)
}

/// Full metric stack: kNN on an 80/20 split, cluster-NMI against labels,
/// and retrieval / view-NMI / tuning score over a fresh augmented pair.
pub fn evaluate(params: &EncoderParams, ds: &Dataset, config: &Config) -> Result<EvalReport> {
    let feats = embed_all(params, &ds.samples)?;
    let n = ds.len();
    let seed = config.seed;

    // kNN on a seeded 80/20 split
    let mut order: Vec<usize> = (0..n).collect();
    DetRng::new(derive_seed(seed, TAG_EVAL_SPLIT)).shuffle(&mut order);
    let split = ((n as f64) * 0.8).round() as usize;
    let split = split.clamp(1, n.saturating_sub(1).max(1));
    let (train_idx, test_idx) = order.split_at(split);
    let gather = |idx: &[usize]| -> (Matrix, Vec<usize>) {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| feats.row(i).to_vec()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        (rows_matrix(rows), labels)
    };
    let (train_feats, train_labels) = gather(train_idx);
    let (test_feats, test_labels) = gather(test_idx);
    let (_, knn_top1) = knn_classify(
        &train_feats,
        &train_labels,
        &test_feats,
        &test_labels,
        config.knn_k,
        config.knn_temperature,
    )?;

    let nmi_vs_labels = cluster_nmi_vs_labels(
        &feats,
        &ds.labels,
        ds.num_classes,
        derive_seed(seed, TAG_EVAL_CLUSTER),
    )?;

    // fresh augmented pair over every instance
    let all: Vec<usize> = (0..n).collect();
    let mut view_rng = DetRng::new(derive_seed(seed, TAG_EVAL_VIEWS));
    let pairs = make_views(ds.unlabeled(), &all, &config.augment, &mut view_rng)?;
    let feats_a = embed_all(params, &pairs.iter().map(|p| p.view_a.clone()).collect::<Vec<_>>())?;
    let feats_b = embed_all(params, &pairs.iter().map(|p| p.view_b.clone()).collect::<Vec<_>>())?;
    let retrieval = retrieval_top1(&feats_a, &feats_b)?;
    let nmi_views = cluster_nmi_views(
        &feats_a,
        &feats_b,
        ds.num_classes,
        derive_seed(seed, TAG_EVAL_CLUSTER),
    )?;
    let similarity = similarity_report(&feats_a, &feats_b)?;

    Ok(EvalReport {
        knn_top1,
        nmi_vs_labels,
        retrieval_top1: retrieval,
        nmi_views,
        tuning_score: nmi_views * retrieval,
        similarity,
    })
}

fn write_outputs(
    dir: &str,
    config: &Config,
    params: &EncoderParams,
    log: &mut TrainLog,
) -> Result<()> {
    let dir = Path::new(dir);
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("losses.csv"), log.losses_csv())?;
    std::fs::write(dir.join("eval.csv"), log.eval_csv())?;
    if let Some(last) = log.evals.last() {
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&last.report.to_json())?,
        )?;
        std::fs::write(dir.join("similarity.csv"), last.report.similarity.to_csv())?;
    }
    std::fs::write(dir.join("config.json"), config.to_json_string())?;
    let ckpt = dir.join("checkpoint.cldm");
    save_checkpoint(params, &ckpt)?;
    log.checkpoint_path = Some(ckpt.display().to_string());
    Ok(())
}
