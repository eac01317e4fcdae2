//! AdamW optimization over the prompt bank, the K-shot training loop, and
//! final evaluation. Every stochastic choice flows from the run seed, so a
//! fixed config reproduces bit-identical results.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::config::{config_hash, Polarity, TrainConfig};
use crate::distribution::{detect_with_snapshot, fit_stats_with_snapshot, ClassStats};
use crate::error::{AmcnError, Result};
use crate::io::{Metrics, RunReport};
use crate::losses::{loss_and_grad, Batch, GradientSet, LossReport, Snapshot};
use crate::metrics::{auroc, fpr95, ScoredSet};
use crate::prompt_bank::{default_names, init_bank, DeskEncoder, PromptBank};
use crate::synth::SampleSet;
use crate::vecmath::UnitEmbedding;

/// Maximum tolerated hypersphere deviation of any derived feature.
pub const NORM_TOL: f64 = 1e-9;

/// AdamW moment buffers keyed by parameter id.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One decoupled-weight-decay Adam step over every trainable token.
pub fn optimizer_step(
    bank: &mut PromptBank,
    grads: &GradientSet,
    opt: &mut OptimizerState,
) -> Result<()> {
    grads.check_finite()?;
    opt.t += 1;
    let bc1 = 1.0 - opt.beta1.powi(opt.t as i32);
    let bc2 = 1.0 - opt.beta2.powi(opt.t as i32);
    for (id, theta) in bank.trainable_entries_mut() {
        let g = grads
            .0
            .get(&id)
            .ok_or_else(|| AmcnError::MissingStats(format!("no gradient for {id}")))?;
        if g.len() != theta.len() {
            return Err(AmcnError::DimensionMismatch {
                expected: theta.len(),
                got: g.len(),
            });
        }
        let m = opt.m.entry(id.clone()).or_insert_with(|| vec![0.0; theta.len()]);
        let v = opt.v.entry(id).or_insert_with(|| vec![0.0; theta.len()]);
        for j in 0..theta.len() {
            m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
            v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta[j] -= opt.lr * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * theta[j]);
        }
    }
    Ok(())
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub bank: PromptBank,
    pub enc: DeskEncoder,
    pub stats: Vec<ClassStats>,
    pub report: RunReport,
    /// The K shots actually selected, grouped by class.
    pub per_class_shots: Vec<Vec<UnitEmbedding>>,
}

fn mean_report(reports: &[(usize, LossReport)]) -> LossReport {
    let total: usize = reports.iter().map(|(n, _)| n).sum();
    let w = |f: fn(&LossReport) -> f64| {
        reports.iter().map(|(n, r)| *n as f64 * f(r)).sum::<f64>() / total as f64
    };
    LossReport {
        l_c: w(|r| r.l_c),
        l_i1: w(|r| r.l_i1),
        l_i2: w(|r| r.l_i2),
        l1: w(|r| r.l1),
        l2: w(|r| r.l2),
        l3: w(|r| r.l3),
        l4: w(|r| r.l4),
        total: w(|r| r.total),
    }
}

fn partial_shuffle<T>(rng: &mut ChaCha20Rng, items: &mut [T], take: usize) {
    for i in 0..take.min(items.len().saturating_sub(1)) {
        let j = rng.gen_range(i..items.len());
        items.swap(i, j);
    }
}

/// Select `shots` training indices per class without replacement.
fn select_shots(
    data: &SampleSet,
    num_classes: usize,
    shots: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in data.labels.iter().enumerate() {
        if l >= num_classes {
            return Err(AmcnError::LabelOutOfRange {
                label: l as i64,
                max: num_classes,
            });
        }
        per_class[l].push(i);
    }
    for (ci, idx) in per_class.iter_mut().enumerate() {
        if idx.len() < shots {
            return Err(AmcnError::InsufficientSamples {
                class: ci,
                got: idx.len(),
                need: shots,
            });
        }
        partial_shuffle(rng, idx, shots);
        idx.truncate(shots);
        idx.sort_unstable();
    }
    Ok(per_class)
}

/// Run the full K-shot loop: init the bank, optimize for the configured
/// number of epochs, fit per-class statistics from the shots, then apply
/// one momentum filtering pass.
pub fn train(cfg: &TrainConfig, data: &SampleSet) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.labels.len() != data.embeddings.len() {
        return Err(AmcnError::InvalidConfig(
            "training data must be fully labeled".into(),
        ));
    }
    let num_classes = match &cfg.class_names {
        Some(names) => names.len(),
        None => data.labels.iter().copied().max().map_or(0, |m| m + 1),
    };
    if num_classes < 2 {
        return Err(AmcnError::InvalidConfig("need at least 2 ID classes".into()));
    }
    let class_names = cfg
        .class_names
        .clone()
        .unwrap_or_else(|| default_names("class", num_classes));
    let ood_names = cfg
        .ood_names
        .clone()
        .unwrap_or_else(|| default_names("ood", cfg.hp.s.max(cfg.hp.z)));
    let d = data.dim;
    let d_tok = cfg.d_tok.unwrap_or(d);

    let mut bank = init_bank(
        &cfg.hp,
        cfg.seed,
        &class_names,
        &ood_names,
        d_tok,
        cfg.per_class_prefixes,
    )?;
    let enc = DeskEncoder::new(d_tok, d, cfg.seed);

    // Separate stream for data-side randomness so bank init stays fixed.
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5851_f42d_4c95_7f2d);
    let shot_idx = select_shots(data, num_classes, cfg.shots, &mut rng)?;
    let per_class_shots: Vec<Vec<UnitEmbedding>> = shot_idx
        .iter()
        .map(|idx| idx.iter().map(|&i| data.embeddings[i].clone()).collect())
        .collect();
    let mut pool: Vec<(UnitEmbedding, usize)> = Vec::new();
    for (ci, shots) in per_class_shots.iter().enumerate() {
        for x in shots {
            pool.push((x.clone(), ci));
        }
    }

    let mut opt = OptimizerState::new(cfg.lr, cfg.weight_decay);
    let mut epoch_reports = Vec::with_capacity(cfg.epochs);
    let mut max_norm_err: f64 = Snapshot::compute(&bank, &enc)?.max_unit_norm_error();
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        partial_shuffle(&mut rng, &mut order, pool.len());
        let mut batch_reports = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let images = chunk.iter().map(|&i| pool[i].0.clone()).collect();
            let labels = chunk.iter().map(|&i| pool[i].1).collect();
            let batch = Batch::new(images, labels, num_classes)?;
            let (report, grads) = loss_and_grad(&batch, &bank, &enc, &cfg.hp)?;
            optimizer_step(&mut bank, &grads, &mut opt)?;
            batch_reports.push((chunk.len(), report));
        }
        let err = Snapshot::compute(&bank, &enc)?.max_unit_norm_error();
        if err > NORM_TOL {
            return Err(AmcnError::NormViolation(err));
        }
        max_norm_err = max_norm_err.max(err);
        epoch_reports.push(mean_report(&batch_reports));
    }

    let snap = Snapshot::compute(&bank, &enc)?;
    let stats = fit_stats_with_snapshot(&snap, &per_class_shots, &cfg.hp)?;

    let report = RunReport {
        config_hash: config_hash(cfg),
        epochs: epoch_reports,
        metrics: None,
        per_class_stats: stats.clone(),
        max_unit_norm_error: max_norm_err,
    };
    Ok(TrainOutput {
        bank,
        enc,
        stats,
        report,
        per_class_shots,
    })
}

/// Evaluation result: metrics plus the raw score lists behind them.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub metrics: Metrics,
    pub scored: ScoredSet,
}

/// Score the test sets with the frozen model. ID accuracy counts correct
/// class assignments among ID samples the detector did not reject; the
/// detection metrics are `None` when no OOD data was given.
pub fn evaluate(
    bank: &PromptBank,
    enc: &DeskEncoder,
    stats: &[ClassStats],
    hp: &crate::config::HyperParams,
    polarity: Polarity,
    test_id: &SampleSet,
    test_ood: &SampleSet,
) -> Result<EvalOutput> {
    if test_id.embeddings.is_empty() {
        return Err(AmcnError::EmptyScoreSet("id"));
    }
    let snap = Snapshot::compute(bank, enc)?;
    let mut id_scores = Vec::with_capacity(test_id.embeddings.len());
    let mut kept = 0usize;
    let mut correct = 0usize;
    for (i, x) in test_id.embeddings.iter().enumerate() {
        let out = detect_with_snapshot(&snap, x, stats, hp, polarity)?;
        id_scores.push(out.score);
        if let Some(c) = out.predicted_class {
            kept += 1;
            if test_id.labels.get(i) == Some(&c) {
                correct += 1;
            }
        }
    }
    let mut ood_scores = Vec::with_capacity(test_ood.embeddings.len());
    for x in &test_ood.embeddings {
        ood_scores.push(detect_with_snapshot(&snap, x, stats, hp, polarity)?.score);
    }
    let scored = ScoredSet {
        id_scores,
        ood_scores,
    };
    let (auroc_v, fpr_v) = if scored.ood_scores.is_empty() {
        (None, None)
    } else {
        (Some(auroc(&scored)?), fpr95(&scored)?)
    };
    Ok(EvalOutput {
        metrics: Metrics {
            auroc: auroc_v,
            fpr95: fpr_v,
            id_accuracy: if kept == 0 {
                0.0
            } else {
                correct as f64 / kept as f64
            },
        },
        scored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::HyperParams;
    use crate::synth::{synth_generate, SampleSet};
    use crate::config::SynthConfig;

    fn tiny_bank() -> (PromptBank, DeskEncoder) {
        let hp = HyperParams {
            p: 1,
            s: 2,
            z: 2,
            n_ip: 2,
            n_lfop: 2,
            n_laop: 2,
            ..HyperParams::default()
        };
        let bank = init_bank(
            &hp,
            3,
            &default_names("class", 2),
            &default_names("ood", 2),
            4,
            false,
        )
        .unwrap();
        (bank, DeskEncoder::new(4, 4, 3))
    }

    fn uniform_grads(bank: &PromptBank, value: f64) -> GradientSet {
        let mut g = GradientSet(BTreeMap::new());
        for (id, theta) in bank.trainable_entries() {
            g.0.insert(id, vec![value; theta.len()]);
        }
        g
    }

    #[test]
    fn zero_gradient_is_identity_without_decay() {
        let (mut bank, _) = tiny_bank();
        let before = bank.clone();
        let grads = uniform_grads(&bank, 0.0);
        let mut opt = OptimizerState::new(0.01, 0.0);
        optimizer_step(&mut bank, &grads, &mut opt).unwrap();
        assert_eq!(bank, before);
    }

    #[test]
    fn first_step_is_signed_lr() {
        // With bias correction at t = 1, the step is lr * g / (|g| + eps).
        let (mut bank, _) = tiny_bank();
        let before = bank.clone();
        let grads = uniform_grads(&bank, 0.25);
        let mut opt = OptimizerState::new(0.01, 0.0);
        optimizer_step(&mut bank, &grads, &mut opt).unwrap();
        let expect = 0.01 * 0.25 / (0.25 + 1e-8);
        for ((_, a), (_, b)) in bank.trainable_entries().iter().zip(before.trainable_entries()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((y - x - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let (mut bank, _) = tiny_bank();
        let theta0 = bank.trainable_entries()[0].1[0];
        let g1 = 0.5;
        let g2 = -0.125;
        let mut opt = OptimizerState::new(0.003, 0.0);
        let grads1 = uniform_grads(&bank, g1);
        optimizer_step(&mut bank, &grads1, &mut opt).unwrap();
        let grads2 = uniform_grads(&bank, g2);
        optimizer_step(&mut bank, &grads2, &mut opt).unwrap();

        // Scalar AdamW replay.
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.003);
        let mut m = 0.0;
        let mut v = 0.0;
        let mut theta = theta0;
        for (t, g) in [(1, g1), (2, g2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - f64::powi(b1, t));
            let vh = v / (1.0 - f64::powi(b2, t));
            theta -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((bank.trainable_entries()[0].1[0] - theta).abs() <= 1e-15);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let (mut bank, _) = tiny_bank();
        let before = bank.clone();
        let mut opt = OptimizerState::new(0.1, 0.5);
        let grads = uniform_grads(&bank, 0.0);
        optimizer_step(&mut bank, &grads, &mut opt).unwrap();
        for ((_, a), (_, b)) in bank.trainable_entries().iter().zip(before.trainable_entries()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - (y - 0.1 * 0.5 * y)).abs() <= 1e-15);
            }
        }
    }

    fn small_data() -> SampleSet {
        synth_generate(&SynthConfig {
            dim: 8,
            num_id_classes: 2,
            num_ood_clusters: 1,
            samples_per_class: 6,
            noise_low: 0.05,
            noise_high: 0.2,
            seed: 5,
        })
        .unwrap()
        .train
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 11,
            shots: 4,
            hp: HyperParams {
                p: 1,
                s: 2,
                z: 2,
                n_ip: 3,
                n_lfop: 3,
                n_laop: 3,
                ..HyperParams::default()
            },
            polarity: Polarity::Flipped,
            checkpoint_every: 0,
            lr: 0.003,
            weight_decay: 0.0,
            d_tok: None,
            per_class_prefixes: false,
            class_names: None,
            ood_names: None,
        }
    }

    #[test]
    fn zero_epochs_keeps_initial_bank() {
        let data = small_data();
        let mut cfg = small_cfg();
        cfg.epochs = 0;
        let out = train(&cfg, &data).unwrap();
        let fresh = init_bank(
            &cfg.hp,
            cfg.seed,
            &default_names("class", 2),
            &default_names("ood", 2),
            8,
            false,
        )
        .unwrap();
        assert_eq!(out.bank, fresh);
        assert!(out.report.epochs.is_empty());
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let data = small_data();
        let cfg = small_cfg();
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a.bank, b.bank);
        assert_eq!(a.stats, b.stats);
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
    }

    #[test]
    fn shots_are_unique_and_counted() {
        let data = small_data();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let idx = select_shots(&data, 2, 4, &mut rng).unwrap();
        for class_idx in &idx {
            assert_eq!(class_idx.len(), 4);
            let mut sorted = class_idx.clone();
            sorted.dedup();
            assert_eq!(sorted.len(), 4);
        }
        assert!(matches!(
            select_shots(&data, 2, 99, &mut rng),
            Err(AmcnError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn epoch_reports_are_finite_and_norms_hold() {
        let data = small_data();
        let cfg = small_cfg();
        let out = train(&cfg, &data).unwrap();
        assert_eq!(out.report.epochs.len(), cfg.epochs);
        for r in &out.report.epochs {
            for v in [r.l_c, r.l_i1, r.l_i2, r.l1, r.l2, r.l3, r.l4, r.total] {
                assert!(v.is_finite());
            }
        }
        assert!(out.report.max_unit_norm_error <= NORM_TOL);
    }

    #[test]
    fn evaluate_handles_missing_ood() {
        let data = small_data();
        let cfg = small_cfg();
        let out = train(&cfg, &data).unwrap();
        let empty = SampleSet {
            dim: data.dim,
            embeddings: Vec::new(),
            labels: Vec::new(),
        };
        let eval = evaluate(
            &out.bank,
            &out.enc,
            &out.stats,
            &cfg.hp,
            cfg.polarity,
            &data,
            &empty,
        )
        .unwrap();
        assert_eq!(eval.metrics.auroc, None);
        assert_eq!(eval.metrics.fpr95, None);
        assert!((0.0..=1.0).contains(&eval.metrics.id_accuracy));
    }

    #[test]
    fn mean_report_weighted_by_batch_size() {
        let r = |x: f64| LossReport {
            l_c: x,
            l_i1: x,
            l_i2: x,
            l1: x,
            l2: x,
            l3: x,
            l4: x,
            total: x,
        };
        let mean = mean_report(&[(3, r(1.0)), (1, r(5.0))]);
        assert!((mean.total - 2.0).abs() <= 1e-15);
    }
}
