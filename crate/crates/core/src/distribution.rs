//! Multi-diversity distribution machinery: per-class score statistics,
//! adaptive P-score thresholds, pseudo-OOD filtering, the momentum update
//! of the pseudo-OOD distribution, and the final ID/OOD decision rule.

use serde::{Deserialize, Serialize};

use crate::config::{HyperParams, Polarity};
use crate::error::{AmcnError, Result};
use crate::losses::Snapshot;
use crate::prompt_bank::{DeskEncoder, PromptBank};
use crate::vecmath::{dot, UnitEmbedding};

/// Per-class distribution record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mu: f64,
    pub sd: f64,
    pub p_score: f64,
    /// Running pseudo-OOD distribution scalar.
    pub m_pse: f64,
    /// Cumulative count of predicted OOD samples feeding the momentum rule.
    pub ood_count: u64,
}

/// Decision for one test sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutcome {
    pub is_ood: bool,
    pub predicted_class: Option<usize>,
    /// Ranking scalar; larger always means "more ID".
    pub score: f64,
}

/// Mean, sample standard deviation (K-1 denominator), and the P-score
/// threshold lambda*mu + (1-lambda)*sd over a class's distribution scores.
pub fn class_stats(scores: &[f64], lambda: f64) -> Result<ClassStats> {
    let k = scores.len();
    if k < 2 {
        return Err(AmcnError::InsufficientSamples {
            class: 0,
            got: k,
            need: 2,
        });
    }
    let mut sum = 0.0;
    for s in scores {
        sum += s;
    }
    let mu = sum / k as f64;
    let mut ss = 0.0;
    for s in scores {
        let d = s - mu;
        ss += d * d;
    }
    let sd = (ss / (k - 1) as f64).sqrt();
    Ok(ClassStats {
        mu,
        sd,
        p_score: lambda * mu + (1.0 - lambda) * sd,
        m_pse: 0.0,
        ood_count: 0,
    })
}

/// Class distribution score: exp(logit) / (tau0 + m_pse).
pub fn dist_score(logit: f64, tau0: f64, m_pse: f64) -> Result<f64> {
    let denom = tau0 + m_pse;
    if denom <= 0.0 {
        return Err(AmcnError::DegenerateDenominator(denom));
    }
    Ok(logit.exp() / denom)
}

/// Pseudo-OOD filter. Literal polarity marks a sample pseudo-OOD when its
/// score exceeds the class threshold (ties go to the class); flipped
/// polarity reverses the comparison.
pub fn pseudo_ood_filter(score: f64, p_score: f64, polarity: Polarity) -> bool {
    match polarity {
        Polarity::Literal => score > p_score,
        Polarity::Flipped => score < p_score,
    }
}

/// Momentum update of the pseudo-OOD distribution. The branch follows the
/// score/threshold comparison as published: no change above the threshold,
/// running average (exp(logit) + O * m_pse) / (O + 1) at or below it, with
/// the OOD count incremented on the updating branch.
pub fn update_mpse(stats: &ClassStats, logit: f64, branch_score: f64) -> ClassStats {
    let mut out = stats.clone();
    if branch_score > stats.p_score {
        return out;
    }
    let o = stats.ood_count as f64;
    out.m_pse = (logit.exp() + o * stats.m_pse) / (o + 1.0);
    out.ood_count = stats.ood_count + 1;
    out
}

/// Per-class logits of one sample against every class prototype.
fn logits(snap: &Snapshot, x: &UnitEmbedding, sigma: f64) -> Vec<f64> {
    snap.class_proto
        .iter()
        .map(|p| dot(x.values(), p.values()).clamp(-1.0, 1.0) / sigma)
        .collect()
}

/// Full detection rule over an immutable snapshot of the bank and stats.
/// A sample is real OOD when the pseudo-OOD filter fires for every class;
/// otherwise it is assigned the highest-logit class among those whose
/// filter did not fire. The ranking score is max_c (S_c - P_c), negated
/// under literal polarity so larger always means "more ID".
pub fn detect_with_snapshot(
    snap: &Snapshot,
    x: &UnitEmbedding,
    all_stats: &[ClassStats],
    hp: &HyperParams,
    polarity: Polarity,
) -> Result<DetectionOutcome> {
    let c = snap.class_proto.len();
    if all_stats.len() != c {
        return Err(AmcnError::MissingStats(format!(
            "have {} class stats, need {c}",
            all_stats.len()
        )));
    }
    let logit_vec = logits(snap, x, hp.sigma);
    let mut all_filtered = true;
    let mut best_class: Option<usize> = None;
    let mut best_logit = f64::NEG_INFINITY;
    let mut best_margin = f64::NEG_INFINITY;
    for ci in 0..c {
        let score = dist_score(logit_vec[ci], hp.tau0, all_stats[ci].m_pse)?;
        let margin = score - all_stats[ci].p_score;
        best_margin = best_margin.max(margin);
        let filtered = pseudo_ood_filter(score, all_stats[ci].p_score, polarity);
        if !filtered {
            all_filtered = false;
            if logit_vec[ci] > best_logit {
                best_logit = logit_vec[ci];
                best_class = Some(ci);
            }
        }
    }
    let score = match polarity {
        Polarity::Literal => -best_margin,
        Polarity::Flipped => best_margin,
    };
    Ok(DetectionOutcome {
        is_ood: all_filtered,
        predicted_class: if all_filtered { None } else { best_class },
        score,
    })
}

/// Decision rule against the live bank. `frozen` is accepted for contract
/// clarity: this path never mutates statistics either way; the training
/// pass owns the momentum updates.
pub fn detect(
    x: &UnitEmbedding,
    bank: &PromptBank,
    enc: &DeskEncoder,
    all_stats: &[ClassStats],
    hp: &HyperParams,
    polarity: Polarity,
    _frozen: bool,
) -> Result<DetectionOutcome> {
    let snap = Snapshot::compute(bank, enc)?;
    detect_with_snapshot(&snap, x, all_stats, hp, polarity)
}

/// Fit per-class statistics from the training shots. The pseudo-OOD scalar
/// of class c starts at the mean of exp(o_c(x)) over all shots labeled
/// differently, and the OOD count starts at that sample count.
pub fn fit_stats(
    per_class: &[Vec<UnitEmbedding>],
    bank: &PromptBank,
    enc: &DeskEncoder,
    hp: &HyperParams,
) -> Result<Vec<ClassStats>> {
    let snap = Snapshot::compute(bank, enc)?;
    fit_stats_with_snapshot(&snap, per_class, hp)
}

pub fn fit_stats_with_snapshot(
    snap: &Snapshot,
    per_class: &[Vec<UnitEmbedding>],
    hp: &HyperParams,
) -> Result<Vec<ClassStats>> {
    let c = snap.class_proto.len();
    if per_class.len() != c {
        return Err(AmcnError::MissingStats(format!(
            "have shots for {} classes, need {c}",
            per_class.len()
        )));
    }
    for (ci, shots) in per_class.iter().enumerate() {
        if shots.len() < 2 {
            return Err(AmcnError::InsufficientSamples {
                class: ci,
                got: shots.len(),
                need: 2,
            });
        }
    }
    let mut out = Vec::with_capacity(c);
    for ci in 0..c {
        // Initial pseudo-OOD distribution: mean exp-logit of shots from
        // every other class.
        let mut sum = 0.0;
        let mut count = 0u64;
        for (cj, shots) in per_class.iter().enumerate() {
            if cj == ci {
                continue;
            }
            for x in shots {
                let logit = logits(snap, x, hp.sigma)[ci];
                sum += logit.exp();
                count += 1;
            }
        }
        let m_pse = if count > 0 { sum / count as f64 } else { 0.0 };
        let scores: Vec<f64> = per_class[ci]
            .iter()
            .map(|x| dist_score(logits(snap, x, hp.sigma)[ci], hp.tau0, m_pse))
            .collect::<Result<_>>()?;
        let mut stats = class_stats(&scores, hp.lambda).map_err(|e| match e {
            AmcnError::InsufficientSamples { got, need, .. } => {
                AmcnError::InsufficientSamples { class: ci, got, need }
            }
            other => other,
        })?;
        stats.m_pse = m_pse;
        stats.ood_count = count;
        out.push(stats);
    }
    Ok(out)
}

/// One training-time filtering pass: apply the momentum rule of every
/// class to every shot, in canonical order.
pub fn momentum_pass(
    snap: &Snapshot,
    per_class: &[Vec<UnitEmbedding>],
    stats: &mut [ClassStats],
    hp: &HyperParams,
) -> Result<()> {
    for ci in 0..stats.len() {
        for shots in per_class.iter() {
            for x in shots {
                let logit = logits(snap, x, hp.sigma)[ci];
                let score = dist_score(logit, hp.tau0, stats[ci].m_pse)?;
                stats[ci] = update_mpse(&stats[ci], logit, score);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt_bank::{default_names, init_bank};
    use crate::vecmath::normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn stats_constant_scores() {
        let s = class_stats(&[1.0, 1.0, 1.0], 0.5).unwrap();
        assert_eq!(s.mu, 1.0);
        assert_eq!(s.sd, 0.0);
        assert_eq!(s.p_score, 0.5);
    }

    #[test]
    fn stats_lambda_extremes() {
        let s = class_stats(&[0.0, 2.0], 1.0).unwrap();
        assert_eq!(s.mu, 1.0);
        assert!((s.sd - 2.0f64.sqrt()).abs() <= 1e-12);
        assert_eq!(s.p_score, 1.0);
        let s = class_stats(&[0.0, 2.0], 0.0).unwrap();
        assert!((s.p_score - 2.0f64.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn stats_require_two_samples() {
        assert!(matches!(
            class_stats(&[1.0], 0.5),
            Err(AmcnError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn dist_score_examples() {
        assert_eq!(dist_score(0.0, 1.0, 0.0).unwrap(), 1.0);
        assert!((dist_score(2.0f64.ln(), 1.0, 1.0).unwrap() - 1.0).abs() <= 1e-12);
        assert!((dist_score(1.0, 0.0, 1.0).unwrap() - std::f64::consts::E).abs() <= 1e-12);
        assert!(matches!(
            dist_score(1.0, 0.0, 0.0),
            Err(AmcnError::DegenerateDenominator(_))
        ));
    }

    #[test]
    fn filter_polarity() {
        assert!(pseudo_ood_filter(1.6, 1.5, Polarity::Literal));
        assert!(!pseudo_ood_filter(1.5, 1.5, Polarity::Literal));
        assert!(!pseudo_ood_filter(1.6, 1.5, Polarity::Flipped));
    }

    #[test]
    fn mpse_update_examples() {
        let stats = ClassStats {
            mu: 0.0,
            sd: 0.0,
            p_score: 10.0,
            m_pse: 2.0,
            ood_count: 1,
        };
        let updated = update_mpse(&stats, 4.0f64.ln(), 5.0);
        assert!((updated.m_pse - 3.0).abs() <= 1e-12);
        assert_eq!(updated.ood_count, 2);

        let unchanged = update_mpse(&stats, 4.0f64.ln(), 11.0);
        assert_eq!(unchanged, stats);

        let empty = ClassStats {
            ood_count: 0,
            m_pse: 123.0,
            ..stats
        };
        let first = update_mpse(&empty, 1.0, 5.0);
        assert!((first.m_pse - std::f64::consts::E).abs() <= 1e-12);
        assert_eq!(first.ood_count, 1);
    }

    #[test]
    fn mpse_convexity_property() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let stats = ClassStats {
                mu: 0.0,
                sd: 0.0,
                p_score: rng.gen::<f64>() * 4.0,
                m_pse: rng.gen::<f64>() * 5.0,
                ood_count: rng.gen_range(0..50),
            };
            let logit = rng.gen::<f64>() * 4.0 - 2.0;
            let score = rng.gen::<f64>() * 8.0;
            let updated = update_mpse(&stats, logit, score);
            let lo = logit.exp().min(stats.m_pse);
            let hi = logit.exp().max(stats.m_pse);
            assert!(updated.m_pse >= lo - 1e-12 && updated.m_pse <= hi + 1e-12);
        }
    }

    #[test]
    fn p_score_monotone_in_mu_and_sd() {
        for lambda in [0.0, 0.3, 0.7, 1.0] {
            let base = class_stats(&[1.0, 2.0, 3.0], lambda).unwrap();
            let shifted = class_stats(&[2.0, 3.0, 4.0], lambda).unwrap();
            assert!(shifted.p_score >= base.p_score);
            let wider = class_stats(&[0.0, 2.0, 4.0], lambda).unwrap();
            assert!(wider.p_score >= base.p_score);
        }
    }

    fn small_setup() -> (PromptBank, DeskEncoder, HyperParams) {
        let hp = HyperParams {
            s: 2,
            z: 2,
            p: 1,
            n_ip: 3,
            n_lfop: 3,
            n_laop: 3,
            ..HyperParams::default()
        };
        let bank = init_bank(
            &hp,
            21,
            &default_names("class", 2),
            &default_names("ood", 2),
            5,
            false,
        )
        .unwrap();
        let enc = DeskEncoder::new(5, 5, 21);
        (bank, enc, hp)
    }

    fn rand_unit(rng: &mut ChaCha20Rng, d: usize) -> UnitEmbedding {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            if let Ok(u) = normalize(&v) {
                return u;
            }
        }
    }

    #[test]
    fn detect_consistency_over_random_inputs() {
        let (bank, enc, hp) = small_setup();
        let snap = Snapshot::compute(&bank, &enc).unwrap();
        let stats = vec![
            ClassStats {
                mu: 1.0,
                sd: 0.1,
                p_score: 0.55,
                m_pse: 1.0,
                ood_count: 3,
            };
            2
        ];
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x = rand_unit(&mut rng, 5);
            for polarity in [Polarity::Literal, Polarity::Flipped] {
                let out = detect_with_snapshot(&snap, &x, &stats, &hp, polarity).unwrap();
                assert_eq!(out.is_ood, out.predicted_class.is_none());
                // Direct re-evaluation of the all-classes rule.
                let mut all = true;
                for ci in 0..2 {
                    let logit = dot(x.values(), snap.class_proto[ci].values()) / hp.sigma;
                    let score = dist_score(logit, hp.tau0, stats[ci].m_pse).unwrap();
                    if !pseudo_ood_filter(score, stats[ci].p_score, polarity) {
                        all = false;
                    }
                }
                assert_eq!(out.is_ood, all);
            }
        }
    }

    #[test]
    fn detect_requires_full_stats() {
        let (bank, enc, hp) = small_setup();
        let snap = Snapshot::compute(&bank, &enc).unwrap();
        let stats = vec![ClassStats {
            mu: 0.0,
            sd: 0.0,
            p_score: 0.0,
            m_pse: 0.0,
            ood_count: 0,
        }];
        let x = snap.class_proto[0].clone();
        assert!(matches!(
            detect_with_snapshot(&snap, &x, &stats, &hp, Polarity::Literal),
            Err(AmcnError::MissingStats(_))
        ));
    }

    #[test]
    fn fit_stats_matches_scalar_oracle() {
        let (bank, enc, hp) = small_setup();
        let snap = Snapshot::compute(&bank, &enc).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let per_class: Vec<Vec<UnitEmbedding>> = (0..2)
            .map(|_| (0..4).map(|_| rand_unit(&mut rng, 5)).collect())
            .collect();
        let stats = fit_stats_with_snapshot(&snap, &per_class, &hp).unwrap();
        for ci in 0..2 {
            // Brute-force recomputation.
            let other: Vec<&UnitEmbedding> = per_class[1 - ci].iter().collect();
            let mut m = 0.0;
            for x in &other {
                let logit = dot(x.values(), snap.class_proto[ci].values()) / hp.sigma;
                m += logit.exp();
            }
            m /= other.len() as f64;
            assert!((stats[ci].m_pse - m).abs() <= 1e-12);
            assert_eq!(stats[ci].ood_count, other.len() as u64);
            let scores: Vec<f64> = per_class[ci]
                .iter()
                .map(|x| {
                    let logit = dot(x.values(), snap.class_proto[ci].values()) / hp.sigma;
                    logit.exp() / (hp.tau0 + m)
                })
                .collect();
            let k = scores.len() as f64;
            let mu = scores.iter().sum::<f64>() / k;
            let sd = (scores.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
            assert!((stats[ci].mu - mu).abs() <= 1e-12);
            assert!((stats[ci].sd - sd).abs() <= 1e-12);
            assert!(
                (stats[ci].p_score - (hp.lambda * mu + (1.0 - hp.lambda) * sd)).abs() <= 1e-12
            );
        }
    }

    #[test]
    fn fit_stats_rejects_single_shot() {
        let (bank, enc, hp) = small_setup();
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        let per_class = vec![
            vec![rand_unit(&mut rng, 5)],
            vec![rand_unit(&mut rng, 5), rand_unit(&mut rng, 5)],
        ];
        assert!(matches!(
            fit_stats(&per_class, &bank, &enc, &hp),
            Err(AmcnError::InsufficientSamples { class: 0, .. })
        ));
    }

    #[test]
    fn fit_stats_equal_logits_give_equal_mpse() {
        // When every logit is identical, m_pse must equal exp(logit).
        let (bank, enc, mut hp) = small_setup();
        hp.sigma = 1e9; // flattens every logit to ~0
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let per_class: Vec<Vec<UnitEmbedding>> = (0..2)
            .map(|_| (0..3).map(|_| rand_unit(&mut rng, 5)).collect())
            .collect();
        let stats = fit_stats(&per_class, &bank, &enc, &hp).unwrap();
        for s in stats {
            assert!((s.m_pse - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn frozen_detect_never_mutates_stats() {
        let (bank, enc, hp) = small_setup();
        let snap = Snapshot::compute(&bank, &enc).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let per_class: Vec<Vec<UnitEmbedding>> = (0..2)
            .map(|_| (0..3).map(|_| rand_unit(&mut rng, 5)).collect())
            .collect();
        let stats = fit_stats_with_snapshot(&snap, &per_class, &hp).unwrap();
        let before = stats.clone();
        for _ in 0..20 {
            let x = rand_unit(&mut rng, 5);
            detect(&x, &bank, &enc, &stats, &hp, Polarity::Literal, true).unwrap();
        }
        assert_eq!(stats, before);
    }

    #[test]
    fn training_shots_not_self_rejected_under_flipped_polarity() {
        let (bank, enc, hp) = small_setup();
        let snap = Snapshot::compute(&bank, &enc).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(55);
        let per_class: Vec<Vec<UnitEmbedding>> = (0..2)
            .map(|_| (0..5).map(|_| rand_unit(&mut rng, 5)).collect())
            .collect();
        let stats = fit_stats_with_snapshot(&snap, &per_class, &hp).unwrap();
        for (ci, shots) in per_class.iter().enumerate() {
            for x in shots {
                let logit = dot(x.values(), snap.class_proto[ci].values()) / hp.sigma;
                let score = dist_score(logit, hp.tau0, stats[ci].m_pse).unwrap();
                if score <= stats[ci].p_score {
                    continue;
                }
                // Score above its own class threshold: under flipped
                // polarity the class filter does not fire, so the sample
                // cannot be real OOD.
                let out =
                    detect_with_snapshot(&snap, x, &stats, &hp, Polarity::Flipped).unwrap();
                assert!(!out.is_ood);
            }
        }
    }
}
