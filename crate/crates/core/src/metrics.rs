//! Detection metrics. Scores follow the module-wide convention that
//! larger means "more ID": ID scores are the positives.

use crate::config::HyperParams;
use crate::error::{AmcnError, Result};
use crate::prompt_bank::{id_prototype, DeskEncoder, PromptBank};
use crate::vecmath::{dot, UnitEmbedding};

/// Paired ID/OOD score lists for one evaluation.
#[derive(Debug, Clone)]
pub struct ScoredSet {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

/// AUROC as the rank statistic P(id > ood), ties counting one half.
/// Computed in O(n log n) by merging sorted score lists.
pub fn auroc(s: &ScoredSet) -> Result<f64> {
    if s.id_scores.is_empty() {
        return Err(AmcnError::EmptyScoreSet("id"));
    }
    if s.ood_scores.is_empty() {
        return Err(AmcnError::EmptyScoreSet("ood"));
    }
    // Mann-Whitney U via midranks over the pooled scores.
    let mut pooled: Vec<(f64, bool)> = s
        .id_scores
        .iter()
        .map(|&x| (x, true))
        .chain(s.ood_scores.iter().map(|&x| (x, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut id_rank_sum = 0.0;
    let mut i = 0usize;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        // 1-based midrank of the tie group [i, j).
        let midrank = (i + 1 + j) as f64 / 2.0;
        for entry in &pooled[i..j] {
            if entry.1 {
                id_rank_sum += midrank;
            }
        }
        i = j;
    }
    let n_id = s.id_scores.len() as f64;
    let n_ood = s.ood_scores.len() as f64;
    let u = id_rank_sum - n_id * (n_id + 1.0) / 2.0;
    Ok(u / (n_id * n_ood))
}

/// False-positive rate on OOD at the threshold that keeps at least 95% of
/// ID scores. The threshold is the largest t with |{id >= t}|/|id| >= 0.95,
/// with no interpolation; `None` when the OOD side is empty.
pub fn fpr95(s: &ScoredSet) -> Result<Option<f64>> {
    if s.id_scores.is_empty() {
        return Err(AmcnError::EmptyScoreSet("id"));
    }
    if s.ood_scores.is_empty() {
        return Ok(None);
    }
    let n = s.id_scores.len();
    let mut sorted = s.id_scores.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    // Smallest k with k/n >= 0.95; the k-th largest id score is the
    // largest threshold retaining that true-positive rate.
    let k = ((0.95 * n as f64).ceil() as usize).max(1);
    let t = sorted[k - 1];
    let fp = s.ood_scores.iter().filter(|&&x| x >= t).count();
    Ok(Some(fp as f64 / s.ood_scores.len() as f64))
}

/// Prototype-cosine comparison baseline: the maximum cosine of a sample to
/// any ID class prototype.
pub fn baseline_score(
    x: &UnitEmbedding,
    bank: &PromptBank,
    enc: &DeskEncoder,
    _hp: &HyperParams,
) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for c in 0..bank.num_classes() {
        let proto = id_prototype(bank, enc, c)?;
        best = best.max(dot(x.values(), proto.values()).clamp(-1.0, 1.0));
    }
    Ok(best)
}

/// O(n^2) pairwise oracle for AUROC; test and acceptance reference.
pub fn auroc_brute_force(s: &ScoredSet) -> Result<f64> {
    if s.id_scores.is_empty() {
        return Err(AmcnError::EmptyScoreSet("id"));
    }
    if s.ood_scores.is_empty() {
        return Err(AmcnError::EmptyScoreSet("ood"));
    }
    let mut wins = 0.0;
    for &a in &s.id_scores {
        for &b in &s.ood_scores {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (s.id_scores.len() as f64 * s.ood_scores.len() as f64))
}

/// Threshold-enumeration oracle for FPR95; test and acceptance reference.
pub fn fpr95_brute_force(s: &ScoredSet) -> Result<Option<f64>> {
    if s.id_scores.is_empty() {
        return Err(AmcnError::EmptyScoreSet("id"));
    }
    if s.ood_scores.is_empty() {
        return Ok(None);
    }
    let n = s.id_scores.len() as f64;
    // Candidate thresholds are the id scores themselves: the optimum is
    // always attained at one of them.
    let mut best_t = f64::NEG_INFINITY;
    for &t in &s.id_scores {
        let kept = s.id_scores.iter().filter(|&&x| x >= t).count() as f64;
        if kept / n >= 0.95 && t > best_t {
            best_t = t;
        }
    }
    let fp = s.ood_scores.iter().filter(|&&x| x >= best_t).count();
    Ok(Some(fp as f64 / s.ood_scores.len() as f64))
}
