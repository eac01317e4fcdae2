//! The seven training objectives as scalar functions of a mini-batch and
//! the prompt bank, their analytic gradients with respect to every
//! trainable token, and a central-finite-difference verification oracle.
//!
//! The computation graph is fixed: image embeddings are constants, prompt
//! embeddings flow through mean-pool -> frozen projection -> hypersphere
//! normalization, prototypes are normalized means of prompt embeddings.
//! Gradients are propagated by hand along exactly that graph.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::HyperParams;
use crate::error::{AmcnError, Result};
use crate::prompt_bank::{encode_prompt_trace, DeskEncoder, EncodeTrace, PromptBank};
use crate::vecmath::{dot, euclid, normalize, normalize_jacobian_vp, UnitEmbedding};

/// A labeled mini-batch of unit image embeddings.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<UnitEmbedding>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(images: Vec<UnitEmbedding>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(AmcnError::InvalidConfig(format!(
                "batch needs matching non-empty images/labels, got {}/{}",
                images.len(),
                labels.len()
            )));
        }
        for &l in &labels {
            if l >= num_classes {
                return Err(AmcnError::UnknownClass {
                    index: l,
                    num_classes,
                });
            }
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Per-component loss values for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_i1: f64,
    pub l_i2: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub total: f64,
}

/// Gradients keyed by trainable-parameter identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub BTreeMap<String, Vec<f64>>);

impl GradientSet {
    fn zeros(bank: &PromptBank) -> Self {
        let d_tok = bank.d_tok();
        let map = bank
            .trainable_ids()
            .into_iter()
            .map(|id| (id, vec![0.0; d_tok]))
            .collect();
        Self(map)
    }

    fn add(&mut self, id: &str, g: &[f64]) {
        let entry = self.0.get_mut(id).expect("gradient key in census");
        for (a, b) in entry.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (id, g) in &self.0 {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(AmcnError::NonFiniteGradient(id.clone()));
            }
        }
        Ok(())
    }
}

/// Encoded state of the bank for one parameter snapshot: every prompt
/// embedding and prototype, with the pre-normalization records needed to
/// backpropagate.
pub struct Snapshot {
    pub d: usize,
    /// C x P encode traces for the ID prompts.
    pub id_traces: Vec<Vec<EncodeTrace>>,
    pub class_proto: Vec<UnitEmbedding>,
    class_proto_mean: Vec<Vec<f64>>,
    /// S label-fixed then Z label-adaptive member traces, in bank order.
    pub ood_traces: Vec<EncodeTrace>,
    pub ood_proto: UnitEmbedding,
    ood_proto_mean: Vec<f64>,
    pub lfop_proto: UnitEmbedding,
    lfop_proto_mean: Vec<f64>,
    pub laop_proto: UnitEmbedding,
    laop_proto_mean: Vec<f64>,
    s: usize,
    z: usize,
    p: usize,
}

impl Snapshot {
    pub fn compute(bank: &PromptBank, enc: &DeskEncoder) -> Result<Self> {
        let d = enc.d();
        let c = bank.num_classes();
        let p = bank.num_id_prompts_per_class;
        let mut id_traces = Vec::with_capacity(c);
        let mut class_proto = Vec::with_capacity(c);
        let mut class_proto_mean = Vec::with_capacity(c);
        for ci in 0..c {
            let mut traces = Vec::with_capacity(p);
            let mut mean = vec![0.0; d];
            for pi in 0..p {
                let tr = encode_prompt_trace(&bank.id_prompt_tokens(ci, pi), enc)?;
                for (m, v) in mean.iter_mut().zip(tr.emb.values()) {
                    *m += v;
                }
                traces.push(tr);
            }
            for m in mean.iter_mut() {
                *m /= p as f64;
            }
            class_proto.push(normalize(&mean)?);
            class_proto_mean.push(mean);
            id_traces.push(traces);
        }
        let s = bank.s();
        let z = bank.z();
        let mut ood_traces = Vec::with_capacity(s + z);
        for i in 0..s {
            ood_traces.push(encode_prompt_trace(&bank.lfop_tokens(i), enc)?);
        }
        for i in 0..z {
            ood_traces.push(encode_prompt_trace(&bank.laop_tokens(i), enc)?);
        }
        let family_mean = |range: std::ops::Range<usize>| -> Vec<f64> {
            let count = range.len() as f64;
            let mut mean = vec![0.0; d];
            for tr in &ood_traces[range] {
                for (m, v) in mean.iter_mut().zip(tr.emb.values()) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= count;
            }
            mean
        };
        let ood_proto_mean = family_mean(0..s + z);
        let lfop_proto_mean = family_mean(0..s);
        let laop_proto_mean = family_mean(s..s + z);
        Ok(Self {
            d,
            id_traces,
            class_proto,
            ood_proto: normalize(&ood_proto_mean)?,
            lfop_proto: normalize(&lfop_proto_mean)?,
            laop_proto: normalize(&laop_proto_mean)?,
            class_proto_mean,
            ood_proto_mean,
            lfop_proto_mean,
            laop_proto_mean,
            ood_traces,
            s,
            z,
            p,
        })
    }

    /// Largest |norm - 1| over every embedding and prototype in the
    /// snapshot; the hypersphere invariant monitor.
    pub fn max_unit_norm_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let mut check = |v: &[f64]| {
            let n = crate::vecmath::norm(v);
            worst = worst.max((n - 1.0).abs());
        };
        for traces in &self.id_traces {
            for tr in traces {
                check(tr.emb.values());
            }
        }
        for tr in &self.ood_traces {
            check(tr.emb.values());
        }
        for proto in &self.class_proto {
            check(proto.values());
        }
        check(self.ood_proto.values());
        check(self.lfop_proto.values());
        check(self.laop_proto.values());
        worst
    }
}

/// Cosine logit of a sample against one class prototype: cos(x, proto)/sigma.
pub fn class_logit(
    x: &UnitEmbedding,
    bank: &PromptBank,
    enc: &DeskEncoder,
    class: usize,
    hp: &HyperParams,
) -> Result<f64> {
    let proto = crate::prompt_bank::id_prototype(bank, enc, class)?;
    Ok(unit_cos(x, &proto) / hp.sigma)
}

fn unit_cos(a: &UnitEmbedding, b: &UnitEmbedding) -> f64 {
    dot(a.values(), b.values()).clamp(-1.0, 1.0)
}

fn sim_from_cos(cos: f64, sigma: f64) -> f64 {
    (cos / sigma).exp()
}

/// Per-sample similarity masses against one class: the weighted ID term,
/// the weighted OOD-set term, and their sum.
pub fn sample_mass(
    x: &UnitEmbedding,
    bank: &PromptBank,
    enc: &DeskEncoder,
    label: usize,
    hp: &HyperParams,
) -> Result<(f64, f64, f64)> {
    let snap = Snapshot::compute(bank, enc)?;
    Ok(mass_terms(&snap, x, label, hp))
}

fn mass_terms(snap: &Snapshot, x: &UnitEmbedding, class: usize, hp: &HyperParams) -> (f64, f64, f64) {
    let s_id = hp.tau1 * sim_from_cos(unit_cos(x, &snap.class_proto[class]), hp.sigma);
    let mut sum_ood = 0.0;
    for tr in &snap.ood_traces {
        sum_ood += sim_from_cos(unit_cos(x, &tr.emb), hp.sigma);
    }
    let s_ood = (1.0 - hp.tau1) * sum_ood;
    (s_id, s_ood, s_id + s_ood)
}

/// Which hinge groups are active for this batch and parameter state; used
/// to confirm the finite-difference checks exercise the kinked regions.
#[derive(Debug, Clone, Copy, Default)]
pub struct HingeActivity {
    pub separation: bool,
    pub intra: bool,
    pub inter: bool,
}

struct Forward {
    report: LossReport,
    hinges: HingeActivity,
}

/// Accumulators for gradients with respect to the unit-level quantities.
struct Upstream {
    g_class_proto: Vec<Vec<f64>>,
    g_ood_member: Vec<Vec<f64>>,
    g_ood_proto: Vec<f64>,
    g_lfop_proto: Vec<f64>,
    g_laop_proto: Vec<f64>,
}

impl Upstream {
    fn zeros(c: usize, members: usize, d: usize) -> Self {
        Self {
            g_class_proto: vec![vec![0.0; d]; c],
            g_ood_member: vec![vec![0.0; d]; members],
            g_ood_proto: vec![0.0; d],
            g_lfop_proto: vec![0.0; d],
            g_laop_proto: vec![0.0; d],
        }
    }
}

/// d cos(x, p)/dp at unit p: x - cos * p. Scaled by the similarity chain
/// dS/dcos = S / sigma when `sim_scale` is Some(S).
fn add_cos_grad(acc: &mut [f64], x: &UnitEmbedding, p: &UnitEmbedding, cos: f64, coef: f64) {
    for j in 0..acc.len() {
        acc[j] += coef * (x.values()[j] - cos * p.values()[j]);
    }
}

fn forward_backward(
    batch: &Batch,
    snap: &Snapshot,
    hp: &HyperParams,
    mut upstream: Option<&mut Upstream>,
) -> Result<Forward> {
    let b = batch.len() as f64;
    let c = snap.class_proto.len();
    let members = snap.ood_traces.len();
    let inv_b = 1.0 / b;

    // Shared per-sample similarity tables.
    let mut cos_class = vec![vec![0.0; c]; batch.len()];
    let mut sim_class = vec![vec![0.0; c]; batch.len()];
    let mut cos_ood = vec![vec![0.0; members]; batch.len()];
    let mut sim_ood = vec![vec![0.0; members]; batch.len()];
    let mut sum_sim_ood = vec![0.0; batch.len()];
    for (i, x) in batch.images.iter().enumerate() {
        for ci in 0..c {
            let cc = unit_cos(x, &snap.class_proto[ci]);
            cos_class[i][ci] = cc;
            sim_class[i][ci] = sim_from_cos(cc, hp.sigma);
        }
        for (k, tr) in snap.ood_traces.iter().enumerate() {
            let co = unit_cos(x, &tr.emb);
            cos_ood[i][k] = co;
            sim_ood[i][k] = sim_from_cos(co, hp.sigma);
            sum_sim_ood[i] += sim_ood[i][k];
        }
    }

    let mut hinges = HingeActivity::default();

    // L_C: classification contrast of each sample against its class
    // prototype versus the whole OOD prompt set.
    let mut l_c = 0.0;
    for i in 0..batch.len() {
        let label = batch.labels[i];
        let s_id = hp.tau1 * sim_class[i][label];
        let s_ood = (1.0 - hp.tau1) * sum_sim_ood[i];
        let m = s_id + s_ood;
        let ratio = s_id / m;
        if !(ratio > 0.0) {
            return Err(AmcnError::DegenerateRatio);
        }
        l_c += -ratio.ln() * inv_b;
        if let Some(up) = upstream.as_deref_mut() {
            // dL/dS_id = tau1 (1/m - 1/s_id), dL/dS_ok = (1-tau1)/m, all / B.
            let d_sid = hp.tau1 * (1.0 / m - 1.0 / s_id) * inv_b;
            let coef = d_sid * sim_class[i][label] / hp.sigma;
            add_cos_grad(
                &mut up.g_class_proto[label],
                &batch.images[i],
                &snap.class_proto[label],
                cos_class[i][label],
                coef,
            );
            let d_sok = (1.0 - hp.tau1) / m * inv_b;
            for k in 0..members {
                let coef = d_sok * sim_ood[i][k] / hp.sigma;
                add_cos_grad(
                    &mut up.g_ood_member[k],
                    &batch.images[i],
                    &snap.ood_traces[k].emb,
                    cos_ood[i][k],
                    coef,
                );
            }
        }
    }

    // Intra-class distribution normalization: two squared hinges per class
    // over the summed ID and OOD ratio masses of that class's samples.
    let mut l_i1 = 0.0;
    for ci in 0..c {
        let mut a_sum = 0.0;
        let mut b_sum = 0.0;
        let mut members_of_class = Vec::new();
        for i in 0..batch.len() {
            if batch.labels[i] != ci {
                continue;
            }
            let s_id = hp.tau1 * sim_class[i][ci];
            let s_ood = (1.0 - hp.tau1) * sum_sim_ood[i];
            let m = s_id + s_ood;
            a_sum += s_id / m;
            b_sum += s_ood / m;
            members_of_class.push(i);
        }
        let h1 = (hp.eps1 - a_sum).max(0.0);
        let h2 = (b_sum - hp.eps2).max(0.0);
        if !members_of_class.is_empty() && (h1 > 0.0 || h2 > 0.0) {
            hinges.intra = true;
        }
        l_i1 += h1 * h1 + h2 * h2;
        if let Some(up) = upstream.as_deref_mut() {
            // d/d r_i of (h1^2 + h2^2) with b_sum = count - a_sum per sample:
            // -2 h1 - 2 h2 for every member sample's ID ratio r_i.
            let d_ratio = -2.0 * h1 - 2.0 * h2;
            if d_ratio != 0.0 {
                for &i in &members_of_class {
                    let s_id = hp.tau1 * sim_class[i][ci];
                    let s_ood = (1.0 - hp.tau1) * sum_sim_ood[i];
                    let m = s_id + s_ood;
                    // dr/dS_id = tau1 * s_ood / m^2
                    let d_sid = d_ratio * hp.tau1 * s_ood / (m * m);
                    let coef = d_sid * sim_class[i][ci] / hp.sigma;
                    add_cos_grad(
                        &mut up.g_class_proto[ci],
                        &batch.images[i],
                        &snap.class_proto[ci],
                        cos_class[i][ci],
                        coef,
                    );
                    // dr/dS_ok = -s_id (1-tau1) / m^2
                    let d_sok = d_ratio * (-s_id) * (1.0 - hp.tau1) / (m * m);
                    for k in 0..members {
                        let coef = d_sok * sim_ood[i][k] / hp.sigma;
                        add_cos_grad(
                            &mut up.g_ood_member[k],
                            &batch.images[i],
                            &snap.ood_traces[k].emb,
                            cos_ood[i][k],
                            coef,
                        );
                    }
                }
            }
        }
    }

    // Inter-class distribution normalization: per sample, hinges on the
    // class-summed ID ratio and its OOD complement, averaged over the batch.
    let mut l_i2 = 0.0;
    for i in 0..batch.len() {
        let mut sum_r = 0.0;
        let mut r = vec![0.0; c];
        let mut mass = vec![0.0; c];
        for ci in 0..c {
            let s_id = hp.tau1 * sim_class[i][ci];
            let m = s_id + (1.0 - hp.tau1) * sum_sim_ood[i];
            r[ci] = s_id / m;
            mass[ci] = m;
            sum_r += r[ci];
        }
        let sum_o = c as f64 - sum_r;
        let h3 = (hp.eps3 - sum_r).max(0.0);
        let h4 = (sum_o - hp.eps4).max(0.0);
        if h3 > 0.0 || h4 > 0.0 {
            hinges.inter = true;
        }
        l_i2 += (h3 * h3 + h4 * h4) * inv_b;
        if let Some(up) = upstream.as_deref_mut() {
            let d_sum_r = (-2.0 * h3 - 2.0 * h4) * inv_b;
            if d_sum_r != 0.0 {
                for ci in 0..c {
                    let m = mass[ci];
                    let s_id = hp.tau1 * sim_class[i][ci];
                    let s_ood = (1.0 - hp.tau1) * sum_sim_ood[i];
                    let d_sid = d_sum_r * hp.tau1 * s_ood / (m * m);
                    let coef = d_sid * sim_class[i][ci] / hp.sigma;
                    add_cos_grad(
                        &mut up.g_class_proto[ci],
                        &batch.images[i],
                        &snap.class_proto[ci],
                        cos_class[i][ci],
                        coef,
                    );
                    let d_sok_common = d_sum_r * (-s_id) * (1.0 - hp.tau1) / (m * m);
                    for k in 0..members {
                        let coef = d_sok_common * sim_ood[i][k] / hp.sigma;
                        add_cos_grad(
                            &mut up.g_ood_member[k],
                            &batch.images[i],
                            &snap.ood_traces[k].emb,
                            cos_ood[i][k],
                            coef,
                        );
                    }
                }
            }
        }
    }

    let l1 = l_c + l_i1 + l_i2;

    // L2: hinge on the OOD-prototype distance exceeding the class
    // prototype distance, per sample.
    let mut l2 = 0.0;
    for i in 0..batch.len() {
        let label = batch.labels[i];
        let e_id = euclid(&batch.images[i], &snap.class_proto[label]);
        let e_ood = euclid(&batch.images[i], &snap.ood_proto);
        let margin = e_ood - e_id;
        if margin < 0.0 {
            hinges.separation = true;
            l2 += -margin * inv_b;
            if let Some(up) = upstream.as_deref_mut() {
                // d e(x, p)/dp = (p - x)/e; skip the measure-zero e = 0 case.
                if e_id > 1e-12 {
                    let coef = inv_b / e_id;
                    for j in 0..snap.d {
                        up.g_class_proto[label][j] += coef
                            * (snap.class_proto[label].values()[j] - batch.images[i].values()[j])
                            * hp.alpha1;
                    }
                }
                if e_ood > 1e-12 {
                    let coef = -inv_b / e_ood;
                    for j in 0..snap.d {
                        up.g_ood_proto[j] += coef
                            * (snap.ood_proto.values()[j] - batch.images[i].values()[j])
                            * hp.alpha1;
                    }
                }
            }
        }
    }

    // L3: weighted alignment between the two OOD family prototypes.
    let mut diff = vec![0.0; snap.d];
    for j in 0..snap.d {
        diff[j] = hp.tau2 * snap.laop_proto.values()[j]
            - (1.0 - hp.tau2) * snap.lfop_proto.values()[j];
    }
    let l3 = dot(&diff, &diff);
    if let Some(up) = upstream.as_deref_mut() {
        for j in 0..snap.d {
            up.g_laop_proto[j] += 2.0 * hp.tau2 * diff[j] * hp.alpha2;
            up.g_lfop_proto[j] += -2.0 * (1.0 - hp.tau2) * diff[j] * hp.alpha2;
        }
    }

    // L4: contrast of each sample's OOD-prototype similarity against its
    // class-prototype similarity.
    let mut l4 = 0.0;
    for i in 0..batch.len() {
        let label = batch.labels[i];
        let cos_op = unit_cos(&batch.images[i], &snap.ood_proto);
        let s_op = sim_from_cos(cos_op, hp.sigma);
        let s_lip = sim_class[i][label];
        let denom = (1.0 - hp.tau3) * s_lip + hp.tau3 * s_op;
        let ratio = hp.tau3 * s_op / denom;
        if !(ratio > 0.0) {
            return Err(AmcnError::DegenerateRatio);
        }
        l4 += -ratio.ln() * inv_b;
        if let Some(up) = upstream.as_deref_mut() {
            let d_sop = (-1.0 / s_op + hp.tau3 / denom) * inv_b * hp.alpha3;
            let coef = d_sop * s_op / hp.sigma;
            add_cos_grad(
                &mut up.g_ood_proto,
                &batch.images[i],
                &snap.ood_proto,
                cos_op,
                coef,
            );
            let d_slip = (1.0 - hp.tau3) / denom * inv_b * hp.alpha3;
            let coef = d_slip * s_lip / hp.sigma;
            add_cos_grad(
                &mut up.g_class_proto[label],
                &batch.images[i],
                &snap.class_proto[label],
                cos_class[i][label],
                coef,
            );
        }
    }

    let total = l1 + hp.alpha1 * l2 + hp.alpha2 * l3 + hp.alpha3 * l4;
    Ok(Forward {
        report: LossReport {
            l_c,
            l_i1,
            l_i2,
            l1,
            l2,
            l3,
            l4,
            total,
        },
        hinges,
    })
}

/// Pull the unit-level upstream gradients back to the trainable tokens.
fn backpropagate(
    batch_up: Upstream,
    snap: &Snapshot,
    bank: &PromptBank,
    enc: &DeskEncoder,
) -> Result<GradientSet> {
    let mut up = batch_up;
    let d = snap.d;
    let members = snap.ood_traces.len();

    // Prototype-of-members layers: normalize(mean(members)).
    let spread = |mean: &[f64], g: &[f64], count: usize| -> Result<Vec<f64>> {
        let v = normalize_jacobian_vp(mean, g)?;
        Ok(v.into_iter().map(|x| x / count as f64).collect())
    };
    if up.g_ood_proto.iter().any(|x| *x != 0.0) {
        let per_member = spread(&snap.ood_proto_mean, &up.g_ood_proto, members)?;
        for k in 0..members {
            for j in 0..d {
                up.g_ood_member[k][j] += per_member[j];
            }
        }
    }
    if up.g_lfop_proto.iter().any(|x| *x != 0.0) {
        let per_member = spread(&snap.lfop_proto_mean, &up.g_lfop_proto, snap.s)?;
        for k in 0..snap.s {
            for j in 0..d {
                up.g_ood_member[k][j] += per_member[j];
            }
        }
    }
    if up.g_laop_proto.iter().any(|x| *x != 0.0) {
        let per_member = spread(&snap.laop_proto_mean, &up.g_laop_proto, snap.z)?;
        for k in 0..snap.z {
            for j in 0..d {
                up.g_ood_member[snap.s + k][j] += per_member[j];
            }
        }
    }

    let mut grads = GradientSet::zeros(bank);

    // Through one encoded prompt: unit output -> pre-norm projection ->
    // mean-pooled tokens.
    let mut encode_back = |trace: &EncodeTrace, g_emb: &[f64], token_ids: &[Option<String>]| {
        let eh = trace.emb.values();
        let proj = dot(g_emb, eh);
        let g_u: Vec<f64> = (0..d)
            .map(|j| (g_emb[j] - proj * eh[j]) / trace.pre_norm)
            .collect();
        let g_mean = enc.back_project(&g_u);
        let per_token: Vec<f64> = g_mean.iter().map(|x| x / trace.n_tokens as f64).collect();
        for id in token_ids.iter().flatten() {
            grads.add(id, &per_token);
        }
    };

    // Class prototypes -> ID prompt embeddings -> prefix tokens.
    let p = snap.p;
    for (ci, g_proto) in up.g_class_proto.iter().enumerate() {
        if g_proto.iter().all(|x| *x == 0.0) {
            continue;
        }
        let per_prompt = spread(&snap.class_proto_mean[ci], g_proto, p)?;
        for pi in 0..p {
            let set_idx = if bank.per_class_prefixes { ci * p + pi } else { pi };
            let mut ids: Vec<Option<String>> = (0..bank.id_prefixes[set_idx].len())
                .map(|ti| Some(format!("id_prefix.{set_idx:03}.{ti:03}")))
                .collect();
            ids.push(None); // fixed class label token
            encode_back(&snap.id_traces[ci][pi], &per_prompt, &ids);
        }
    }

    // OOD member embeddings -> prefix and (for LAOP) label tokens.
    for (k, g_emb) in up.g_ood_member.iter().enumerate() {
        if g_emb.iter().all(|x| *x == 0.0) {
            continue;
        }
        if k < snap.s {
            let mut ids: Vec<Option<String>> = (0..bank.lfop_prefix.len())
                .map(|ti| Some(format!("lfop_prefix.{ti:03}")))
                .collect();
            ids.push(None); // fixed OOD label token
            encode_back(&snap.ood_traces[k], g_emb, &ids);
        } else {
            let zi = k - snap.s;
            let mut ids: Vec<Option<String>> = (0..bank.laop_prefix.len())
                .map(|ti| Some(format!("laop_prefix.{ti:03}")))
                .collect();
            ids.push(Some(format!("laop_label.{zi:03}")));
            encode_back(&snap.ood_traces[k], g_emb, &ids);
        }
    }

    grads.check_finite()?;
    Ok(grads)
}

pub fn loss_classification(
    batch: &Batch,
    bank: &PromptBank,
    enc: &DeskEncoder,
    hp: &HyperParams,
) -> Result<f64> {
    Ok(loss_total(batch, bank, enc, hp)?.l_c)
}

pub fn loss_intra(
    batch: &Batch,
    bank: &PromptBank,
    enc: &DeskEncoder,
    hp: &HyperParams,
) -> Result<f64> {
    Ok(loss_total(batch, bank, enc, hp)?.l_i1)
}

pub fn loss_inter(
    batch: &Batch,
    bank: &PromptBank,
    enc: &DeskEncoder,
    hp: &HyperParams,
) -> Result<f64> {
    Ok(loss_total(batch, bank, enc, hp)?.l_i2)
}

pub fn loss_l1(
    batch: &Batch,
    bank: &PromptBank,
    enc: &DeskEncoder,
    hp: &HyperParams,
) -> Result<f64> {
    Ok(loss_total(batch, bank, enc, hp)?.l1)
}

pub fn loss_separation(
    batch: &Batch,
    bank: &PromptBank,
    enc: &DeskEncoder,
    hp: &HyperParams,
) -> Result<f64> {
    Ok(loss_total(batch, bank, enc, hp)?.l2)
}

pub fn loss_alignment(bank: &PromptBank, enc: &DeskEncoder, hp: &HyperParams) -> Result<f64> {
    let snap = Snapshot::compute(bank, enc)?;
    let mut acc = 0.0;
    for j in 0..snap.d {
        let v = hp.tau2 * snap.laop_proto.values()[j]
            - (1.0 - hp.tau2) * snap.lfop_proto.values()[j];
        acc += v * v;
    }
    Ok(acc)
}

pub fn loss_ood_contrastive(
    batch: &Batch,
    bank: &PromptBank,
    enc: &DeskEncoder,
    hp: &HyperParams,
) -> Result<f64> {
    Ok(loss_total(batch, bank, enc, hp)?.l4)
}

pub fn loss_total(
    batch: &Batch,
    bank: &PromptBank,
    enc: &DeskEncoder,
    hp: &HyperParams,
) -> Result<LossReport> {
    let snap = Snapshot::compute(bank, enc)?;
    Ok(forward_backward(batch, &snap, hp, None)?.report)
}

/// Loss report plus gradients for every trainable token, sharing a single
/// snapshot of the bank.
pub fn loss_and_grad(
    batch: &Batch,
    bank: &PromptBank,
    enc: &DeskEncoder,
    hp: &HyperParams,
) -> Result<(LossReport, GradientSet)> {
    let snap = Snapshot::compute(bank, enc)?;
    let mut up = Upstream::zeros(snap.class_proto.len(), snap.ood_traces.len(), snap.d);
    let fwd = forward_backward(batch, &snap, hp, Some(&mut up))?;
    let grads = backpropagate(up, &snap, bank, enc)?;
    Ok((fwd.report, grads))
}

pub fn grad_total(
    batch: &Batch,
    bank: &PromptBank,
    enc: &DeskEncoder,
    hp: &HyperParams,
) -> Result<GradientSet> {
    Ok(loss_and_grad(batch, bank, enc, hp)?.1)
}

/// Hinge activity of the current state, for verifying that gradient checks
/// cover the kinked loss regions.
pub fn hinge_activity(
    batch: &Batch,
    bank: &PromptBank,
    enc: &DeskEncoder,
    hp: &HyperParams,
) -> Result<HingeActivity> {
    let snap = Snapshot::compute(bank, enc)?;
    Ok(forward_backward(batch, &snap, hp, None)?.hinges)
}

/// Outcome of one finite-difference verification pass.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub max_abs_diff: f64,
    pub num_params: usize,
}

/// Compare the analytic gradient of the total loss against central finite
/// differences of the forward pass, scalar by scalar. The forward pass
/// here is the only shared code; the differentiation routes are disjoint.
pub fn grad_check(
    batch: &Batch,
    bank: &PromptBank,
    enc: &DeskEncoder,
    hp: &HyperParams,
    step: f64,
) -> Result<GradCheckReport> {
    assert!(step > 0.0 && step <= 1e-2, "step must be in (0, 1e-2]");
    let analytic = grad_total(batch, bank, enc, hp)?;
    let mut work = bank.clone();
    let ids = work.trainable_ids();
    let mut max_rel: f64 = 0.0;
    let mut sum_rel = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut count = 0usize;
    for id in &ids {
        let len = analytic.0[id].len();
        for j in 0..len {
            let base = {
                let entries = work.trainable_entries();
                let (_, v) = entries.iter().find(|(i, _)| i == id).unwrap();
                v[j]
            };
            set_param(&mut work, id, j, base + step);
            let plus = loss_total(batch, &work, enc, hp)?.total;
            set_param(&mut work, id, j, base - step);
            let minus = loss_total(batch, &work, enc, hp)?.total;
            set_param(&mut work, id, j, base);
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.0[id][j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
            sum_rel += rel;
            count += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        mean_rel_error: sum_rel / count as f64,
        max_abs_diff: max_abs,
        num_params: count,
    })
}

fn set_param(bank: &mut PromptBank, id: &str, j: usize, value: f64) {
    for (pid, v) in bank.trainable_entries_mut() {
        if pid == id {
            v[j] = value;
            return;
        }
    }
    panic!("unknown parameter id {id}");
}
