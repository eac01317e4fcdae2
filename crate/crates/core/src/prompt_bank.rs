//! Learnable prompt token parameters, the frozen shared desk-scale text
//! encoder, and prototype construction for the ID and OOD prompt families.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::config::HyperParams;
use crate::error::{AmcnError, Result};
use crate::vecmath::{normalize, UnitEmbedding};

/// One token embedding. Fixed tokens carry label semantics and never
/// receive gradient updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenVector {
    pub values: Vec<f64>,
    pub trainable: bool,
}

/// Frozen linear map from token space to the shared embedding space,
/// standing in for the heavyweight text encoder. A single instance is
/// shared by all three prompt families.
#[derive(Debug, Clone, PartialEq)]
pub struct DeskEncoder {
    /// Row-major d_tok x d.
    projection: Vec<f64>,
    d_tok: usize,
    d: usize,
    pub seed: u64,
}

impl DeskEncoder {
    /// Seeded random projection; identical seed yields an identical matrix.
    pub fn new(d_tok: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let scale = 1.0 / (d_tok as f64).sqrt();
        let projection = (0..d_tok * d)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * scale
            })
            .collect();
        Self {
            projection,
            d_tok,
            d,
            seed,
        }
    }

    /// Identity map for tests; requires d_tok == d.
    pub fn identity(d: usize) -> Self {
        let mut projection = vec![0.0; d * d];
        for i in 0..d {
            projection[i * d + i] = 1.0;
        }
        Self {
            projection,
            d_tok: d,
            d,
            seed: 0,
        }
    }

    pub fn d_tok(&self) -> usize {
        self.d_tok
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn from_parts(projection: Vec<f64>, d_tok: usize, d: usize, seed: u64) -> Result<Self> {
        if projection.len() != d_tok * d {
            return Err(AmcnError::DimensionMismatch {
                expected: d_tok * d,
                got: projection.len(),
            });
        }
        Ok(Self {
            projection,
            d_tok,
            d,
            seed,
        })
    }

    /// u = Wᵀ m for a token-space vector m.
    pub fn project(&self, m: &[f64]) -> Vec<f64> {
        debug_assert_eq!(m.len(), self.d_tok);
        let mut u = vec![0.0; self.d];
        for k in 0..self.d_tok {
            let mk = m[k];
            let row = &self.projection[k * self.d..(k + 1) * self.d];
            for j in 0..self.d {
                u[j] += row[j] * mk;
            }
        }
        u
    }

    /// W g for an embedding-space gradient g (adjoint of `project`).
    pub fn back_project(&self, g: &[f64]) -> Vec<f64> {
        debug_assert_eq!(g.len(), self.d);
        let mut out = vec![0.0; self.d_tok];
        for k in 0..self.d_tok {
            let row = &self.projection[k * self.d..(k + 1) * self.d];
            let mut acc = 0.0;
            for j in 0..self.d {
                acc += row[j] * g[j];
            }
            out[k] = acc;
        }
        out
    }
}

/// Which OOD prompt family an embedding came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OodFamily {
    LabelFixed,
    LabelAdaptive,
}

/// Forward-pass record for one encoded prompt, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    pub emb: UnitEmbedding,
    /// Norm of the pre-normalization projection Wᵀ mean(tokens).
    pub pre_norm: f64,
    pub n_tokens: usize,
}

/// Encode a token sequence: mean-pool, frozen linear map, hypersphere
/// projection. Depends only on the tokens and the shared encoder, never on
/// the prompt family.
pub fn encode_prompt(tokens: &[&TokenVector], enc: &DeskEncoder) -> Result<UnitEmbedding> {
    Ok(encode_prompt_trace(tokens, enc)?.emb)
}

pub fn encode_prompt_trace(tokens: &[&TokenVector], enc: &DeskEncoder) -> Result<EncodeTrace> {
    if tokens.is_empty() {
        return Err(AmcnError::EmptyPrompt);
    }
    let n = tokens.len();
    let mut mean = vec![0.0; enc.d_tok()];
    for t in tokens {
        if t.values.len() != enc.d_tok() {
            return Err(AmcnError::DimensionMismatch {
                expected: enc.d_tok(),
                got: t.values.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(&t.values) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let u = enc.project(&mean);
    let pre_norm = crate::vecmath::norm(&u);
    let emb = normalize(&u)?;
    Ok(EncodeTrace {
        emb,
        pre_norm,
        n_tokens: n,
    })
}

/// All learnable prompt parameters plus the fixed label tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    /// Prefix token sets for ID prompts. One set per prompt index when
    /// shared, one set per (class, prompt index) when `per_class_prefixes`.
    pub id_prefixes: Vec<Vec<TokenVector>>,
    pub per_class_prefixes: bool,
    /// Fixed class-name tokens, one per ID class.
    pub class_label_tokens: Vec<TokenVector>,
    pub lfop_prefix: Vec<TokenVector>,
    pub lfop_label_tokens: Vec<TokenVector>,
    pub laop_prefix: Vec<TokenVector>,
    pub laop_label_tokens: Vec<TokenVector>,
    /// ID prompts per class.
    pub num_id_prompts_per_class: usize,
}

impl PromptBank {
    pub fn num_classes(&self) -> usize {
        self.class_label_tokens.len()
    }

    pub fn s(&self) -> usize {
        self.lfop_label_tokens.len()
    }

    pub fn z(&self) -> usize {
        self.laop_label_tokens.len()
    }

    pub fn d_tok(&self) -> usize {
        self.class_label_tokens[0].values.len()
    }

    fn prefix_set_index(&self, class: usize, prompt: usize) -> usize {
        if self.per_class_prefixes {
            class * self.num_id_prompts_per_class + prompt
        } else {
            prompt
        }
    }

    /// Token sequence of the ID prompt `prompt` for `class`.
    pub fn id_prompt_tokens(&self, class: usize, prompt: usize) -> Vec<&TokenVector> {
        let set = &self.id_prefixes[self.prefix_set_index(class, prompt)];
        let mut tokens: Vec<&TokenVector> = set.iter().collect();
        tokens.push(&self.class_label_tokens[class]);
        tokens
    }

    pub fn lfop_tokens(&self, idx: usize) -> Vec<&TokenVector> {
        let mut tokens: Vec<&TokenVector> = self.lfop_prefix.iter().collect();
        tokens.push(&self.lfop_label_tokens[idx]);
        tokens
    }

    pub fn laop_tokens(&self, idx: usize) -> Vec<&TokenVector> {
        let mut tokens: Vec<&TokenVector> = self.laop_prefix.iter().collect();
        tokens.push(&self.laop_label_tokens[idx]);
        tokens
    }

    /// Deterministic census of trainable parameters, in declaration order.
    pub fn trainable_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for (si, set) in self.id_prefixes.iter().enumerate() {
            for ti in 0..set.len() {
                ids.push(format!("id_prefix.{si:03}.{ti:03}"));
            }
        }
        for ti in 0..self.lfop_prefix.len() {
            ids.push(format!("lfop_prefix.{ti:03}"));
        }
        for ti in 0..self.laop_prefix.len() {
            ids.push(format!("laop_prefix.{ti:03}"));
        }
        for zi in 0..self.laop_label_tokens.len() {
            ids.push(format!("laop_label.{zi:03}"));
        }
        ids
    }

    pub fn trainable_entries(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (si, set) in self.id_prefixes.iter().enumerate() {
            for (ti, tok) in set.iter().enumerate() {
                out.push((format!("id_prefix.{si:03}.{ti:03}"), &tok.values));
            }
        }
        for (ti, tok) in self.lfop_prefix.iter().enumerate() {
            out.push((format!("lfop_prefix.{ti:03}"), &tok.values));
        }
        for (ti, tok) in self.laop_prefix.iter().enumerate() {
            out.push((format!("laop_prefix.{ti:03}"), &tok.values));
        }
        for (zi, tok) in self.laop_label_tokens.iter().enumerate() {
            out.push((format!("laop_label.{zi:03}"), &tok.values));
        }
        out
    }

    pub fn trainable_entries_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (si, set) in self.id_prefixes.iter_mut().enumerate() {
            for (ti, tok) in set.iter_mut().enumerate() {
                out.push((format!("id_prefix.{si:03}.{ti:03}"), &mut tok.values));
            }
        }
        for (ti, tok) in self.lfop_prefix.iter_mut().enumerate() {
            out.push((format!("lfop_prefix.{ti:03}"), &mut tok.values));
        }
        for (ti, tok) in self.laop_prefix.iter_mut().enumerate() {
            out.push((format!("laop_prefix.{ti:03}"), &mut tok.values));
        }
        for (zi, tok) in self.laop_label_tokens.iter_mut().enumerate() {
            out.push((format!("laop_label.{zi:03}"), &mut tok.values));
        }
        out
    }
}

/// Prototype of the P ID prompts of one class.
pub fn id_prototype(bank: &PromptBank, enc: &DeskEncoder, class: usize) -> Result<UnitEmbedding> {
    if class >= bank.num_classes() {
        return Err(AmcnError::UnknownClass {
            index: class,
            num_classes: bank.num_classes(),
        });
    }
    let p = bank.num_id_prompts_per_class;
    let mut mean = vec![0.0; enc.d()];
    for prompt in 0..p {
        let e = encode_prompt(&bank.id_prompt_tokens(class, prompt), enc)?;
        for (m, v) in mean.iter_mut().zip(e.values()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= p as f64;
    }
    normalize(&mean)
}

/// All S + Z OOD prompt embeddings, label-fixed first.
pub fn ood_prompt_set(
    bank: &PromptBank,
    enc: &DeskEncoder,
) -> Result<Vec<(OodFamily, UnitEmbedding)>> {
    let mut out = Vec::with_capacity(bank.s() + bank.z());
    for i in 0..bank.s() {
        out.push((OodFamily::LabelFixed, encode_prompt(&bank.lfop_tokens(i), enc)?));
    }
    for i in 0..bank.z() {
        out.push((
            OodFamily::LabelAdaptive,
            encode_prompt(&bank.laop_tokens(i), enc)?,
        ));
    }
    Ok(out)
}

fn normalized_mean(embs: &[UnitEmbedding], d: usize) -> Result<UnitEmbedding> {
    let mut mean = vec![0.0; d];
    for e in embs {
        for (m, v) in mean.iter_mut().zip(e.values()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= embs.len() as f64;
    }
    normalize(&mean)
}

/// Equal-weight prototype over all S + Z OOD prompt embeddings.
pub fn ood_prototype(bank: &PromptBank, enc: &DeskEncoder) -> Result<UnitEmbedding> {
    let set = ood_prompt_set(bank, enc)?;
    let embs: Vec<UnitEmbedding> = set.into_iter().map(|(_, e)| e).collect();
    normalized_mean(&embs, enc.d())
}

/// Per-family prototypes, (label-fixed, label-adaptive).
pub fn family_prototypes(
    bank: &PromptBank,
    enc: &DeskEncoder,
) -> Result<(UnitEmbedding, UnitEmbedding)> {
    let set = ood_prompt_set(bank, enc)?;
    let lfop: Vec<UnitEmbedding> = set
        .iter()
        .filter(|(f, _)| *f == OodFamily::LabelFixed)
        .map(|(_, e)| e.clone())
        .collect();
    let laop: Vec<UnitEmbedding> = set
        .iter()
        .filter(|(f, _)| *f == OodFamily::LabelAdaptive)
        .map(|(_, e)| e.clone())
        .collect();
    Ok((normalized_mean(&lfop, enc.d())?, normalized_mean(&laop, enc.d())?))
}

/// Deterministic name-to-token map: hash the name with the run seed, use
/// the digest to seed a PRNG, draw a unit gaussian direction.
fn name_token(name: &str, seed: u64, d_tok: usize, trainable: bool) -> TokenVector {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha20Rng::from_seed(key);
    let raw: Vec<f64> = (0..d_tok).map(|_| StandardNormal.sample(&mut rng)).collect();
    let unit = normalize(&raw).expect("gaussian draw is nonzero");
    TokenVector {
        values: unit.into_vec(),
        trainable,
    }
}

fn random_prefix(rng: &mut ChaCha20Rng, n: usize, d_tok: usize) -> Vec<TokenVector> {
    (0..n)
        .map(|_| TokenVector {
            values: (0..d_tok)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(rng);
                    0.02 * g
                })
                .collect(),
            trainable: true,
        })
        .collect()
}

/// Build a bank from class and OOD label names. Fixed label tokens come
/// from the seeded name hash; trainable prefixes start near zero; the
/// label-adaptive OOD labels start equal to the first Z OOD name tokens.
pub fn init_bank(
    hp: &HyperParams,
    seed: u64,
    class_names: &[String],
    ood_names: &[String],
    d_tok: usize,
    per_class_prefixes: bool,
) -> Result<PromptBank> {
    hp.validate()?;
    if class_names.len() < 2 {
        return Err(AmcnError::InvalidConfig("need at least 2 ID classes".into()));
    }
    if ood_names.len() < hp.s {
        return Err(AmcnError::InvalidConfig(format!(
            "need at least S = {} OOD names, got {}",
            hp.s,
            ood_names.len()
        )));
    }
    for name in ood_names {
        if class_names.contains(name) {
            return Err(AmcnError::NameCollision(name.clone()));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let num_sets = if per_class_prefixes {
        class_names.len() * hp.p
    } else {
        hp.p
    };
    let id_prefixes = (0..num_sets)
        .map(|_| random_prefix(&mut rng, hp.n_ip, d_tok))
        .collect();
    let lfop_prefix = random_prefix(&mut rng, hp.n_lfop, d_tok);
    let laop_prefix = random_prefix(&mut rng, hp.n_laop, d_tok);
    let class_label_tokens = class_names
        .iter()
        .map(|n| name_token(n, seed, d_tok, false))
        .collect();
    let lfop_label_tokens: Vec<TokenVector> = ood_names[..hp.s]
        .iter()
        .map(|n| name_token(n, seed, d_tok, false))
        .collect();
    let laop_label_tokens = (0..hp.z)
        .map(|i| {
            let name = &ood_names[i % ood_names.len()];
            let mut tok = name_token(name, seed, d_tok, true);
            tok.trainable = true;
            tok
        })
        .collect();
    Ok(PromptBank {
        id_prefixes,
        per_class_prefixes,
        class_label_tokens,
        lfop_prefix,
        lfop_label_tokens,
        laop_prefix,
        laop_label_tokens,
        num_id_prompts_per_class: hp.p,
    })
}

/// Default synthetic label names when a config supplies none.
pub fn default_names(prefix: &str, count: usize) -> Vec<String> {
    (0..count).map(|i| format!("{prefix}_{i}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecmath::cosine;

    fn small_hp() -> HyperParams {
        HyperParams {
            p: 2,
            s: 3,
            z: 3,
            n_ip: 4,
            n_lfop: 4,
            n_laop: 4,
            ..HyperParams::default()
        }
    }

    fn small_bank() -> (PromptBank, DeskEncoder) {
        let hp = small_hp();
        let classes = default_names("class", 3);
        let oods = default_names("ood", 4);
        let bank = init_bank(&hp, 11, &classes, &oods, 8, false).unwrap();
        let enc = DeskEncoder::new(8, 4, 11);
        (bank, enc)
    }

    #[test]
    fn encode_identity_projection() {
        let enc = DeskEncoder::identity(4);
        let tok = TokenVector {
            values: vec![3.0, 4.0, 0.0, 0.0],
            trainable: false,
        };
        let e = encode_prompt(&[&tok], &enc).unwrap();
        assert_eq!(e.values(), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn encode_is_family_agnostic() {
        let (bank, enc) = small_bank();
        // Same token sequence through nominally different call paths.
        let a = encode_prompt(&bank.lfop_tokens(0), &enc).unwrap();
        let b = encode_prompt(&bank.lfop_tokens(0), &enc).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn encode_matches_scalar_oracle() {
        let enc = DeskEncoder::new(8, 4, 42);
        let t1 = TokenVector {
            values: (0..8).map(|i| 0.1 * i as f64 - 0.3).collect(),
            trainable: true,
        };
        let t2 = TokenVector {
            values: (0..8).map(|i| (i as f64).sin()).collect(),
            trainable: false,
        };
        let e = encode_prompt(&[&t1, &t2], &enc).unwrap();
        // Scalar-by-scalar recomputation of normalize(Wᵀ·mean).
        let mean: Vec<f64> = (0..8)
            .map(|k| (t1.values[k] + t2.values[k]) / 2.0)
            .collect();
        let mut u = vec![0.0; 4];
        for j in 0..4 {
            for k in 0..8 {
                u[j] += enc.projection()[k * 4 + j] * mean[k];
            }
        }
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        for j in 0..4 {
            assert!((e.values()[j] - u[j] / n).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_prompt_rejected() {
        let enc = DeskEncoder::identity(3);
        assert!(matches!(encode_prompt(&[], &enc), Err(AmcnError::EmptyPrompt)));
    }

    #[test]
    fn id_prototype_single_prompt() {
        let hp = HyperParams {
            p: 1,
            s: 2,
            z: 2,
            n_ip: 3,
            n_lfop: 3,
            n_laop: 3,
            ..HyperParams::default()
        };
        let bank = init_bank(
            &hp,
            5,
            &default_names("class", 2),
            &default_names("ood", 2),
            6,
            false,
        )
        .unwrap();
        let enc = DeskEncoder::new(6, 4, 5);
        let proto = id_prototype(&bank, &enc, 0).unwrap();
        let single = encode_prompt(&bank.id_prompt_tokens(0, 0), &enc).unwrap();
        assert_eq!(proto.values(), single.values());
    }

    #[test]
    fn id_prototype_unknown_class() {
        let (bank, enc) = small_bank();
        assert!(matches!(
            id_prototype(&bank, &enc, 99),
            Err(AmcnError::UnknownClass { .. })
        ));
    }

    #[test]
    fn ood_set_size_and_determinism() {
        let (bank, enc) = small_bank();
        let set = ood_prompt_set(&bank, &enc).unwrap();
        assert_eq!(set.len(), bank.s() + bank.z());
        assert_eq!(
            set.iter().filter(|(f, _)| *f == OodFamily::LabelFixed).count(),
            bank.s()
        );
        let set2 = ood_prompt_set(&bank, &enc).unwrap();
        for ((f1, e1), (f2, e2)) in set.iter().zip(set2.iter()) {
            assert_eq!(f1, f2);
            assert_eq!(e1.values(), e2.values());
        }
    }

    #[test]
    fn ood_prototype_matches_brute_force() {
        let (bank, enc) = small_bank();
        let proto = ood_prototype(&bank, &enc).unwrap();
        let set = ood_prompt_set(&bank, &enc).unwrap();
        let d = enc.d();
        let mut mean = vec![0.0; d];
        for (_, e) in &set {
            for j in 0..d {
                mean[j] += e.values()[j];
            }
        }
        for m in mean.iter_mut() {
            *m /= set.len() as f64;
        }
        let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        for j in 0..d {
            assert!((proto.values()[j] - mean[j] / n).abs() <= 1e-12);
        }
    }

    #[test]
    fn family_prototypes_match_brute_force() {
        let (bank, enc) = small_bank();
        let (lfop, laop) = family_prototypes(&bank, &enc).unwrap();
        let set = ood_prompt_set(&bank, &enc).unwrap();
        for (family, proto) in [(OodFamily::LabelFixed, &lfop), (OodFamily::LabelAdaptive, &laop)] {
            let members: Vec<&UnitEmbedding> = set
                .iter()
                .filter(|(f, _)| *f == family)
                .map(|(_, e)| e)
                .collect();
            let d = enc.d();
            let mut mean = vec![0.0; d];
            for e in &members {
                for j in 0..d {
                    mean[j] += e.values()[j];
                }
            }
            let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            for j in 0..d {
                assert!((proto.values()[j] - mean[j] / n).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let hp = small_hp();
        let classes = default_names("class", 3);
        let oods = default_names("ood", 4);
        let a = init_bank(&hp, 7, &classes, &oods, 8, false).unwrap();
        let b = init_bank(&hp, 7, &classes, &oods, 8, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_rejects_name_collision() {
        let hp = small_hp();
        let classes = default_names("class", 3);
        let mut oods = default_names("ood", 4);
        oods[1] = "class_2".into();
        assert!(matches!(
            init_bank(&hp, 7, &classes, &oods, 8, false),
            Err(AmcnError::NameCollision(_))
        ));
    }

    #[test]
    fn laop_labels_start_from_lfop_labels() {
        let hp = HyperParams {
            s: 3,
            z: 3,
            ..small_hp()
        };
        let bank = init_bank(
            &hp,
            7,
            &default_names("class", 2),
            &default_names("ood", 3),
            8,
            false,
        )
        .unwrap();
        for (laop, lfop) in bank.laop_label_tokens.iter().zip(&bank.lfop_label_tokens) {
            assert_eq!(laop.values, lfop.values);
            assert!(laop.trainable);
            assert!(!lfop.trainable);
        }
    }

    #[test]
    fn all_outputs_unit_norm() {
        let (bank, enc) = small_bank();
        let mut embs = vec![ood_prototype(&bank, &enc).unwrap()];
        let (a, b) = family_prototypes(&bank, &enc).unwrap();
        embs.push(a);
        embs.push(b);
        for c in 0..bank.num_classes() {
            embs.push(id_prototype(&bank, &enc, c).unwrap());
        }
        for (_, e) in ood_prompt_set(&bank, &enc).unwrap() {
            embs.push(e);
        }
        for e in embs {
            let n: f64 = e.values().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn per_class_prefixes_give_distinct_sets() {
        let hp = small_hp();
        let classes = default_names("class", 3);
        let oods = default_names("ood", 4);
        let bank = init_bank(&hp, 7, &classes, &oods, 8, true).unwrap();
        assert_eq!(bank.id_prefixes.len(), 3 * hp.p);
        let enc = DeskEncoder::new(8, 4, 7);
        let p0 = id_prototype(&bank, &enc, 0).unwrap();
        let p1 = id_prototype(&bank, &enc, 1).unwrap();
        assert!(cosine(p0.values(), p1.values()).unwrap() < 1.0);
    }
}
