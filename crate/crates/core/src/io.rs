//! Binary file formats (embeddings, bank checkpoints, class statistics),
//! CSV ingestion, and the JSON run report.
//!
//! All binary payloads are little-endian. Every reader validates magic and
//! size arithmetic before allocating.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distribution::ClassStats;
use crate::error::{AmcnError, Result};
use crate::losses::LossReport;
use crate::prompt_bank::{DeskEncoder, PromptBank, TokenVector};
use crate::synth::SampleSet;

pub const EMB_MAGIC: &[u8; 8] = b"AMCNEMB1";
pub const BANK_MAGIC: &[u8; 8] = b"AMCNBNK1";
pub const STATS_MAGIC: &[u8; 8] = b"AMCNSTA1";
const EMB_VERSION: u32 = 1;

/// In-memory image of one embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: u32,
    pub has_labels: bool,
    pub labels: Vec<i32>,
    /// count x dim, row-major.
    pub rows: Vec<f32>,
}

impl EmbeddingFile {
    pub fn count(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.rows.len() / self.dim as usize
        }
    }

    /// Upcast to the f64 sample set used by training, renormalizing each
    /// row onto the hypersphere to absorb the f32 quantization.
    pub fn to_sample_set(&self, num_classes: Option<usize>) -> Result<SampleSet> {
        let dim = self.dim as usize;
        let mut embeddings = Vec::with_capacity(self.count());
        for r in 0..self.count() {
            let row: Vec<f64> = self.rows[r * dim..(r + 1) * dim]
                .iter()
                .map(|&x| x as f64)
                .collect();
            embeddings.push(crate::vecmath::normalize(&row)?);
        }
        let mut labels = Vec::new();
        if self.has_labels {
            for &l in &self.labels {
                if l < 0 {
                    return Err(AmcnError::LabelOutOfRange {
                        label: l as i64,
                        max: num_classes.unwrap_or(0),
                    });
                }
                if let Some(c) = num_classes {
                    if l as usize >= c {
                        return Err(AmcnError::LabelOutOfRange {
                            label: l as i64,
                            max: c,
                        });
                    }
                }
                labels.push(l as usize);
            }
        }
        Ok(SampleSet {
            dim,
            embeddings,
            labels,
        })
    }

    pub fn from_sample_set(set: &SampleSet, with_labels: bool) -> Self {
        let mut rows = Vec::with_capacity(set.embeddings.len() * set.dim);
        for e in &set.embeddings {
            rows.extend(e.values().iter().map(|&x| x as f32));
        }
        Self {
            dim: set.dim as u32,
            has_labels: with_labels,
            labels: if with_labels {
                set.labels.iter().map(|&l| l as i32).collect()
            } else {
                Vec::new()
            },
            rows,
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(AmcnError::TruncatedFile(format!(
                "{}: need {} bytes at offset {}, have {}",
                self.path,
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let found = self.take(8)?;
        if found != expected {
            return Err(AmcnError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(AmcnError::TruncatedFile(format!(
                "{}: {} trailing bytes",
                self.path,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Write bytes atomically: temp file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_embeddings(file: &EmbeddingFile, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&EMB_VERSION.to_le_bytes());
    out.extend_from_slice(&file.dim.to_le_bytes());
    out.extend_from_slice(&(file.count() as u64).to_le_bytes());
    out.push(file.has_labels as u8);
    if file.has_labels {
        for l in &file.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    for x in &file.rows {
        out.extend_from_slice(&x.to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let buf = fs::read(path)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: path.display().to_string(),
    };
    r.magic(EMB_MAGIC)?;
    let version = r.u32()?;
    if version != EMB_VERSION {
        return Err(AmcnError::InvalidConfig(format!(
            "unsupported embedding file version {version}"
        )));
    }
    let dim = r.u32()?;
    let count = r.u64()? as usize;
    let has_labels = match r.u8()? {
        0 => false,
        1 => true,
        other => {
            return Err(AmcnError::InvalidConfig(format!(
                "has_labels byte must be 0 or 1, got {other}"
            )))
        }
    };
    if dim == 0 {
        return Err(AmcnError::DimensionMismatch {
            expected: 1,
            got: 0,
        });
    }
    // Validate total size before allocating row storage.
    let expected = count
        .checked_mul(if has_labels { 4 } else { 0 })
        .and_then(|l| count.checked_mul(dim as usize * 4).map(|r| l + r))
        .ok_or_else(|| AmcnError::TruncatedFile("size overflow".into()))?;
    if buf.len() - r.pos != expected {
        return Err(AmcnError::TruncatedFile(format!(
            "{}: payload is {} bytes, header implies {expected}",
            path.display(),
            buf.len() - r.pos
        )));
    }
    let mut labels = Vec::new();
    if has_labels {
        for _ in 0..count {
            let bytes = r.take(4)?;
            labels.push(i32::from_le_bytes(bytes.try_into().unwrap()));
        }
    }
    let bytes = r.take(count * dim as usize * 4)?;
    let rows: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    r.done()?;
    Ok(EmbeddingFile {
        dim,
        has_labels,
        labels,
        rows,
    })
}

/// Human-editable alternative: one sample per line, optional integer label
/// as the first column, then `dim` reals, comma-separated.
pub fn read_embeddings_csv(path: &Path, has_labels: bool) -> Result<EmbeddingFile> {
    let text = fs::read_to_string(path)?;
    let mut dim: Option<usize> = None;
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        if has_labels {
            let field = fields.next().ok_or_else(|| {
                AmcnError::InvalidConfig(format!("line {}: missing label", lineno + 1))
            })?;
            let label: i32 = field.parse().map_err(|_| {
                AmcnError::InvalidConfig(format!("line {}: bad label {field:?}", lineno + 1))
            })?;
            labels.push(label);
        }
        let values: Vec<f32> = fields
            .map(|f| {
                f.parse::<f32>().map_err(|_| {
                    AmcnError::InvalidConfig(format!("line {}: bad value {f:?}", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(AmcnError::DimensionMismatch {
                    expected: d,
                    got: values.len(),
                })
            }
            _ => {}
        }
        rows.extend(values);
    }
    let dim = dim.ok_or_else(|| AmcnError::InvalidConfig("empty CSV".into()))? as u32;
    Ok(EmbeddingFile {
        dim,
        has_labels,
        labels,
        rows,
    })
}

fn push_tokens(out: &mut Vec<u8>, tokens: &[TokenVector]) {
    for t in tokens {
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serialize the bank and its shared encoder: magic, nine u32 dims, then
/// every token matrix and the encoder projection as f64, in declaration
/// order.
pub fn write_bank(bank: &PromptBank, enc: &DeskEncoder, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(BANK_MAGIC);
    let dims: [u32; 9] = [
        bank.num_classes() as u32,
        bank.num_id_prompts_per_class as u32,
        bank.s() as u32,
        bank.z() as u32,
        bank.id_prefixes[0].len() as u32,
        bank.lfop_prefix.len() as u32,
        bank.laop_prefix.len() as u32,
        bank.d_tok() as u32,
        enc.d() as u32,
    ];
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for set in &bank.id_prefixes {
        push_tokens(&mut out, set);
    }
    push_tokens(&mut out, &bank.class_label_tokens);
    push_tokens(&mut out, &bank.lfop_prefix);
    push_tokens(&mut out, &bank.lfop_label_tokens);
    push_tokens(&mut out, &bank.laop_prefix);
    push_tokens(&mut out, &bank.laop_label_tokens);
    for v in enc.projection() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &out)
}

fn read_tokens(r: &mut Reader, count: usize, d_tok: usize, trainable: bool) -> Result<Vec<TokenVector>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(TokenVector {
            values: r.f64_vec(d_tok)?,
            trainable,
        });
    }
    Ok(out)
}

/// Read a bank checkpoint. Whether the ID prefixes were shared or
/// per-class is recovered from the payload size (the two layouts differ in
/// length for any valid C >= 2).
pub fn read_bank(path: &Path) -> Result<(PromptBank, DeskEncoder)> {
    let buf = fs::read(path)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: path.display().to_string(),
    };
    r.magic(BANK_MAGIC)?;
    let mut dims = [0usize; 9];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let [c, p, s, z, n_ip, n_lfop, n_laop, d_tok, d] = dims;
    let fixed = (c + s) * d_tok + (n_lfop + n_laop + z) * d_tok + d_tok * d;
    let shared = (fixed + p * n_ip * d_tok) * 8;
    let per_class = (fixed + c * p * n_ip * d_tok) * 8;
    let remaining = buf.len() - r.pos;
    let per_class_prefixes = if remaining == shared {
        false
    } else if remaining == per_class {
        true
    } else {
        return Err(AmcnError::TruncatedFile(format!(
            "{}: payload is {remaining} bytes, expected {shared} (shared) or {per_class} (per-class)",
            path.display()
        )));
    };
    let num_sets = if per_class_prefixes { c * p } else { p };
    let mut id_prefixes = Vec::with_capacity(num_sets);
    for _ in 0..num_sets {
        id_prefixes.push(read_tokens(&mut r, n_ip, d_tok, true)?);
    }
    let class_label_tokens = read_tokens(&mut r, c, d_tok, false)?;
    let lfop_prefix = read_tokens(&mut r, n_lfop, d_tok, true)?;
    let lfop_label_tokens = read_tokens(&mut r, s, d_tok, false)?;
    let laop_prefix = read_tokens(&mut r, n_laop, d_tok, true)?;
    let laop_label_tokens = read_tokens(&mut r, z, d_tok, true)?;
    let projection = r.f64_vec(d_tok * d)?;
    r.done()?;
    let bank = PromptBank {
        id_prefixes,
        per_class_prefixes,
        class_label_tokens,
        lfop_prefix,
        lfop_label_tokens,
        laop_prefix,
        laop_label_tokens,
        num_id_prompts_per_class: p,
    };
    let enc = DeskEncoder::from_parts(projection, d_tok, d, 0)?;
    Ok((bank, enc))
}

pub fn write_stats(stats: &[ClassStats], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(STATS_MAGIC);
    out.extend_from_slice(&(stats.len() as u32).to_le_bytes());
    for s in stats {
        for v in [s.mu, s.sd, s.p_score, s.m_pse] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&s.ood_count.to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn read_stats(path: &Path) -> Result<Vec<ClassStats>> {
    let buf = fs::read(path)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: path.display().to_string(),
    };
    r.magic(STATS_MAGIC)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(ClassStats {
            mu: r.f64()?,
            sd: r.f64()?,
            p_score: r.f64()?,
            m_pse: r.f64()?,
            ood_count: r.u64()?,
        });
    }
    r.done()?;
    Ok(out)
}

/// Final evaluation metrics; detection metrics are absent when no OOD
/// test data was supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auroc: Option<f64>,
    pub fpr95: Option<f64>,
    pub id_accuracy: f64,
}

/// Serialized record of one experimental run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub epochs: Vec<LossReport>,
    pub metrics: Option<Metrics>,
    pub per_class_stats: Vec<ClassStats>,
    /// Worst hypersphere deviation observed across all epochs.
    pub max_unit_norm_error: f64,
}

pub fn write_report(report: &RunReport, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(report)?;
    write_atomic(path, &json)
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
