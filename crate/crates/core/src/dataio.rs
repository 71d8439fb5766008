//! On-disk formats: embedding archives, trial lists, score files and
//! serialized models.
//!
//! Binary archive layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "NPLDAEMB"
//! version    u32      1
//! dimension  u64
//! count      u64
//! encoding   u8       1 = f64 IEEE-754 LE
//! record*    id_len u32, id bytes, spk_len u32, spk bytes (0 = none),
//!            gender u8 (0 unknown, 1 male, 2 female), dimension x f64
//! ```
//!
//! The text archive is one record per line, `id speaker gender v1 .. vd`,
//! with `-` standing for a missing speaker. Readers sniff the magic string
//! to pick the format.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"NPLDAEMB";
pub const ARCHIVE_VERSION: u32 = 1;
pub const MODEL_MAGIC: &[u8; 8] = b"NPLDAMDL";
pub const MODEL_VERSION: u32 = 1;
const ENCODING_F64_LE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

impl Gender {
    fn to_byte(self) -> u8 {
        match self {
            Gender::Unknown => 0,
            Gender::Male => 1,
            Gender::Female => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Gender::Unknown),
            1 => Some(Gender::Male),
            2 => Some(Gender::Female),
            _ => None,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::Male => "m",
            Gender::Female => "f",
            Gender::Unknown => "u",
        })
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "m" | "male" => Ok(Gender::Male),
            "f" | "female" => Ok(Gender::Female),
            "u" | "unknown" => Ok(Gender::Unknown),
            other => Err(format!("unknown gender {other:?}")),
        }
    }
}

/// One embedding with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub segment_id: String,
    pub speaker_id: Option<String>,
    pub gender: Gender,
    pub vector: DVector<f64>,
}

/// A validated collection of embeddings sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingArchive {
    dimension: usize,
    records: Vec<Embedding>,
    index: HashMap<String, usize>,
}

impl EmbeddingArchive {
    /// Builds an archive, checking dimension, id uniqueness and finiteness.
    /// Record numbers in errors are 1-based.
    pub fn new(dimension: usize, records: Vec<Embedding>) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::MalformedHeader("dimension must be positive".into()));
        }
        let mut index = HashMap::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            let record = i + 1;
            if rec.vector.len() != dimension {
                return Err(Error::DimensionMismatch {
                    record,
                    id: rec.segment_id.clone(),
                    expected: dimension,
                    found: rec.vector.len(),
                });
            }
            if let Some(position) = rec.vector.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    record,
                    id: rec.segment_id.clone(),
                    position,
                });
            }
            if index.insert(rec.segment_id.clone(), i).is_some() {
                return Err(Error::DuplicateSegment {
                    record,
                    id: rec.segment_id.clone(),
                });
            }
        }
        Ok(Self {
            dimension,
            records,
            index,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Embedding] {
        &self.records
    }

    pub fn get(&self, segment_id: &str) -> Option<&Embedding> {
        self.index.get(segment_id).map(|&i| &self.records[i])
    }

    pub fn position(&self, segment_id: &str) -> Option<usize> {
        self.index.get(segment_id).copied()
    }

    /// Record indices grouped by speaker, in order of first appearance.
    /// Records without a speaker id are skipped.
    pub fn speaker_groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<(String, Vec<usize>)> = Vec::new();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        for (i, rec) in self.records.iter().enumerate() {
            let Some(spk) = rec.speaker_id.as_deref() else {
                continue;
            };
            match slot.get(spk) {
                Some(&s) => order[s].1.push(i),
                None => {
                    slot.insert(spk, order.len());
                    order.push((spk.to_string(), vec![i]));
                }
            }
        }
        order
    }

    /// Records as rows of an `n x d` matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.records.len();
        DMatrix::from_fn(n, self.dimension, |i, j| self.records[i].vector[j])
    }

    /// New archive with every vector replaced by `f(vector)`. All outputs
    /// must share one dimension.
    pub fn map_vectors<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    {
        let mut dim = None;
        let mut records = Vec::with_capacity(self.records.len());
        for rec in &self.records {
            let v = f(&rec.vector)?;
            dim.get_or_insert(v.len());
            records.push(Embedding {
                vector: v,
                ..rec.clone()
            });
        }
        Self::new(dim.unwrap_or(self.dimension), records)
    }
}

/// Reads a binary or text archive, sniffing the magic string.
pub fn load_archive(path: impl AsRef<Path>) -> Result<EmbeddingArchive> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_archive(&bytes)
}

pub fn parse_archive(bytes: &[u8]) -> Result<EmbeddingArchive> {
    if bytes.starts_with(ARCHIVE_MAGIC) {
        parse_binary_archive(bytes)
    } else {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| Error::MalformedHeader("neither binary magic nor utf-8 text".into()))?;
        parse_text_archive(text)
    }
}

fn parse_binary_archive(bytes: &[u8]) -> Result<EmbeddingArchive> {
    let mut r = ByteReader::new(bytes);
    r.take(ARCHIVE_MAGIC.len())?;
    let header = |e: Error| Error::MalformedHeader(e.to_string());
    let version = r.u32().map_err(header)?;
    if version != ARCHIVE_VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported archive version {version}"
        )));
    }
    let dimension = r.u64().map_err(header)? as usize;
    let count = r.u64().map_err(header)? as usize;
    let encoding = r.u8().map_err(header)?;
    if encoding != ENCODING_F64_LE {
        return Err(Error::MalformedHeader(format!(
            "unsupported value encoding {encoding}"
        )));
    }
    if dimension == 0 {
        return Err(Error::MalformedHeader("dimension must be positive".into()));
    }
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let segment_id = r.string()?;
        let speaker = r.string()?;
        let gender_byte = r.u8()?;
        let gender = Gender::from_byte(gender_byte).ok_or_else(|| {
            Error::Format(format!(
                "record {segment_id}: bad gender byte {gender_byte}"
            ))
        })?;
        let vector = DVector::from_vec(r.f64_vec(dimension)?);
        records.push(Embedding {
            segment_id,
            speaker_id: (!speaker.is_empty()).then_some(speaker),
            gender,
            vector,
        });
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    EmbeddingArchive::new(dimension, records)
}

fn parse_text_archive(text: &str) -> Result<EmbeddingArchive> {
    let mut records = Vec::new();
    let mut dimension = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let record = records.len() + 1;
        let mut tok = line.split_whitespace();
        let (Some(id), Some(spk), Some(gender)) = (tok.next(), tok.next(), tok.next()) else {
            return Err(Error::Parse {
                line: lineno + 1,
                message: "expected `id speaker gender v1 .. vd`".into(),
            });
        };
        let gender: Gender = gender.parse().map_err(|message| Error::Parse {
            line: lineno + 1,
            message,
        })?;
        let values = tok
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    message: format!("bad value {t:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let expected = *dimension.get_or_insert(values.len());
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                record,
                id: id.to_string(),
                expected,
                found: values.len(),
            });
        }
        records.push(Embedding {
            segment_id: id.to_string(),
            speaker_id: (spk != "-").then(|| spk.to_string()),
            gender,
            vector: DVector::from_vec(values),
        });
    }
    let dimension =
        dimension.ok_or_else(|| Error::MalformedHeader("text archive has no records".into()))?;
    EmbeddingArchive::new(dimension, records)
}

pub fn encode_archive(archive: &EmbeddingArchive) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(ARCHIVE_MAGIC);
    w.u32(ARCHIVE_VERSION);
    w.u64(archive.dimension as u64);
    w.u64(archive.records.len() as u64);
    w.u8(ENCODING_F64_LE);
    for rec in &archive.records {
        w.string(&rec.segment_id);
        w.string(rec.speaker_id.as_deref().unwrap_or(""));
        w.u8(rec.gender.to_byte());
        for &v in rec.vector.iter() {
            w.f64(v);
        }
    }
    w.into_inner()
}

pub fn write_archive(archive: &EmbeddingArchive, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_archive(archive)).map_err(|e| Error::io(path, e))
}

/// Text rendering; values use Rust's shortest round-trip float formatting so
/// reloading is exact.
pub fn write_text_archive(archive: &EmbeddingArchive, path: impl AsRef<Path>) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    for rec in &archive.records {
        let _ = write!(
            out,
            "{} {} {}",
            rec.segment_id,
            rec.speaker_id.as_deref().unwrap_or("-"),
            rec.gender
        );
        for v in rec.vector.iter() {
            let _ = write!(out, " {v:?}");
        }
        out.push('\n');
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrialLabel {
    Target,
    Nontarget,
    Unlabeled,
}

impl TrialLabel {
    /// 1 for target, 0 for nontarget.
    pub fn as_binary(self) -> Option<u8> {
        match self {
            TrialLabel::Target => Some(1),
            TrialLabel::Nontarget => Some(0),
            TrialLabel::Unlabeled => None,
        }
    }
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
            TrialLabel::Unlabeled => "unlabeled",
        })
    }
}

impl FromStr for TrialLabel {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "target" => Ok(TrialLabel::Target),
            "nontarget" => Ok(TrialLabel::Nontarget),
            "unlabeled" => Ok(TrialLabel::Unlabeled),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub label: TrialLabel,
}

impl Trial {
    pub fn new(
        enroll_id: impl Into<String>,
        test_id: impl Into<String>,
        label: TrialLabel,
    ) -> Self {
        Self {
            enroll_id: enroll_id.into(),
            test_id: test_id.into(),
            label,
        }
    }
}

pub fn parse_trials(text: &str, archive: Option<&EmbeddingArchive>) -> Result<Vec<Trial>> {
    let mut trials = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() || tokens[0].starts_with('#') {
            continue;
        }
        if tokens.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "expected `enroll_id test_id label`, got {} fields",
                    tokens.len()
                ),
            });
        }
        let label = tokens[2].parse().map_err(|_| Error::BadLabel {
            line: line_no,
            token: tokens[2].to_string(),
        })?;
        if let Some(archive) = archive {
            for id in &tokens[..2] {
                if archive.get(id).is_none() {
                    return Err(Error::UnknownId {
                        line: line_no,
                        id: id.to_string(),
                    });
                }
            }
        }
        trials.push(Trial::new(tokens[0], tokens[1], label));
    }
    Ok(trials)
}

/// Loads a trial list and resolves every id against `archive`.
pub fn load_trials(path: impl AsRef<Path>, archive: &EmbeddingArchive) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trials(&text, Some(archive))
}

pub fn write_trials(trials: &[Trial], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for t in trials {
        out.push_str(&format!("{} {} {}\n", t.enroll_id, t.test_id, t.label));
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub enroll_id: String,
    pub test_id: String,
    pub score: f64,
    pub label: Option<TrialLabel>,
}

/// `enroll_id test_id score [label]`, score at 6 decimal places. The label
/// column is written only for labeled trials.
pub fn format_scores(records: &[ScoreRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!("{} {} {:.6}", r.enroll_id, r.test_id, r.score));
        match r.label {
            Some(l @ (TrialLabel::Target | TrialLabel::Nontarget)) => {
                out.push(' ');
                out.push_str(&l.to_string());
            }
            _ => {}
        }
        out.push('\n');
    }
    out
}

pub fn write_scores(records: &[ScoreRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_scores(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if !(3..=4).contains(&tokens.len()) {
            return Err(Error::Parse {
                line: lineno + 1,
                message: "expected `enroll_id test_id score [label]`".into(),
            });
        }
        let score: f64 = tokens[2].parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            message: format!("bad score {:?}", tokens[2]),
        })?;
        if !score.is_finite() {
            return Err(Error::Parse {
                line: lineno + 1,
                message: "non-finite score".into(),
            });
        }
        let label = match tokens.get(3) {
            Some(tok) => Some(tok.parse().map_err(|_| Error::BadLabel {
                line: lineno + 1,
                token: tok.to_string(),
            })?),
            None => None,
        };
        out.push(ScoreRecord {
            enroll_id: tokens[0].to_string(),
            test_id: tokens[1].to_string(),
            score,
            label,
        });
    }
    Ok(out)
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text)
}

/// A model that can be written to and read from the binary model container.
///
/// The container is `MODEL_MAGIC`, `MODEL_VERSION` (u32), a one-byte kind
/// tag and the payload.
pub trait Persist: Sized {
    const KIND: u8;
    const NAME: &'static str;

    fn write_payload(&self, w: &mut ByteWriter);
    fn read_payload(r: &mut ByteReader<'_>) -> Result<Self>;
}

pub fn encode_model<M: Persist>(model: &M) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(MODEL_MAGIC);
    w.u32(MODEL_VERSION);
    w.u8(M::KIND);
    model.write_payload(&mut w);
    w.into_inner()
}

pub fn decode_model<M: Persist>(bytes: &[u8]) -> Result<M> {
    if bytes.len() < MODEL_MAGIC.len() || &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let mut r = ByteReader::new(bytes);
    r.take(MODEL_MAGIC.len())?;
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Version {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    let kind = r.u8()?;
    if kind != M::KIND {
        return Err(Error::Format(format!(
            "expected a {} model (kind {}), found kind {kind}",
            M::NAME,
            M::KIND
        )));
    }
    let model = M::read_payload(&mut r)?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after model payload".into()));
    }
    Ok(model)
}

pub fn save_model<M: Persist>(model: &M, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model<M: Persist>(path: impl AsRef<Path>) -> Result<M> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[derive(Debug, Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn vector(&mut self, v: &DVector<f64>) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }

    /// Row-major with a `(rows, cols)` prefix.
    pub fn matrix(&mut self, m: &DMatrix<f64>) {
        self.u64(m.nrows() as u64);
        self.u64(m.ncols() as u64);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }
}

#[derive(Debug)]
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    pub fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_le_bytes)
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format("invalid utf-8 string".into()))
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub fn vector(&mut self) -> Result<DVector<f64>> {
        let n = self.u64()? as usize;
        Ok(DVector::from_vec(self.f64_vec(n)?))
    }

    pub fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("matrix size overflow".into()))?;
        let values = self.f64_vec(n)?;
        Ok(DMatrix::from_row_slice(rows, cols, &values))
    }
}

/// Labeled trials resolved to record positions, split by class.
#[derive(Debug, Clone, Default)]
pub struct ResolvedTrials {
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<u8>,
}

impl ResolvedTrials {
    /// Resolves labeled trials; unlabeled ones are an error.
    pub fn resolve(trials: &[Trial], archive: &EmbeddingArchive) -> Result<Self> {
        let mut out = Self::default();
        for (i, t) in trials.iter().enumerate() {
            let lookup = |id: &str| {
                archive.position(id).ok_or_else(|| Error::UnknownId {
                    line: i + 1,
                    id: id.to_string(),
                })
            };
            let e = lookup(&t.enroll_id)?;
            let s = lookup(&t.test_id)?;
            let label = t
                .label
                .as_binary()
                .ok_or_else(|| Error::InvalidArgument(format!("trial {} is unlabeled", i + 1)))?;
            out.pairs.push((e, s));
            out.labels.push(label);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn n_targets(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Set of unordered pairs, used to reject duplicate trials.
pub(crate) fn unordered(a: usize, b: usize) -> (usize, usize) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(id: &str, spk: &str, v: &[f64]) -> Embedding {
        Embedding {
            segment_id: id.into(),
            speaker_id: Some(spk.into()),
            gender: Gender::Female,
            vector: DVector::from_row_slice(v),
        }
    }

    #[test]
    fn text_archive_two_records() {
        let a = parse_archive(b"s1 spk1 f 1 2 3\ns2 - m 4 5 6\n").unwrap();
        assert_eq!(a.dimension(), 3);
        assert_eq!(a.len(), 2);
        assert_eq!(a.records()[1].speaker_id, None);
        assert_eq!(a.records()[1].gender, Gender::Male);
        assert_eq!(a.get("s2").unwrap().vector[2], 6.0);
    }

    #[test]
    fn text_archive_dimension_mismatch_names_record() {
        let err = parse_archive(b"s1 a f 1 2 3\ns2 a f 1 2 3 4\n").unwrap_err();
        match err {
            Error::DimensionMismatch {
                record,
                expected,
                found,
                ..
            } => assert_eq!((record, expected, found), (2, 3, 4)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_and_non_finite_are_distinct_errors() {
        let dup = EmbeddingArchive::new(1, vec![emb("a", "x", &[1.0]), emb("a", "y", &[2.0])]);
        assert!(matches!(
            dup,
            Err(Error::DuplicateSegment { record: 2, .. })
        ));
        let nan = EmbeddingArchive::new(2, vec![emb("a", "x", &[1.0, f64::NAN])]);
        assert!(matches!(
            nan,
            Err(Error::NonFinite {
                record: 1,
                position: 1,
                ..
            })
        ));
        let bad_text = parse_archive(b"a x f 1 inf\n");
        assert!(matches!(bad_text, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn binary_dimension_mismatch_and_bad_header() {
        let a = EmbeddingArchive::new(2, vec![emb("a", "x", &[1.0, 2.0])]).unwrap();
        let mut bytes = encode_archive(&a);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            parse_archive(&bytes),
            Err(Error::Truncated { .. })
        ));
        let header_only = &encode_archive(&a)[..12];
        assert!(matches!(
            parse_archive(header_only),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn trials_parse_and_resolve() {
        let a = parse_archive(b"e1 s f 1\nt1 s f 2\n").unwrap();
        let t = parse_trials("e1 t1 target\n", Some(&a)).unwrap();
        assert_eq!(t, vec![Trial::new("e1", "t1", TrialLabel::Target)]);
        let err = parse_trials("e1 t9 nontarget\n", Some(&a)).unwrap_err();
        assert!(matches!(err, Error::UnknownId { line: 1, ref id } if id == "t9"));
        let err = parse_trials("e1 t1 maybe\n", Some(&a)).unwrap_err();
        assert!(matches!(err, Error::BadLabel { .. }));
    }

    #[test]
    fn trial_count_and_order_preserved() {
        let mut text = String::new();
        let mut expected = Vec::new();
        for i in 0..55 {
            let label = if i % 11 == 0 { "target" } else { "nontarget" };
            text.push_str(&format!("e{i} t{i} {label}\n"));
            expected.push(format!("e{i}"));
        }
        let trials = parse_trials(&text, None).unwrap();
        assert_eq!(trials.len(), 55);
        assert_eq!(
            trials
                .iter()
                .filter(|t| t.label == TrialLabel::Target)
                .count(),
            5
        );
        let order: Vec<_> = trials.iter().map(|t| t.enroll_id.clone()).collect();
        assert_eq!(order, expected);
    }

    #[test]
    fn score_lines_six_decimals() {
        let recs = vec![
            ScoreRecord {
                enroll_id: "e".into(),
                test_id: "t".into(),
                score: 1.0 / 3.0,
                label: Some(TrialLabel::Target),
            },
            ScoreRecord {
                enroll_id: "e".into(),
                test_id: "u".into(),
                score: -2.0,
                label: None,
            },
        ];
        let text = format_scores(&recs);
        assert_eq!(text, "e t 0.333333 target\ne u -2.000000\n");
        let back = parse_scores(&text).unwrap();
        assert_eq!(back[0].label, Some(TrialLabel::Target));
        assert_eq!(back[1].score, -2.0);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        struct Dummy;
        impl Persist for Dummy {
            const KIND: u8 = 200;
            const NAME: &'static str = "dummy";
            fn write_payload(&self, _: &mut ByteWriter) {}
            fn read_payload(_: &mut ByteReader<'_>) -> Result<Self> {
                Ok(Dummy)
            }
        }
        let mut bytes = encode_model(&Dummy);
        assert!(decode_model::<Dummy>(&bytes).is_ok());
        bytes[0] = b'X';
        assert!(matches!(
            decode_model::<Dummy>(&bytes),
            Err(Error::Format(_))
        ));
        let mut bytes = encode_model(&Dummy);
        bytes[8] = 9;
        assert!(matches!(
            decode_model::<Dummy>(&bytes),
            Err(Error::Version { found: 9, .. })
        ));
    }
}
