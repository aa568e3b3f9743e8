//! On-disk formats: binary embeddings, line-delimited token stats, JSON
//! selection files. All reads validate eagerly.
//!
//! Embedding file layout (little-endian throughout):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SKEM"
//! 4       4     version (u32, currently 1)
//! 8       8     n (u64)
//! 16      4     d (u32)
//! 20      1     dtype tag (1 = f32, 2 = f64)
//! 21      4     provenance length in bytes (u32)
//! 25      L     provenance, UTF-8
//! 25+L    ...   n*d values, row-major
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{EmbeddingMatrix, SelectionResult, TokenStats, TokenStatsSequence};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"SKEM";
pub const EMBEDDING_VERSION: u32 = 1;
const HEADER_FIXED: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// An embedding matrix with its on-disk metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub matrix: EmbeddingMatrix,
    pub dtype: Dtype,
    /// Identifies the extractor/model that produced the features. RBF widths
    /// are only meaningful relative to this scale.
    pub provenance: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReadOptions {
    pub allow_empty_provenance: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn violation(path: &Path, detail: impl Into<String>) -> Error {
    Error::InvariantViolation { path: path.to_path_buf(), detail: detail.into() }
}

/// Writes through a sibling temp file and renames into place.
fn write_atomically(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    body(&mut w).map_err(io_err(&tmp))?;
    w.into_inner()
        .map_err(|e| Error::Io { path: tmp.clone(), source: e.into_error() })?
        .sync_all()
        .map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_embeddings(path: impl AsRef<Path>, file: &EmbeddingFile) -> Result<()> {
    let path = path.as_ref();
    let m = &file.matrix;
    let d = u32::try_from(m.d()).map_err(|_| violation(path, "d does not fit in u32"))?;
    let plen = u32::try_from(file.provenance.len()).map_err(|_| violation(path, "provenance too long"))?;
    write_atomically(path, |w| {
        w.write_all(&EMBEDDING_MAGIC)?;
        w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
        w.write_all(&(m.n() as u64).to_le_bytes())?;
        w.write_all(&d.to_le_bytes())?;
        w.write_all(&[file.dtype.tag()])?;
        w.write_all(&plen.to_le_bytes())?;
        w.write_all(file.provenance.as_bytes())?;
        match file.dtype {
            Dtype::F32 => {
                for &v in m.data() {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            Dtype::F64 => {
                for &v in m.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    })
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::TruncatedPayload { path: path.to_path_buf(), detail: format!("while reading {what}") }
        } else {
            Error::Io { path: path.to_path_buf(), source: e }
        }
    })
}

pub fn read_embeddings(path: impl AsRef<Path>, opts: ReadOptions) -> Result<EmbeddingFile> {
    let path = path.as_ref();
    let f = File::open(path).map_err(io_err(path))?;
    let file_len = f.metadata().map_err(io_err(path))?.len();
    let mut r = BufReader::with_capacity(1 << 20, f);

    let mut head = [0u8; HEADER_FIXED];
    read_exact_or_truncated(&mut r, &mut head, path, "header")?;
    let magic: [u8; 4] = head[0..4].try_into().unwrap();
    if magic != EMBEDDING_MAGIC {
        return Err(Error::MagicMismatch { path: path.to_path_buf(), found: magic });
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != EMBEDDING_VERSION {
        return Err(Error::UnsupportedVersion { path: path.to_path_buf(), found: version });
    }
    let n = u64::from_le_bytes(head[8..16].try_into().unwrap());
    let d = u32::from_le_bytes(head[16..20].try_into().unwrap()) as u64;
    let dtype = Dtype::from_tag(head[20]).ok_or_else(|| violation(path, format!("unknown dtype tag {}", head[20])))?;
    let plen = u32::from_le_bytes(head[21..25].try_into().unwrap()) as u64;
    if n == 0 || d == 0 {
        return Err(violation(path, format!("n={n}, d={d}; both must be >= 1")));
    }

    let payload = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(dtype.size() as u64))
        .ok_or_else(|| violation(path, "n*d overflows"))?;
    let expected = HEADER_FIXED as u64 + plen + payload;
    if file_len < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            detail: format!("expected {expected} bytes, file has {file_len}"),
        });
    }
    if file_len > expected {
        return Err(violation(path, format!("{} trailing bytes after payload", file_len - expected)));
    }

    let mut pbytes = vec![0u8; plen as usize];
    read_exact_or_truncated(&mut r, &mut pbytes, path, "provenance")?;
    let provenance = String::from_utf8(pbytes).map_err(|_| violation(path, "provenance is not UTF-8"))?;
    if provenance.is_empty() && !opts.allow_empty_provenance {
        return Err(violation(path, "empty provenance (pass the override to accept it)"));
    }

    let count = (n * d) as usize;
    let mut data = Vec::with_capacity(count);
    let mut buf = vec![0u8; (1 << 16) * dtype.size()];
    let mut left = count;
    while left > 0 {
        let take = left.min(1 << 16);
        let bytes = &mut buf[..take * dtype.size()];
        read_exact_or_truncated(&mut r, bytes, path, "payload")?;
        match dtype {
            Dtype::F32 => data.extend(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)),
            Dtype::F64 => data.extend(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))),
        }
        left -= take;
    }
    let matrix = EmbeddingMatrix::new(n as usize, d as usize, data).map_err(|e| match e {
        Error::NonFiniteEmbedding { row, col } => violation(path, format!("non-finite value at row {row}, col {col}")),
        other => other,
    })?;
    Ok(EmbeddingFile { matrix, dtype, provenance })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsRecord {
    id: u64,
    steps: Vec<[f64; 4]>,
}

/// One JSON object per line: `{"id": i, "steps": [[entropy, top1, top2, chosen], ...]}`.
pub fn write_token_stats(path: impl AsRef<Path>, stats: &[TokenStatsSequence]) -> Result<()> {
    write_atomically(path.as_ref(), |w| {
        for (id, seq) in stats.iter().enumerate() {
            let rec = StatsRecord {
                id: id as u64,
                steps: seq
                    .steps()
                    .iter()
                    .map(|s| [s.entropy, s.top1_prob, s.top2_prob, s.chosen_prob])
                    .collect(),
            };
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn read_token_stats(path: impl AsRef<Path>) -> Result<Vec<TokenStatsSequence>> {
    let path = path.as_ref();
    let r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StatsRecord = serde_json::from_str(&line)
            .map_err(|e| violation(path, format!("line {}: {e}", lineno + 1)))?;
        if rec.id != out.len() as u64 {
            return Err(violation(
                path,
                format!("line {}: record id {} out of order (expected {})", lineno + 1, rec.id, out.len()),
            ));
        }
        if rec.steps.is_empty() {
            return Err(violation(path, format!("record id {}: no steps", rec.id)));
        }
        let mut steps = Vec::with_capacity(rec.steps.len());
        for (t, s) in rec.steps.iter().enumerate() {
            let ts = TokenStats::new(s[0], s[1], s[2], s[3]);
            ts.check()
                .map_err(|detail| violation(path, format!("record id {} step {t}: {detail}", rec.id)))?;
            steps.push(ts);
        }
        out.push(TokenStatsSequence::new(steps)?);
    }
    if out.is_empty() {
        return Err(violation(path, "no records"));
    }
    Ok(out)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let got = r.read(&mut buf).map_err(io_err(path))?;
        if got == 0 {
            break;
        }
        hasher.update(&buf[..got]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    /// `embeddings` or `token_stats`.
    pub role: String,
    pub path: String,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl InputDigest {
    pub fn of(role: &str, path: impl AsRef<Path>, provenance: Option<String>) -> Result<Self> {
        let path = path.as_ref();
        Ok(InputDigest {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: file_digest(path)?,
            provenance,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionParams {
    pub budget: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub greedy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_mode: Option<String>,
}

/// Everything about a run besides its result.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetadata {
    pub strategy: String,
    pub pool_size: usize,
    pub params: SelectionParams,
    pub inputs: Vec<InputDigest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionFile {
    pub strategy: String,
    pub pool_size: usize,
    pub params: SelectionParams,
    pub indices: Vec<usize>,
    pub objective_trace: Vec<f64>,
    pub gains: Vec<f64>,
    pub inputs: Vec<InputDigest>,
}

impl SelectionFile {
    pub fn new(result: &SelectionResult, meta: &RunMetadata) -> Self {
        SelectionFile {
            strategy: meta.strategy.clone(),
            pool_size: meta.pool_size,
            params: meta.params.clone(),
            indices: result.indices.clone(),
            objective_trace: result.objective_trace.clone(),
            gains: result.gains.clone(),
            inputs: meta.inputs.clone(),
        }
    }

    pub fn result(&self) -> SelectionResult {
        SelectionResult {
            indices: self.indices.clone(),
            objective_trace: self.objective_trace.clone(),
            gains: self.gains.clone(),
        }
    }

    fn check(&self, path: &Path) -> Result<()> {
        self.result().check(self.pool_size).map_err(|d| violation(path, d))
    }
}

pub fn write_selection(path: impl AsRef<Path>, result: &SelectionResult, meta: &RunMetadata) -> Result<()> {
    let path = path.as_ref();
    let file = SelectionFile::new(result, meta);
    file.check(path)?;
    write_atomically(path, |w| {
        serde_json::to_writer_pretty(&mut *w, &file)?;
        w.write_all(b"\n")
    })
}

pub fn read_selection(path: impl AsRef<Path>) -> Result<SelectionFile> {
    let path = path.as_ref();
    let r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let file: SelectionFile = serde_json::from_reader(r).map_err(|e| violation(path, e.to_string()))?;
    file.check(path)?;
    Ok(file)
}
