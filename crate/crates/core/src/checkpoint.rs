//! Checkpoint envelope: versioned JSON with row-major nested arrays, or the
//! same envelope pointing at a little-endian binary sidecar.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::corpus::{TemporalCorpus, Vocabulary};
use crate::error::{Error, Result};
use crate::rnn_rsm::{self, Recurrence, RnnRsmParams, UnrolledState};
use crate::rsm_core::RsmParams;
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;
const SIDECAR_MAGIC: &[u8; 8] = b"TMPRCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorsJson {
    pub w_vh: Vec<Vec<f64>>,
    pub b_v: Vec<f64>,
    pub b_h: Vec<f64>,
    pub w_uv: Vec<Vec<f64>>,
    pub w_uh: Vec<Vec<f64>>,
    pub w_vu: Vec<Vec<f64>>,
    pub w_uu: Vec<Vec<f64>>,
    pub b_u: Vec<f64>,
    pub u0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamsPayload {
    Inline(TensorsJson),
    Sidecar { sidecar: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParams {
    pub vocab_size: usize,
    pub hidden: usize,
    pub recurrent: usize,
    pub recurrence: Recurrence,
    pub tensors: ParamsPayload,
}

/// Everything needed to continue the random streams: they are keyed by
/// (seed, epoch), so the next epoch number is the whole state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngDescriptor {
    pub seed: u64,
    pub next_epoch: usize,
}

/// The training data summary that drives the recurrence at evaluation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardInputs {
    pub labels: Vec<String>,
    pub doc_counts: Vec<usize>,
    pub count_sums: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub vocab_hash: String,
    pub epoch: usize,
    pub params: StoredParams,
    pub rng: RngDescriptor,
    pub velocity: Option<Vec<f64>>,
    pub forward: ForwardInputs,
    pub held_out_sum_ppl: Option<f64>,
    #[serde(skip)]
    resolved: Option<RnnRsmParams>,
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix(name: &str, rows: &[Vec<f64>], shape: (usize, usize)) -> Result<Array2<f64>> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(Error::Checkpoint(format!(
            "`{name}` is not {}×{}",
            shape.0, shape.1
        )));
    }
    Ok(Array2::from_shape_vec(shape, rows.concat()).expect("shape checked"))
}

fn vector(name: &str, v: &[f64], len: usize) -> Result<Array1<f64>> {
    if v.len() != len {
        return Err(Error::Checkpoint(format!("`{name}` has length {}, expected {len}", v.len())));
    }
    Ok(Array1::from(v.to_vec()))
}

impl Checkpoint {
    pub fn new(
        config: &TrainConfig,
        corpus: &TemporalCorpus,
        params: &RnnRsmParams,
        epoch: usize,
        velocity: Option<Vec<f64>>,
    ) -> Self {
        let p = params;
        let tensors = TensorsJson {
            w_vh: rows(&p.rsm.w_vh),
            b_v: p.rsm.b_v.to_vec(),
            b_h: p.rsm.b_h.to_vec(),
            w_uv: rows(&p.w_uv),
            w_uh: rows(&p.w_uh),
            w_vu: rows(&p.w_vu),
            w_uu: rows(&p.w_uu),
            b_u: p.b_u.to_vec(),
            u0: p.u0.to_vec(),
        };
        Self {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            vocab_hash: corpus.vocabulary().hash(),
            epoch,
            params: StoredParams {
                vocab_size: p.vocab_size(),
                hidden: p.hidden_size(),
                recurrent: p.recurrent_size(),
                recurrence: p.recurrence,
                tensors: ParamsPayload::Inline(tensors),
            },
            rng: RngDescriptor {
                seed: config.seed,
                next_epoch: epoch + 1,
            },
            velocity,
            forward: ForwardInputs {
                labels: corpus.slices().iter().map(|s| s.label.clone()).collect(),
                doc_counts: corpus.slices().iter().map(|s| s.len()).collect(),
                count_sums: corpus.count_sums().into_iter().map(|s| s.to_vec()).collect(),
            },
            held_out_sum_ppl: None,
            resolved: Some(params.clone()),
        }
    }

    /// The model parameters, decoded and validated.
    pub fn params(&self) -> Result<RnnRsmParams> {
        if let Some(p) = &self.resolved {
            return Ok(p.clone());
        }
        let ParamsPayload::Inline(t) = &self.params.tensors else {
            return Err(Error::Checkpoint("sidecar parameters were not loaded".into()));
        };
        let (k, f, u) = (self.params.vocab_size, self.params.hidden, self.params.recurrent);
        let params = RnnRsmParams {
            rsm: RsmParams {
                w_vh: matrix("w_vh", &t.w_vh, (k, f))?,
                b_v: vector("b_v", &t.b_v, k)?,
                b_h: vector("b_h", &t.b_h, f)?,
            },
            w_uv: matrix("w_uv", &t.w_uv, (k, u))?,
            w_uh: matrix("w_uh", &t.w_uh, (f, u))?,
            w_vu: matrix("w_vu", &t.w_vu, (u, k))?,
            w_uu: matrix("w_uu", &t.w_uu, (u, u))?,
            b_u: vector("b_u", &t.b_u, u)?,
            u0: vector("u0", &t.u0, u)?,
            recurrence: self.params.recurrence,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn labels(&self) -> &[String] {
        &self.forward.labels
    }

    /// Forward pass over the stored training-slice summaries.
    pub fn forward_state(&self) -> Result<UnrolledState> {
        let params = self.params()?;
        let sums = self.forward.count_sums.iter().map(|s| Array1::from(s.clone())).collect();
        rnn_rsm::forward_from_sums(&params, sums, &self.forward.doc_counts)
    }

    pub fn check_vocabulary(&self, vocabulary: &Vocabulary) -> Result<()> {
        let hash = vocabulary.hash();
        if hash != self.vocab_hash {
            return Err(Error::VocabularyMismatch {
                checkpoint: self.vocab_hash.clone(),
                corpus: hash,
            });
        }
        Ok(())
    }

    /// Writes the checkpoint. With `sidecar`, tensors go to `<path>.bin`.
    pub fn save(&self, path: &Path, sidecar: bool) -> Result<()> {
        let mut envelope = self.clone();
        if sidecar {
            let params = self.params()?;
            let bin = sidecar_path(path);
            write_sidecar(&bin, &params)?;
            let name = bin
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            envelope.params.tensors = ParamsPayload::Sidecar { sidecar: name };
        }
        let text = serde_json::to_string_pretty(&envelope)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                ckpt.format_version
            )));
        }
        if let ParamsPayload::Sidecar { sidecar } = &ckpt.params.tensors {
            let bin = path.parent().unwrap_or(Path::new(".")).join(sidecar);
            let mut params = read_sidecar(&bin)?;
            let shape = (params.vocab_size(), params.hidden_size(), params.recurrent_size());
            if shape != (ckpt.params.vocab_size, ckpt.params.hidden, ckpt.params.recurrent) {
                return Err(Error::Checkpoint("sidecar dimensions disagree with the envelope".into()));
            }
            params.recurrence = ckpt.params.recurrence;
            params.validate()?;
            ckpt.resolved = Some(params);
        } else {
            ckpt.resolved = Some(ckpt.params()?);
        }
        Ok(ckpt)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".bin");
    path.with_file_name(name)
}

/// Layout: magic, then K, F, U as u64, then the tensors in canonical order
/// as f64, all little-endian.
fn write_sidecar(path: &Path, params: &RnnRsmParams) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + 8 * params.num_parameters());
    buf.extend_from_slice(SIDECAR_MAGIC);
    for d in [params.vocab_size(), params.hidden_size(), params.recurrent_size()] {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for x in params.to_flat() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_sidecar(path: &Path) -> Result<RnnRsmParams> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() < 32 || &buf[..8] != SIDECAR_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a parameter sidecar", path.display())));
    }
    let dim = |i: usize| u64::from_le_bytes(buf[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize;
    let (k, f, u) = (dim(0), dim(1), dim(2));
    let mut params = RnnRsmParams::zeros(k, f, u);
    let body = &buf[32..];
    if body.len() != 8 * params.num_parameters() {
        return Err(Error::Checkpoint(format!(
            "sidecar holds {} bytes of tensors, expected {}",
            body.len(),
            8 * params.num_parameters()
        )));
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    params.assign_flat(&flat)?;
    if let Some(name) = params.first_non_finite() {
        return Err(Error::Checkpoint(format!("non-finite values in `{name}`")));
    }
    Ok(params)
}
