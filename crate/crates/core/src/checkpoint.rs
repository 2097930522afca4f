//! Single-file checkpoint container.
//!
//! ```text
//! "MUSR"  u32 version  u64 meta_len  meta (JSON)
//! u32 count, then per array:
//!   u16 name_len  name  u8 dtype (4 = f32, 8 = f64)  u8 ndim  u64 dims[ndim]  data
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{MuserError, Result};
use crate::model::MuserModel;
use crate::prior::PriorModel;
use crate::vocab::{TokenType, VocabPreset};
use muser_numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MUSR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Muser,
    Prior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Position of a ChaCha generator, enough to resume its stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub kind: CheckpointKind,
    pub vocab: VocabPreset,
    pub elements: Vec<TokenType>,
    pub config: ModelConfig,
    #[serde(default)]
    pub step: u64,
    #[serde(default)]
    pub rng: Option<RngState>,
    /// Codebook bookkeeping that is not stored as an array.
    #[serde(default)]
    pub codebook: Option<CodebookMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookMeta {
    pub ema_count: Vec<f64>,
    pub idle_steps: Vec<u64>,
    pub initialized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub version: u32,
    pub meta: Metadata,
    pub arrays: Vec<(String, Tensor)>,
    pub dtypes: Vec<Dtype>,
}

fn bad(msg: impl Into<String>) -> MuserError {
    MuserError::data(format!("checkpoint: {}", msg.into()))
}

pub fn encode(meta: &Metadata, arrays: &[(String, &Tensor)], dtype: Dtype) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        let n = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {name}")))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype.code());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F32 => t.data().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let meta_len = r.u64()? as usize;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len)?).map_err(|e| bad(format!("metadata: {e}")))?;
    let count = r.u32()?;
    let mut arrays = Vec::with_capacity(count as usize);
    let mut dtypes = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| bad("array name is not UTF-8"))?;
        let dtype = match r.u8()? {
            4 => Dtype::F32,
            8 => Dtype::F64,
            d => return Err(bad(format!("unknown dtype {d} for {name}"))),
        };
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("array too large"))?;
        let width = if dtype == Dtype::F32 { 4 } else { 8 };
        let raw = r.take(numel.checked_mul(width).ok_or_else(|| bad("array too large"))?)?;
        let data: Vec<f64> = match dtype {
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        };
        arrays.push((name, Tensor::new(shape, data)?));
        dtypes.push(dtype);
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after the last array"));
    }
    Ok(Container {
        version,
        meta,
        arrays,
        dtypes,
    })
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| MuserError::io(path, e))?;
    decode(&bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| MuserError::io(path, e))
}

fn fill_store(store: &mut ParamStore, arrays: &mut Vec<(String, Tensor)>) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let pos = arrays
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| bad(format!("missing parameter {name}")))?;
        let (_, t) = arrays.swap_remove(pos);
        if t.shape() != store.get(id).shape() {
            return Err(bad(format!("{name}: shape {:?}, expected {:?}", t.shape(), store.get(id).shape())));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

fn take_array(arrays: &mut Vec<(String, Tensor)>, name: &str) -> Result<Tensor> {
    let pos = arrays.iter().position(|(n, _)| n == name).ok_or_else(|| bad(format!("missing {name}")))?;
    Ok(arrays.swap_remove(pos).1)
}

fn metadata(kind: CheckpointKind, config: &ModelConfig) -> Metadata {
    Metadata {
        kind,
        vocab: config.vocab,
        elements: TokenType::ELEMENTS.to_vec(),
        config: config.clone(),
        step: 0,
        rng: None,
        codebook: None,
    }
}

pub fn model_bytes(model: &MuserModel, step: u64, rng: Option<RngState>, dtype: Dtype) -> Result<Vec<u8>> {
    let cb = &model.codebook;
    let mut meta = metadata(CheckpointKind::Muser, &model.config);
    meta.step = step;
    meta.rng = rng;
    meta.codebook = Some(CodebookMeta {
        ema_count: cb.ema_count.clone(),
        idle_steps: cb.idle_steps.clone(),
        initialized: cb.initialized,
    });
    let mut arrays: Vec<(String, &Tensor)> = model.store.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
    arrays.push(("codebook.embeddings".into(), &cb.embeddings));
    arrays.push(("codebook.ema_sum".into(), &cb.ema_sum));
    encode(&meta, &arrays, dtype)
}

pub fn model_from_container(c: Container) -> Result<(MuserModel, Metadata)> {
    let Container { meta, mut arrays, .. } = c;
    if meta.kind != CheckpointKind::Muser {
        return Err(bad("not a model checkpoint"));
    }
    if meta.elements != TokenType::ELEMENTS {
        return Err(bad("element order differs from this build"));
    }
    if meta.vocab != meta.config.vocab {
        return Err(bad("vocabulary preset disagrees with the stored config"));
    }
    let mut model = MuserModel::new(meta.config.clone(), 0)?;
    fill_store(&mut model.store, &mut arrays)?;
    let cbm = meta.codebook.clone().ok_or_else(|| bad("missing codebook state"))?;
    let cb = &mut model.codebook;
    cb.embeddings = take_array(&mut arrays, "codebook.embeddings")?;
    cb.ema_sum = take_array(&mut arrays, "codebook.ema_sum")?;
    let k = cb.embeddings.rows();
    if cb.embeddings.shape() != [k, model.config.latent_size()] || cb.ema_sum.shape() != cb.embeddings.shape() {
        return Err(bad("codebook shape does not match the config"));
    }
    if cbm.ema_count.len() != k || cbm.idle_steps.len() != k {
        return Err(bad("codebook state length does not match K"));
    }
    cb.ema_count = cbm.ema_count;
    cb.idle_steps = cbm.idle_steps;
    cb.initialized = cbm.initialized;
    if let Some((name, _)) = arrays.first() {
        return Err(bad(format!("unexpected array {name}")));
    }
    Ok((model, meta))
}

pub fn save_model(model: &MuserModel, path: &Path) -> Result<()> {
    write_bytes(path, &model_bytes(model, 0, None, Dtype::F64)?)
}

pub fn load_model(path: &Path) -> Result<MuserModel> {
    Ok(model_from_container(read_container(path)?)?.0)
}

pub fn prior_bytes(prior: &PriorModel, step: u64, dtype: Dtype) -> Result<Vec<u8>> {
    let mut meta = metadata(CheckpointKind::Prior, &prior.config);
    meta.step = step;
    let arrays: Vec<(String, &Tensor)> = prior.store.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
    encode(&meta, &arrays, dtype)
}

pub fn prior_from_container(c: Container) -> Result<(PriorModel, Metadata)> {
    let Container { meta, mut arrays, .. } = c;
    if meta.kind != CheckpointKind::Prior {
        return Err(bad("not a prior checkpoint"));
    }
    let mut prior = PriorModel::new(meta.config.clone(), 0)?;
    fill_store(&mut prior.store, &mut arrays)?;
    if let Some((name, _)) = arrays.first() {
        return Err(bad(format!("unexpected array {name}")));
    }
    Ok((prior, meta))
}

pub fn save_prior(prior: &PriorModel, path: &Path) -> Result<()> {
    write_bytes(path, &prior_bytes(prior, 0, Dtype::F64)?)
}

pub fn load_prior(path: &Path) -> Result<PriorModel> {
    Ok(prior_from_container(read_container(path)?)?.0)
}

pub fn write_model(model: &MuserModel, path: &Path, step: u64, rng: Option<RngState>, dtype: Dtype) -> Result<()> {
    write_bytes(path, &model_bytes(model, step, rng, dtype)?)
}

pub fn write_prior(prior: &PriorModel, path: &Path, step: u64, dtype: Dtype) -> Result<()> {
    write_bytes(path, &prior_bytes(prior, step, dtype)?)
}
