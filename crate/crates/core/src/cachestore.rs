//! Full and compressed cache data model, zone partitioning, and the KVD
//! binary interchange format.
//!
//! KVD layout (all integers little-endian):
//!
//! ```text
//! bytes 0..4    magic "KVD1"
//! bytes 4..8    u32 version (= 1)
//! bytes 8..16   u64 manifest length M
//! bytes 16..16+M  UTF-8 JSON manifest
//! remainder     raw tensor payload, row-major, little-endian
//! ```
//!
//! Tensor byte offsets in the manifest are relative to the start of the
//! payload.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::ModelShape;
use crate::error::{Error, KvdError, Result};
use crate::evalharness::ToyModelConfig;
use crate::numkit::Matrix;
use crate::rope::{RopeConfig, RopePairing};

pub const KVD_MAGIC: &[u8; 4] = b"KVD1";
pub const KVD_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// One KV head's cache: RoPE-encoded keys, values and their positions.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    pub keys: Matrix,
    pub values: Matrix,
    pub positions: Vec<i64>,
}

impl HeadCache {
    pub fn new(keys: Matrix, values: Matrix, positions: Vec<i64>) -> Result<Self> {
        if keys.rows() != values.rows() || keys.rows() != positions.len() {
            return Err(Error::DimensionMismatch(format!(
                "head cache: {} keys, {} values, {} positions",
                keys.rows(),
                values.rows(),
                positions.len()
            )));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "head cache positions must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            keys,
            values,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slice(&self, start: usize, end: usize) -> HeadCache {
        HeadCache {
            keys: self.keys.slice_rows(start, end),
            values: self.values.slice_rows(start, end),
            positions: self.positions[start..end].to_vec(),
        }
    }
}

/// A head cache split into the compress zone (oldest rows) and the retain
/// zone (newest `m` rows).
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneSplit {
    pub old: HeadCache,
    pub retain: HeadCache,
}

impl ZoneSplit {
    pub fn m(&self) -> usize {
        self.retain.len()
    }

    pub fn n(&self) -> usize {
        self.old.len() + self.retain.len()
    }

    pub fn head_dim(&self) -> usize {
        self.old.keys.cols()
    }

    /// Full-cache keys `[K_old; K_ret]`.
    pub fn full_keys(&self) -> Matrix {
        Matrix::vstack(&[&self.old.keys, &self.retain.keys]).expect("zone widths agree")
    }

    pub fn full_values(&self) -> Matrix {
        Matrix::vstack(&[&self.old.values, &self.retain.values]).expect("zone widths agree")
    }
}

pub fn split_zones(cache: &HeadCache, m: usize) -> Result<ZoneSplit> {
    let n = cache.len();
    if m == 0 || m >= n {
        return Err(Error::InvalidRetain { m, n });
    }
    Ok(ZoneSplit {
        old: cache.slice(0, n - m),
        retain: cache.slice(n - m, n),
    })
}

/// `r = (k + m) / n`.
pub fn compression_ratio(k: usize, m: usize, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidConfig("compression ratio with N = 0".into()));
    }
    if m == 0 || m > n {
        return Err(Error::InvalidRetain { m, n });
    }
    Ok((k + m) as f64 / n as f64)
}

/// Per-head budget `k = floor(r·N) − m` for a target ratio.
pub fn budget_for_ratio(ratio: f64, m: usize, n: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "ratio {ratio} outside (0, 1]"
        )));
    }
    if m == 0 || m >= n {
        return Err(Error::InvalidRetain { m, n });
    }
    let kept = (ratio * n as f64 + 1e-9).floor() as usize;
    if kept <= m {
        return Err(Error::BudgetTooSmall(format!(
            "ratio {ratio} keeps {kept} rows, not more than the retain zone m = {m}"
        )));
    }
    Ok(kept - m)
}

/// Distilled pairs plus the untouched retain zone of one KV head.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedHead {
    pub k_c: Matrix,
    pub v_c: Matrix,
    pub k_ret: Matrix,
    pub v_ret: Matrix,
}

impl CompressedHead {
    pub fn new(k_c: Matrix, v_c: Matrix, k_ret: Matrix, v_ret: Matrix) -> Result<Self> {
        if k_c.shape() != v_c.shape() || k_ret.shape() != v_ret.shape() {
            return Err(Error::DimensionMismatch(
                "compressed head k/v shapes".into(),
            ));
        }
        if k_c.cols() != k_ret.cols() {
            return Err(Error::DimensionMismatch("compressed head widths".into()));
        }
        if k_c.rows() == 0 {
            return Err(Error::InvalidConfig("compressed head needs k >= 1".into()));
        }
        if !(k_c.is_finite() && v_c.is_finite()) {
            return Err(Error::NonFinite("compressed head"));
        }
        Ok(Self {
            k_c,
            v_c,
            k_ret,
            v_ret,
        })
    }

    pub fn k(&self) -> usize {
        self.k_c.rows()
    }

    pub fn m(&self) -> usize {
        self.k_ret.rows()
    }

    pub fn keys(&self) -> Matrix {
        Matrix::vstack(&[&self.k_c, &self.k_ret]).expect("validated widths")
    }

    pub fn values(&self) -> Matrix {
        Matrix::vstack(&[&self.v_c, &self.v_ret]).expect("validated widths")
    }
}

/// Keys and values a decoder attends over for one (layer, KV head).
#[derive(Debug, Clone, PartialEq)]
pub struct KvRows {
    pub keys: Matrix,
    pub values: Matrix,
}

/// `rows[layer][kv_head]`
pub type CacheRows = Vec<Vec<KvRows>>;

/// Ground-truth continuation used for teacher forcing.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceContinuation {
    pub tokens: Vec<u32>,
    /// `T × vocab` logits under the full cache, when recorded.
    pub logits: Option<Matrix>,
}

/// One layer of a full cache: KV heads plus the per-query-head queries.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub kv_heads: Vec<HeadCache>,
    /// `N × d` RoPE-encoded queries, one matrix per query head.
    pub queries: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelKvCache {
    pub shape: ModelShape,
    pub rope: RopeConfig,
    pub positions: Vec<i64>,
    pub layers: Vec<LayerKv>,
    pub reference: Option<ReferenceContinuation>,
    pub toy_model: Option<ToyModelConfig>,
}

impl ModelKvCache {
    pub fn context_len(&self) -> usize {
        self.positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        let n = self.context_len();
        let d = self.shape.head_dim;
        if self.rope.head_dim != d {
            return Err(Error::DimensionMismatch(
                "rope head_dim vs model head_dim".into(),
            ));
        }
        if self.layers.len() != self.shape.num_layers {
            return Err(Error::DimensionMismatch(format!(
                "{} layers, shape says {}",
                self.layers.len(),
                self.shape.num_layers
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.kv_heads.len() != self.shape.num_kv_heads
                || layer.queries.len() != self.shape.num_q_heads
            {
                return Err(Error::DimensionMismatch(format!("layer {l} head counts")));
            }
            for h in &layer.kv_heads {
                if h.keys.shape() != (n, d) || h.values.shape() != (n, d) {
                    return Err(Error::DimensionMismatch(format!("layer {l} kv shape")));
                }
                if h.positions != self.positions {
                    return Err(Error::InvalidConfig(format!(
                        "layer {l}: heads must share positions"
                    )));
                }
            }
            if layer.queries.iter().any(|q| q.shape() != (n, d)) {
                return Err(Error::DimensionMismatch(format!("layer {l} query shape")));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> CacheRows {
        self.layers
            .iter()
            .map(|layer| {
                layer
                    .kv_heads
                    .iter()
                    .map(|h| KvRows {
                        keys: h.keys.clone(),
                        values: h.values.clone(),
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedCache {
    pub shape: ModelShape,
    pub rope: RopeConfig,
    pub context_len: usize,
    pub retain_positions: Vec<i64>,
    /// `heads[layer][kv_head]`
    pub heads: Vec<Vec<CompressedHead>>,
    pub reference: Option<ReferenceContinuation>,
    pub toy_model: Option<ToyModelConfig>,
}

impl CompressedCache {
    pub fn retain(&self) -> usize {
        self.retain_positions.len()
    }

    pub fn total_pairs(&self) -> usize {
        self.heads.iter().flatten().map(CompressedHead::k).sum()
    }

    pub fn rows(&self) -> CacheRows {
        self.heads
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|h| KvRows {
                        keys: h.keys(),
                        values: h.values(),
                    })
                    .collect()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.heads.len() != self.shape.num_layers
            || self
                .heads
                .iter()
                .any(|l| l.len() != self.shape.num_kv_heads)
        {
            return Err(Error::DimensionMismatch("compressed head grid".into()));
        }
        let m = self.retain();
        for h in self.heads.iter().flatten() {
            if h.m() != m || h.k_c.cols() != self.shape.head_dim {
                return Err(Error::DimensionMismatch("compressed head shape".into()));
            }
        }
        Ok(())
    }
}

/// Either kind of cache file.
#[derive(Debug, Clone, PartialEq)]
pub enum KvdFile {
    Full(ModelKvCache),
    Compressed(CompressedCache),
}

/// Element type for floating-point tensors on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FloatDtype {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    F64,
    I64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum CacheKind {
    Full,
    Compressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
enum Grouping {
    #[default]
    Contiguous,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RopeManifest {
    theta_base: f64,
    pairing: RopePairing,
    #[serde(default)]
    grouping: Grouping,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    kind: CacheKind,
    shape: ModelShape,
    rope: RopeManifest,
    context_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    retain: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    toy_model: Option<ToyModelConfig>,
    tensors: Vec<TensorEntry>,
}

fn head_name(layer: usize, kv: usize, what: &str) -> String {
    format!("layer{layer}.kvhead{kv}.{what}")
}

fn qhead_name(layer: usize, q: usize) -> String {
    format!("layer{layer}.qhead{q}.queries")
}

struct PayloadWriter {
    dtype: FloatDtype,
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl PayloadWriter {
    fn new(dtype: FloatDtype) -> Self {
        Self {
            dtype,
            entries: Vec::new(),
            payload: Vec::new(),
        }
    }

    fn push_entry(&mut self, name: String, dtype: Dtype, shape: Vec<usize>, start: usize) {
        self.entries.push(TensorEntry {
            name,
            dtype,
            shape,
            byte_offset: start as u64,
            byte_len: (self.payload.len() - start) as u64,
        });
    }

    fn matrix(&mut self, name: String, m: &Matrix) {
        let start = self.payload.len();
        let dtype = match self.dtype {
            FloatDtype::F32 => {
                for &v in m.as_slice() {
                    self.payload.extend_from_slice(&(v as f32).to_le_bytes());
                }
                Dtype::F32
            }
            FloatDtype::F64 => {
                for &v in m.as_slice() {
                    self.payload.extend_from_slice(&v.to_le_bytes());
                }
                Dtype::F64
            }
        };
        self.push_entry(name, dtype, vec![m.rows(), m.cols()], start);
    }

    fn ints(&mut self, name: String, xs: impl ExactSizeIterator<Item = i64>) {
        let start = self.payload.len();
        let len = xs.len();
        for v in xs {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        self.push_entry(name, Dtype::I64, vec![len], start);
    }

    fn reference(&mut self, reference: &Option<ReferenceContinuation>) {
        if let Some(r) = reference {
            self.ints("ref.tokens".into(), r.tokens.iter().map(|&t| t as i64));
            if let Some(logits) = &r.logits {
                self.matrix("ref.logits".into(), logits);
            }
        }
    }
}

/// Serializes a cache to KVD bytes.
pub fn encode_kvd(file: &KvdFile, dtype: FloatDtype) -> Result<Vec<u8>> {
    let mut w = PayloadWriter::new(dtype);
    let manifest_base = match file {
        KvdFile::Full(c) => {
            c.validate()?;
            w.ints("positions".into(), c.positions.iter().copied());
            for (l, layer) in c.layers.iter().enumerate() {
                for (h, head) in layer.kv_heads.iter().enumerate() {
                    w.matrix(head_name(l, h, "keys"), &head.keys);
                    w.matrix(head_name(l, h, "values"), &head.values);
                }
                for (q, queries) in layer.queries.iter().enumerate() {
                    w.matrix(qhead_name(l, q), queries);
                }
            }
            w.reference(&c.reference);
            (
                CacheKind::Full,
                c.shape,
                c.rope,
                c.context_len(),
                None,
                c.toy_model.clone(),
            )
        }
        KvdFile::Compressed(c) => {
            c.validate()?;
            w.ints("positions".into(), c.retain_positions.iter().copied());
            for (l, layer) in c.heads.iter().enumerate() {
                for (h, head) in layer.iter().enumerate() {
                    w.matrix(head_name(l, h, "kc"), &head.k_c);
                    w.matrix(head_name(l, h, "vc"), &head.v_c);
                    w.ints(head_name(l, h, "kcpos"), std::iter::repeat_n(-1, head.k()));
                    w.matrix(head_name(l, h, "keys"), &head.k_ret);
                    w.matrix(head_name(l, h, "values"), &head.v_ret);
                }
            }
            w.reference(&c.reference);
            (
                CacheKind::Compressed,
                c.shape,
                c.rope,
                c.context_len,
                Some(c.retain()),
                c.toy_model.clone(),
            )
        }
    };
    let (kind, shape, rope, context_len, retain, toy_model) = manifest_base;
    let manifest = Manifest {
        kind,
        shape,
        rope: RopeManifest {
            theta_base: rope.theta_base,
            pairing: rope.pairing,
            grouping: Grouping::Contiguous,
        },
        context_len,
        retain,
        toy_model,
        tensors: w.entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(KvdError::from)?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + w.payload.len());
    out.extend_from_slice(KVD_MAGIC);
    out.extend_from_slice(&KVD_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.payload);
    Ok(out)
}

pub fn write_kvd(path: impl AsRef<Path>, file: &KvdFile, dtype: FloatDtype) -> Result<()> {
    let bytes = encode_kvd(file, dtype)?;
    fs::write(path, bytes).map_err(KvdError::from)?;
    Ok(())
}

pub fn read_kvd(path: impl AsRef<Path>) -> Result<KvdFile> {
    let bytes = fs::read(path).map_err(KvdError::from)?;
    decode_kvd(&bytes)
}

enum Tensor {
    Float(Vec<f64>),
    Int(Vec<i64>),
}

struct TensorTable {
    tensors: HashMap<String, (Vec<usize>, Tensor)>,
}

impl TensorTable {
    fn take(&mut self, name: &str) -> Result<(Vec<usize>, Tensor)> {
        self.tensors
            .remove(name)
            .ok_or_else(|| KvdError::MissingTensor(name.to_string()).into())
    }

    fn matrix(&mut self, name: &str, rows: Option<usize>, cols: usize) -> Result<Matrix> {
        let (shape, t) = self.take(name)?;
        let Tensor::Float(data) = t else {
            return Err(KvdError::Manifest(format!("`{name}` must be a float tensor")).into());
        };
        if shape.len() != 2 || shape[1] != cols || rows.is_some_and(|r| r != shape[0]) {
            return Err(KvdError::Manifest(format!(
                "`{name}` has shape {shape:?}, expected [{}, {cols}]",
                rows.map_or("*".to_string(), |r| r.to_string())
            ))
            .into());
        }
        Matrix::from_vec(shape[0], shape[1], data)
    }

    fn ints(&mut self, name: &str) -> Result<Vec<i64>> {
        let (shape, t) = self.take(name)?;
        match t {
            Tensor::Int(v) if shape.len() == 1 => Ok(v),
            _ => Err(KvdError::Manifest(format!("`{name}` must be a 1-D i64 tensor")).into()),
        }
    }

    fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }
}

fn split_kvd(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 4 {
        return Err(KvdError::Truncated("shorter than the magic".into()).into());
    }
    if &bytes[0..4] != KVD_MAGIC {
        return Err(KvdError::BadMagic.into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(KvdError::Truncated("incomplete header".into()).into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != KVD_VERSION {
        return Err(KvdError::VersionMismatch {
            found: version,
            expected: KVD_VERSION,
        }
        .into());
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let manifest_end = (HEADER_LEN as u64)
        .checked_add(manifest_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| KvdError::Truncated("manifest extends past end of file".into()))?
        as usize;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[HEADER_LEN..manifest_end]).map_err(KvdError::from)?;
    Ok((manifest, &bytes[manifest_end..]))
}

/// Reads one float tensor by name, including tensors the cache model does
/// not use. Returns its shape and row-major data.
pub fn kvd_float_tensor(bytes: &[u8], name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let (manifest, payload) = split_kvd(bytes)?;
    let mut table = read_tensor_table(&manifest.tensors, payload)?;
    match table.take(name)? {
        (shape, Tensor::Float(data)) => Ok((shape, data)),
        _ => Err(KvdError::Manifest(format!("`{name}` must be a float tensor")).into()),
    }
}

/// Parses KVD bytes, validating header, manifest and tensor table.
pub fn decode_kvd(bytes: &[u8]) -> Result<KvdFile> {
    let (manifest, payload) = split_kvd(bytes)?;

    manifest
        .shape
        .validate()
        .map_err(|e| KvdError::Manifest(e.to_string()))?;
    let rope = RopeConfig {
        head_dim: manifest.shape.head_dim,
        theta_base: manifest.rope.theta_base,
        pairing: manifest.rope.pairing,
    };
    rope.validate()
        .map_err(|e| KvdError::Manifest(e.to_string()))?;

    let mut table = read_tensor_table(&manifest.tensors, payload)?;
    let shape = manifest.shape;
    let d = shape.head_dim;
    let n = manifest.context_len;
    let reference = read_reference(&mut table)?;

    let file = match manifest.kind {
        CacheKind::Full => {
            let positions = table.ints("positions")?;
            if positions.len() != n {
                return Err(KvdError::Manifest(format!(
                    "positions length {} != context_len {n}",
                    positions.len()
                ))
                .into());
            }
            let mut layers = Vec::with_capacity(shape.num_layers);
            for l in 0..shape.num_layers {
                let mut kv_heads = Vec::with_capacity(shape.num_kv_heads);
                for h in 0..shape.num_kv_heads {
                    let keys = table.matrix(&head_name(l, h, "keys"), Some(n), d)?;
                    let values = table.matrix(&head_name(l, h, "values"), Some(n), d)?;
                    kv_heads.push(HeadCache::new(keys, values, positions.clone())?);
                }
                let queries = (0..shape.num_q_heads)
                    .map(|q| table.matrix(&qhead_name(l, q), Some(n), d))
                    .collect::<Result<Vec<_>>>()?;
                layers.push(LayerKv { kv_heads, queries });
            }
            let cache = ModelKvCache {
                shape,
                rope,
                positions,
                layers,
                reference,
                toy_model: manifest.toy_model,
            };
            cache.validate()?;
            KvdFile::Full(cache)
        }
        CacheKind::Compressed => {
            let m = manifest
                .retain
                .ok_or_else(|| KvdError::Manifest("compressed file without `retain`".into()))?;
            let retain_positions = table.ints("positions")?;
            if retain_positions.len() != m {
                return Err(KvdError::Manifest("retain positions length".into()).into());
            }
            let mut heads = Vec::with_capacity(shape.num_layers);
            for l in 0..shape.num_layers {
                let mut layer = Vec::with_capacity(shape.num_kv_heads);
                for h in 0..shape.num_kv_heads {
                    let k_c = table.matrix(&head_name(l, h, "kc"), None, d)?;
                    let v_c = table.matrix(&head_name(l, h, "vc"), Some(k_c.rows()), d)?;
                    let kcpos = table.ints(&head_name(l, h, "kcpos"))?;
                    if kcpos.len() != k_c.rows() || kcpos.iter().any(|&p| p != -1) {
                        return Err(KvdError::Manifest(format!(
                            "layer {l} kv head {h}: distilled positions must be -1 markers"
                        ))
                        .into());
                    }
                    let k_ret = table.matrix(&head_name(l, h, "keys"), Some(m), d)?;
                    let v_ret = table.matrix(&head_name(l, h, "values"), Some(m), d)?;
                    layer.push(CompressedHead::new(k_c, v_c, k_ret, v_ret)?);
                }
                heads.push(layer);
            }
            let cache = CompressedCache {
                shape,
                rope,
                context_len: n,
                retain_positions,
                heads,
                reference,
                toy_model: manifest.toy_model,
            };
            cache.validate()?;
            KvdFile::Compressed(cache)
        }
    };
    Ok(file)
}

fn read_reference(table: &mut TensorTable) -> Result<Option<ReferenceContinuation>> {
    if !table.contains("ref.tokens") {
        return Ok(None);
    }
    let tokens = table
        .ints("ref.tokens")?
        .into_iter()
        .map(|t| {
            u32::try_from(t).map_err(|_| KvdError::Manifest(format!("token id {t} out of range")))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let logits = if table.contains("ref.logits") {
        let (shape, _) = &table.tensors["ref.logits"];
        let cols = shape.get(1).copied().unwrap_or(0);
        Some(table.matrix("ref.logits", Some(tokens.len()), cols)?)
    } else {
        None
    };
    Ok(Some(ReferenceContinuation { tokens, logits }))
}

fn read_tensor_table(entries: &[TensorEntry], payload: &[u8]) -> Result<TensorTable> {
    let mut ranges: Vec<(u64, u64, &str)> = Vec::with_capacity(entries.len());
    let mut tensors = HashMap::with_capacity(entries.len());
    for e in entries {
        let count: usize = e.shape.iter().product();
        let expected = (count * e.dtype.size()) as u64;
        if expected != e.byte_len {
            return Err(KvdError::OffsetInconsistency(format!(
                "`{}`: shape {:?} of {:?} needs {expected} bytes, manifest says {}",
                e.name, e.shape, e.dtype, e.byte_len
            ))
            .into());
        }
        let end = e
            .byte_offset
            .checked_add(e.byte_len)
            .filter(|&end| end <= payload.len() as u64)
            .ok_or_else(|| {
                KvdError::Truncated(format!(
                    "`{}` spans bytes {}..{} of a {}-byte payload",
                    e.name,
                    e.byte_offset,
                    e.byte_offset.saturating_add(e.byte_len),
                    payload.len()
                ))
            })?;
        ranges.push((e.byte_offset, end, &e.name));

        let raw = &payload[e.byte_offset as usize..end as usize];
        let data = match e.dtype {
            Dtype::F32 => Tensor::Float(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            ),
            Dtype::F64 => Tensor::Float(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            Dtype::I64 => Tensor::Int(
                raw.chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
        };
        if tensors
            .insert(e.name.clone(), (e.shape.clone(), data))
            .is_some()
        {
            return Err(KvdError::Manifest(format!("duplicate tensor `{}`", e.name)).into());
        }
    }
    ranges.sort_unstable();
    for w in ranges.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(KvdError::OffsetInconsistency(format!(
                "tensors `{}` and `{}` overlap",
                w[0].2, w[1].2
            ))
            .into());
        }
    }
    Ok(TensorTable { tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_head(n: usize, d: usize) -> HeadCache {
        HeadCache::new(
            Matrix::from_fn(n, d, |i, j| (i * d + j) as f64 * 0.01),
            Matrix::from_fn(n, d, |i, j| (i + j) as f64 * -0.5),
            (0..n as i64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn split_paper_sizes() {
        let z = split_zones(&toy_head(2048, 2), 256).unwrap();
        assert_eq!(z.old.len(), 1792);
        assert_eq!(z.retain.len(), 256);
        assert_eq!(z.n(), 2048);
    }

    #[test]
    fn split_boundary_and_suffix() {
        let z = split_zones(&toy_head(10, 2), 9).unwrap();
        assert_eq!(z.old.len(), 1);
        let z = split_zones(&toy_head(10, 2), 3).unwrap();
        assert_eq!(z.retain.positions, vec![7, 8, 9]);
        assert_eq!(z.old.positions, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_bad_retain() {
        assert!(matches!(
            split_zones(&toy_head(10, 2), 10),
            Err(Error::InvalidRetain { .. })
        ));
        assert!(matches!(
            split_zones(&toy_head(10, 2), 0),
            Err(Error::InvalidRetain { .. })
        ));
    }

    #[test]
    fn ratio_arithmetic() {
        assert_eq!(budget_for_ratio(0.3, 256, 2048).unwrap(), 358);
        assert_eq!(budget_for_ratio(0.3, 32, 256).unwrap(), 44);
        assert_eq!(compression_ratio(0, 256, 2048).unwrap(), 0.125);
        assert_eq!(compression_ratio(2048 - 256, 256, 2048).unwrap(), 1.0);
        assert!(compression_ratio(1, 1, 0).is_err());
        assert!(budget_for_ratio(0.1, 256, 2048).is_err());
    }

    #[test]
    fn head_cache_rejects_unsorted_positions() {
        let r = HeadCache::new(Matrix::zeros(2, 2), Matrix::zeros(2, 2), vec![3, 1]);
        assert!(r.is_err());
    }
}
