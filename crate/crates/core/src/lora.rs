//! Low-rank adapter merging: `W' = W + (alpha / r) * A * B`.
//!
//! `A` is `M x r` and `B` is `r x N` for a base weight `W` of shape `M x N`.
//! PEFT checkpoints store the factors the other way round (`lora_B` is
//! `out x r`, `lora_A` is `r x in`), so [`load_adapter`] maps `lora_B -> A`
//! and `lora_A -> B`.
//!
//! Containers use the safetensors layout, restricted to 1-D and 2-D tensors
//! stored as F32, F16 or BF16. Everything is widened to `f32` on load and
//! written back as `f32`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum LoraError {
    #[error("base weights have no tensor named `{0}`")]
    MissingTensor(String),
    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: (usize, usize), found: (usize, usize) },
    #[error("invalid adapter: {0}")]
    InvalidAdapter(String),
    #[error("corrupt tensor container: {0}")]
    CorruptContainer(String),
    #[error("tensor `{name}` has unsupported dtype {dtype}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor `{name}` has unsupported shape {shape:?}; only 1-D and 2-D tensors are handled")]
    UnsupportedShape { name: String, shape: Vec<usize> },
    #[error("invalid rename table: {0}")]
    RenameTable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, LoraError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(LoraError::InvalidAdapter(format!(
                "matrix {rows}x{cols} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self, LoraError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LoraError::InvalidAdapter("ragged rows".into()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// `M x r`
    pub a: Matrix,
    /// `r x N`
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    entries: BTreeMap<String, LoraPair>,
    rank: usize,
    alpha: f64,
}

impl LoraAdapter {
    /// `alpha` may be zero, which turns the merge into a copy.
    pub fn new(rank: usize, alpha: f64) -> Result<Self, LoraError> {
        if rank == 0 {
            return Err(LoraError::InvalidAdapter("rank must be at least 1".into()));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(LoraError::InvalidAdapter(format!("alpha must be finite and non-negative, got {alpha}")));
        }
        Ok(LoraAdapter { entries: BTreeMap::new(), rank, alpha })
    }

    pub fn insert(&mut self, name: impl Into<String>, a: Matrix, b: Matrix) -> Result<(), LoraError> {
        let name = name.into();
        if a.cols != self.rank || b.rows != self.rank {
            return Err(LoraError::InvalidAdapter(format!(
                "`{name}`: A is {:?} and B is {:?}, rank is {}",
                a.shape(),
                b.shape(),
                self.rank
            )));
        }
        self.entries.insert(name, LoraPair { a, b });
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn entries(&self) -> &BTreeMap<String, LoraPair> {
        &self.entries
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self, LoraError> {
        let mut out = LoraAdapter::new(self.rank, alpha)?;
        out.entries = self.entries.clone();
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightSet {
    tensors: BTreeMap<String, Matrix>,
    /// Tensors that are 1-D on disk; held as `1 x n` matrices.
    vectors: BTreeSet<String>,
    metadata: BTreeMap<String, String>,
}

impl WeightSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) {
        let name = name.into();
        self.vectors.remove(&name);
        self.tensors.insert(name, m);
    }

    pub fn insert_vector(&mut self, name: impl Into<String>, values: Vec<f32>) -> Result<(), LoraError> {
        let name = name.into();
        let m = Matrix::new(1, values.len(), values)?;
        self.tensors.insert(name.clone(), m);
        self.vectors.insert(name);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Matrix> {
        &self.tensors
    }

    pub fn is_vector(&self, name: &str) -> bool {
        self.vectors.contains(name)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

fn merge_one(w: &Matrix, pair: &LoraPair, scale: f64) -> Matrix {
    let (m, n) = w.shape();
    let r = pair.a.cols;
    let mut out = vec![0f32; m * n];
    let mut acc = vec![0f64; n];
    for (i, out_row) in out.chunks_mut(n).enumerate() {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..r {
            let a_ik = pair.a.get(i, k) as f64;
            if a_ik == 0.0 {
                continue;
            }
            for (slot, b_kj) in acc.iter_mut().zip(pair.b.row(k)) {
                *slot += a_ik * *b_kj as f64;
            }
        }
        for ((o, w_ij), delta) in out_row.iter_mut().zip(w.row(i)).zip(&acc) {
            *o = (*w_ij as f64 + scale * delta) as f32;
        }
    }
    Matrix { rows: m, cols: n, data: out }
}

/// Applies every adapter entry to the tensor of the same name; other tensors are copied.
pub fn merge(base: &WeightSet, adapter: &LoraAdapter) -> Result<WeightSet, LoraError> {
    for (name, pair) in &adapter.entries {
        let w = base.tensors.get(name).ok_or_else(|| LoraError::MissingTensor(name.clone()))?;
        let expected = (pair.a.rows, pair.b.cols);
        if w.shape() != expected || base.vectors.contains(name) {
            return Err(LoraError::ShapeMismatch { name: name.clone(), expected, found: w.shape() });
        }
    }
    let scale = adapter.scale();
    let merged: Vec<(String, Matrix)> = adapter
        .entries
        .par_iter()
        .map(|(name, pair)| (name.clone(), merge_one(&base.tensors[name], pair, scale)))
        .collect();

    let mut out = base.clone();
    for (name, m) in merged {
        out.tensors.insert(name, m);
    }
    Ok(out)
}

fn widen(name: &str, view: &TensorView<'_>) -> Result<Vec<f32>, LoraError> {
    let bytes = view.data();
    let values = match view.dtype() {
        Dtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        other => return Err(LoraError::UnsupportedDtype { name: name.to_string(), dtype: format!("{other:?}") }),
    };
    Ok(values)
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<WeightSet, LoraError> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| LoraError::CorruptContainer(e.to_string()))?;
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| LoraError::CorruptContainer(e.to_string()))?;

    let mut ws = WeightSet::new();
    if let Some(info) = meta.metadata() {
        ws.metadata = info.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    }
    for (name, view) in st.tensors() {
        let values = widen(&name, &view)?;
        match *view.shape() {
            [n] if n > 0 => ws.insert_vector(name, values)?,
            [rows, cols] if rows > 0 && cols > 0 => ws.insert(name, Matrix::new(rows, cols, values)?),
            _ => return Err(LoraError::UnsupportedShape { name, shape: view.shape().to_vec() }),
        }
    }
    Ok(ws)
}

pub fn weights_to_bytes(ws: &WeightSet) -> Result<Vec<u8>, LoraError> {
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = ws
        .tensors
        .iter()
        .map(|(name, m)| {
            let shape = if ws.vectors.contains(name) { vec![m.cols] } else { vec![m.rows, m.cols] };
            let bytes = m.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), shape, bytes)
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| LoraError::CorruptContainer(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let info: Option<HashMap<String, String>> =
        (!ws.metadata.is_empty()).then(|| ws.metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect());
    safetensors::serialize(views, info).map_err(|e| LoraError::CorruptContainer(e.to_string()))
}

pub fn load_weights(path: &Path) -> Result<WeightSet, LoraError> {
    weights_from_bytes(&std::fs::read(path)?)
}

pub fn save_weights(ws: &WeightSet, path: &Path) -> Result<(), LoraError> {
    std::fs::write(path, weights_to_bytes(ws)?)?;
    Ok(())
}

/// Maps adapter tensor stems (names without the `lora_A/B` suffix) to base tensor names.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenameTable {
    pub strip_prefix: String,
    pub append_suffix: String,
    /// Explicit stem -> base name overrides.
    pub map: BTreeMap<String, String>,
}

impl Default for RenameTable {
    fn default() -> Self {
        RenameTable { strip_prefix: "base_model.model.".into(), append_suffix: ".weight".into(), map: BTreeMap::new() }
    }
}

impl RenameTable {
    pub fn from_toml(text: &str) -> Result<Self, LoraError> {
        toml::from_str(text).map_err(|e| LoraError::RenameTable(e.to_string()))
    }

    pub fn resolve(&self, stem: &str) -> String {
        if let Some(explicit) = self.map.get(stem) {
            return explicit.clone();
        }
        let stripped = stem.strip_prefix(self.strip_prefix.as_str()).unwrap_or(stem);
        format!("{stripped}{}", self.append_suffix)
    }
}

const LORA_A_SUFFIXES: [&str; 2] = [".lora_A.weight", ".lora_A.default.weight"];
const LORA_B_SUFFIXES: [&str; 2] = [".lora_B.weight", ".lora_B.default.weight"];

fn stem_of<'a>(name: &'a str, suffixes: &[&str]) -> Option<&'a str> {
    suffixes.iter().find_map(|s| name.strip_suffix(s))
}

fn metadata_number(meta: &BTreeMap<String, String>, keys: &[&str]) -> Option<f64> {
    keys.iter().find_map(|k| meta.get(*k)).and_then(|v| v.trim().parse().ok())
}

/// Reads `r` / `lora_alpha` from a PEFT `adapter_config.json`.
pub fn read_adapter_config(path: &Path) -> Result<(Option<usize>, Option<f64>), LoraError> {
    let text = std::fs::read_to_string(path)?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| LoraError::InvalidAdapter(format!("{}: {e}", path.display())))?;
    Ok((v.get("r").and_then(|x| x.as_u64()).map(|x| x as usize), v.get("lora_alpha").and_then(|x| x.as_f64())))
}

/// Builds an adapter from PEFT-named tensors.
///
/// Rank and alpha come from the explicit arguments first, then the container
/// metadata, then `adapter_config.json` beside the file. Rank can also be read
/// off the factor shapes; alpha cannot, so a missing alpha is an error.
pub fn load_adapter(
    path: &Path,
    rank: Option<usize>,
    alpha: Option<f64>,
    rename: &RenameTable,
) -> Result<LoraAdapter, LoraError> {
    let ws = load_weights(path)?;
    let sidecar = path.parent().map(|p| p.join("adapter_config.json")).filter(|p| p.exists());
    let (cfg_rank, cfg_alpha) = match sidecar {
        Some(p) => read_adapter_config(&p)?,
        None => (None, None),
    };
    let meta_rank = metadata_number(ws.metadata(), &["r", "rank", "lora_rank"]).map(|r| r as usize);
    let meta_alpha = metadata_number(ws.metadata(), &["lora_alpha", "alpha"]);

    let mut pairs: BTreeMap<&str, (Option<&Matrix>, Option<&Matrix>)> = BTreeMap::new();
    for (name, m) in ws.tensors() {
        if let Some(stem) = stem_of(name, &LORA_A_SUFFIXES) {
            pairs.entry(stem).or_default().0 = Some(m);
        } else if let Some(stem) = stem_of(name, &LORA_B_SUFFIXES) {
            pairs.entry(stem).or_default().1 = Some(m);
        }
    }
    if pairs.is_empty() {
        return Err(LoraError::InvalidAdapter(format!("{} holds no lora_A/lora_B tensors", path.display())));
    }

    let shape_rank = pairs.values().find_map(|(down, _)| down.map(|m| m.rows()));
    let rank = rank
        .or(meta_rank)
        .or(cfg_rank)
        .or(shape_rank)
        .ok_or_else(|| LoraError::InvalidAdapter("cannot determine rank".into()))?;
    let alpha = alpha
        .or(meta_alpha)
        .or(cfg_alpha)
        .ok_or_else(|| LoraError::InvalidAdapter("alpha not given and not found in adapter metadata".into()))?;

    let mut adapter = LoraAdapter::new(rank, alpha)?;
    for (stem, pair) in pairs {
        match pair {
            (Some(down), Some(up)) => adapter.insert(rename.resolve(stem), up.clone(), down.clone())?,
            _ => return Err(LoraError::InvalidAdapter(format!("`{stem}` is missing one of lora_A/lora_B"))),
        }
    }
    Ok(adapter)
}
