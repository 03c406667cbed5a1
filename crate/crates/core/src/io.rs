//! File formats: model and policy bundles, dataset CSV with a JSON sidecar.
//!
//! A bundle is `magic (8 bytes) | version (u32 LE) | header length (u64 LE) |
//! JSON header | payload of f64 LE`. The header lists every tensor by name,
//! shape and offset into the payload; matrices are stored row-major.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::benchmark::{ScaleState, SystemConfig, TimeGrid, Trajectory, Variant};
use crate::error::{Error, Result};
use crate::koopman::KoopmanModel;
use crate::lifting::LiftingMap;
use crate::linalg::{Mat, Vector};
use crate::lqr::{Affine, LqrPolicy};
use crate::model::{KoopmanBlocks, LiftedDims, ModelForm};
use crate::training::{Dataset, NormalizationStats};

pub const MODEL_MAGIC: &[u8; 8] = b"TSKMODEL";
pub const POLICY_MAGIC: &[u8; 8] = b"TSKPOLCY";
pub const BUNDLE_VERSION: u32 = 1;
pub const DATASET_FORMAT_VERSION: u32 = 1;

const MAX_HEADER_BYTES: u64 = 1 << 22;
const MAX_PAYLOAD_VALUES: usize = 1 << 26;
const MAX_TENSOR_DIM: usize = 1 << 16;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope<M> {
    meta: M,
    tensors: Vec<TensorEntry>,
}

#[derive(Default)]
struct TensorWriter {
    entries: Vec<TensorEntry>,
    data: Vec<f64>,
}

impl TensorWriter {
    fn matrix(&mut self, name: &str, m: &Mat) {
        self.entries.push(TensorEntry {
            name: name.to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
            offset: self.data.len(),
        });
        for r in 0..m.nrows() {
            self.data.extend(m.row(r).iter());
        }
    }

    fn vector(&mut self, name: &str, v: &Vector) {
        self.matrix(name, &Mat::from_column_slice(v.len(), 1, v.as_slice()));
    }

    fn finish<M: Serialize>(self, magic: &[u8; 8], meta: M) -> Vec<u8> {
        let header = serde_json::to_vec(&Envelope { meta, tensors: self.entries }).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.data.len());
        out.extend_from_slice(magic);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

struct TensorReader {
    entries: BTreeMap<String, TensorEntry>,
    data: Vec<f64>,
}

impl TensorReader {
    fn take(&self, name: &str, rows: usize, cols: usize) -> Result<Mat> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::format(format!("missing tensor {name}")))?;
        if e.rows != rows || e.cols != cols {
            return Err(Error::format(format!(
                "tensor {name}: expected {rows}×{cols}, found {}×{}",
                e.rows, e.cols
            )));
        }
        let n = rows * cols;
        Ok(Mat::from_row_slice(rows, cols, &self.data[e.offset..e.offset + n]))
    }

    fn take_vector(&self, name: &str, len: usize) -> Result<Vector> {
        let m = self.take(name, len, 1)?;
        Ok(Vector::from_column_slice(m.as_slice()))
    }

    /// Shape recorded for `name`, for tensors whose size the header alone determines.
    fn shape(&self, name: &str) -> Result<(usize, usize)> {
        self.entries
            .get(name)
            .map(|e| (e.rows, e.cols))
            .ok_or_else(|| Error::format(format!("missing tensor {name}")))
    }
}

fn decode<M: DeserializeOwned>(magic: &[u8; 8], bytes: &[u8]) -> Result<(M, TensorReader)> {
    if bytes.len() < 20 || &bytes[..8] != magic {
        return Err(Error::format("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != BUNDLE_VERSION {
        return Err(Error::format(format!("unsupported bundle version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER_BYTES || header_len > (bytes.len() - 20) as u64 {
        return Err(Error::format("header length out of range"));
    }
    let header_end = 20 + header_len as usize;
    let env: Envelope<M> = serde_json::from_slice(&bytes[20..header_end])?;
    let payload = &bytes[header_end..];
    if !payload.len().is_multiple_of(8) || payload.len() / 8 > MAX_PAYLOAD_VALUES {
        return Err(Error::format("payload length is not a whole number of f64 values or too large"));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut entries = BTreeMap::new();
    let mut covered = 0usize;
    for e in env.tensors {
        if e.rows > MAX_TENSOR_DIM || e.cols > MAX_TENSOR_DIM {
            return Err(Error::format(format!("tensor {} is too large", e.name)));
        }
        let end = e
            .offset
            .checked_add(e.rows * e.cols)
            .filter(|&end| end <= data.len())
            .ok_or_else(|| Error::format(format!("tensor {} exceeds the payload", e.name)))?;
        if data[e.offset..end].iter().any(|v| !v.is_finite()) {
            return Err(Error::format(format!("tensor {} has non-finite entries", e.name)));
        }
        covered += e.rows * e.cols;
        if entries.insert(e.name.clone(), e).is_some() {
            return Err(Error::format("duplicate tensor name"));
        }
    }
    if covered != data.len() {
        return Err(Error::format("payload size does not match the tensor table"));
    }
    Ok((env.meta, TensorReader { entries, data }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    form: ModelForm,
    dims: LiftedDims,
    lifting_inputs: [usize; 3],
    training_seed: Option<u64>,
    model_hash: String,
}

const LIFTING_NAMES: [&str; 3] = ["psi_x", "psi_y", "psi_w"];

pub fn encode_model(model: &KoopmanModel, training_seed: Option<u64>) -> Vec<u8> {
    let mut w = TensorWriter::default();
    for (name, m) in model.blocks.blocks() {
        w.matrix(name, m);
    }
    let maps = [&model.psi_x, &model.psi_y, &model.psi_w];
    for (prefix, map) in LIFTING_NAMES.iter().zip(maps) {
        let (w1, b1, w2, b2) = map.parts();
        w.matrix(&format!("{prefix}.w1"), w1);
        w.vector(&format!("{prefix}.b1"), b1);
        w.matrix(&format!("{prefix}.w2"), w2);
        w.vector(&format!("{prefix}.b2"), b2);
    }
    let meta = ModelMeta {
        form: model.blocks.form,
        dims: model.dims(),
        lifting_inputs: maps.map(|m| m.input_dim()),
        training_seed,
        model_hash: model.hash_hex(),
    };
    w.finish(MODEL_MAGIC, meta)
}

/// Decodes a model bundle; returns the model and its training seed.
pub fn decode_model(bytes: &[u8]) -> Result<(KoopmanModel, Option<u64>)> {
    let (meta, r): (ModelMeta, _) = decode(MODEL_MAGIC, bytes)?;
    meta.dims.check_form(meta.form)?;
    let mut blocks = KoopmanBlocks::zeros(meta.form, meta.dims)?;
    for (name, m) in blocks.blocks_mut() {
        let (rows, cols) = (m.nrows(), m.ncols());
        *m = r.take(name, rows, cols)?;
    }
    blocks.validate()?;
    let mut maps = Vec::with_capacity(3);
    for (prefix, input) in LIFTING_NAMES.iter().zip(meta.lifting_inputs) {
        let (hidden, _) = r.shape(&format!("{prefix}.w1"))?;
        let (nl, _) = r.shape(&format!("{prefix}.w2"))?;
        maps.push(LiftingMap::from_parts(
            input,
            r.take(&format!("{prefix}.w1"), hidden, input)?,
            r.take_vector(&format!("{prefix}.b1"), hidden)?,
            r.take(&format!("{prefix}.w2"), nl, hidden)?,
            r.take_vector(&format!("{prefix}.b2"), nl)?,
        )?);
    }
    let psi_w = maps.pop().expect("three maps");
    let psi_y = maps.pop().expect("three maps");
    let psi_x = maps.pop().expect("three maps");
    let model = KoopmanModel { blocks, psi_x, psi_y, psi_w };
    model.validate()?;
    if model.hash_hex() != meta.model_hash {
        return Err(Error::format("model hash does not match its contents"));
    }
    Ok((model, meta.training_seed))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyMeta {
    dims: LiftedDims,
    iterations: usize,
    model_hash: String,
    cost_hash: String,
}

/// Policy together with the hashes of the model and cost it was solved for.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyFile {
    pub policy: LqrPolicy,
    pub dims: LiftedDims,
    pub model_hash: String,
    pub cost_hash: String,
}

pub fn encode_policy(file: &PolicyFile) -> Vec<u8> {
    let p = &file.policy;
    let mut w = TensorWriter::default();
    w.matrix("p", &p.p);
    w.matrix("f", &p.f);
    w.matrix("q", &p.q);
    for (prefix, a) in [("p_affine", &p.p_affine), ("d_affine", &p.d_affine)] {
        w.matrix(&format!("{prefix}.x"), &a.x);
        w.matrix(&format!("{prefix}.u"), &a.u);
        w.vector(&format!("{prefix}.c"), &a.c);
    }
    let meta = PolicyMeta {
        dims: file.dims,
        iterations: p.iterations,
        model_hash: file.model_hash.clone(),
        cost_hash: file.cost_hash.clone(),
    };
    w.finish(POLICY_MAGIC, meta)
}

pub fn decode_policy(bytes: &[u8]) -> Result<PolicyFile> {
    let (meta, r): (PolicyMeta, _) = decode(POLICY_MAGIC, bytes)?;
    let LiftedDims { x, y, w, u } = meta.dims;
    if y == 0 || w == 0 || [x, y, w, u].iter().any(|&d| d > MAX_TENSOR_DIM) {
        return Err(Error::format("policy dimensions out of range"));
    }
    let affine = |prefix: &str, rows: usize| -> Result<Affine> {
        Ok(Affine {
            x: r.take(&format!("{prefix}.x"), rows, x)?,
            u: r.take(&format!("{prefix}.u"), rows, u)?,
            c: r.take_vector(&format!("{prefix}.c"), rows)?,
        })
    };
    let policy = LqrPolicy {
        p: r.take("p", y, y)?,
        f: r.take("f", w, y)?,
        q: r.take("q", w, w)?,
        p_affine: affine("p_affine", y)?,
        d_affine: affine("d_affine", w)?,
        iterations: meta.iterations,
    };
    Ok(PolicyFile {
        policy,
        dims: meta.dims,
        model_hash: meta.model_hash,
        cost_hash: meta.cost_hash,
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn save_model(path: &Path, model: &KoopmanModel, training_seed: Option<u64>) -> Result<()> {
    write_bytes(path, &encode_model(model, training_seed))
}

pub fn load_model(path: &Path) -> Result<(KoopmanModel, Option<u64>)> {
    decode_model(&std::fs::read(path)?)
}

pub fn save_policy(path: &Path, file: &PolicyFile) -> Result<()> {
    write_bytes(path, &encode_policy(file))
}

pub fn load_policy(path: &Path) -> Result<PolicyFile> {
    decode_policy(&std::fs::read(path)?)
}

pub const DATASET_CSV_HEADER: [&str; 8] = ["t", "x1", "x2", "y1", "y2", "w", "u", "traj_id"];

/// Metadata stored next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    pub format_version: u32,
    pub system: SystemConfig,
    pub grid: TimeGrid,
    pub seed: u64,
    pub n_trajectories: usize,
    pub samples_per_trajectory: usize,
    pub resampled: usize,
    pub stats: NormalizationStats,
    /// Hash of the experiment configuration that produced the data, if any.
    pub config_hash: Option<String>,
}

pub fn dataset_sidecar(dataset: &Dataset, config_hash: Option<String>) -> DatasetSidecar {
    DatasetSidecar {
        format_version: DATASET_FORMAT_VERSION,
        system: dataset.system,
        grid: dataset.grid,
        seed: dataset.seed,
        n_trajectories: dataset.len(),
        samples_per_trajectory: dataset.trajectories.first().map_or(0, |t| t.samples.len()),
        resampled: dataset.resampled,
        stats: dataset.stats(),
        config_hash,
    }
}

/// One row per recorded sample, trajectories in order.
pub fn dataset_to_csv(dataset: &Dataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(DATASET_CSV_HEADER).map_err(csv_err)?;
    for (id, t) in dataset.trajectories.iter().enumerate() {
        for s in &t.samples {
            w.serialize((s.t, s.x[0], s.x[1], s.y[0], s.y[1], s.w, s.u, id)).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::format(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::format(format!("dataset CSV: {e}"))
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    t: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
    w: f64,
    u: f64,
    traj_id: usize,
}

/// Parses a dataset CSV against its sidecar, checking layout and consistency.
pub fn dataset_from_csv(text: &str, sidecar: &DatasetSidecar) -> Result<Dataset> {
    if sidecar.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::format(format!("unsupported dataset version {}", sidecar.format_version)));
    }
    sidecar.system.validate()?;
    sidecar.grid.validate()?;
    let per = sidecar.samples_per_trajectory;
    if per < 2 || sidecar.n_trajectories.checked_mul(per).is_none_or(|n| n > MAX_PAYLOAD_VALUES) {
        return Err(Error::format("dataset size out of range"));
    }
    let variant: Variant = sidecar.system.variant;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?;
    if header.iter().ne(DATASET_CSV_HEADER.iter().copied()) {
        return Err(Error::format("dataset CSV header does not match the expected columns"));
    }
    let mut trajectories: Vec<Trajectory> = Vec::new();
    for row in r.deserialize::<CsvRow>() {
        let row = row.map_err(csv_err)?;
        let s = ScaleState {
            x: [row.x1, row.x2],
            y: [row.y1, row.y2],
            w: row.w,
            u: row.u,
            t: row.t,
        };
        s.validate(variant)?;
        if row.traj_id == trajectories.len() {
            if trajectories.len() == sidecar.n_trajectories {
                return Err(Error::format("more trajectories than the sidecar declares"));
            }
            trajectories.push(Trajectory { m: sidecar.grid.m, samples: Vec::with_capacity(per) });
        } else if row.traj_id + 1 != trajectories.len() {
            return Err(Error::format("trajectory ids must be contiguous and increasing"));
        }
        let t = trajectories.last_mut().expect("pushed above");
        if t.samples.len() == per {
            return Err(Error::format("trajectory longer than declared"));
        }
        if t.samples.last().is_some_and(|p| !(s.t > p.t)) {
            return Err(Error::format("sample times must increase within a trajectory"));
        }
        t.samples.push(s);
    }
    if trajectories.len() != sidecar.n_trajectories || trajectories.iter().any(|t| t.samples.len() != per) {
        return Err(Error::format("dataset CSV does not match the sidecar counts"));
    }
    Ok(Dataset {
        system: sidecar.system,
        grid: sidecar.grid,
        seed: sidecar.seed,
        trajectories,
        resampled: sidecar.resampled,
    })
}

pub fn save_dataset(csv_path: &Path, dataset: &Dataset, config_hash: Option<String>) -> Result<()> {
    write_bytes(csv_path, dataset_to_csv(dataset)?.as_bytes())?;
    let sidecar = serde_json::to_string_pretty(&dataset_sidecar(dataset, config_hash))?;
    write_bytes(&sidecar_path(csv_path), sidecar.as_bytes())
}

pub fn load_dataset(csv_path: &Path) -> Result<Dataset> {
    let sidecar: DatasetSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(csv_path))?)?;
    dataset_from_csv(&std::fs::read_to_string(csv_path)?, &sidecar)
}

/// `data.csv` → `data.json`.
pub fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("json")
}
