//! On-disk formats: binary dataset and model containers, embedding dumps,
//! manifests and structured reports.
//!
//! A container starts with a version line, then the length of a JSON
//! header as a little-endian `u64`, the header itself, and a payload of
//! little-endian `f64` values for every tensor the header lists, in order.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::AlignmentHead;
use crate::datagen::{Dataset, Episode, GenConfig, Instruction, Split, World};
use crate::encoders::{AUModel, EEModel};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Parameters};
use crate::probing::Representations;
use crate::training::{Checkpoint, TrainConfig};

pub const DATASET_FORMAT: &str = "mirror-align-dataset/v1";
pub const MODEL_FORMAT: &str = "mirror-align-model/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header<M> {
    meta: M,
    tensors: Vec<TensorEntry>,
}

fn encode_container<M: Serialize>(
    format: &str,
    meta: &M,
    tensors: &[(String, &Matrix)],
) -> Result<Vec<u8>> {
    let header = Header {
        meta,
        tensors: tensors
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("headers serialize");
    let payload: usize = tensors.iter().map(|(_, m)| m.data().len()).sum();
    let mut out = Vec::with_capacity(format.len() + 9 + json.len() + 8 * payload);
    out.extend_from_slice(format.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in tensors {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode_container<M: DeserializeOwned>(
    path: &Path,
    format: &str,
    bytes: &[u8],
) -> Result<(M, Vec<(String, Matrix)>)> {
    let bad = |reason: String| Error::format(path, reason);
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing version line".into()))?;
    let version = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| bad("version line is not text".into()))?;
    if version != format {
        return Err(bad(format!("expected `{format}`, found `{version}`")));
    }
    let mut rest = &bytes[newline + 1..];
    let mut len = [0u8; 8];
    rest.read_exact(&mut len)
        .map_err(|_| bad("truncated header length".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    if rest.len() < len {
        return Err(bad("truncated header".into()));
    }
    let header: Header<M> =
        serde_json::from_slice(&rest[..len]).map_err(|e| bad(format!("header: {e}")))?;
    rest = &rest[len..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n = t.rows * t.cols;
        if rest.len() < 8 * n {
            return Err(bad(format!("payload ends inside tensor `{}`", t.name)));
        }
        let data = rest[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        rest = &rest[8 * n..];
        tensors.push((t.name, Matrix::from_vec(t.rows, t.cols, data)?));
    }
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes after payload", rest.len())));
    }
    Ok((header.meta, tensors))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn file_checksum(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

/// Hex SHA-256 over every parameter's name, shape and bit pattern.
pub fn parameter_checksum<P: Parameters>(model: &P) -> String {
    let mut h = Sha256::new();
    for (name, m) in model.params() {
        h.update(name.as_bytes());
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeMeta {
    id: usize,
    instruction_id: usize,
    class_id: usize,
    split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    config: GenConfig,
    instructions: Vec<Instruction>,
    episodes: Vec<EpisodeMeta>,
    warnings: Vec<String>,
}

fn world_tensors(w: &World) -> Vec<(String, Matrix)> {
    vec![
        ("world.class_prototypes".into(), w.class_prototypes.clone()),
        (
            "world.instruction_latents".into(),
            w.instruction_latents.clone(),
        ),
        ("world.obs_render".into(), w.obs_render.clone()),
        ("world.obs_nuisance".into(), w.obs_nuisance.clone()),
        ("world.obs_drift".into(), Matrix::row_vector(&w.obs_drift)),
        ("world.state_render".into(), w.state_render.clone()),
        ("world.state_nuisance".into(), w.state_nuisance.clone()),
        (
            "world.state_drift".into(),
            Matrix::row_vector(&w.state_drift),
        ),
        ("world.action_map".into(), w.action_map.clone()),
        (
            "world.action_drift".into(),
            Matrix::row_vector(&w.action_drift),
        ),
    ]
}

/// Serialized dataset bytes. Identical datasets give identical bytes.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let meta = DatasetMeta {
        config: ds.config.clone(),
        instructions: ds.instructions.clone(),
        episodes: ds
            .episodes
            .iter()
            .map(|e| EpisodeMeta {
                id: e.id,
                instruction_id: e.instruction_id,
                class_id: e.class_id,
                split: e.split,
            })
            .collect(),
        warnings: ds.warnings.clone(),
    };
    let mut owned = world_tensors(&ds.world);
    let difficulty: Vec<f64> = ds.episodes.iter().map(|e| e.difficulty).collect();
    owned.push((
        "episodes.difficulty".into(),
        Matrix::row_vector(&difficulty),
    ));
    let mut tensors: Vec<(String, &Matrix)> = owned.iter().map(|(n, m)| (n.clone(), m)).collect();
    let latents: Vec<Matrix> = ds
        .episodes
        .iter()
        .map(|e| Matrix::row_vector(&e.latent))
        .collect();
    for (e, latent) in ds.episodes.iter().zip(&latents) {
        tensors.push((format!("episode.{}.latent", e.id), latent));
        tensors.push((format!("episode.{}.observations", e.id), &e.observations));
        tensors.push((format!("episode.{}.states", e.id), &e.states));
        tensors.push((format!("episode.{}.actions", e.id), &e.actions));
    }
    encode_container(DATASET_FORMAT, &meta, &tensors)
}

struct TensorTable {
    path: std::path::PathBuf,
    tensors: std::collections::HashMap<String, Matrix>,
}

impl TensorTable {
    fn new(path: &Path, list: Vec<(String, Matrix)>) -> Self {
        TensorTable {
            path: path.to_path_buf(),
            tensors: list.into_iter().collect(),
        }
    }

    fn take(&mut self, name: &str) -> Result<Matrix> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::format(&self.path, format!("missing tensor `{name}`")))
    }

    fn take_vec(&mut self, name: &str) -> Result<Vec<f64>> {
        Ok(self.take(name)?.into_data())
    }
}

pub fn decode_dataset(path: &Path, bytes: &[u8]) -> Result<Dataset> {
    let (meta, list): (DatasetMeta, _) = decode_container(path, DATASET_FORMAT, bytes)?;
    let mut t = TensorTable::new(path, list);
    let world = World {
        class_prototypes: t.take("world.class_prototypes")?,
        instruction_latents: t.take("world.instruction_latents")?,
        obs_render: t.take("world.obs_render")?,
        obs_nuisance: t.take("world.obs_nuisance")?,
        obs_drift: t.take_vec("world.obs_drift")?,
        state_render: t.take("world.state_render")?,
        state_nuisance: t.take("world.state_nuisance")?,
        state_drift: t.take_vec("world.state_drift")?,
        action_map: t.take("world.action_map")?,
        action_drift: t.take_vec("world.action_drift")?,
    };
    let difficulty = t.take_vec("episodes.difficulty")?;
    if difficulty.len() != meta.episodes.len() {
        return Err(Error::format(
            path,
            "difficulty count does not match episode count",
        ));
    }
    let mut episodes = Vec::with_capacity(meta.episodes.len());
    for (m, d) in meta.episodes.into_iter().zip(difficulty) {
        episodes.push(Episode {
            id: m.id,
            instruction_id: m.instruction_id,
            class_id: m.class_id,
            latent: t.take_vec(&format!("episode.{}.latent", m.id))?,
            observations: t.take(&format!("episode.{}.observations", m.id))?,
            states: t.take(&format!("episode.{}.states", m.id))?,
            actions: t.take(&format!("episode.{}.actions", m.id))?,
            difficulty: d,
            split: m.split,
        });
    }
    Ok(Dataset {
        config: meta.config,
        world,
        instructions: meta.instructions,
        episodes,
        warnings: meta.warnings,
    })
}

/// Human-readable summary written next to a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub classes: usize,
    pub instructions: usize,
    pub episodes: usize,
    pub train_episodes: usize,
    pub test_episodes: usize,
    /// Hex SHA-256 of the dataset file.
    pub checksum: String,
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn describe(ds: &Dataset, checksum: String) -> Self {
        DatasetManifest {
            format: DATASET_FORMAT.into(),
            seed: ds.config.seed,
            classes: ds.class_count(),
            instructions: ds.instruction_count(),
            episodes: ds.episodes.len(),
            train_episodes: ds.split_ids(Split::Train).len(),
            test_episodes: ds.split_ids(Split::Test).len(),
            checksum,
            warnings: ds.warnings.clone(),
        }
    }
}

/// Writes the dataset and returns its checksum.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<String> {
    let bytes = encode_dataset(ds)?;
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(path, &read_bytes(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    tag: String,
    fraction: f64,
    epoch: usize,
    config: TrainConfig,
    au_temperature: Option<f64>,
    has_ee: bool,
    has_head: bool,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = ModelMeta {
        tag: ckpt.tag.clone(),
        fraction: ckpt.fraction,
        epoch: ckpt.epoch,
        config: ckpt.config.clone(),
        au_temperature: ckpt.au.as_ref().map(|m| m.temperature),
        has_ee: ckpt.ee.is_some(),
        has_head: ckpt.head.is_some(),
    };
    let mut tensors: Vec<(String, &Matrix)> = Vec::new();
    if let Some(m) = &ckpt.au {
        tensors.extend(m.params().into_iter().map(|(n, m)| (n.to_string(), m)));
    }
    if let Some(m) = &ckpt.ee {
        tensors.extend(m.params().into_iter().map(|(n, m)| (n.to_string(), m)));
    }
    if let Some(m) = &ckpt.head {
        tensors.extend(m.params().into_iter().map(|(n, m)| (n.to_string(), m)));
    }
    encode_container(MODEL_FORMAT, &meta, &tensors)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let (meta, list): (ModelMeta, _) = decode_container(path, MODEL_FORMAT, bytes)?;
    let mut t = TensorTable::new(path, list);
    let au = match meta.au_temperature {
        Some(temperature) => Some(AUModel {
            w1: t.take("au.w1")?,
            b1: t.take("au.b1")?,
            w2: t.take("au.w2")?,
            b2: t.take("au.b2")?,
            prototypes: t.take("au.prototypes")?,
            temperature,
        }),
        None => None,
    };
    let ee = if meta.has_ee {
        Some(EEModel {
            instruction_embedding: t.take("ee.instruction_embedding")?,
            w1: t.take("ee.w1")?,
            b1: t.take("ee.b1")?,
            w2: t.take("ee.w2")?,
            b2: t.take("ee.b2")?,
            head_w: t.take("ee.head_w")?,
            head_b: t.take("ee.head_b")?,
        })
    } else {
        None
    };
    let head = if meta.has_head {
        Some(AlignmentHead {
            u_weight: t.take("head.u_weight")?,
            u_bias: t.take("head.u_bias")?,
            e_weight: t.take("head.e_weight")?,
            e_bias: t.take("head.e_bias")?,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        tag: meta.tag,
        fraction: meta.fraction,
        epoch: meta.epoch,
        au,
        ee,
        head,
        config: meta.config,
    })
}

/// Writes a checkpoint and returns its checksum.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<String> {
    let bytes = encode_checkpoint(ckpt)?;
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(path, &read_bytes(path)?)
}

/// Pretty-printed JSON report.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("reports serialize");
    bytes.push(b'\n');
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a text artifact and returns its checksum.
pub fn write_text(path: &Path, text: &str) -> Result<String> {
    write_bytes(path, text.as_bytes())?;
    Ok(sha256_hex(text.as_bytes()))
}

/// One row of an embedding dump.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub sample_id: usize,
    pub episode_id: usize,
    pub instruction_id: usize,
    pub class_id: usize,
    pub split: Split,
    pub outcome: Option<bool>,
    pub values: Vec<f64>,
}

/// A table of embeddings with identity metadata, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub checkpoint: String,
    pub dim: usize,
    pub rows: Vec<EmbeddingRow>,
}

const DUMP_COLUMNS: &str = "sample_id,episode_id,instruction_id,class_id,split,outcome";

impl EmbeddingDump {
    /// Rows of `values` (one per episode id) labelled from the dataset.
    pub fn from_matrix(
        ds: &Dataset,
        values: &Matrix,
        outcomes: Option<&[bool]>,
        checkpoint: &str,
    ) -> Result<Self> {
        if values.rows() != ds.episodes.len() {
            return Err(Error::shape(
                "EmbeddingDump::from_matrix",
                values.shape(),
                (ds.episodes.len(), values.cols()),
            ));
        }
        let rows = ds
            .episodes
            .iter()
            .map(|ep| EmbeddingRow {
                sample_id: ep.id,
                episode_id: ep.id,
                instruction_id: ep.instruction_id,
                class_id: ep.class_id,
                split: ep.split,
                outcome: outcomes.map(|o| o[ep.id]),
                values: values.row(ep.id).to_vec(),
            })
            .collect();
        Ok(EmbeddingDump {
            checkpoint: checkpoint.to_string(),
            dim: values.cols(),
            rows,
        })
    }

    pub fn matrix(&self) -> Result<Matrix> {
        if self.rows.is_empty() {
            return Ok(Matrix::zeros(0, self.dim));
        }
        Matrix::from_rows(
            &self
                .rows
                .iter()
                .map(|r| r.values.as_slice())
                .collect::<Vec<_>>(),
        )
    }

    /// First line `# dim=<d> checkpoint=<tag>`, then a column header, then
    /// one comma-separated row per sample. Values print in shortest
    /// round-trip form; an unknown outcome is an empty field.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# dim={} checkpoint={}\n{DUMP_COLUMNS}",
            self.dim, self.checkpoint
        );
        for i in 0..self.dim {
            out.push_str(&format!(",v{i}"));
        }
        out.push('\n');
        for r in &self.rows {
            let outcome = match r.outcome {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}",
                r.sample_id,
                r.episode_id,
                r.instruction_id,
                r.class_id,
                r.split.as_str(),
                outcome
            ));
            for v in &r.values {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<String> {
        write_text(path, &self.to_text())
    }

    pub fn read(path: &Path) -> Result<EmbeddingDump> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::format(path, reason);
        let mut lines = BufReader::new(file).lines();
        let mut next = || -> Result<Option<String>> {
            lines.next().transpose().map_err(|e| Error::io(path, e))
        };
        let first = next()?.ok_or_else(|| bad("empty dump".into()))?;
        let mut dim = None;
        let mut checkpoint = None;
        for field in first.trim_start_matches('#').split_whitespace() {
            match field.split_once('=') {
                Some(("dim", v)) => dim = v.parse::<usize>().ok(),
                Some(("checkpoint", v)) => checkpoint = Some(v.to_string()),
                _ => {}
            }
        }
        let dim = dim.ok_or_else(|| bad("header lacks dim".into()))?;
        let checkpoint = checkpoint.ok_or_else(|| bad("header lacks checkpoint".into()))?;
        next()?.ok_or_else(|| bad("missing column header".into()))?;
        let mut rows = Vec::new();
        let mut line_no = 2;
        while let Some(line) = next()? {
            line_no += 1;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 + dim {
                return Err(bad(format!(
                    "line {line_no}: expected {} fields, got {}",
                    6 + dim,
                    f.len()
                )));
            }
            let int = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| bad(format!("line {line_no}: bad integer `{s}`")))
            };
            let outcome = match f[5] {
                "1" => Some(true),
                "0" => Some(false),
                "" => None,
                other => return Err(bad(format!("line {line_no}: bad outcome `{other}`"))),
            };
            let values = f[6..]
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| bad(format!("line {line_no}: bad value `{s}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(EmbeddingRow {
                sample_id: int(f[0])?,
                episode_id: int(f[1])?,
                instruction_id: int(f[2])?,
                class_id: int(f[3])?,
                split: f[4]
                    .parse()
                    .map_err(|_| bad(format!("line {line_no}: bad split `{}`", f[4])))?,
                outcome,
                values,
            });
        }
        Ok(EmbeddingDump {
            checkpoint,
            dim,
            rows,
        })
    }
}

/// Writes both streams of a representation set as `<stem>_u.csv` and
/// `<stem>_e.csv` in `dir`, returning the two paths.
pub fn write_representations(
    dir: &Path,
    stem: &str,
    ds: &Dataset,
    reps: &Representations,
    outcomes: Option<&[bool]>,
    checkpoint: &str,
) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    let pu = dir.join(format!("{stem}_u.csv"));
    let pe = dir.join(format!("{stem}_e.csv"));
    EmbeddingDump::from_matrix(ds, &reps.u, outcomes, checkpoint)?.write(&pu)?;
    EmbeddingDump::from_matrix(ds, &reps.e, outcomes, checkpoint)?.write(&pe)?;
    Ok((pu, pe))
}

/// Reads a representation set written by [`write_representations`].
pub fn read_representations(dir: &Path, stem: &str) -> Result<Representations> {
    let u = EmbeddingDump::read(&dir.join(format!("{stem}_u.csv")))?.matrix()?;
    let e = EmbeddingDump::read(&dir.join(format!("{stem}_e.csv")))?.matrix()?;
    Ok(Representations { u, e })
}
