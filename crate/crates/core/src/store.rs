//! On-disk formats.
//!
//! A corpus directory holds `manifest.json` plus three flat little-endian
//! arrays: `theta.f64` (n×4), `z.i8` (n×(T+1)×N×K) and `w.f32`
//! (n×(T+1)×N×N). A checkpoint is the 8-byte magic `GNPECKPT`, a `u64`
//! header length, a JSON header with the tensor table, then every tensor as
//! little-endian `f32` in table order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::abm::{GraphTrace, ModelParams, PriorBox, SimConfig};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, Fingerprint, PosteriorModel};
use crate::numerics::Tensor;
use crate::training::Corpus;

pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GNPECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

impl ArrayInfo {
    fn byte_len(&self) -> Result<usize> {
        let size = match self.dtype.as_str() {
            "f64" => 8,
            "f32" => 4,
            "i8" => 1,
            other => return Err(Error::Validation(format!("unknown dtype {other}"))),
        };
        Ok(size * self.shape.iter().product::<usize>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub n_sims: usize,
    pub seed: u64,
    pub config_hash: String,
    pub sim: SimConfig,
    pub prior: PriorBox,
    pub theta: ArrayInfo,
    pub z: ArrayInfo,
    pub w: ArrayInfo,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report types serialise");
    v.push(b'\n');
    v
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &to_json_bytes(value))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|x| x.to_le_bytes()).collect();
    write_file(path, &bytes)
}

pub fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = read_file(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(path, "length is not a multiple of 8"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Writes a corpus directory (created if missing).
pub fn write_corpus(dir: &Path, corpus: &Corpus, config_hash: &str) -> Result<CorpusManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = corpus.len();
    let sim = corpus.sim;
    let (nn, k, s) = (sim.n_agents, sim.n_topics, sim.n_steps + 1);
    for (i, t) in corpus.traces.iter().enumerate() {
        if t.fingerprint() != (nn, k, sim.n_steps) {
            return Err(Error::Validation(format!("trace {i} does not match the corpus shape")));
        }
    }

    let theta: Vec<f64> = corpus.thetas.iter().flat_map(|t| t.to_array()).collect();
    write_f64s(&dir.join("theta.f64"), &theta)?;
    let z: Vec<u8> = corpus.traces.iter().flat_map(|t| t.z.iter().map(|&v| v as u8)).collect();
    write_file(&dir.join("z.i8"), &z)?;
    let w: Vec<u8> = corpus
        .traces
        .iter()
        .flat_map(|t| t.w.iter().flat_map(|&x| (x as f32).to_le_bytes()))
        .collect();
    write_file(&dir.join("w.f32"), &w)?;

    let manifest = CorpusManifest {
        format_version: CORPUS_FORMAT_VERSION,
        n_sims: n,
        seed: corpus.seed,
        config_hash: config_hash.to_string(),
        sim,
        prior: corpus.prior,
        theta: ArrayInfo {
            file: "theta.f64".into(),
            dtype: "f64".into(),
            shape: vec![n, 4],
        },
        z: ArrayInfo {
            file: "z.i8".into(),
            dtype: "i8".into(),
            shape: vec![n, s, nn, k],
        },
        w: ArrayInfo {
            file: "w.f32".into(),
            dtype: "f32".into(),
            shape: vec![n, s, nn, nn],
        },
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reads and validates a corpus directory.
pub fn read_corpus(dir: &Path) -> Result<(Corpus, CorpusManifest)> {
    let manifest_path = dir.join("manifest.json");
    let m: CorpusManifest = read_json(&manifest_path)?;
    if m.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::format(&manifest_path, format!("unsupported format_version {}", m.format_version)));
    }
    let (n, nn, k, s) = (m.n_sims, m.sim.n_agents, m.sim.n_topics, m.sim.n_steps + 1);
    let expect = [
        (&m.theta, vec![n, 4]),
        (&m.z, vec![n, s, nn, k]),
        (&m.w, vec![n, s, nn, nn]),
    ];
    let mut raw = Vec::new();
    for (info, shape) in expect {
        let path = dir.join(&info.file);
        if info.shape != shape {
            return Err(Error::format(&manifest_path, format!("{} shape {:?}, expected {shape:?}", info.file, info.shape)));
        }
        let bytes = read_file(&path)?;
        if bytes.len() != info.byte_len()? {
            return Err(Error::format(
                &path,
                format!("{} bytes, manifest implies {}", bytes.len(), info.byte_len()?),
            ));
        }
        raw.push(bytes);
    }
    let theta: Vec<f64> = raw[0]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let z: Vec<i8> = raw[1].iter().map(|&b| b as i8).collect();
    let w: Vec<f64> = raw[2]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();

    let (zs, ws) = (s * nn * k, s * nn * nn);
    let thetas = theta.chunks_exact(4).map(|c| ModelParams::from_array([c[0], c[1], c[2], c[3]])).collect();
    let traces = (0..n)
        .map(|i| GraphTrace {
            n_agents: nn,
            n_topics: k,
            n_steps: m.sim.n_steps,
            z: z[i * zs..(i + 1) * zs].to_vec(),
            w: w[i * ws..(i + 1) * ws].to_vec(),
        })
        .collect();
    let corpus = Corpus {
        sim: m.sim,
        prior: m.prior,
        seed: m.seed,
        thetas,
        traces,
    };
    corpus.validate()?;
    Ok((corpus, m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub arch: ArchConfig,
    pub fingerprint: Fingerprint,
    pub prior: PriorBox,
    pub config_hash: String,
    pub training_seed: u64,
    pub epoch: usize,
    pub val_loss: f64,
    pub tensors: Vec<TensorEntry>,
}

/// Metadata stored next to the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub training_seed: u64,
    pub epoch: usize,
    pub val_loss: f64,
}

pub fn model_prior(model: &PosteriorModel) -> PriorBox {
    PriorBox {
        lower: std::array::from_fn(|d| model.bx.lower[d]),
        upper: std::array::from_fn(|d| model.bx.upper[d]),
    }
}

pub fn checkpoint_bytes(model: &PosteriorModel, meta: &CheckpointMeta) -> Vec<u8> {
    let sets = [model.embedder.params(), model.flow.params()];
    let tensors = sets
        .iter()
        .flat_map(|s| s.iter())
        .map(|(name, t)| TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        arch: model.arch(),
        fingerprint: model.fingerprint,
        prior: model_prior(model),
        config_hash: meta.config_hash.clone(),
        training_seed: meta.training_seed,
        epoch: meta.epoch,
        val_loss: meta.val_loss,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * (model.embedder.params().num_scalars() + model.flow.params().num_scalars()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for set in sets {
        for t in set.tensors() {
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn write_checkpoint(path: &Path, model: &PosteriorModel, meta: &CheckpointMeta) -> Result<()> {
    write_file(path, &checkpoint_bytes(model, meta))
}

pub fn read_checkpoint(path: &Path) -> Result<(PosteriorModel, CheckpointHeader)> {
    let bytes = read_file(path)?;
    parse_checkpoint(&bytes, path)
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<(PosteriorModel, CheckpointHeader)> {
    let bad = |d: &str| Error::format(PathBuf::from(path), d.to_string());
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {}", header.version)));
    }
    let fp = header.fingerprint;
    let sim = SimConfig {
        n_agents: fp.n_agents,
        n_topics: fp.n_topics,
        n_steps: fp.n_steps,
        ..SimConfig::default()
    };
    let mut model = PosteriorModel::zeros(&header.arch, &sim, &header.prior)?;

    let mut offset = 16 + hlen;
    let mut loaded = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let chunk = bytes.get(offset..offset + 4 * n).ok_or_else(|| bad(&format!("truncated tensor {}", entry.name)))?;
        let data = chunk
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        loaded.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    let n_emb = model.embedder.params().len();
    if loaded.len() != n_emb + model.flow.params().len() {
        return Err(bad("tensor count does not match the architecture"));
    }
    let flow_part = loaded.split_off(n_emb);
    model.embedder.params_mut().assign(&loaded)?;
    model.flow.params_mut().assign(&flow_part)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abm::stream_rng;
    use crate::training::generate_corpus;

    fn small_sim() -> SimConfig {
        SimConfig {
            n_agents: 4,
            n_topics: 2,
            n_steps: 3,
            ..SimConfig::default()
        }
    }

    #[test]
    fn corpus_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&small_sim(), &PriorBox::default(), 5, 3, 1).unwrap();
        let a = dir.path().join("a");
        write_corpus(&a, &corpus, "h").unwrap();
        let (loaded, manifest) = read_corpus(&a).unwrap();
        assert_eq!(manifest.n_sims, 5);
        assert_eq!(loaded.thetas, corpus.thetas);
        assert_eq!(loaded.traces[2].z, corpus.traces[2].z);
        let b = dir.path().join("b");
        write_corpus(&b, &loaded, "h").unwrap();
        for f in ["manifest.json", "theta.f64", "z.i8", "w.f32"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn truncated_array_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&small_sim(), &PriorBox::default(), 2, 0, 1).unwrap();
        write_corpus(dir.path(), &corpus, "h").unwrap();
        let w = dir.path().join("w.f32");
        let mut bytes = fs::read(&w).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&w, bytes).unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = ArchConfig {
            hidden: 6,
            readout: vec![5, 3],
            flow_blocks: 2,
            flow_hidden: 7,
            ..ArchConfig::default()
        };
        let mut model = PosteriorModel::init(&arch, &small_sim(), &PriorBox::default(), &mut stream_rng(2, 0)).unwrap();
        model.round_to_f32();
        let meta = CheckpointMeta {
            config_hash: "abc".into(),
            training_seed: 9,
            epoch: 4,
            val_loss: 1.25,
        };
        let bytes = checkpoint_bytes(&model, &meta);
        let (loaded, header) = parse_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(header.epoch, 4);
        assert_eq!(checkpoint_bytes(&loaded, &meta), bytes);
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        assert!(parse_checkpoint(b"NOTACKPT\0\0\0\0\0\0\0\0", Path::new("x")).is_err());
    }
}
