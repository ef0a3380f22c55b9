//! Checkpoint files: a text manifest followed by little-endian `f32`
//! payloads in manifest order.
//!
//! ```text
//! RLCMCKPT 1
//! kind consistency
//! hyper t_max 80
//! tensor mlp.0.weight 27 64
//! end
//! <payload bytes>
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::consistency::{ConsistencyModel, ModelConfig};
use crate::diffusion::ScoreModel;
use crate::error::{Error, Result};
use crate::nn::{Activation, NetConfig, ParamStore, Tensor};
use crate::rollout::Policy;

pub const MAGIC: &str = "RLCMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Consistency,
    Score,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Consistency => "consistency",
            ModelKind::Score => "score",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [ModelKind::Consistency, ModelKind::Score]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub kind: ModelKind,
    pub hyper: BTreeMap<String, String>,
    pub tensors: Vec<(String, Vec<usize>)>,
}

impl Manifest {
    pub fn get(&self, key: &str) -> Result<&str> {
        self.hyper
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Manifest(format!("missing hyperparameter `{key}`")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Manifest(format!("hyperparameter `{key}` has invalid value {v:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub data: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn from_params(kind: ModelKind, hyper: BTreeMap<String, String>, params: &ParamStore<f64>) -> Self {
        let mut tensors = Vec::with_capacity(params.len());
        let mut data = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            tensors.push((name.to_string(), t.shape().to_vec()));
            data.push(t.data().iter().map(|&v| v as f32).collect());
        }
        Self {
            manifest: Manifest { kind, hyper, tensors },
            data,
        }
    }

    /// Copies every stored tensor into `params`, which must have the same
    /// names and shapes.
    pub fn restore_into(&self, params: &mut ParamStore<f64>) -> Result<()> {
        if self.manifest.tensors.len() != params.len() {
            return Err(Error::Manifest(format!(
                "checkpoint has {} tensors, model has {}",
                self.manifest.tensors.len(),
                params.len()
            )));
        }
        for ((name, shape), values) in self.manifest.tensors.iter().zip(&self.data) {
            let id = params.id(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            let expected = params.value(id).shape().to_vec();
            if &expected != shape {
                return Err(Error::CheckpointShape {
                    tensor: name.clone(),
                    found: shape.clone(),
                    expected,
                });
            }
            let t = Tensor::new(shape.clone(), values.iter().map(|&v| v as f64).collect())?;
            params.set_value(id, t)?;
        }
        Ok(())
    }
}

fn model_hyper(cfg: &ModelConfig, data_dim: usize, contexts: usize) -> BTreeMap<String, String> {
    let n = &cfg.net;
    let hidden: Vec<String> = n.hidden.iter().map(|h| h.to_string()).collect();
    [
        ("t_max", cfg.t_max.to_string()),
        ("eps", cfg.eps.to_string()),
        ("sigma_data", cfg.sigma_data.to_string()),
        ("hidden", hidden.join(",")),
        ("activation", n.activation.name().to_string()),
        ("time_freqs", n.time_freqs.to_string()),
        ("context_dim", n.context_dim.to_string()),
        ("data_dim", data_dim.to_string()),
        ("contexts", contexts.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn model_config(m: &Manifest) -> Result<(ModelConfig, usize, usize)> {
    let hidden = m
        .get("hidden")?
        .split(',')
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Manifest("invalid `hidden` list".into()))?;
    let act = m.get("activation")?;
    let activation = Activation::parse(act).ok_or_else(|| Error::Manifest(format!("unknown activation {act:?}")))?;
    let cfg = ModelConfig {
        t_max: m.get_parsed("t_max")?,
        eps: m.get_parsed("eps")?,
        sigma_data: m.get_parsed("sigma_data")?,
        net: NetConfig {
            hidden,
            activation,
            time_freqs: m.get_parsed("time_freqs")?,
            context_dim: m.get_parsed("context_dim")?,
        },
    };
    Ok((cfg, m.get_parsed("data_dim")?, m.get_parsed("contexts")?))
}

pub fn consistency_checkpoint(model: &ConsistencyModel<f64>, extra: &[(&str, String)]) -> Checkpoint {
    let mut hyper = model_hyper(model.config(), model.data_dim(), model.contexts());
    hyper.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    Checkpoint::from_params(ModelKind::Consistency, hyper, &model.params)
}

pub fn score_checkpoint(model: &ScoreModel<f64>, extra: &[(&str, String)]) -> Checkpoint {
    let mut hyper = model_hyper(model.config(), model.data_dim(), model.contexts());
    hyper.insert("steps".into(), model.horizon().to_string());
    hyper.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    Checkpoint::from_params(ModelKind::Score, hyper, &model.params)
}

fn expect_kind(ck: &Checkpoint, kind: ModelKind) -> Result<()> {
    if ck.manifest.kind != kind {
        return Err(Error::Manifest(format!(
            "expected a {} checkpoint, found {}",
            kind.name(),
            ck.manifest.kind.name()
        )));
    }
    Ok(())
}

pub fn consistency_from_checkpoint(ck: &Checkpoint) -> Result<ConsistencyModel<f64>> {
    expect_kind(ck, ModelKind::Consistency)?;
    let (cfg, d, k) = model_config(&ck.manifest)?;
    let mut m = ConsistencyModel::new(&cfg, d, k, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.restore_into(&mut m.params)?;
    Ok(m)
}

pub fn score_from_checkpoint(ck: &Checkpoint) -> Result<ScoreModel<f64>> {
    expect_kind(ck, ModelKind::Score)?;
    let (cfg, d, k) = model_config(&ck.manifest)?;
    let steps = ck.manifest.get_parsed("steps")?;
    let mut m = ScoreModel::new(&cfg, steps, d, k, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.restore_into(&mut m.params)?;
    Ok(m)
}

fn check_token(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
        return Err(Error::Manifest(format!("{what} {s:?} must be a single non-empty token")));
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let m = &ck.manifest;
    if m.tensors.len() != ck.data.len() {
        return Err(Error::Manifest("tensor list and payload count differ".into()));
    }
    let mut head = format!("{MAGIC} {VERSION}\nkind {}\n", m.kind.name());
    for (k, v) in &m.hyper {
        check_token(k, "hyperparameter name")?;
        if v.contains('\n') {
            return Err(Error::Manifest(format!("hyperparameter `{k}` spans lines")));
        }
        head += &format!("hyper {k} {v}\n");
    }
    for ((name, shape), values) in m.tensors.iter().zip(&ck.data) {
        check_token(name, "tensor name")?;
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Manifest(format!("tensor `{name}` payload does not match its shape")));
        }
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        head += &format!("tensor {name} {}\n", dims.join(" "));
    }
    head += "end\n";
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(head.as_bytes())?;
    for values in &ck.data {
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Manifest> {
    let mut line = String::new();
    let mut next = |r: &mut R| -> Result<Option<String>> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Ok(None);
        }
        Ok(Some(line.trim_end_matches('\n').to_string()))
    };
    let first = next(r)?.ok_or_else(|| Error::Manifest("empty file".into()))?;
    let mut parts = first.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(Error::Manifest("not a checkpoint file".into()));
    }
    let found: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Manifest("missing format version".into()))?;
    if found != VERSION {
        return Err(Error::VersionMismatch {
            found,
            expected: VERSION,
        });
    }
    let mut kind = None;
    let mut hyper = BTreeMap::new();
    let mut tensors = Vec::new();
    loop {
        let l = next(r)?.ok_or_else(|| Error::Manifest("manifest has no `end` line".into()))?;
        let (tag, rest) = l.split_once(' ').unwrap_or((l.as_str(), ""));
        match tag {
            "end" => break,
            "kind" => {
                kind = Some(ModelKind::parse(rest).ok_or_else(|| Error::Manifest(format!("unknown model kind {rest:?}")))?)
            }
            "hyper" => {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                hyper.insert(k.to_string(), v.to_string());
            }
            "tensor" => {
                let mut it = rest.split(' ');
                let name = it.next().unwrap_or_default().to_string();
                let dims = it
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Manifest(format!("bad shape for tensor `{name}`")))?;
                if name.is_empty() || dims.is_empty() || dims.contains(&0) {
                    return Err(Error::Manifest(format!("bad tensor line {l:?}")));
                }
                tensors.push((name, dims));
            }
            _ => return Err(Error::Manifest(format!("unexpected manifest line {l:?}"))),
        }
    }
    Ok(Manifest {
        kind: kind.ok_or_else(|| Error::Manifest("manifest has no `kind`".into()))?,
        hyper,
        tensors,
    })
}

/// Reads only the manifest; payloads are not touched.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let f = File::open(path).map_err(|e| open_error(path, e))?;
    read_header(&mut BufReader::new(f))
}

fn open_error(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::Missing(path.to_path_buf())
    } else {
        Error::Io(e)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| open_error(path, e))?;
    let mut r = BufReader::new(f);
    let manifest = read_header(&mut r)?;
    let mut data = Vec::with_capacity(manifest.tensors.len());
    for (name, shape) in &manifest.tensors {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Truncated { tensor: name.clone() },
            _ => Error::Io(e),
        })?;
        data.push(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        );
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Manifest("trailing bytes after the last tensor".into()));
    }
    Ok(Checkpoint { manifest, data })
}
