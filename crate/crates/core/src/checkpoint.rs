//! Checkpoint directories: `manifest.txt` with one `name dims... dtype=f32`
//! line per tensor, one raw little-endian f32 file per tensor, and
//! `meta.txt` with `key=value` lines.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::LossScales;
use crate::model::{Agsenet, ModelConfig};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const META: &str = "meta.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Agsenet,
    Baseline,
}

impl Variant {
    pub fn of(config: &ModelConfig) -> Result<Self> {
        match (config.csif, config.ssie) {
            (true, true) => Ok(Variant::Agsenet),
            (false, false) => Ok(Variant::Baseline),
            _ => Err(Error::Checkpoint(
                "only the full model and the baseline can be checkpointed".into(),
            )),
        }
    }

    pub fn config(self, seed: u64) -> ModelConfig {
        match self {
            Variant::Agsenet => ModelConfig::agsenet(seed),
            Variant::Baseline => ModelConfig::baseline(seed),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Variant::Agsenet => "agsenet",
            Variant::Baseline => "baseline",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "agsenet" => Ok(Variant::Agsenet),
            "baseline" => Ok(Variant::Baseline),
            other => Err(Error::Checkpoint(format!("unknown model variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub variant: Variant,
    pub seed: u64,
    pub epoch: usize,
}

/// File name for a tensor: characters outside `[A-Za-z0-9._-]` become `_`.
pub fn blob_name(tensor: &str) -> String {
    let clean: String = tensor
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{clean}.f32")
}

pub fn save_tensors(dir: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let mut blobs = HashSet::new();
    for (name, t) in tensors {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("invalid tensor name {name:?}")));
        }
        let blob = blob_name(name);
        if !blobs.insert(blob.clone()) {
            return Err(Error::Checkpoint(format!("tensor names collide on file {blob}")));
        }
        manifest.push_str(name);
        for d in t.shape() {
            manifest.push_str(&format!(" {d}"));
        }
        manifest.push_str(" dtype=f32\n");
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(blob);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Reads every tensor listed in the manifest, in manifest order.
pub fn load_tensors(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |why: &str| Error::Checkpoint(format!("{}:{}: {why}", path.display(), no + 1));
        let mut fields: Vec<&str> = line.split_whitespace().collect();
        if fields.pop() != Some("dtype=f32") {
            return Err(bad("expected trailing dtype=f32"));
        }
        let (name, dims) = fields.split_first().ok_or_else(|| bad("missing tensor name"))?;
        let shape = dims
            .iter()
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("dimensions must be non-negative integers"))?;
        let blob = dir.join(blob_name(name));
        let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
        let numel: usize = shape.iter().product();
        if bytes.len() != 4 * numel {
            return Err(bad(&format!(
                "{} holds {} bytes, shape {shape:?} needs {}",
                blob.display(),
                bytes.len(),
                4 * numel
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name.to_string(), Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(dir: &Path, model: &Agsenet, scales: &LossScales, epoch: usize) -> Result<()> {
    let variant = Variant::of(model.config())?;
    let mut tensors = model.store().named_tensors();
    tensors.extend(scales.store().named_tensors());
    save_tensors(dir, &tensors)?;
    let meta = format!(
        "variant={}\nseed={}\nepoch={epoch}\n",
        variant.name(),
        model.config().seed
    );
    let path = dir.join(META);
    fs::write(&path, meta).map_err(|e| Error::io(&path, e))
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let kv: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing {k}", path.display())))
    };
    let num = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("{}: {k} is not an integer", path.display())))
    };
    Ok(CheckpointMeta {
        variant: Variant::parse(get("variant")?)?,
        seed: num("seed")?,
        epoch: num("epoch")? as usize,
    })
}

/// Rebuilds the model and loss scales. Every stored tensor must be consumed
/// and every model tensor must be present.
pub fn load_checkpoint(dir: &Path) -> Result<(Agsenet, LossScales, CheckpointMeta)> {
    let meta = load_meta(dir)?;
    let mut model = Agsenet::new(meta.variant.config(meta.seed))?;
    let mut scales = LossScales::default();
    let tensors = load_tensors(dir)?;
    let expected: HashSet<String> = model
        .store()
        .named_tensors()
        .into_iter()
        .chain(scales.store().named_tensors())
        .map(|(n, _)| n)
        .collect();
    let mut seen = HashSet::new();
    for (name, t) in tensors {
        if !expected.contains(&name) {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
        if name.starts_with("loss.") {
            scales.store_mut().set_named(&name, t)?;
        } else {
            model.store_mut().set_named(&name, t)?;
        }
        seen.insert(name);
    }
    if let Some(missing) = expected.difference(&seen).next() {
        return Err(Error::Checkpoint(format!("checkpoint lacks tensor {missing}")));
    }
    Ok((model, scales, meta))
}
