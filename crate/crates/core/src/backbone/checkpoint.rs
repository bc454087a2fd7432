//! Checkpoint archives: a tar holding `metadata.json` plus one tensor
//! container per parameter under `params/<name>.mef`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EncoderParameters;
use crate::datamodel::container::TensorContainer;
use crate::error::{Error, Result};

const METADATA: &str = "metadata.json";

#[derive(Serialize, Deserialize)]
struct Metadata {
    format: u32,
    #[serde(flatten)]
    encoder: EncoderParameters,
    seed: u64,
    created_unix: u64,
}

fn append(builder: &mut tar::Builder<std::fs::File>, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder.append_data(&mut header, name, bytes)
}

pub fn save_checkpoint(p: &EncoderParameters, path: &Path) -> Result<()> {
    p.validate()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let created_unix = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        });
    let meta = Metadata {
        format: 1,
        encoder: p.clone(),
        seed: p.config.seed,
        created_unix,
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut b = tar::Builder::new(file);
    let io = |e| Error::io(path, e);
    append(&mut b, METADATA, &serde_json::to_vec_pretty(&meta)?).map_err(io)?;
    for (name, t) in &p.params {
        let axes: Vec<String> = (0..t.ndim()).map(|i| format!("d{}", i)).collect();
        let refs: Vec<&str> = axes.iter().map(String::as_str).collect();
        let c = TensorContainer::new(&refs, t.clone())?;
        append(&mut b, &format!("params/{}.mef", name), &c.to_bytes()).map_err(io)?;
    }
    b.into_inner().map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParameters> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut archive = tar::Archive::new(file);
    let mut meta: Option<Metadata> = None;
    let mut params = BTreeMap::new();
    let entries = archive.entries().map_err(|e| Error::io(path, e))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| Error::io(path, e))?;
        let name = entry
            .path()
            .map_err(|e| Error::io(path, e))?
            .to_string_lossy()
            .into_owned();
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if name == METADATA {
            meta = Some(serde_json::from_slice(&bytes)?);
        } else if let Some(p) = name.strip_prefix("params/").and_then(|n| n.strip_suffix(".mef")) {
            params.insert(p.to_string(), TensorContainer::from_bytes(&bytes)?.tensor);
        } else {
            return Err(Error::Checkpoint(format!("unexpected archive entry `{}`", name)));
        }
    }
    let meta = meta.ok_or_else(|| Error::Checkpoint(format!("{} lacks {}", path.display(), METADATA)))?;
    let mut enc = meta.encoder;
    enc.params = params;
    enc.validate()?;
    Ok(enc)
}
