//! Checkpoint directories: one `<name>.tnsr` per tensor plus `manifest.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pidiff_core::checkpoint::Checkpoint;
use pidiff_core::params::ParamSet;

use crate::error::{CliError, CliResult};
use crate::io::{read_bytes, read_tensor, write_bytes, write_tensor};

pub const MANIFEST: &str = "manifest.txt";
const TENSOR_EXT: &str = "tnsr";

pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (name, t) in ck.params().iter() {
        write_tensor(&dir.join(format!("{name}.{TENSOR_EXT}")), t)?;
    }
    let mut manifest = String::new();
    for (k, v) in ck.manifest() {
        manifest.push_str(&format!("{k}={v}\n"));
    }
    write_bytes(&dir.join(MANIFEST), manifest.as_bytes())
}

pub fn parse_manifest(text: &str, origin: &str) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::ConfigLine {
            path: origin.to_string(),
            line: i + 1,
            msg: "expected key=value".into(),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn load_checkpoint(dir: &Path) -> CliResult<Checkpoint> {
    let manifest_path = dir.join(MANIFEST);
    let text = String::from_utf8(read_bytes(&manifest_path)?).map_err(|_| {
        pidiff_core::Error::Format(format!("{} is not UTF-8", manifest_path.display()))
    })?;
    let manifest = parse_manifest(&text, &manifest_path.display().to_string())?;
    let mut params = ParamSet::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(TENSOR_EXT) {
            continue;
        }
        if let Some(name) = path.file_stem().and_then(|s| s.to_str()) {
            params.insert(name, read_tensor(&path)?);
        }
    }
    Checkpoint::from_parts(&manifest, params).map_err(|e| match e {
        pidiff_core::Error::Format(m) | pidiff_core::Error::Contract(m) => {
            pidiff_core::Error::Format(format!("{}: {m}", dir.display())).into()
        }
        other => other.into(),
    })
}
