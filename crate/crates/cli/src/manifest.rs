//! Stage manifests: content hashes of a stage's inputs, outputs and
//! configuration, so a re-run can skip work that is already up to date.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use charcoref::corpus::{parse_doc, to_canonical_string, write_doc, Document, FORMAT_VERSION};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

const ABSENT: &str = "absent";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: String,
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Document for Manifest {
    fn format_version(&self) -> u32 {
        self.format_version
    }
}

/// Files named by a stable label (never an absolute path, so manifests
/// do not depend on where the corpus lives).
pub type FileSet = Vec<(String, PathBuf)>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    sha256_hex(to_canonical_string(value).as_bytes())
}

fn hash_files(files: &FileSet) -> Result<BTreeMap<String, String>, CliError> {
    files
        .iter()
        .map(|(label, path)| {
            let h = match std::fs::read(path) {
                Ok(bytes) => sha256_hex(&bytes),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => ABSENT.to_string(),
                Err(e) => return Err(CliError::Input(format!("{}: {e}", path.display()))),
            };
            Ok((label.clone(), h))
        })
        .collect()
}

/// True when `path` records this stage with the same config and input
/// hashes, and every recorded output is still on disk unchanged.
pub fn is_current(path: &Path, stage: &str, config: &str, inputs: &FileSet, outputs: &FileSet) -> Result<bool, CliError> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(false);
    };
    let Ok(m) = parse_doc::<Manifest>(path, &text) else {
        log::warn!("{}: unreadable manifest, stage will re-run", path.display());
        return Ok(false);
    };
    if m.stage != stage || m.config != config || m.inputs != hash_files(inputs)? {
        return Ok(false);
    }
    let now = hash_files(outputs)?;
    Ok(now == m.outputs && now.values().all(|h| h != ABSENT))
}

pub fn record(path: &Path, stage: &str, config: &str, inputs: &FileSet, outputs: &FileSet) -> Result<(), CliError> {
    let m = Manifest {
        format_version: FORMAT_VERSION,
        stage: stage.to_string(),
        config: config.to_string(),
        inputs: hash_files(inputs)?,
        outputs: hash_files(outputs)?,
    };
    Ok(write_doc(path, &m)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_changes() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        let output = dir.path().join("out.txt");
        let manifest = dir.path().join("stage.manifest");
        std::fs::write(&input, "a").unwrap();
        std::fs::write(&output, "b").unwrap();
        let ins: FileSet = vec![("in".into(), input.clone()), ("opt".into(), dir.path().join("missing"))];
        let outs: FileSet = vec![("out".into(), output.clone())];
        assert!(!is_current(&manifest, "s", "c", &ins, &outs).unwrap());
        record(&manifest, "s", "c", &ins, &outs).unwrap();
        assert!(is_current(&manifest, "s", "c", &ins, &outs).unwrap());
        assert!(!is_current(&manifest, "s", "other", &ins, &outs).unwrap());
        std::fs::write(&input, "changed").unwrap();
        assert!(!is_current(&manifest, "s", "c", &ins, &outs).unwrap());
        record(&manifest, "s", "c", &ins, &outs).unwrap();
        std::fs::remove_file(&output).unwrap();
        assert!(!is_current(&manifest, "s", "c", &ins, &outs).unwrap());
    }
}
