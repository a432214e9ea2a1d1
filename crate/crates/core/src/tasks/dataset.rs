//! Line-delimited dataset files.
//!
//! ```text
//! {"format":"grpo-d-lab/dataset","version":1,"vocab_hash":"<hex>"}
//! {"family":"counting","prompt_ids":[...],"ground_truth":2,"seed":123}
//! ...
//! ```
//!
//! Every line, including the last, ends with `\n`; a missing final newline is
//! read as truncation.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TaskInstance, Vocab};
use crate::{LabError, Result};

pub const DATASET_FORMAT: &str = "grpo-d-lab/dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub vocab_hash: String,
}

pub fn save_dataset(path: &Path, vocab: &Vocab, instances: &[TaskInstance]) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        vocab_hash: vocab.hash(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for inst in instances {
        serde_json::to_writer(&mut buf, inst)?;
        buf.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a dataset and checks it against `vocab`.
pub fn load_dataset(path: &Path, vocab: &Vocab) -> Result<Vec<TaskInstance>> {
    let (header, instances) = read_dataset(path)?;
    if header.vocab_hash != vocab.hash() {
        return Err(LabError::VocabMismatch {
            expected: vocab.hash(),
            found: header.vocab_hash,
        });
    }
    let bad = |reason: String| LabError::MalformedFile {
        path: path.to_path_buf(),
        reason,
    };
    for (i, inst) in instances.iter().enumerate() {
        if let Some(&t) = inst
            .prompt_tokens
            .iter()
            .find(|&&t| t as usize >= vocab.len())
        {
            return Err(bad(format!("record {i}: token id {t} outside vocabulary")));
        }
        if inst.ground_truth > 9 {
            return Err(bad(format!(
                "record {i}: ground_truth {} > 9",
                inst.ground_truth
            )));
        }
    }
    Ok(instances)
}

/// Reads header and records without a vocabulary check.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<TaskInstance>)> {
    let text = fs::read_to_string(path)?;
    let bad = |reason: String| LabError::MalformedFile {
        path: path.to_path_buf(),
        reason,
    };
    if !text.ends_with('\n') {
        return Err(bad("file does not end with a newline (truncated?)".into()));
    }
    let mut lines = text.lines();
    let header_line = lines.next().ok_or_else(|| bad("missing header".into()))?;
    let header: DatasetHeader =
        serde_json::from_str(header_line).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(bad(format!("unexpected format tag `{}`", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(LabError::Version {
            what: "dataset",
            found: header.version,
            expected: DATASET_VERSION,
        });
    }
    let instances = lines
        .enumerate()
        .map(|(i, line)| serde_json::from_str(line).map_err(|e| bad(format!("record {i}: {e}"))))
        .collect::<Result<Vec<TaskInstance>>>()?;
    Ok((header, instances))
}
