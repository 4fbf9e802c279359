//! Corpus directory layout: one canonical `.odump` per sample plus a
//! `labels.csv` (`source_id,label` with 0 = benign, 1 = webshell).

use std::path::Path;

use anyhow::{anyhow, Context, Result};

use opshield_core::opdump::{parse_dump, OpcodeDump};
use opshield_core::tokens::Label;

pub struct CorpusEntry {
    pub source_id: String,
    pub dump: OpcodeDump,
    pub label: Label,
}

pub fn write_corpus_dir(
    dir: &Path,
    dumps: &[(OpcodeDump, Label)],
) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut labels = String::from("source_id,label\n");
    let mut ids = Vec::with_capacity(dumps.len());
    let mut benign_no = 0usize;
    let mut shell_no = 0usize;
    for (dump, label) in dumps {
        let id = match label {
            Label::Benign => {
                benign_no += 1;
                format!("benign_{:04}", benign_no - 1)
            }
            Label::Webshell => {
                shell_no += 1;
                format!("shell_{:04}", shell_no - 1)
            }
        };
        std::fs::write(
            dir.join(format!("{id}.odump")),
            opshield_core::serialize_dump(dump),
        )?;
        labels.push_str(&format!("{id},{}\n", label.as_int()));
        ids.push(id);
    }
    std::fs::write(dir.join("labels.csv"), labels)?;
    Ok(ids)
}

/// Load in `labels.csv` order, which fixes the split permutation.
pub fn read_corpus_dir(dir: &Path) -> Result<Vec<CorpusEntry>> {
    let labels_path = dir.join("labels.csv");
    let text = std::fs::read_to_string(&labels_path)
        .with_context(|| format!("cannot read {}", labels_path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.trim() == "source_id,label" {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| anyhow!("labels.csv line {}: expected source_id,label", i + 1))?;
        let label = match label.trim() {
            "0" => Label::Benign,
            "1" => Label::Webshell,
            other => return Err(anyhow!("labels.csv line {}: bad label {other:?}", i + 1)),
        };
        let path = dir.join(format!("{}.odump", id.trim()));
        let dump_text = std::fs::read_to_string(&path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        let dump = parse_dump(&dump_text)
            .map_err(|e| anyhow!("{}: {e}", path.display()))?;
        out.push(CorpusEntry {
            source_id: id.trim().to_string(),
            dump,
            label,
        });
    }
    if out.is_empty() {
        return Err(anyhow!("empty corpus in {}", dir.display()));
    }
    Ok(out)
}
