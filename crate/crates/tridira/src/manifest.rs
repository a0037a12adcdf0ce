//! Dataset manifests.
//!
//! The first line is a JSON object declaring the task, the regression label
//! range and the per-modality feature dimensions. Every further nonblank
//! line is one utterance: `id`, `label`, then the text, audio and visual
//! feature-file paths, separated by tabs. Relative paths are resolved
//! against the manifest's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use tridira_core::data::{DatasetSchema, UtteranceRecord};
use tridira_core::Modality;

use crate::error::{Error, IoContext, Result};
use crate::tdrf::read_feature_file;

/// One manifest line before its feature files are read.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub label: f64,
    /// Feature files in [`Modality::ALL`] order, as written in the manifest.
    pub paths: [PathBuf; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub schema: DatasetSchema,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    pub base: PathBuf,
}

fn format_err(path: &Path, line: usize, reason: impl std::fmt::Display) -> Error {
    Error::Format { path: path.into(), reason: format!("line {line}: {reason}") }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Manifest> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(format_err(path, 1, "empty manifest"));
    };
    let schema: DatasetSchema = serde_json::from_str(header).map_err(|e| format_err(path, 1, format!("bad header: {e}")))?;
    if schema.dims.contains(&0) {
        return Err(format_err(path, 1, "feature dimensions must be positive"));
    }
    let mut entries = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let id = fields[0].trim();
        if id.is_empty() {
            return Err(format_err(path, i + 1, "missing id"));
        }
        let Some(label_text) = fields.get(1) else {
            return Err(format_err(path, i + 1, format!("record {id} has no label")));
        };
        let label: f64 = label_text.trim().parse().map_err(|_| format_err(path, i + 1, format!("record {id}: bad label {label_text:?}")))?;
        schema.check_label(id, label)?;
        let mut paths: [PathBuf; 3] = Default::default();
        for m in Modality::ALL {
            match fields.get(2 + m.index()).map(|s| s.trim()) {
                Some(p) if !p.is_empty() => paths[m.index()] = PathBuf::from(p),
                _ => return Err(tridira_core::Error::Schema(format!("record {id} has no {m} feature path")).into()),
            }
        }
        if fields.len() > 5 {
            return Err(format_err(path, i + 1, format!("record {id} has {} fields, expected 5", fields.len())));
        }
        entries.push(ManifestEntry { id: id.to_owned(), label, paths });
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Manifest { schema, entries, base })
}

/// Descriptors in file order; feature files are not opened.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).at(path)?;
    parse_manifest(&text, path)
}

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Reads every feature file and checks the records against the schema.
    pub fn load_records(&self) -> Result<Vec<UtteranceRecord>> {
        self.entries
            .iter()
            .map(|e| {
                let [t, a, v] = [0, 1, 2].map(|i| read_feature_file(&self.resolve(&e.paths[i])));
                let rec = UtteranceRecord { id: e.id.clone(), label: e.label, features: [t?, a?, v?] };
                self.schema.check_record(&rec)?;
                Ok(rec)
            })
            .collect()
    }
}

pub fn render_manifest(schema: &DatasetSchema, entries: &[ManifestEntry]) -> String {
    let mut out = serde_json::to_string(schema).expect("schema serializes");
    out.push('\n');
    for e in entries {
        let [t, a, v] = e.paths.each_ref().map(|p| p.to_string_lossy().into_owned());
        writeln!(out, "{}\t{}\t{t}\t{a}\t{v}", e.id, e.label).expect("writing to a String");
    }
    out
}

pub fn write_manifest(path: &Path, schema: &DatasetSchema, entries: &[ManifestEntry]) -> Result<()> {
    fs::write(path, render_manifest(schema, entries)).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tridira_core::Task;

    const HEADER: &str = r#"{"task":{"kind":"regression"},"label_range":[-3.0,3.0],"dims":[4,2,3]}"#;

    #[test]
    fn lines_come_back_in_order() {
        let text = format!("{HEADER}\nb\t1.6\tb.t\tb.a\tb.v\na\t-0.4\ta.t\ta.a\ta.v\n");
        let m = parse_manifest(&text, Path::new("d/x.manifest")).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].id, "b");
        assert_eq!(m.entries[0].label, 1.6);
        assert_eq!(m.entries[1].paths[2], PathBuf::from("a.v"));
        assert_eq!(m.schema.task, Task::Regression);
        assert_eq!(m.resolve(Path::new("a.t")), PathBuf::from("d/a.t"));
    }

    #[test]
    fn missing_audio_path_names_the_record() {
        let text = format!("{HEADER}\nclip7\t0.5\tc.t\n");
        match parse_manifest(&text, Path::new("x")) {
            Err(Error::Core(tridira_core::Error::Schema(msg))) => assert!(msg.contains("clip7") && msg.contains("audio"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let text = format!("{HEADER}\nq\t3.5\tq.t\tq.a\tq.v\n");
        assert!(matches!(parse_manifest(&text, Path::new("x")), Err(Error::Core(tridira_core::Error::Validation(_)))));
    }

    #[test]
    fn render_parses_back() {
        let text = format!("{HEADER}\nb\t1.6\tb.t\tb.a\tb.v\n");
        let m = parse_manifest(&text, Path::new("x")).unwrap();
        let again = parse_manifest(&render_manifest(&m.schema, &m.entries), Path::new("x")).unwrap();
        assert_eq!(again, m);
    }
}
