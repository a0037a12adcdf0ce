//! Representation archives.
//!
//! An archive directory holds `archive.json` (task, width, provenance and
//! the stored representations), and per split a `samples.tsv` index of ids
//! and labels plus one TDRF file per representation and modality. Inside a
//! TDRF file every sample is one frame, and the header's modality byte tags
//! the rows.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tridira_core::data::FeatureSequence;
use tridira_core::probe::{Representation, RepresentationArchive, RepresentationSet};
use tridira_core::{Modality, Task};

use crate::error::{Error, IoContext, Result};
use crate::tdrf::{read_feature_file, write_feature_file};

pub const INDEX_FILE: &str = "archive.json";
const SPLITS: [&str; 2] = ["train", "test"];

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    version: u32,
    task: Task,
    d_model: usize,
    untrained: bool,
    representations: Vec<String>,
}

fn split_of<'a>(archive: &'a RepresentationArchive, name: &str) -> &'a RepresentationSet {
    if name == "train" {
        &archive.train
    } else {
        &archive.test
    }
}

pub fn write_archive(dir: &Path, archive: &RepresentationArchive) -> Result<()> {
    let reps: Vec<Representation> =
        Representation::ALL.into_iter().filter(|r| archive.train.vectors.contains_key(&(*r, Modality::Text))).collect();
    let index = Index {
        version: 1,
        task: archive.task,
        d_model: archive.d_model,
        untrained: archive.untrained,
        representations: reps.iter().map(|r| r.name().to_owned()).collect(),
    };
    fs::create_dir_all(dir).at(dir)?;
    let index_path = dir.join(INDEX_FILE);
    fs::write(&index_path, serde_json::to_string_pretty(&index).expect("index serializes") + "\n").at(&index_path)?;
    for split in SPLITS {
        let set = split_of(archive, split);
        let sub = dir.join(split);
        fs::create_dir_all(&sub).at(&sub)?;
        let samples = sub.join("samples.tsv");
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(&samples)?;
        w.write_record(["id", "label"])?;
        for (id, label) in set.ids.iter().zip(&set.labels) {
            w.write_record([id.clone(), format!("{label:?}")])?;
        }
        w.flush().at(&samples)?;
        for rep in &reps {
            for m in Modality::ALL {
                let seq = FeatureSequence::dense(m, set.get(*rep, m)?.clone())?;
                write_feature_file(&seq, &sub.join(format!("{}.{}.tdrf", rep.name(), m.short())))?;
            }
        }
    }
    Ok(())
}

pub fn read_archive(dir: &Path) -> Result<RepresentationArchive> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).at(&index_path)?;
    let index: Index =
        serde_json::from_str(&text).map_err(|e| Error::Format { path: index_path.clone(), reason: e.to_string() })?;
    let mut sets = Vec::new();
    for split in SPLITS {
        let sub = dir.join(split);
        let samples = sub.join("samples.tsv");
        let mut set = RepresentationSet::default();
        let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_path(&samples)?;
        for row in r.records() {
            let row = row?;
            let label = row.get(1).and_then(|s| s.parse().ok());
            let (Some(id), Some(label)) = (row.get(0), label) else {
                return Err(Error::Format { path: samples.clone(), reason: format!("bad row {row:?}") });
            };
            set.ids.push(id.to_owned());
            set.labels.push(label);
        }
        let mut vectors = BTreeMap::new();
        for name in &index.representations {
            let Some(rep) = Representation::from_name(name) else {
                return Err(Error::Format { path: index_path.clone(), reason: format!("unknown representation {name}") });
            };
            for m in Modality::ALL {
                let path = sub.join(format!("{name}.{}.tdrf", m.short()));
                let seq = read_feature_file(&path)?;
                if seq.modality() != m || seq.values().shape() != (set.len(), index.d_model) {
                    return Err(Error::Format { path, reason: "tag or shape does not match the index".into() });
                }
                vectors.insert((rep, m), seq.values().clone());
            }
        }
        set.vectors = vectors;
        sets.push(set);
    }
    let test = sets.pop().expect("two splits");
    let train = sets.pop().expect("two splits");
    Ok(RepresentationArchive { task: index.task, d_model: index.d_model, train, test, untrained: index.untrained })
}
