//! Round-trip properties of every on-disk format.

use std::collections::BTreeMap;
use std::path::PathBuf;

use proptest::collection::vec;
use proptest::prelude::*;
use tridira::archive::{read_archive, write_archive};
use tridira::checkpoint::{self, load_checkpoint, save_checkpoint};
use tridira::manifest::{parse_manifest, render_manifest, ManifestEntry};
use tridira::tdrf::{self, read_feature_file, write_feature_file};
use tridira_core::data::{DatasetSchema, FeatureSequence};
use tridira_core::probe::{Representation, RepresentationArchive, RepresentationSet};
use tridira_core::{Matrix, Modality, Task};

mod common;
use common::{checkpoint, f32_value, sequence};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn tdrf_write_read_is_exact(seq in sequence()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tdrf");
        write_feature_file(&seq, &path).unwrap();
        let back = read_feature_file(&path).unwrap();
        prop_assert_eq!(back.modality(), seq.modality());
        prop_assert_eq!(back.mask(), seq.mask());
        let bits = |s: &FeatureSequence| s.values().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&seq));
        prop_assert_eq!(back.values().shape(), seq.values().shape());
        prop_assert_eq!(std::fs::read(&path).unwrap(), tdrf::encode(&back).unwrap());
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical(ckpt in checkpoint()) {
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a.ckpt");
        let second = dir.path().join("b.ckpt");
        save_checkpoint(&ckpt, &first).unwrap();
        let loaded = load_checkpoint(&first).unwrap();
        save_checkpoint(&loaded, &second).unwrap();
        prop_assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
        prop_assert_eq!(&loaded.fingerprint, &ckpt.fingerprint);
        prop_assert_eq!(loaded.rng, ckpt.rng);
        prop_assert_eq!(loaded.params.len(), ckpt.params.len());
    }

    #[test]
    fn truncated_checkpoints_are_rejected(ckpt in checkpoint(), cut in any::<prop::sample::Index>()) {
        let bytes = checkpoint::encode(&ckpt);
        let n = cut.index(bytes.len());
        prop_assert!(checkpoint::decode(&bytes[..n], &PathBuf::from("t.ckpt")).is_err());
    }

    #[test]
    fn truncated_feature_files_are_rejected(seq in sequence(), cut in any::<prop::sample::Index>()) {
        let bytes = tdrf::encode(&seq).unwrap();
        let n = cut.index(bytes.len());
        prop_assert!(tdrf::decode(&bytes[..n], &PathBuf::from("t.tdrf")).is_err());
    }
}

fn entry() -> impl Strategy<Value = ManifestEntry> {
    ("[A-Za-z0-9_-]{1,12}", -3.0f64..=3.0, ["[a-z0-9_/.]{1,20}", "[a-z0-9_/.]{1,20}", "[a-z0-9_/.]{1,20}"]).prop_map(|(id, label, p)| {
        ManifestEntry { id, label, paths: p.map(PathBuf::from) }
    })
}

fn rep_set(n: usize, d: usize, reps: Vec<Representation>) -> impl Strategy<Value = RepresentationSet> {
    let mats = vec(vec(f32_value(), n * d), reps.len() * 3);
    (vec(-3.0f64..3.0, n), mats).prop_map(move |(labels, mats)| {
        let mut vectors = BTreeMap::new();
        let mut it = mats.into_iter();
        for r in &reps {
            for m in Modality::ALL {
                vectors.insert((*r, m), Matrix::from_vec(n, d, it.next().unwrap()));
            }
        }
        RepresentationSet { ids: (0..n).map(|i| format!("u{i:04}")).collect(), labels, vectors }
    })
}

fn archive() -> impl Strategy<Value = RepresentationArchive> {
    let reps = prop_oneof![Just(vec![Representation::XHat]), Just(Representation::ALL.to_vec())];
    (1usize..6, 1usize..6, 1usize..5, reps, any::<bool>()).prop_flat_map(|(ntr, nte, d, reps, untrained)| {
        (rep_set(ntr, d, reps.clone()), rep_set(nte, d, reps)).prop_map(move |(train, test)| RepresentationArchive {
            task: Task::Regression,
            d_model: d,
            train,
            test,
            untrained,
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn manifest_render_parse_round_trips(entries in vec(entry(), 0..8), dims in [1usize..100, 1usize..100, 1usize..100]) {
        let schema = DatasetSchema { task: Task::Regression, label_range: Some((-3.0, 3.0)), dims };
        let text = render_manifest(&schema, &entries);
        let parsed = parse_manifest(&text, &PathBuf::from("data/train.manifest")).unwrap();
        prop_assert_eq!(parsed.schema, schema);
        prop_assert_eq!(parsed.entries, entries);
        prop_assert_eq!(parsed.base, PathBuf::from("data"));
    }

    #[test]
    fn archive_write_read_round_trips(archive in archive()) {
        let dir = tempfile::tempdir().unwrap();
        write_archive(dir.path(), &archive).unwrap();
        prop_assert_eq!(read_archive(dir.path()).unwrap(), archive);
    }
}
