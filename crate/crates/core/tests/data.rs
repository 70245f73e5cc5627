mod common;

use std::fs;
use std::path::PathBuf;

use cessl::data::format::{decode_signal, encode_signal, FORMAT_VERSION, MAGIC};
use cessl::data::synth::band_energy_scores;
use cessl::data::{
    generate_synthetic, load_checkpoint, load_manifest, load_recordings, make_splits, parse_manifest, save_checkpoint,
    write_synthetic, Checkpoint, DatasetManifest, ManifestRecord, SplitSpec, SynthConfig,
};
use cessl::metrics::{macro_auc, PredictionSet};
use cessl::numeric::{Matrix, SeededRng};
use cessl::Error;
use proptest::prelude::*;

fn with_signal(rows: &str) -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&SynthConfig::new(1, 3, 32, 0)).unwrap();
    fs::write(dir.path().join("a.sig"), encode_signal(&ds.records[0])).unwrap();
    let text = format!("# classes: x;y;z\nid,path,labels\n{rows}");
    (dir, text)
}

#[test]
fn manifest_errors_carry_line_numbers() {
    let (dir, text) = with_signal("r1,a.sig,0;2\nr2,a.sig,\"1,0,1\"\nr1,a.sig,1\n");
    match parse_manifest(&text, dir.path()).unwrap_err() {
        Error::Parse { line, msg } => {
            assert_eq!(line, 5);
            assert!(msg.contains("r1"), "{msg}");
        }
        e => panic!("unexpected {e}"),
    }
    let (dir, text) = with_signal("r1,a.sig,0\nr2,a.sig,7\n");
    assert!(matches!(parse_manifest(&text, dir.path()).unwrap_err(), Error::Parse { line: 4, .. }));
    let (dir, text) = with_signal("r1,missing.sig,0\n");
    assert!(matches!(parse_manifest(&text, dir.path()).unwrap_err(), Error::Parse { line: 3, .. }));
    let (dir, text) = with_signal("");
    assert!(parse_manifest(&text, dir.path()).unwrap_err().to_string().contains("no records"));
}

#[test]
fn multi_hot_and_index_labels_parse_alike() {
    let (dir, text) = with_signal("r1,a.sig,\"1,0,1\"\nr2,a.sig,0;2\n");
    let m = parse_manifest(&text, dir.path()).unwrap();
    assert_eq!(m.records[0].labels, vec![1, 0, 1]);
    assert_eq!(m.records[1].labels, vec![1, 0, 1]);
    assert_eq!(m.num_classes(), 3);
}

#[test]
fn synthetic_files_round_trip_through_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&SynthConfig::new(25, 3, 128, 4)).unwrap();
    let path = write_synthetic(&ds, dir.path()).unwrap();
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.len(), 25);
    let recs = load_recordings(&m, &[0, 3], ds.sample_rate, 128, true).unwrap();
    let direct = ds.recordings(128).unwrap();
    // signal files hold f32 samples, so the round trip is exact only to f32
    assert!(recs[1].signal.max_abs_diff(&direct[3].signal) < 1e-4);
    assert_eq!(recs[1].label, direct[3].label);
    let unlabeled = load_recordings(&m, &[1], ds.sample_rate, 128, false).unwrap();
    assert!(unlabeled[0].label.is_none());
}

#[test]
fn signal_decoding_rejects_damage() {
    let ds = generate_synthetic(&SynthConfig::new(1, 2, 16, 0)).unwrap();
    let bytes = encode_signal(&ds.records[0]);
    assert!(matches!(decode_signal("x", &bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_signal("x", &extra).is_err());
    let mut bad = bytes;
    bad[0] = b'X';
    assert!(matches!(decode_signal("x", &bad), Err(Error::NotASignal)));
}

fn checkpoint(seed: u64, merged: bool) -> Checkpoint {
    let mut m = common::trained_micro(seed, 2, 0.3);
    if merged {
        m.bake();
    }
    Checkpoint::new(m, vec!["a".into(), "b".into(), "c".into()]).with_probe(seed, 3).unwrap()
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for merged in [false, true] {
        let ck = checkpoint(3, merged);
        let p1 = dir.path().join("a.ckpt");
        save_checkpoint(&ck, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(loaded.verify_probe().unwrap(), Some(0.0));
        let x = Matrix::random_normal(2, 2 * 12, 1.0, &mut SeededRng::new(1));
        assert_eq!(loaded.model.forward_eval(&x, 2).unwrap(), ck.model.forward_eval(&x, 2).unwrap());
    }
}

#[test]
fn merged_checkpoint_stores_no_factors() {
    let ck = checkpoint(4, true);
    let names: Vec<String> = ck.model.named_tensors().into_iter().map(|(n, _)| n).collect();
    assert!(!names.is_empty());
    assert!(names.iter().all(|n| !n.contains("lora")), "{names:?}");
    let adapted = checkpoint(4, false);
    assert!(adapted.model.named_tensors().iter().any(|(n, _)| n.contains("lora")));
}

#[test]
fn damaged_checkpoints_give_typed_errors() {
    let bytes = checkpoint(5, true).to_bytes().unwrap();
    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"PK\x03\x04");
    let e = Checkpoint::from_bytes(&magic).unwrap_err();
    assert!(matches!(e, Error::NotACheckpoint));
    assert_eq!(e.to_string(), "not a checkpoint");
    let mut version = bytes.clone();
    version[4..6].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Version { .. })));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]), Err(Error::Truncated(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..20]), Err(Error::Truncated(_))));
    assert_eq!(&bytes[..4], MAGIC);
}

#[test]
fn band_energy_detector_separates_classes() {
    let ds = generate_synthetic(&SynthConfig::new(300, 4, 512, 3)).unwrap();
    let scores: Vec<Vec<f64>> = ds.records.iter().map(|r| band_energy_scores(r, 4).unwrap()).collect();
    let top = scores.iter().flatten().cloned().fold(0.0, f64::max);
    let probs = Matrix::from_rows(&scores).map(|v| v / top);
    let truths = Matrix::from_fn(300, 4, |i, c| ds.labels[i][c] as f64);
    let auc = macro_auc(&PredictionSet::new(probs, truths).unwrap());
    assert!(auc >= 0.95, "{auc}");
}

#[test]
fn label_frequencies_track_priors() {
    let cfg = SynthConfig::new(10_000, 4, 1, 8);
    let priors = cfg.resolved_priors();
    let mut hits = [0usize; 4];
    for i in 0..cfg.n {
        let (_, labels) = cessl::data::synth::synth_record(&cfg, i).unwrap();
        for (h, l) in hits.iter_mut().zip(labels) {
            *h += l as usize;
        }
    }
    for (h, p) in hits.iter().zip(priors) {
        assert!((*h as f64 / cfg.n as f64 - p).abs() <= 0.02);
    }
}

fn manifest(n: usize, patients: usize) -> DatasetManifest {
    DatasetManifest {
        records: (0..n)
            .map(|i| ManifestRecord {
                id: format!("r{i}"),
                path: PathBuf::new(),
                labels: vec![1, 0],
                patient: (patients > 0).then(|| format!("p{}", i % patients)),
            })
            .collect(),
        class_names: vec!["a".into(), "b".into()],
        sample_rate: 400.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_partition_and_repeat(n in 400usize..2000, seed in any::<u64>()) {
        let m = manifest(n, 0);
        let spec = SplitSpec { seed, ..Default::default() };
        let s = make_splits(&m, &spec).unwrap();
        prop_assert_eq!(&s, &make_splits(&m, &spec).unwrap());
        let mut all: Vec<usize> = [&s.labeled, &s.unlabeled, &s.val, &s.test].into_iter().flatten().copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let n_test = (n as f64 * 0.1 + 1e-9).floor() as usize;
        let n_lab = ((n - n_test) as f64 * 0.05 + 1e-9).floor() as usize;
        prop_assert_eq!(s.test.len(), n_test);
        prop_assert_eq!(s.labeled.len() + s.val.len(), n_lab);
        prop_assert_eq!(s.val.len(), (n_lab as f64 * 0.2 + 1e-9).floor() as usize);
    }

    #[test]
    fn patient_groups_never_straddle(n in 400usize..1000, patients in 50usize..200, seed in any::<u64>()) {
        let m = manifest(n, patients);
        let spec = SplitSpec { seed, group_by_patient: true, ..Default::default() };
        if let Ok(s) = make_splits(&m, &spec) {
            let owner = |i: usize| m.records[i].patient.clone().unwrap();
            let sets = [&s.labeled, &s.unlabeled, &s.val, &s.test];
            for (a, sa) in sets.iter().enumerate() {
                for sb in sets.iter().skip(a + 1) {
                    for &i in sa.iter() {
                        prop_assert!(sb.iter().all(|&j| owner(i) != owner(j)));
                    }
                }
            }
        }
    }
}

#[test]
fn thousand_records_follow_the_documented_counts() {
    let s = make_splits(&manifest(1000, 0), &SplitSpec::default()).unwrap();
    assert_eq!((s.test.len(), s.labeled.len(), s.val.len(), s.unlabeled.len()), (100, 36, 9, 855));
    let e = make_splits(&manifest(19, 0), &SplitSpec::default()).unwrap_err();
    assert!(matches!(e, Error::Contract(_)));
}
