//! Manifests, the split protocol, synthetic data and persistence.
//!
//! A manifest is a CSV file `id,path,labels[,patient]` preceded by
//! directive lines:
//!
//! ```text
//! # classes: AF;RBBB;LBBB
//! # sample_rate: 400
//! id,path,labels
//! r0001,signals/r0001.sig,0;2
//! ```
//!
//! `labels` holds semicolon-joined class indices, or a comma-separated
//! multi-hot vector such as `"1,0,1"`. Paths are relative to the manifest.

pub mod format;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numeric::SeededRng;
use crate::signal::{preprocess, Recording};

pub use format::{load_checkpoint, read_signal, save_checkpoint, write_signal, Checkpoint, ProbeInfo};
pub use synth::{generate_synthetic, write_synthetic, SynthConfig, SyntheticDataset};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub path: PathBuf,
    pub labels: Vec<u8>,
    pub patient: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub class_names: Vec<String>,
    pub sample_rate: f64,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Parses a label field into a binary vector of length `c`.
pub fn parse_labels(field: &str, c: usize) -> std::result::Result<Vec<u8>, String> {
    let field = field.trim();
    let mut out = vec![0u8; c];
    if field.is_empty() {
        return Ok(out);
    }
    if field.contains(',') {
        let parts: Vec<&str> = field.split(',').map(str::trim).collect();
        if parts.len() != c {
            return Err(format!("multi-hot label has {} entries, expected {c}", parts.len()));
        }
        for (o, p) in out.iter_mut().zip(parts) {
            *o = match p {
                "0" => 0,
                "1" => 1,
                other => return Err(format!("multi-hot entry {other:?} is not 0 or 1")),
            };
        }
        return Ok(out);
    }
    for p in field.split(';') {
        let k: usize = p.trim().parse().map_err(|_| format!("label index {p:?} is not an integer"))?;
        if k >= c {
            return Err(format!("label index {k} out of range for {c} classes"));
        }
        out[k] = 1;
    }
    Ok(out)
}

pub fn format_labels(labels: &[u8]) -> String {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0)
        .map(|(i, _)| i.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

/// Parses manifest text; paths are resolved against `root`.
pub fn parse_manifest(text: &str, root: &Path) -> Result<DatasetManifest> {
    let mut classes: Option<Vec<String>> = None;
    let mut rate: Option<f64> = None;
    let mut body_start = 0;
    let mut body_line = 1;
    for line in text.split_inclusive('\n') {
        let t = line.trim();
        let Some(d) = t.strip_prefix('#') else {
            if !t.is_empty() {
                break;
            }
            body_start += line.len();
            body_line += 1;
            continue;
        };
        let parse_err = |msg: String| Error::Parse { line: body_line, msg };
        if let Some((key, value)) = d.split_once(':') {
            match key.trim() {
                "classes" => {
                    let names: Vec<String> = value.split(';').map(|s| s.trim().to_string()).collect();
                    if names.iter().any(String::is_empty) {
                        return Err(parse_err("empty class name".into()));
                    }
                    classes = Some(names);
                }
                "sample_rate" => {
                    let v: f64 = value.trim().parse().map_err(|_| parse_err(format!("bad sample rate {value:?}")))?;
                    if !(v > 0.0) {
                        return Err(parse_err(format!("sample rate must be positive, got {v}")));
                    }
                    rate = Some(v);
                }
                other => return Err(parse_err(format!("unknown directive {other:?}"))),
            }
        }
        body_start += line.len();
        body_line += 1;
    }
    let classes = classes.ok_or_else(|| Error::Parse {
        line: 1,
        msg: "missing '# classes:' directive".into(),
    })?;
    let sample_rate = rate.unwrap_or(crate::signal::TARGET_RATE);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text[body_start..].as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(ci), Some(cp), Some(cl)) = (col("id"), col("path"), col("labels")) else {
        return Err(Error::Parse {
            line: body_line,
            msg: format!("header must contain id,path,labels; found {:?}", headers.iter().collect::<Vec<_>>()),
        });
    };
    let cpat = col("patient");
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = body_line + row.position().map_or(0, |p| p.line() as usize - 1);
        let field = |i: usize| row.get(i).unwrap_or("");
        let id = field(ci).to_string();
        if id.is_empty() {
            return Err(Error::Parse { line, msg: "empty id".into() });
        }
        if !seen.insert(id.clone()) {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate id {id}"),
            });
        }
        let labels = parse_labels(field(cl), classes.len()).map_err(|msg| Error::Parse { line, msg })?;
        let path = root.join(field(cp));
        if !path.is_file() {
            return Err(Error::Parse {
                line,
                msg: format!("signal file {} does not exist", path.display()),
            });
        }
        records.push(ManifestRecord {
            id,
            path,
            labels,
            patient: cpat.map(|i| field(i).to_string()).filter(|s| !s.is_empty()),
        });
    }
    if records.is_empty() {
        return Err(Error::Data("no records".into()));
    }
    Ok(DatasetManifest {
        records,
        class_names: classes,
        sample_rate,
    })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, root)
}

pub fn manifest_text(class_names: &[String], sample_rate: f64, rows: &[(String, String, Vec<u8>)]) -> String {
    let mut out = format!("# classes: {}\n# sample_rate: {sample_rate}\nid,path,labels\n", class_names.join(";"));
    for (id, path, labels) in rows {
        out.push_str(&format!("{id},{path},{}\n", format_labels(labels)));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub test_frac: f64,
    pub labeled_frac_of_train: f64,
    pub val_frac_of_labeled: f64,
    pub seed: u64,
    #[serde(default)]
    pub group_by_patient: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_frac: 0.1,
            labeled_frac_of_train: 0.05,
            val_frac_of_labeled: 0.2,
            seed: 0,
            group_by_patient: false,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("test_frac", self.test_frac),
            ("labeled_frac_of_train", self.labeled_frac_of_train),
            ("val_frac_of_labeled", self.val_frac_of_labeled),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Record indices of each split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn floor_frac(n: usize, f: f64) -> usize {
    (n as f64 * f + 1e-9).floor() as usize
}

/// Seeded split: test takes `floor(test_frac·N)`, labeled takes
/// `floor(labeled_frac·rest)` of the remainder (the unlabeled pool keeps the
/// leftover), and validation takes `floor(val_frac·labeled)` out of labeled.
pub fn make_splits(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let n = manifest.len();
    if n < 20 {
        return Err(contract(format!("splitting needs at least 20 records, got {n}")));
    }
    let mut rng = SeededRng::derive(spec.seed, 0x5911);
    let order: Vec<usize> = if spec.group_by_patient {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in manifest.records.iter().enumerate() {
            let key = r.patient.clone().unwrap_or_else(|| format!("\u{0}{}", r.id));
            groups.entry(key).or_default().push(i);
        }
        let mut gs: Vec<Vec<usize>> = groups.into_values().collect();
        rng.shuffle(&mut gs);
        gs.into_iter().flatten().collect()
    } else {
        let mut o: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut o);
        o
    };
    let n_test = floor_frac(n, spec.test_frac);
    let n_train = n - n_test;
    let n_lab_all = floor_frac(n_train, spec.labeled_frac_of_train);
    let n_val = floor_frac(n_lab_all, spec.val_frac_of_labeled);
    let mut cuts = [n_test, n_test + n_lab_all - n_val, n_test + n_lab_all];
    if spec.group_by_patient {
        let group_of: Vec<Option<&String>> = order.iter().map(|&i| manifest.records[i].patient.as_ref()).collect();
        for c in cuts.iter_mut() {
            while *c > 0 && *c < n && group_of[*c].is_some() && group_of[*c] == group_of[*c - 1] {
                *c += 1;
            }
        }
        cuts[1] = cuts[1].max(cuts[0]);
        cuts[2] = cuts[2].max(cuts[1]);
    }
    let splits = Splits {
        test: order[..cuts[0]].to_vec(),
        labeled: order[cuts[0]..cuts[1]].to_vec(),
        val: order[cuts[1]..cuts[2]].to_vec(),
        unlabeled: order[cuts[2]..].to_vec(),
    };
    for (name, s) in [
        ("test", &splits.test),
        ("labeled", &splits.labeled),
        ("val", &splits.val),
        ("unlabeled", &splits.unlabeled),
    ] {
        if s.is_empty() {
            return Err(contract(format!("split {name} is empty")));
        }
    }
    Ok(splits)
}

/// Reads and preprocesses the given records. Labels are attached only when
/// `with_labels` is set.
pub fn load_recordings(
    manifest: &DatasetManifest,
    indices: &[usize],
    target_rate: f64,
    len: usize,
    with_labels: bool,
) -> Result<Vec<Recording>> {
    indices
        .iter()
        .map(|&i| {
            let r = manifest
                .records
                .get(i)
                .ok_or_else(|| contract(format!("record index {i} out of range")))?;
            let raw = read_signal(&r.id, &r.path)?;
            if (raw.sample_rate - manifest.sample_rate).abs() > 1e-9 * manifest.sample_rate {
                return Err(Error::Data(format!(
                    "{}: file rate {} differs from manifest rate {}",
                    r.id, raw.sample_rate, manifest.sample_rate
                )));
            }
            let mut rec = preprocess(&raw, target_rate, len)?.recording;
            if with_labels {
                rec.label = Some(r.labels.iter().map(|&v| v as f64).collect());
            }
            Ok(rec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest_of(n: usize) -> DatasetManifest {
        DatasetManifest {
            records: (0..n)
                .map(|i| ManifestRecord {
                    id: format!("r{i}"),
                    path: PathBuf::new(),
                    labels: vec![0, 1],
                    patient: Some(format!("p{}", i / 3)),
                })
                .collect(),
            class_names: vec!["a".into(), "b".into()],
            sample_rate: 400.0,
        }
    }

    #[test]
    fn thousand_records_split_as_specified() {
        let m = manifest_of(1000);
        let s = make_splits(&m, &SplitSpec::default()).unwrap();
        assert_eq!(
            (s.test.len(), s.labeled.len(), s.val.len(), s.unlabeled.len()),
            (100, 36, 9, 855)
        );
        assert_eq!(s, make_splits(&m, &SplitSpec::default()).unwrap());
        let mut all: Vec<usize> = [&s.test, &s.labeled, &s.val, &s.unlabeled].into_iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn group_split_keeps_patients_together() {
        let m = manifest_of(600);
        let spec = SplitSpec {
            group_by_patient: true,
            ..SplitSpec::default()
        };
        let s = make_splits(&m, &spec).unwrap();
        let owner = |i: usize| m.records[i].patient.clone().unwrap();
        let sets: Vec<HashSet<String>> = [&s.test, &s.labeled, &s.val, &s.unlabeled]
            .iter()
            .map(|v| v.iter().map(|&i| owner(i)).collect())
            .collect();
        for a in 0..4 {
            for b in a + 1..4 {
                assert!(sets[a].is_disjoint(&sets[b]));
            }
        }
    }

    #[test]
    fn tiny_or_empty_splits_rejected() {
        assert!(make_splits(&manifest_of(19), &SplitSpec::default()).is_err());
        assert!(make_splits(&manifest_of(40), &SplitSpec::default()).is_err());
    }

    #[test]
    fn label_parsing() {
        assert_eq!(parse_labels("1,0,1", 3).unwrap(), vec![1, 0, 1]);
        assert_eq!(parse_labels("0;2", 3).unwrap(), vec![1, 0, 1]);
        assert_eq!(parse_labels("", 3).unwrap(), vec![0, 0, 0]);
        assert!(parse_labels("3", 3).is_err());
        assert!(parse_labels("1,0", 3).is_err());
        assert_eq!(format_labels(&[1, 0, 1]), "0;2");
    }
}
