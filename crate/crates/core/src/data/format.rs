//! Binary formats. Every file starts with the magic `CESL`, a little-endian
//! `u16` format version and a `u16` kind tag.
//!
//! Signal file: `u32` channels, `u64` length, `f64` sample rate, then
//! channel-major `f32` samples.
//!
//! Checkpoint: `u64` header length, a JSON header, then every tensor listed
//! in the header as row-major `f64` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Backbone, BackboneConfig, BnMode, WeightLayout};
use crate::numeric::{Matrix, SeededRng};
use crate::rankalloc::RankPlan;
use crate::signal::RawRecording;

pub const MAGIC: &[u8; 4] = b"CESL";
pub const FORMAT_VERSION: u16 = 1;
const KIND_SIGNAL: u16 = 1;
const KIND_CHECKPOINT: u16 = 2;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{} ends at byte {} while {} more were expected",
                self.what,
                self.buf.len(),
                n - (self.buf.len() - self.pos)
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Data(format!(
                "{} has {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn preamble(out: &mut Vec<u8>, kind: u16) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&kind.to_le_bytes());
}

fn check_preamble(r: &mut Reader<'_>, kind: u16, wrong: fn() -> Error) -> Result<()> {
    if r.buf.len() < 4 || &r.buf[..4] != MAGIC {
        return Err(wrong());
    }
    r.pos = 4;
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if r.u16()? != kind {
        return Err(wrong());
    }
    Ok(())
}

pub fn encode_signal(rec: &RawRecording) -> Vec<u8> {
    let (c, n) = rec.channels.shape();
    let mut out = Vec::with_capacity(30 + 4 * c * n);
    preamble(&mut out, KIND_SIGNAL);
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&rec.sample_rate.to_le_bytes());
    for v in rec.channels.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_signal(id: &str, bytes: &[u8]) -> Result<RawRecording> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        what: "signal file",
    };
    check_preamble(&mut r, KIND_SIGNAL, || Error::NotASignal)?;
    let c = r.u32()? as usize;
    let n = r.u64()? as usize;
    let rate = r.f64()?;
    let count = c
        .checked_mul(n)
        .filter(|k| k.checked_mul(4).is_some())
        .ok_or_else(|| Error::Data("signal dimensions overflow".into()))?;
    let raw = r.take(count * 4)?;
    r.finish()?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    RawRecording::new(id, Matrix::from_vec(c, n, data)?, rate).map_err(|e| Error::Data(format!("signal {id}: {e}")))
}

pub fn write_signal(path: &Path, rec: &RawRecording) -> Result<()> {
    fs::write(path, encode_signal(rec))?;
    Ok(())
}

pub fn read_signal(id: &str, path: &Path) -> Result<RawRecording> {
    decode_signal(id, &fs::read(path)?)
}

/// A deterministic probe batch and the probabilities the saver produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeInfo {
    pub seed: u64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: BackboneConfig,
    layouts: Vec<WeightLayout>,
    plan: Option<RankPlan>,
    merged: bool,
    frozen_blocks: usize,
    bn_mode: BnMode,
    class_names: Vec<String>,
    optimizer_steps: u64,
    probe: Option<ProbeInfo>,
    tensors: Vec<TensorEntry>,
}

/// A model plus the metadata stored alongside it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Backbone,
    pub plan: Option<RankPlan>,
    pub class_names: Vec<String>,
    pub probe: Option<(ProbeInfo, Matrix)>,
}

const PROBE_TENSOR: &str = "probe.outputs";

/// Deterministic probe inputs for a configuration.
pub fn probe_batch(cfg: &BackboneConfig, info: &ProbeInfo) -> Matrix {
    let mut rng = SeededRng::new(info.seed);
    Matrix::random_normal(cfg.leads, info.n * cfg.seq_len, 1.0, &mut rng)
}

impl Checkpoint {
    pub fn new(model: Backbone, class_names: Vec<String>) -> Self {
        Self {
            model,
            plan: None,
            class_names,
            probe: None,
        }
    }

    /// Records the model's probabilities on a seeded probe batch.
    pub fn with_probe(mut self, seed: u64, n: usize) -> Result<Self> {
        let info = ProbeInfo { seed, n };
        let out = self.model.predict_proba(&probe_batch(self.model.config(), &info), n)?;
        self.probe = Some((info, out));
        Ok(self)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let mut tensors = m.named_tensors();
        if let Some((_, out)) = &self.probe {
            tensors.push((PROBE_TENSOR.to_string(), out.clone()));
        }
        let header = Header {
            config: m.config().clone(),
            layouts: m.weight_layouts(),
            plan: self.plan.clone(),
            merged: m.is_merged(),
            frozen_blocks: m.frozen_blocks(),
            bn_mode: m.bn_mode().unwrap_or(BnMode::Eval),
            class_names: self.class_names.clone(),
            optimizer_steps: m.optimizer_steps(),
            probe: self.probe.as_ref().map(|(i, _)| i.clone()),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        preamble(&mut out, KIND_CHECKPOINT);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            buf: bytes,
            pos: 0,
            what: "checkpoint",
        };
        check_preamble(&mut r, KIND_CHECKPOINT, || Error::NotACheckpoint)?;
        let hlen = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        let mut model = Backbone::new(header.config.clone(), &mut SeededRng::new(0))?;
        model.freeze_conv_blocks(header.frozen_blocks)?;
        model.restore_layouts(&header.layouts)?;
        model.set_bn_mode(header.bn_mode);
        for _ in 0..header.optimizer_steps {
            model.record_optimizer_step();
        }
        let mut probe_out = None;
        let mut seen = std::collections::BTreeSet::new();
        for e in &header.tensors {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Data(format!("tensor {} stored twice", e.name)));
            }
            let count = e
                .rows
                .checked_mul(e.cols)
                .filter(|k| k.checked_mul(8).is_some())
                .ok_or_else(|| Error::Data(format!("tensor {} dimensions overflow", e.name)))?;
            let raw = r.take(count * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Matrix::from_vec(e.rows, e.cols, data)?;
            if e.name == PROBE_TENSOR {
                probe_out = Some(t);
            } else {
                model.load_named_tensor(&e.name, t)?;
            }
        }
        r.finish()?;
        let expected = model.named_tensors().len();
        let stored = header.tensors.len() - usize::from(probe_out.is_some());
        if stored != expected {
            return Err(Error::Data(format!("checkpoint has {stored} tensors, model needs {expected}")));
        }
        if model.is_merged() != header.merged {
            return Err(Error::Data("merged flag disagrees with the stored layouts".into()));
        }
        let probe = match (header.probe, probe_out) {
            (Some(i), Some(o)) => Some((i, o)),
            (None, None) => None,
            _ => return Err(Error::Data("probe metadata without outputs".into())),
        };
        Ok(Self {
            model,
            plan: header.plan,
            class_names: header.class_names,
            probe,
        })
    }

    /// Re-runs the stored probe batch; returns the largest absolute deviation.
    pub fn verify_probe(&self) -> Result<Option<f64>> {
        let Some((info, stored)) = &self.probe else {
            return Ok(None);
        };
        let now = self.model.predict_proba(&probe_batch(self.model.config(), info), info.n)?;
        Ok(Some(now.max_abs_diff(stored)))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
