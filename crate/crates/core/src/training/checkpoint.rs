//! Checkpoint files.
//!
//! ```text
//! "SAHCKPT" | version u32 | config_len u32 | config (UTF-8 key=value lines)
//! | count u32 | count × (name_len u32 | name | rank u32 | rank × dim u32 | f32 data)
//! ```
//! Integers and floats are little-endian. Optimizer moments, when present,
//! are stored as extra tensors named `adam.m.<param>` and `adam.v.<param>`.

use std::fs;
use std::path::Path;

use super::AdamState;
use crate::config::{format_kv, parse_kv, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"SAHCKPT";
pub const VERSION: u32 = 1;

const MOMENT_M: &str = "adam.m.";
const MOMENT_V: &str = "adam.v.";

/// Parameters after one epoch, with the settings that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// 1-based epoch number.
    pub epoch: usize,
    pub val_accuracy: f64,
    pub params: ParamStore<f32>,
    /// Optimizer state for resuming; absent in exported weights.
    pub optimizer: Option<AdamState<f32>>,
}

impl Checkpoint {
    /// Rejects a checkpoint whose architecture differs from `model`.
    pub fn ensure_compatible(&self, model: &ModelConfig) -> Result<()> {
        let ours = self.config.model.to_kv();
        let theirs = model.to_kv();
        let diffs: Vec<String> = ours
            .iter()
            .zip(&theirs)
            .filter(|(a, b)| a != b)
            .map(|((k, a), (_, b))| format!("{k}: checkpoint {a}, configuration {b}"))
            .collect();
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible(diffs.join("; ")))
        }
    }

    /// The network described by this checkpoint.
    pub fn model(&self) -> Result<ModelParams<f32>> {
        ModelParams::from_store(&self.config.model, self.params.clone())
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("value exceeds 32 bits").to_le_bytes());
}

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    push_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    push_u32(out, shape.len());
    for &d in shape {
        push_u32(out, d);
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut kv = ckpt.config.to_kv();
    kv.push(("checkpoint.epoch".into(), ckpt.epoch.to_string()));
    kv.push(("checkpoint.val_accuracy".into(), ckpt.val_accuracy.to_string()));
    if let Some(opt) = &ckpt.optimizer {
        kv.push(("checkpoint.adam_step".into(), opt.step.to_string()));
    }
    let text = format_kv(&kv);

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION as usize);
    push_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    let moments = ckpt.optimizer.as_ref().map_or(0, |_| 2);
    push_u32(&mut out, ckpt.params.len() * (1 + moments));
    for (name, t) in ckpt.params.iter() {
        push_tensor(&mut out, name, t.shape(), t.data());
    }
    if let Some(opt) = &ckpt.optimizer {
        for (prefix, moments) in [(MOMENT_M, &opt.m), (MOMENT_V, &opt.v)] {
            for ((name, t), m) in ckpt.params.iter().zip(moments) {
                push_tensor(&mut out, &format!("{prefix}{name}"), t.shape(), m);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(self.bytes.len(), format!("truncated {what}: needs {n} bytes from offset {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic, expected \"SAHCKPT\""));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(r.fail(7, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("config length")?;
    let config_at = r.pos;
    let text = std::str::from_utf8(r.take(len, "config block")?)
        .map_err(|e| r.fail(config_at + e.valid_up_to(), "config block is not UTF-8"))?;
    let mut kv = parse_kv(text).map_err(|e| r.fail(config_at, format!("config block: {e}")))?;
    let mut meta = |key: &str| {
        kv.remove(key)
            .ok_or_else(|| r.fail(config_at, format!("config block lacks `{key}`")))
    };
    let epoch_text = meta("checkpoint.epoch")?;
    let acc_text = meta("checkpoint.val_accuracy")?;
    let adam_step = kv.remove("checkpoint.adam_step");
    let bad_meta = |key: &str, v: &str| r.fail(config_at, format!("invalid `{key}` value `{v}`"));
    let epoch: usize = epoch_text.parse().map_err(|_| bad_meta("checkpoint.epoch", &epoch_text))?;
    let val_accuracy: f64 = acc_text.parse().map_err(|_| bad_meta("checkpoint.val_accuracy", &acc_text))?;
    let adam_step: Option<u64> = match adam_step {
        Some(s) => Some(s.parse().map_err(|_| bad_meta("checkpoint.adam_step", &s))?),
        None => None,
    };
    let config = TrainConfig::from_kv(&kv).map_err(|e| r.fail(config_at, format!("config block: {e}")))?;

    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for i in 0..count {
        let at = r.pos;
        let name_len = r.u32(&format!("name length of tensor {i}"))?;
        let name = std::str::from_utf8(r.take(name_len, &format!("name of tensor {i}"))?)
            .map_err(|_| r.fail(at + 4, format!("name of tensor {i} is not UTF-8")))?
            .to_string();
        let rank = r.u32(&format!("rank of tensor `{name}`"))?;
        if rank == 0 || rank > 8 {
            return Err(r.fail(at, format!("tensor `{name}` has invalid rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&format!("shape of tensor `{name}`"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| r.fail(at, format!("tensor `{name}` has invalid shape {shape:?}")))?;
        let data_at = r.pos;
        let raw = r.take(n.saturating_mul(4), &format!("data of tensor `{name}`"))?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if let Some(j) = data.iter().position(|x| !x.is_finite()) {
            return Err(r.fail(data_at + 4 * j, format!("tensor `{name}` holds a non-finite value at element {j}")));
        }
        if let Some(p) = name.strip_prefix(MOMENT_M) {
            m.push((p.to_string(), data));
        } else if let Some(p) = name.strip_prefix(MOMENT_V) {
            v.push((p.to_string(), data));
        } else {
            if params.find(&name).is_some() {
                return Err(r.fail(at, format!("duplicate tensor `{name}`")));
            }
            params.add(name, Tensor::new(shape, data));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
    }

    let optimizer = match adam_step {
        None => None,
        Some(step) => {
            let mut state = AdamState::new(&params);
            state.step = step;
            for (moments, dst) in [(m, &mut state.m), (v, &mut state.v)] {
                if moments.len() != params.len() {
                    return Err(r.fail(r.pos, "optimizer moments do not cover every parameter"));
                }
                for ((name, data), (slot, (pname, t))) in moments.into_iter().zip(dst.iter_mut().zip(params.iter())) {
                    if name != pname || data.len() != t.numel() {
                        return Err(r.fail(r.pos, format!("optimizer moment `{name}` does not match tensor `{pname}`")));
                    }
                    *slot = data;
                }
            }
            Some(state)
        }
    };
    Ok(Checkpoint {
        config,
        epoch,
        val_accuracy,
        params,
        optimizer,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn tiny() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model = ModelConfig {
            input_dim: 4,
            num_classes: 3,
            depth: 2,
            fusion_kernel: 3,
            frame_layers: 2,
            segment_layers: 1,
            heads: 2,
            max_len: 40,
            ..ModelConfig::default()
        }
        .with_model_dim(8);
        cfg.clip_norm = Some(2.5);
        cfg
    }

    fn checkpoint(with_optimizer: bool) -> Checkpoint {
        let cfg = tiny();
        let params = init_model::<f32>(&cfg.model, 1).unwrap().store;
        let optimizer = with_optimizer.then(|| {
            let mut s = AdamState::new(&params);
            s.step = 17;
            s.m[0][0] = 0.125;
            s.v[1][0] = 3.5e-7;
            s
        });
        Checkpoint {
            config: cfg,
            epoch: 12,
            val_accuracy: 0.1 + 0.2,
            params,
            optimizer,
        }
    }

    fn p() -> &'static Path {
        Path::new("test.ckpt")
    }

    #[test]
    fn round_trip_is_exact() {
        for opt in [false, true] {
            let ckpt = checkpoint(opt);
            let bytes = encode_checkpoint(&ckpt);
            let back = decode_checkpoint(&bytes, p()).unwrap();
            assert_eq!(back, ckpt);
            assert!(back.params.bitwise_eq(&ckpt.params));
            assert_eq!(encode_checkpoint(&back), bytes);
        }
    }

    #[test]
    fn reloaded_model_predicts_identically() {
        let ckpt = checkpoint(false);
        let back = decode_checkpoint(&encode_checkpoint(&ckpt), p()).unwrap();
        let x = Tensor::new([30, 4], (0..120).map(|i| (i as f32 * 0.37).sin()).collect());
        let a = ckpt.model().unwrap().predict(&x).unwrap();
        let b = back.model().unwrap().predict(&x).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    fn format_error(bytes: &[u8]) -> String {
        match decode_checkpoint(bytes, p()) {
            Err(Error::Format { message, .. }) => message,
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_tensor_is_named() {
        let ckpt = checkpoint(false);
        let bytes = encode_checkpoint(&ckpt);
        let msg = format_error(&bytes[..bytes.len() - 3]);
        assert!(msg.contains("head.segment.bias"), "{msg}");

        // overwrite the first weight of the first tensor with a NaN
        let first = ckpt.params.iter().next().unwrap().0.to_string();
        let text_len = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
        let data_at = 15 + text_len + 4 + 4 + first.len() + 4 + 4 * ckpt.params.iter().next().unwrap().1.rank();
        let mut bad = bytes.clone();
        bad[data_at..data_at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let msg = format_error(&bad);
        assert!(msg.contains(&first) && msg.contains("non-finite"), "{msg}");
    }

    #[test]
    fn header_damage_is_rejected() {
        let bytes = encode_checkpoint(&checkpoint(false));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(format_error(&bad).contains("magic"));
        let mut bad = bytes.clone();
        bad[7] = 2;
        assert!(format_error(&bad).contains("version 2"));
        assert!(format_error(&bytes[..20]).contains("config block"));
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let ckpt = checkpoint(false);
        let wider = tiny().model.with_model_dim(16);
        let err = ckpt.ensure_compatible(&wider).unwrap_err();
        assert!(matches!(err, Error::Incompatible(ref m) if m.contains("model.D")), "{err}");
        ckpt.ensure_compatible(&tiny().model).unwrap();

        let mut wrong = ckpt.clone();
        wrong.config.model = wider;
        assert!(matches!(wrong.model(), Err(Error::Incompatible(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ckpt");
        let ckpt = checkpoint(true);
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    }
}
