//! Binary checkpoints. All integers little-endian.
//!
//! ```text
//! "AMBP"  u16 version  u64 config_hash  u64 root_seed  u64 step  u32 count
//! count × {
//!     u16 name_len  name (UTF-8 "layer/module/tensor")
//!     u8 dtype (0 = f32)  u8 rank  rank × u32 dims
//!     f32 payload, row-major
//!     u8 init_kind (0 uniform, 1 normal, 2 constant)  f64 init_param
//!     u64 init_root_seed  u64 init_salt
//!     u8 role (0 weight, 1 buffer)
//! }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::model::{full_layout, Entry, InitKind, InitSpec, ModelConfig, ParamKey, ParamStore, Role};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"AMBP";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("checkpoint version {found} is newer than supported version {supported}")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("checkpoint truncated at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("corrupt checkpoint at byte offset {offset}: {msg}")]
    Corrupt { offset: usize, msg: String },
    #[error("config hash mismatch: checkpoint has {found:016x}, config gives {expected:016x}")]
    ConfigMismatch { expected: u64, found: u64 },
    #[error("checkpoint does not match the model layout: {0}")]
    Layout(String),
}

/// Everything stored in a checkpoint file, before matching against a config.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub config_hash: u64,
    pub root_seed: u64,
    pub step: u64,
    pub tensors: Vec<(String, Entry)>,
}

fn init_fields(kind: InitKind) -> (u8, f64) {
    match kind {
        InitKind::Uniform { bound } => (0, bound),
        InitKind::Normal { std } => (1, std),
        InitKind::Constant { value } => (2, value),
    }
}

pub fn encode(params: &ParamStore, step: u64) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&params.config().hash().to_le_bytes());
    b.extend_from_slice(&params.root_seed().to_le_bytes());
    b.extend_from_slice(&step.to_le_bytes());
    b.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (key, e) in params.iter() {
        let name = key.path();
        b.extend_from_slice(&(name.len() as u16).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.push(DTYPE_F32);
        b.push(e.tensor.rank() as u8);
        for &d in e.tensor.shape() {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.tensor.data() {
            b.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let (kind, param) = init_fields(e.init.kind);
        b.push(kind);
        b.extend_from_slice(&param.to_le_bytes());
        b.extend_from_slice(&e.init.root_seed.to_le_bytes());
        b.extend_from_slice(&e.init.salt.to_le_bytes());
        b.push(match e.role {
            Role::Weight => 0,
            Role::Buffer => 1,
        });
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n - (self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn corrupt(&self, at: usize, msg: impl Into<String>) -> CheckpointError {
        CheckpointError::Corrupt {
            offset: at,
            msg: msg.into(),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<RawCheckpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u16()?;
    if version > VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    if version == 0 {
        return Err(r.corrupt(4, "version 0"));
    }
    let config_hash = r.u64()?;
    let root_seed = r.u64()?;
    let step = r.u64()?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.corrupt(at, "tensor name is not UTF-8"))?
            .to_string();
        let at = r.pos;
        if r.u8()? != DTYPE_F32 {
            return Err(r.corrupt(at, "unknown dtype"));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| r.corrupt(at, "tensor too large"))?)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect();
        let at = r.pos;
        let kind = match (r.u8()?, r.f64()?) {
            (0, bound) => InitKind::Uniform { bound },
            (1, std) => InitKind::Normal { std },
            (2, value) => InitKind::Constant { value },
            _ => return Err(r.corrupt(at, "unknown init kind")),
        };
        let init = InitSpec {
            kind,
            root_seed: r.u64()?,
            salt: r.u64()?,
        };
        let at = r.pos;
        let role = match r.u8()? {
            0 => Role::Weight,
            1 => Role::Buffer,
            _ => return Err(r.corrupt(at, "unknown role")),
        };
        let tensor = Tensor::new(shape, data).map_err(|e| r.corrupt(at, e.to_string()))?;
        tensors.push((name, Entry { tensor, init, role }));
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt(r.pos, "trailing bytes"));
    }
    Ok(RawCheckpoint {
        config_hash,
        root_seed,
        step,
        tensors,
    })
}

/// Rebuilds a store, checking the hash and every tensor against the
/// layout `config` implies.
pub fn into_store(raw: RawCheckpoint, config: &ModelConfig) -> Result<(ParamStore, u64), CheckpointError> {
    let expected = config.hash();
    if raw.config_hash != expected {
        return Err(CheckpointError::ConfigMismatch {
            expected,
            found: raw.config_hash,
        });
    }
    let layout: BTreeMap<ParamKey, Vec<usize>> = full_layout(config).into_iter().map(|l| (l.key, l.shape)).collect();
    let mut entries = BTreeMap::new();
    for (name, entry) in raw.tensors {
        let key = ParamKey::parse_path(&name).map_err(CheckpointError::Layout)?;
        match layout.get(&key) {
            Some(shape) if shape.as_slice() == entry.tensor.shape() => {}
            Some(shape) => {
                return Err(CheckpointError::Layout(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    entry.tensor.shape()
                )))
            }
            None => return Err(CheckpointError::Layout(format!("unexpected tensor {name}"))),
        }
        if entries.insert(key, entry).is_some() {
            return Err(CheckpointError::Layout(format!("{name} appears twice")));
        }
    }
    if entries.len() != layout.len() {
        return Err(CheckpointError::Layout(format!(
            "{} tensors, expected {}",
            entries.len(),
            layout.len()
        )));
    }
    Ok((ParamStore::from_entries(config.clone(), raw.root_seed, entries), raw.step))
}

pub fn save_checkpoint(params: &ParamStore, step: u64, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(params, step))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<(ParamStore, u64), CheckpointError> {
    into_store(decode(&std::fs::read(path)?)?, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Module, Slot};

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            model_dim: 4,
            ffn_expansion: 2,
            num_heads: 2,
            conv_kernel: 3,
            group_count: 2,
            num_classes: 3,
            feature_dim: 2,
            max_frames: 4,
            norm_kind: crate::model::NormKind::Batch,
            ..ModelConfig::default()
        }
    }

    fn f32_round(store: &ParamStore) -> ParamStore {
        let mut out = store.clone();
        for (k, e) in store.iter() {
            out.set_tensor(k, e.tensor.map(|v| v as f32 as f64)).unwrap();
        }
        out
    }

    #[test]
    fn round_trip_is_f32_rounding() {
        let store = init_model(&tiny(), 12).unwrap();
        let bytes = encode(&store, 42);
        let (back, step) = into_store(decode(&bytes).unwrap(), &tiny()).unwrap();
        assert_eq!(step, 42);
        assert_eq!(back, f32_round(&store));
        assert_eq!(encode(&back, 42), bytes);
    }

    #[test]
    fn reloaded_init_specs_regenerate_initial_values() {
        let store = init_model(&tiny(), 12).unwrap();
        let (back, _) = into_store(decode(&encode(&store, 0)).unwrap(), &tiny()).unwrap();
        for (k, e) in back.iter() {
            let redrawn = e.init.sample(e.tensor.shape());
            let stored = store.tensor(k).unwrap();
            assert_eq!(&redrawn, stored);
            for (a, b) in redrawn.data().iter().zip(e.tensor.data()) {
                assert!((a - b).abs() <= a.abs() * f32::EPSILON as f64);
            }
        }
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = encode(&init_model(&tiny(), 1).unwrap(), 0);
        for cut in [2, 5, 20, 33, 40, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(CheckpointError::BadMagic) => assert!(cut < 4),
                Err(CheckpointError::Truncated { offset, .. }) => {
                    assert!(offset <= cut);
                    let msg = decode(&bytes[..cut]).unwrap_err().to_string();
                    assert!(msg.contains(&format!("offset {offset}")));
                }
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn refuses_newer_versions_and_bad_magic() {
        let mut bytes = encode(&init_model(&tiny(), 1).unwrap(), 0);
        bytes[4..6].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(CheckpointError::UnsupportedVersion { found: 2, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn config_hash_mismatch_is_an_error() {
        let bytes = encode(&init_model(&tiny(), 1).unwrap(), 0);
        let other = ModelConfig {
            norm_kind: crate::model::NormKind::Group,
            ..tiny()
        };
        assert!(matches!(
            into_store(decode(&bytes).unwrap(), &other),
            Err(CheckpointError::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn golden_two_tensor_layout() {
        let cfg = tiny();
        let full = init_model(&cfg, 3).unwrap();
        let keep = [
            ParamKey::new(Slot::Head, Module::Head, "bias"),
            ParamKey::encoder(0, Module::NormParams, "final_var"),
        ];
        let mut entries = BTreeMap::new();
        for k in &keep {
            entries.insert(k.clone(), full.get(k).unwrap().clone());
        }
        let mut small = ParamStore::from_entries(cfg.clone(), 3, entries);
        small
            .set_tensor(&keep[0], Tensor::vector(vec![0.5, -1.0, 2.0]))
            .unwrap();

        let mut want: Vec<u8> = Vec::new();
        want.extend_from_slice(b"AMBP");
        want.extend_from_slice(&[1, 0]);
        want.extend_from_slice(&cfg.hash().to_le_bytes());
        want.extend_from_slice(&[3, 0, 0, 0, 0, 0, 0, 0]);
        want.extend_from_slice(&[7, 0, 0, 0, 0, 0, 0, 0]);
        want.extend_from_slice(&[2, 0, 0, 0]);
        // "0/norm_params/final_var" sorts first: encoder slots precede the head.
        let name = b"0/norm_params/final_var";
        want.extend_from_slice(&[name.len() as u8, 0]);
        want.extend_from_slice(name);
        want.extend_from_slice(&[0, 1, 4, 0, 0, 0]);
        for _ in 0..4 {
            want.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f]); // 1.0f32
        }
        want.push(2);
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&[3, 0, 0, 0, 0, 0, 0, 0]);
        want.extend_from_slice(&crate::rng::fnv1a(name).to_le_bytes());
        want.push(1);
        let name = b"head/head/bias";
        want.extend_from_slice(&[name.len() as u8, 0]);
        want.extend_from_slice(name);
        want.extend_from_slice(&[0, 1, 3, 0, 0, 0]);
        want.extend_from_slice(&[0x00, 0x00, 0x00, 0x3f]); // 0.5
        want.extend_from_slice(&[0x00, 0x00, 0x80, 0xbf]); // -1.0
        want.extend_from_slice(&[0x00, 0x00, 0x00, 0x40]); // 2.0
        want.push(2);
        want.extend_from_slice(&0.0f64.to_le_bytes());
        want.extend_from_slice(&[3, 0, 0, 0, 0, 0, 0, 0]);
        want.extend_from_slice(&crate::rng::fnv1a(name).to_le_bytes());
        want.push(0);

        assert_eq!(encode(&small, 7), want);
        let raw = decode(&want).unwrap();
        assert_eq!(raw.tensors.len(), 2);
        assert!(matches!(into_store(raw, &cfg), Err(CheckpointError::Layout(_))));
    }
}
