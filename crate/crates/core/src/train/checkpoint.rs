//! Checkpoint files.
//!
//! ```text
//! "TCKP" | u32 version
//! u32 config_len | config (key = value text, model keys plus d_t, d_v, d_a)
//! u32 n_tensors | per tensor, sorted by name:
//!     u32 name_len | name | u32 rank | u32 × rank extents | f32 payload
//! "OPTM" | u8 kind (0 none, 1 adam, 2 sgd) | u64 step | u32 n_entries
//!     per entry, sorted by parameter name:
//!     u32 name_len | name | u32 len | f32 × len first | u32 len | f32 × len second
//! ```
//!
//! Everything is little-endian. A parameter shared by several modules is a
//! single store entry and so is written once.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::optim::{OptimState, OptimizerKind};
use crate::error::{Error, Result};
use crate::model::{InputWidths, ModelConfig, Tcan};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TCKP";
const OPTIM_MAGIC: &[u8; 4] = b"OPTM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer moments keyed by parameter name, independent of store order.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedOptimState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl NamedOptimState {
    pub fn from_state(state: &OptimState, store: &ParamStore) -> Self {
        let moments = store
            .iter()
            .map(|(id, name, _)| {
                let i = id.index();
                let second = state.second.get(i).cloned().unwrap_or_default();
                (name.to_string(), (state.first[i].clone(), second))
            })
            .collect();
        Self {
            kind: state.kind,
            step: state.step,
            moments,
        }
    }

    /// Rebinds the moments to the parameter ids of `store`.
    pub fn to_state(&self, store: &ParamStore) -> Result<OptimState> {
        let mut state = OptimState::new(self.kind, store);
        state.step = self.step;
        let names: Vec<String> = self.moments.keys().cloned().collect();
        let missing: Vec<String> = store.names().filter(|n| !self.moments.contains_key(*n)).map(str::to_string).collect();
        let extra: Vec<String> = names.into_iter().filter(|n| store.id(n).is_none()).collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::CheckpointMismatch { missing, extra });
        }
        for (id, name, t) in store.iter() {
            let (first, second) = &self.moments[name];
            let want_second = if self.kind == OptimizerKind::Adam { t.numel() } else { 0 };
            if first.len() != t.numel() || second.len() != want_second {
                return Err(Error::Checkpoint(format!("optimizer buffers for {name} do not match its shape")));
            }
            state.first[id.index()].clone_from(first);
            if self.kind == OptimizerKind::Adam {
                state.second[id.index()].clone_from(second);
            }
        }
        Ok(state)
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub widths: InputWidths,
    pub params: ParamStore,
    pub optimizer: Option<NamedOptimState>,
}

impl Checkpoint {
    pub fn from_model(model: &Tcan, optimizer: Option<&OptimState>) -> Self {
        Self {
            config: model.config().clone(),
            widths: model.widths(),
            params: model.params().clone(),
            optimizer: optimizer.map(|o| NamedOptimState::from_state(o, model.params())),
        }
    }

    /// Rebuilds the model (and optimizer state, if saved).
    pub fn into_model(self) -> Result<(Tcan, Option<OptimState>)> {
        let model = Tcan::from_params(self.config, self.widths, self.params)?;
        let optim = self.optimizer.map(|o| o.to_state(model.params())).transpose()?;
        Ok((model, optim))
    }

    fn config_text(&self) -> String {
        let w = self.widths;
        format!(
            "{}d_t = {}\nd_v = {}\nd_a = {}\n",
            self.config.to_kv(),
            w.text,
            w.visual,
            w.acoustic
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION);
        put_str(&mut buf, &self.config_text());
        put_u32(&mut buf, self.params.len() as u32);
        for (_, name, t) in self.params.iter() {
            put_str(&mut buf, name);
            put_u32(&mut buf, t.dims().len() as u32);
            for &e in t.dims() {
                put_u32(&mut buf, e as u32);
            }
            put_f32s(&mut buf, t.data());
        }
        buf.extend_from_slice(OPTIM_MAGIC);
        match &self.optimizer {
            None => {
                buf.push(0);
                buf.extend_from_slice(&0u64.to_le_bytes());
                put_u32(&mut buf, 0);
            }
            Some(o) => {
                buf.push(match o.kind {
                    OptimizerKind::Adam => 1,
                    OptimizerKind::Sgd => 2,
                });
                buf.extend_from_slice(&o.step.to_le_bytes());
                put_u32(&mut buf, o.moments.len() as u32);
                for (name, (first, second)) in &o.moments {
                    put_str(&mut buf, name);
                    put_u32(&mut buf, first.len() as u32);
                    put_f32s(&mut buf, first);
                    put_u32(&mut buf, second.len() as u32);
                    put_f32s(&mut buf, second);
                }
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let text = r.string()?;
        let mut config = ModelConfig::default();
        let mut widths = [None; 3];
        for (k, v) in crate::model::config::parse_kv(&text)? {
            match k.as_str() {
                "d_t" => widths[0] = Some(crate::model::config::parse_value(&k, &v)?),
                "d_v" => widths[1] = Some(crate::model::config::parse_value(&k, &v)?),
                "d_a" => widths[2] = Some(crate::model::config::parse_value(&k, &v)?),
                _ => config.set(&k, &v)?,
            }
        }
        config.validate()?;
        let [Some(text_w), Some(visual), Some(acoustic)] = widths else {
            return Err(Error::Checkpoint("config block lacks input widths".into()));
        };
        let widths = InputWidths {
            text: text_w,
            visual,
            acoustic,
        };

        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank > 3 {
                return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let len = dims.iter().product();
            let data = r.f32s(len)?;
            params.insert(name, Tensor::from_vec(&dims, data)?)?;
        }

        if r.take(4)? != OPTIM_MAGIC {
            return Err(Error::Checkpoint("missing optimizer section".into()));
        }
        let kind = r.take(1)?[0];
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let entries = r.u32()? as usize;
        let optimizer = match kind {
            0 => None,
            1 | 2 => {
                let mut moments = BTreeMap::new();
                for _ in 0..entries {
                    let name = r.string()?;
                    let n1 = r.u32()? as usize;
                    let first = r.f32s(n1)?;
                    let n2 = r.u32()? as usize;
                    let second = r.f32s(n2)?;
                    moments.insert(name, (first, second));
                }
                Some(NamedOptimState {
                    kind: if kind == 1 { OptimizerKind::Adam } else { OptimizerKind::Sgd },
                    step,
                    moments,
                })
            }
            k => return Err(Error::Checkpoint(format!("unknown optimizer tag {k}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after optimizer section".into()));
        }
        Ok(Self {
            config,
            widths,
            params,
            optimizer,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Tcan, optimizer: Option<&OptimState>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = Checkpoint::from_model(model, optimizer).to_bytes();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Copies checkpoint values into an existing model. The parameter names
/// must match exactly; otherwise the error lists what is missing and extra.
pub fn load_into(model: &mut Tcan, ckpt: &Checkpoint) -> Result<Option<OptimState>> {
    model.params_mut().copy_values_from(&ckpt.params)?;
    ckpt.optimizer.as_ref().map(|o| o.to_state(model.params())).transpose()
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 name".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Tcan {
        let cfg = ModelConfig {
            d: 8,
            seq_len: 4,
            depth: 1,
            heads: 2,
            ..Default::default()
        };
        Tcan::new(cfg, InputWidths { text: 5, visual: 3, acoustic: 4 }, 3).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let model = small();
        let mut optim = OptimState::new(OptimizerKind::Adam, model.params());
        optim.step = 7;
        optim.first[0][0] = 0.25;
        let bytes = Checkpoint::from_model(&model, Some(&optim)).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let (m2, o2) = back.into_model().unwrap();
        assert_eq!(o2.unwrap(), optim);
        for (_, name, t) in model.params().iter() {
            let u = m2.params().by_name(name).unwrap();
            assert!(t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn shared_encoder_written_once() {
        let model = small();
        let ck = Checkpoint::from_model(&model, None);
        let n = ck.params.names().filter(|n| n.starts_with("shared_encoder.conv.kernel")).count();
        assert_eq!(n, 1);
    }

    #[test]
    fn bad_magic_and_version() {
        assert!(matches!(Checkpoint::from_bytes(b"NOPE\x01\0\0\0"), Err(Error::Checkpoint(_))));
        let mut bytes = Checkpoint::from_model(&small(), None).to_bytes();
        bytes[4] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        let bytes = Checkpoint::from_model(&small(), None).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn mismatched_architecture_names_the_difference() {
        let ck = Checkpoint::from_model(&small(), None);
        let mut other = Tcan::new(
            ModelConfig {
                d: 8,
                seq_len: 4,
                depth: 1,
                heads: 2,
                gates_enabled: false,
                ..Default::default()
            },
            InputWidths { text: 5, visual: 3, acoustic: 4 },
            0,
        )
        .unwrap();
        match load_into(&mut other, &ck) {
            Err(Error::CheckpointMismatch { missing, extra }) => {
                assert!(missing.is_empty());
                assert!(extra.iter().any(|n| n.contains(".gate.memory.W")));
            }
            other => panic!("{other:?}"),
        }
    }
}
