use std::path::Path;

use super::OptimState;
use crate::autograd::Tensor;
use crate::binfmt::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelParams, NamedTensor};

const MAGIC: &[u8; 4] = b"VCLC";
const VERSION: u32 = 1;

/// Model parameters after `step` optimizer updates, optionally with the
/// optimizer moments needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: ModelParams,
    pub optim: Option<OptimState>,
}

fn write_tensors(w: &mut Writer, tensors: &[(String, &Tensor<f32>)]) {
    w.u32(tensors.len() as u32);
    for (name, t) in tensors {
        w.u16(name.len() as u16);
        w.bytes(name.as_bytes());
        w.u8(t.rank() as u8);
        for d in t.shape() {
            w.u32(*d as u32);
        }
        w.f32s(t.data());
    }
}

fn read_tensors(r: &mut Reader) -> Result<Vec<NamedTensor>> {
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let at = r.offset();
        let len = r.u16()? as usize;
        let name =
            std::str::from_utf8(r.take(len)?).map_err(|_| r.error_at(at, "tensor name is not UTF-8"))?.to_string();
        let rank_at = r.offset();
        let rank = r.u8()? as usize;
        if rank == 0 {
            return Err(r.error_at(rank_at, format!("tensor `{name}` has rank 0")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .filter(|n| *n > 0)
            .ok_or_else(|| r.error_at(rank_at, format!("tensor `{name}` has invalid shape {shape:?}")))?;
        let data = r.f32s(numel)?;
        out.push(NamedTensor { name, tensor: Tensor::new(shape, data)? });
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u64(self.step);
        let named: Vec<(String, &Tensor<f32>)> =
            self.params.tensors().iter().map(|t| (t.name.clone(), &t.tensor)).collect();
        write_tensors(&mut w, &named);
        match &self.optim {
            None => w.u32(0),
            Some(state) => {
                if state.t != self.step {
                    return Err(Error::Invalid(format!(
                        "optimizer at step {} but checkpoint at {}",
                        state.t, self.step
                    )));
                }
                let mut moments = Vec::new();
                for (kind, list) in [("m", &state.m), ("v", &state.v)] {
                    for (t, p) in list.iter().zip(self.params.tensors()) {
                        moments.push((format!("optim.{kind}.{}", p.name), t));
                    }
                }
                write_tensors(&mut w, &moments);
            }
        }
        Ok(w.into_bytes())
    }

    fn parse(bytes: &[u8], arch: Option<&Architecture>) -> Result<Self> {
        let mut r = Reader::open("checkpoint", bytes, MAGIC, VERSION)?;
        let step = r.u64()?;
        let tensors_at = r.offset();
        let tensors = read_tensors(&mut r)?;
        let moments_at = r.offset();
        let moments = read_tensors(&mut r)?;
        r.finish()?;

        let params = match arch {
            Some(arch) => ModelParams::from_named(arch, tensors)?,
            None => {
                let arch = ModelParams::infer_architecture(&tensors)
                    .map_err(|e| r.error_at(tensors_at, format!("unrecognized parameter set: {e}")))?;
                ModelParams::from_named(&arch, tensors)?
            }
        };
        let optim = if moments.is_empty() {
            None
        } else {
            let n = params.tensors().len();
            let expected = |kind: &str, i: usize| format!("optim.{kind}.{}", params.tensors()[i].name);
            let ok = moments.len() == 2 * n
                && moments.iter().enumerate().all(|(i, t)| {
                    let (kind, j) = if i < n { ("m", i) } else { ("v", i - n) };
                    t.name == expected(kind, j) && t.tensor.shape() == params.tensors()[j].tensor.shape()
                });
            if !ok {
                return Err(r.error_at(moments_at, "optimizer state does not match the parameters"));
            }
            let mut it = moments.into_iter().map(|t| t.tensor);
            let m = it.by_ref().take(n).collect();
            let v = it.collect();
            Some(OptimState { m, v, t: step })
        };
        Ok(Checkpoint { step, params, optim })
    }

    /// Parses a checkpoint, inferring the architecture from its tensors.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Checkpoint::parse(bytes, None)
    }

    /// Parses a checkpoint that must match `arch`.
    pub fn from_bytes_for(bytes: &[u8], arch: &Architecture) -> Result<Self> {
        Checkpoint::parse(bytes, Some(arch))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&read_file(path)?)
    }

    pub fn load_for(path: &Path, arch: &Architecture) -> Result<Self> {
        Checkpoint::from_bytes_for(&read_file(path)?, arch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;

    fn arch(hidden: usize) -> Architecture {
        Architecture { encoder: EncoderConfig { input_dim: 6, hidden_dims: vec![hidden], embed_dim: 4 }, head_dim: 3 }
    }

    fn sample(with_optim: bool) -> Checkpoint {
        let params = ModelParams::init(&arch(5), 1).unwrap();
        let optim = with_optim.then(|| {
            let mut s = OptimState::new(params.tensors().iter().map(|t| &t.tensor));
            s.t = 9;
            s.m[0].data_mut()[0] = 0.25;
            s.v[3].data_mut()[1] = 1e-7;
            s
        });
        Checkpoint { step: 9, params, optim }
    }

    #[test]
    fn round_trip_is_exact() {
        for with_optim in [false, true] {
            let ck = sample(with_optim);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/c.vclc");
        let ck = sample(true);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert_eq!(std::fs::read(&path).unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn mismatched_architecture_is_a_shape_error() {
        let bytes = sample(false).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes_for(&bytes, &arch(7)), Err(Error::ParamShape { .. })));
        assert!(Checkpoint::from_bytes_for(&bytes, &arch(5)).is_ok());
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = sample(true).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'Z';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
        for cut in [0, 3, 10, 20, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Format { reason, .. }) => assert!(reason.contains("truncated"), "{reason}"),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format { .. })));
    }
}
