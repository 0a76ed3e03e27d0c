//! FLCK checkpoint container: magic "FLCK", version byte, model spec
//! encoding, little-endian u64 parameter count, raw f64 parameters, and an
//! optional optimizer-velocity section. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::{Activation, ModelKind, ModelSpec};
use crate::param::ParamVector;

const MAGIC: &[u8; 4] = b"FLCK";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub theta: ParamVector,
    pub velocity: Option<ParamVector>,
}

fn encode_spec(spec: &ModelSpec, out: &mut Vec<u8>) {
    match &spec.kind {
        ModelKind::Linear => {
            out.push(0);
            out.push(0); // no widths
        }
        ModelKind::Mlp { hidden } => {
            out.push(1);
            out.push(hidden.len() as u8);
            for &w in hidden {
                out.extend_from_slice(&(w as u64).to_le_bytes());
            }
        }
        ModelKind::SmallConv { c1, c2 } => {
            out.push(2);
            out.extend_from_slice(&(*c1 as u64).to_le_bytes());
            out.extend_from_slice(&(*c2 as u64).to_le_bytes());
        }
    }
    out.push(match spec.activation {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    });
    out.push(spec.input_shape.len() as u8);
    for &d in &spec.input_shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&(spec.classes as u64).to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn u8(&mut self) -> Result<u8> {
        if self.at >= self.bytes.len() {
            return Err(Error::TruncatedPayload("checkpoint".into()));
        }
        self.at += 1;
        Ok(self.bytes[self.at - 1])
    }

    fn u64(&mut self) -> Result<u64> {
        if self.at + 8 > self.bytes.len() {
            return Err(Error::TruncatedPayload("checkpoint".into()));
        }
        let v = u64::from_le_bytes(self.bytes[self.at..self.at + 8].try_into().unwrap());
        self.at += 8;
        Ok(v)
    }

    fn f64(&mut self) -> Result<f64> {
        if self.at + 8 > self.bytes.len() {
            return Err(Error::TruncatedPayload("checkpoint".into()));
        }
        let v = f64::from_le_bytes(self.bytes[self.at..self.at + 8].try_into().unwrap());
        self.at += 8;
        Ok(v)
    }
}

fn decode_spec(c: &mut Cursor) -> Result<ModelSpec> {
    let kind = match c.u8()? {
        0 => {
            c.u8()?;
            ModelKind::Linear
        }
        1 => {
            let n = c.u8()? as usize;
            let mut hidden = Vec::with_capacity(n);
            for _ in 0..n {
                hidden.push(c.u64()? as usize);
            }
            ModelKind::Mlp { hidden }
        }
        2 => ModelKind::SmallConv { c1: c.u64()? as usize, c2: c.u64()? as usize },
        k => return Err(Error::Config(format!("bad checkpoint model kind {k}"))),
    };
    let activation = match c.u8()? {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        a => return Err(Error::Config(format!("bad checkpoint activation {a}"))),
    };
    let ndim = c.u8()? as usize;
    let mut input_shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        input_shape.push(c.u64()? as usize);
    }
    let classes = c.u64()? as usize;
    Ok(ModelSpec { kind, activation, input_shape, classes })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(64 + ckpt.theta.len() * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    encode_spec(&ckpt.spec, &mut out);
    out.extend_from_slice(&(ckpt.theta.len() as u64).to_le_bytes());
    for &v in ckpt.theta.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match &ckpt.velocity {
        Some(vel) => {
            out.push(1);
            for &v in vel.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        let got = if bytes.len() >= 4 {
            u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
        } else {
            0
        };
        return Err(Error::BadMagic { expected: u32::from_be_bytes(*MAGIC), got });
    }
    if bytes[4] != VERSION {
        return Err(Error::Config(format!("unsupported checkpoint version {}", bytes[4])));
    }
    let mut c = Cursor { bytes: &bytes, at: 5 };
    let spec = decode_spec(&mut c)?;
    let n = c.u64()? as usize;
    let layout = spec.layout();
    if n != layout.total_len() {
        return Err(Error::LayoutMismatch(format!(
            "checkpoint stores {n} parameters, spec has {}",
            layout.total_len()
        )));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(c.f64()?);
    }
    let theta = ParamVector::from_data(layout.clone(), data)?;
    let velocity = match c.u8()? {
        0 => None,
        1 => {
            let mut vdata = Vec::with_capacity(n);
            for _ in 0..n {
                vdata.push(c.f64()?);
            }
            Some(ParamVector::from_data(layout, vdata)?)
        }
        f => return Err(Error::Config(format!("bad checkpoint velocity flag {f}"))),
    };
    Ok(Checkpoint { spec, theta, velocity })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{init_params, InitScheme};

    #[test]
    fn roundtrip_bit_exact_with_velocity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.flck");
        let spec = ModelSpec::mlp(3, vec![5, 4], 2, Activation::Tanh);
        let theta = init_params(&spec, InitScheme::HeNormal, 3);
        let mut vel = ParamVector::zeros(theta.layout().clone());
        vel.data_mut()[0] = -0.25;
        let ckpt = Checkpoint { spec, theta, velocity: Some(vel) };
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        for (a, b) in back.theta.data().iter().zip(ckpt.theta.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn roundtrip_conv_without_velocity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.flck");
        let spec = ModelSpec::small_conv(1, 8, 8, 3, 5, 4, Activation::Relu);
        let theta = init_params(&spec, InitScheme::HeNormal, 9);
        let ckpt = Checkpoint { spec, theta, velocity: None };
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.flck");
        std::fs::write(&path, b"NOPE\x01").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.flck");
        let spec = ModelSpec::linear(2, 2);
        let theta = init_params(&spec, InitScheme::HeNormal, 0);
        let ckpt = Checkpoint { spec, theta, velocity: None };
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::TruncatedPayload(_))));
    }
}
