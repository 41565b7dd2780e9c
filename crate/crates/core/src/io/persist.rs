//! Model and program binaries.
//!
//! Model layout (little-endian): magic `MSNN`, u32 version, f64 b0, three u32
//! input dims, u32 layer count, per layer a u8 tag and three u32 params, then
//! per weight tensor a u64 length and its f64 values, then the u64 model
//! checksum. Programs are magic `MSNP`, u32 version, u64 length and a JSON
//! body; floats survive the text form bit-exactly.

use std::fs;
use std::path::Path;

use crate::convert::SnnProgram;
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, NetworkModel, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"MSNN";
pub const MODEL_VERSION: u32 = 1;
pub const PROGRAM_MAGIC: &[u8; 4] = b"MSNP";
pub const PROGRAM_VERSION: u32 = 1;

pub fn encode_model(model: &NetworkModel) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MODEL_MAGIC);
    b.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    b.extend_from_slice(&model.b0().to_le_bytes());
    for d in model.input_shape() {
        b.extend_from_slice(&(d as u32).to_le_bytes());
    }
    b.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for l in model.layers() {
        let (tag, p) = match *l {
            LayerSpec::Conv {
                kernel,
                in_channels,
                out_channels,
            } => (0u8, [kernel, in_channels, out_channels]),
            LayerSpec::Subsample { factor } => (1, [factor, 0, 0]),
            LayerSpec::Dense { fan_in, fan_out } => (2, [fan_in, fan_out, 0]),
        };
        b.push(tag);
        for x in p {
            b.extend_from_slice(&(x as u32).to_le_bytes());
        }
    }
    for w in model.weights() {
        b.extend_from_slice(&(w.len() as u64).to_le_bytes());
        for x in w.data() {
            b.extend_from_slice(&x.to_le_bytes());
        }
    }
    b.extend_from_slice(&model.checksum().to_le_bytes());
    b
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn check_header(r: &mut Reader, magic: &[u8; 4], version: u32, what: &str) -> Result<()> {
    if r.take(4).ok() != Some(&magic[..]) {
        return Err(Error::Format(format!("not a {what} file (bad magic)")));
    }
    let v = r.u32()?;
    if v != version {
        return Err(Error::Format(format!("{what} version {v} unsupported, expected {version}")));
    }
    Ok(())
}

pub fn decode_model(bytes: &[u8]) -> Result<NetworkModel> {
    let mut r = Reader { bytes, pos: 0 };
    check_header(&mut r, MODEL_MAGIC, MODEL_VERSION, "model")?;
    let b0 = r.f64()?;
    let input_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let n_layers = r.u32()? as usize;
    if n_layers > bytes.len() {
        return Err(Error::Format(format!("implausible layer count {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let tag = r.u8()?;
        let p = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        layers.push(match tag {
            0 => LayerSpec::Conv {
                kernel: p[0],
                in_channels: p[1],
                out_channels: p[2],
            },
            1 => LayerSpec::Subsample { factor: p[0] },
            2 => LayerSpec::Dense {
                fan_in: p[0],
                fan_out: p[1],
            },
            t => return Err(Error::Format(format!("unknown layer tag {t}"))),
        });
    }
    let mut weights = Vec::new();
    for l in &layers {
        let Some(shape) = l.weight_shape() else { continue };
        let n = r.u64()? as usize;
        let want: usize = shape.iter().product();
        if n != want {
            return Err(Error::Format(format!("{} layer stores {n} weights, expected {want}", l.name())));
        }
        let mut data = Vec::with_capacity(n.min(bytes.len() / 8));
        for _ in 0..n {
            data.push(r.f64()?);
        }
        weights.push(Tensor::new(shape, data)?);
    }
    let stored = r.u64()?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let model = NetworkModel::from_parts(input_shape, layers, weights, b0)
        .map_err(|e| Error::Format(format!("inconsistent model: {e}")))?;
    if model.checksum() != stored {
        return Err(Error::Format("model checksum mismatch".into()));
    }
    Ok(model)
}

pub fn save_model(model: &NetworkModel, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<NetworkModel> {
    decode_model(&fs::read(path)?)
}

pub fn encode_program(program: &SnnProgram) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(program).map_err(|e| Error::Format(e.to_string()))?;
    let mut b = Vec::with_capacity(body.len() + 16);
    b.extend_from_slice(PROGRAM_MAGIC);
    b.extend_from_slice(&PROGRAM_VERSION.to_le_bytes());
    b.extend_from_slice(&(body.len() as u64).to_le_bytes());
    b.extend_from_slice(&body);
    Ok(b)
}

pub fn decode_program(bytes: &[u8]) -> Result<SnnProgram> {
    let mut r = Reader { bytes, pos: 0 };
    check_header(&mut r, PROGRAM_MAGIC, PROGRAM_VERSION, "program")?;
    let n = r.u64()? as usize;
    let body = r.take(n)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    serde_json::from_slice(body).map_err(|e| Error::Format(format!("program body: {e}")))
}

pub fn save_program(program: &SnnProgram, path: &Path) -> Result<()> {
    fs::write(path, encode_program(program)?)?;
    Ok(())
}

pub fn load_program(path: &Path) -> Result<SnnProgram> {
    decode_program(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convert::{convert, ConvertConfig};
    use crate::device::DeviceParams;
    use crate::rng::{Purpose, StreamKey};
    use rand::Rng;

    fn model() -> NetworkModel {
        NetworkModel::reference_cnn(-1.0, 11)
    }

    #[test]
    fn model_round_trip() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.msnn");
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back, m);
        let mut rng = StreamKey::new(1, Purpose::Test, 0, 0).rng();
        for _ in 0..10 {
            let x: Vec<f64> = (0..784).map(|_| rng.random_range(0.0..1.0)).collect();
            let t = Tensor::new(vec![1, 28, 28], x).unwrap();
            let a = m.forward(&t).unwrap();
            let b = back.forward(&t).unwrap();
            assert_eq!(a.output(), b.output());
        }
    }

    #[test]
    fn model_corruption_rejected() {
        let bytes = encode_model(&model());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Format(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_model(&bad), Err(Error::Format(m)) if m.contains("version")));
        assert!(decode_model(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[200] ^= 0x40;
        assert!(decode_model(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_model(&long).is_err());
    }

    #[test]
    fn program_round_trip() {
        let p = convert(&model(), &DeviceParams::default(), &ConvertConfig::default()).unwrap();
        let bytes = encode_program(&p).unwrap();
        assert_eq!(decode_program(&bytes).unwrap(), p);
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(decode_program(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 2;
        assert!(matches!(decode_program(&bad), Err(Error::Format(m)) if m.contains("version")));
    }
}
