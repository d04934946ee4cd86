//! Binary artifacts: parameter checkpoints, tensor dumps, dataset snapshots
//! and PGM/PPM images. All integers and scalars are little-endian.
//!
//! | blob       | layout                                                             |
//! |------------|--------------------------------------------------------------------|
//! | checkpoint | `FEDEMCK1`, u32 spec length, spec string, u64 count, f64 × count   |
//! | tensor     | `FEDEMDT1`, u32 rank, u64 × rank extents, f64 × product(extents)   |
//! | dataset    | `FEDEMDS1`, u32 name length, name, u64 classes, tensor blob, u64 × n labels |

use std::io::{Read, Write};
use std::path::Path;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParameterSet};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"FEDEMCK1";
const TENSOR_MAGIC: &[u8; 8] = b"FEDEMDT1";
const DATASET_MAGIC: &[u8; 8] = b"FEDEMDS1";

fn blob_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Blob {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(blob_err(self.path, format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| blob_err(self.path, "length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| blob_err(self.path, "invalid utf-8"))
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        if self.take(8)? != expected {
            return Err(blob_err(self.path, "bad magic"));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(blob_err(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

fn put_string(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(buf)
}

pub fn encode_checkpoint(params: &ParameterSet) -> Vec<u8> {
    let flat = params.flatten();
    let mut buf = Vec::with_capacity(32 + flat.len() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_string(&mut buf, &params.spec().to_string());
    buf.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    put_f64s(&mut buf, &flat);
    buf
}

pub fn save_checkpoint(path: &Path, params: &ParameterSet) -> Result<()> {
    write_file(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterSet> {
    let bytes = read_file(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    r.magic(CHECKPOINT_MAGIC)?;
    let spec: ModelSpec = r.string()?.parse()?;
    let count = r.u64()? as usize;
    if count != spec.param_count() {
        return Err(blob_err(path, format!("{count} scalars for a {} parameter model", spec.param_count())));
    }
    let flat = r.f64s(count)?;
    r.finish()?;
    ParameterSet::from_flat(&spec, &flat)
}

fn encode_tensor_into(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    put_f64s(buf, t.data());
}

fn decode_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    r.magic(TENSOR_MAGIC)?;
    let rank = r.u32()? as usize;
    let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| blob_err(r.path, "shape overflow"))?;
    let data = r.f64s(n)?;
    Ok(Tensor::new(shape, data)?)
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 8 * (t.rank() + t.len()));
    encode_tensor_into(&mut buf, t);
    buf
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, &encode_tensor(t))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    let t = decode_tensor(&mut r)?;
    r.finish()?;
    Ok(t)
}

/// Several tensors concatenated as tensor blobs.
pub fn save_tensors(path: &Path, ts: &[Tensor]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(ts.len() as u64).to_le_bytes());
    for t in ts {
        encode_tensor_into(&mut buf, t);
    }
    write_file(path, &buf)
}

pub fn load_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = read_file(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    let n = r.u64()? as usize;
    let out = (0..n).map(|_| decode_tensor(&mut r)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(out)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    put_string(&mut buf, ds.name());
    buf.extend_from_slice(&(ds.classes() as u64).to_le_bytes());
    encode_tensor_into(&mut buf, ds.images());
    for &l in ds.labels() {
        buf.extend_from_slice(&(l as u64).to_le_bytes());
    }
    write_file(path, &buf)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    r.magic(DATASET_MAGIC)?;
    let name = r.string()?;
    let classes = r.u64()? as usize;
    let images = decode_tensor(&mut r)?;
    let n = images.shape()[0];
    let labels = (0..n).map(|_| r.u64().map(|l| l as usize)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(Dataset::new(name, Split::Train, images, labels, classes)?)
}

/// Encodes one `[c, h, w]` or `[1, c, h, w]` image in `[0, 1]` as binary PGM
/// (one channel) or PPM (three channels). Values are clamped and rounded.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    let (c, h, w) = match s.len() {
        3 => (s[0], s[1], s[2]),
        4 if s[0] == 1 => (s[1], s[2], s[3]),
        _ => return Err(Error::Config(format!("cannot write image of shape {s:?}"))),
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::Config(format!("cannot write {c}-channel image"))),
    };
    let mut buf = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    for p in 0..plane {
        for k in 0..c {
            buf.push((d[k * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(buf)
}

pub fn save_pnm(path: &Path, image: &Tensor) -> Result<()> {
    write_file(path, &encode_pnm(image)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::mlp(&[1, 2, 2], &[4, 3, 2], Activation::Tanh).unwrap();
        let p = ParameterSet::init(&spec, 9);
        let path = dir.path().join("theta.bin");
        save_checkpoint(&path, &p).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn tensor_round_trip_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 1e-300, 7.0]).unwrap();
        let path = dir.path().join("t.bin");
        save_tensor(&path, &t).unwrap();
        assert_eq!(load_tensor(&path).unwrap(), t);
        save_tensors(&path, &[t.clone(), Tensor::scalar(1.0)]).unwrap();
        assert_eq!(load_tensors(&path).unwrap(), vec![t, Tensor::scalar(1.0)]);
        std::fs::write(&path, b"NOTABLOBxxxxxxxx").unwrap();
        assert!(load_tensor(&path).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = crate::data::synth_blobs(3, 4, 2, 1).unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&path, &ds).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.images(), ds.images());
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.name(), "synthetic");
    }

    #[test]
    fn pnm_headers() {
        let gray = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.5, 2.0]).unwrap();
        assert_eq!(encode_pnm(&gray).unwrap(), b"P5\n2 2\n255\n\x00\xff\x80\xff".to_vec());
        let rgb = Tensor::new(vec![1, 3, 1, 1], vec![1.0, 0.0, 1.0]).unwrap();
        assert_eq!(encode_pnm(&rgb).unwrap(), b"P6\n1 1\n255\n\xff\x00\xff".to_vec());
        assert!(encode_pnm(&Tensor::zeros(&[2, 1, 1])).is_err());
    }
}
