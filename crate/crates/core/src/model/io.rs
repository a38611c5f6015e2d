//! Binary model file format.
//!
//! Layout (little-endian): magic `UNGW`, version `u16`, input shape
//! `c,h,w` as `u32`, class count `u32`, layer count `u32`, then one record
//! per layer: kind `u8`, ndims `u8`, dims as `u32`s, payload as raw `f32`s
//! (weights then biases). The head is the final record.

use super::{ClassifierModel, Conv2d, Dense, Layer};
use crate::error::{Error, Result};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"UNGW";
const VERSION: u16 = 1;

const KIND_CONV: u8 = 1;
const KIND_DENSE: u8 = 2;
const KIND_RELU: u8 = 3;
const KIND_FLATTEN: u8 = 4;
const KIND_HEAD: u8 = 5;

struct CountingWriter<W: Write> {
    inner: W,
}

impl<W: Write> CountingWriter<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        self.inner.write_all(&[v])?;
        Ok(())
    }
    fn u16(&mut self, v: u16) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f32s(&mut self, vs: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(vs.len() * 4);
        for &v in vs {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.inner.write_all(&buf)?;
        Ok(())
    }
}

struct CountingReader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::format(at, format!("truncated while reading {what}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.exact(&mut b, what)?;
        Ok(b[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 4];
        self.exact(&mut buf, what)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

fn write_dense(w: &mut CountingWriter<impl Write>, kind: u8, d: &Dense) -> Result<()> {
    w.u8(kind)?;
    w.u8(2)?;
    w.u32(d.out_d as u32)?;
    w.u32(d.in_d as u32)?;
    w.f32s(&d.weight)?;
    w.f32s(&d.bias)?;
    Ok(())
}

pub fn save_model(model: &ClassifierModel, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    let mut w = CountingWriter {
        inner: BufWriter::new(file),
    };
    w.inner.write_all(MAGIC)?;
    w.u16(VERSION)?;
    let (c, h, wd) = model.input_shape();
    w.u32(c as u32)?;
    w.u32(h as u32)?;
    w.u32(wd as u32)?;
    w.u32(model.classes() as u32)?;
    w.u32((model.extractor.len() + 1) as u32)?;
    for layer in &model.extractor {
        match layer {
            Layer::Conv2d(conv) => {
                w.u8(KIND_CONV)?;
                w.u8(5)?;
                for v in [conv.out_c, conv.in_c, conv.kernel, conv.stride, conv.pad] {
                    w.u32(v as u32)?;
                }
                w.f32s(&conv.weight)?;
                w.f32s(&conv.bias)?;
            }
            Layer::Dense(dense) => write_dense(&mut w, KIND_DENSE, dense)?,
            Layer::Relu => {
                w.u8(KIND_RELU)?;
                w.u8(0)?;
            }
            Layer::Flatten => {
                w.u8(KIND_FLATTEN)?;
                w.u8(0)?;
            }
        }
    }
    write_dense(&mut w, KIND_HEAD, &model.head)?;
    w.inner.flush()?;
    Ok(())
}

fn read_dims(r: &mut CountingReader<impl Read>, expect: usize, kind: &str) -> Result<Vec<usize>> {
    let at = r.offset;
    let ndims = r.u8("ndims")? as usize;
    if ndims != expect {
        return Err(Error::format(
            at,
            format!("{kind} record has {ndims} dims, expected {expect}"),
        ));
    }
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        dims.push(r.u32("dim")? as usize);
    }
    Ok(dims)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ClassifierModel> {
    let file = File::open(path)?;
    let mut r = CountingReader {
        inner: BufReader::new(file),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    let at = r.offset;
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let c = r.u32("input channels")? as usize;
    let h = r.u32("input height")? as usize;
    let w = r.u32("input width")? as usize;
    let classes = r.u32("classes")? as usize;
    let at = r.offset;
    let layer_count = r.u32("layer count")? as usize;
    if layer_count == 0 {
        return Err(Error::format(at, "zero layers"));
    }

    let mut extractor = Vec::new();
    let mut head: Option<Dense> = None;
    for li in 0..layer_count {
        let at = r.offset;
        let kind = r.u8("layer kind")?;
        if head.is_some() {
            return Err(Error::format(at, "layer after head record"));
        }
        match kind {
            KIND_CONV => {
                let dims = read_dims(&mut r, 5, "conv")?;
                let (out_c, in_c, kernel, stride, pad) =
                    (dims[0], dims[1], dims[2], dims[3], dims[4]);
                if stride == 0 || kernel == 0 {
                    return Err(Error::format(at, "conv with zero kernel or stride"));
                }
                let weight = r.f32s(out_c * in_c * kernel * kernel, "conv weights")?;
                let bias = r.f32s(out_c, "conv biases")?;
                extractor.push(Layer::Conv2d(Conv2d {
                    out_c,
                    in_c,
                    kernel,
                    stride,
                    pad,
                    weight,
                    bias,
                }));
            }
            KIND_DENSE | KIND_HEAD => {
                let dims = read_dims(&mut r, 2, "dense")?;
                let (out_d, in_d) = (dims[0], dims[1]);
                let weight = r.f32s(out_d * in_d, "dense weights")?;
                let bias = r.f32s(out_d, "dense biases")?;
                let dense = Dense {
                    out_d,
                    in_d,
                    weight,
                    bias,
                };
                if kind == KIND_HEAD {
                    head = Some(dense);
                } else {
                    extractor.push(Layer::Dense(dense));
                }
            }
            KIND_RELU => {
                read_dims(&mut r, 0, "relu")?;
                extractor.push(Layer::Relu);
            }
            KIND_FLATTEN => {
                read_dims(&mut r, 0, "flatten")?;
                extractor.push(Layer::Flatten);
            }
            other => {
                return Err(Error::format(
                    at,
                    format!("unknown layer kind {other} (record {li})"),
                ));
            }
        }
    }
    let at = r.offset;
    let head = head.ok_or_else(|| Error::format(at, "missing head record"))?;
    if head.out_d != classes {
        return Err(Error::format(
            at,
            format!("head outputs {} but header says {classes} classes", head.out_d),
        ));
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(Error::format(r.offset, "trailing bytes after last layer"));
    }
    ClassifierModel::new(extractor, head, (c, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchKind};
    use crate::rng::RngStream;
    use std::io::Write as _;

    fn sample_model() -> ClassifierModel {
        let mut rng = RngStream::new(33);
        let mut m = build_model(
            ArchKind::Cnn {
                conv1: 2,
                conv2: 3,
                feat_dim: 5,
            },
            (1, 8, 8),
            4,
            &mut rng,
        )
        .unwrap();
        m.quantize_f32();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ungw");
        let model = sample_model();
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ungw");
        save_model(&sample_model(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        let tr_path = dir.path().join("trunc.ungw");
        std::fs::write(&tr_path, cut).unwrap();
        match load_model(&tr_path) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("truncated")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ungw");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(b"NOPEextradata").unwrap();
        drop(f);
        match load_model(&path) {
            Err(Error::Format { offset, reason }) => {
                assert_eq!(offset, 0);
                assert!(reason.contains("bad magic"));
            }
            other => panic!("expected bad magic, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ungw");
        save_model(&sample_model(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));
    }
}
