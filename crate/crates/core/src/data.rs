//! Labeled image datasets: validation, batching, the synthetic shape
//! generator, and the IDX file loader.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

/// Labeled images with values in [0,1].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor, // n x c x h x w
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Tensor,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 0, 0, 0],
                got: images.shape().to_vec(),
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![images.shape()[0]],
                got: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InputDomain(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InputDomain("image values outside [0,1]".into()));
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    /// Gathers the given indices into a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.input_shape();
        let il = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * il);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(&[indices.len(), c, h, w], data).expect("batch gather"),
            labels,
        )
    }

    /// New dataset restricted to the given indices.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            name: self.name.clone(),
            images,
            labels,
            classes: self.classes,
        }
    }
}

fn pattern_value(class: usize, y: usize, x: usize, side: usize, geo: &[usize; 4]) -> bool {
    let (j0, j1, j2, j3) = (geo[0], geo[1], geo[2], geo[3]);
    let period = 3 + j0 % 2;
    let c = side / 2;
    match class {
        // horizontal stripes
        0 => (y + j1) / period % 2 == 0,
        // checkerboard
        1 => ((y + j1) / period + (x + j2) / period) % 2 == 0,
        // filled disc
        2 => {
            let cy = c as isize + (j1 % (side / 4)) as isize - (side / 8) as isize;
            let cx = c as isize + (j2 % (side / 4)) as isize - (side / 8) as isize;
            let r = (side / 4 + j3 % (side / 8 + 1)) as isize;
            let dy = y as isize - cy;
            let dx = x as isize - cx;
            dy * dy + dx * dx <= r * r
        }
        // rectangular frame
        3 => {
            let m = 1 + j1 % (side / 5);
            let t = 1 + j3 % 2;
            let inside = y >= m && y < side - m && x >= m && x < side - m;
            let inner = y >= m + t && y < side - m - t && x >= m + t && x < side - m - t;
            inside && !inner
        }
        // vertical stripes
        4 => (x + j2) / period % 2 == 0,
        // diagonal stripes
        5 => (x + y + j1) / period % 2 == 0,
        // cross
        6 => {
            let t = 1 + j3 % 2;
            let cy = c + j1 % 3;
            let cx = c + j2 % 3;
            y.abs_diff(cy) <= t || x.abs_diff(cx) <= t
        }
        // dot grid
        7 => (y + j1) % (period + 1) < 2 && (x + j2) % (period + 1) < 2,
        // lower-left triangle
        8 => y + x >= side - 1 + j1 % 3,
        // concentric rings
        9 => {
            let dy = y as f64 - c as f64;
            let dx = x as f64 - c as f64;
            ((dy * dy + dx * dx).sqrt() as usize + j1) / period % 2 == 0
        }
        _ => unreachable!("pattern class bounded by 10"),
    }
}

/// Procedurally rendered grayscale shapes, balanced across classes and
/// deterministic per seed.
pub fn gen_synthetic_dataset(
    classes: usize,
    n: usize,
    image_side: usize,
    seed: u64,
) -> Result<Dataset> {
    if !(2..=10).contains(&classes) {
        return Err(Error::InputDomain(format!(
            "classes must be in [2,10], got {classes}"
        )));
    }
    if !(8..=32).contains(&image_side) {
        return Err(Error::InputDomain(format!(
            "image_side must be in [8,32], got {image_side}"
        )));
    }
    let root = RngStream::new(seed);
    let mut data = Vec::with_capacity(n * image_side * image_side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let mut rng = root.derive(i as u64);
        let geo = [
            rng.below(97),
            rng.below(89),
            rng.below(83),
            rng.below(79),
        ];
        let fg = 0.62 + rng.uniform() * 0.18;
        let bg = 0.20 + rng.uniform() * 0.18;
        for y in 0..image_side {
            for x in 0..image_side {
                let base = if pattern_value(class, y, x, image_side, &geo) {
                    fg
                } else {
                    bg
                };
                let v = base + rng.normal(0.0, 0.10);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    Dataset::new(
        format!("synthetic-c{classes}-s{image_side}"),
        Tensor::new(&[n, 1, image_side, image_side], data)?,
        labels,
        classes,
    )
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> IdxReader<R> {
    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        let at = self.offset;
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::format(at, format!("truncated while reading {what}")))?;
        self.offset += 4;
        Ok(u32::from_be_bytes(b))
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let at = self.offset;
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::format(at, format!("truncated while reading {what}")))?;
        self.offset += n as u64;
        Ok(buf)
    }
}

/// Loads an IDX image/label pair (MNIST-like). Pixels are scaled to [0,1].
pub fn load_idx_dataset(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset> {
    let mut ir = IdxReader {
        inner: BufReader::new(File::open(images_path.as_ref())?),
        offset: 0,
    };
    let magic = ir.u32_be("image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            0,
            format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let n = ir.u32_be("image count")? as usize;
    let h = ir.u32_be("image rows")? as usize;
    let w = ir.u32_be("image cols")? as usize;
    let pixels = ir.bytes(n * h * w, "pixel data")?;

    let mut lr = IdxReader {
        inner: BufReader::new(File::open(labels_path.as_ref())?),
        offset: 0,
    };
    let magic = lr.u32_be("label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let ln = lr.u32_be("label count")? as usize;
    if ln != n {
        return Err(Error::format(
            4,
            format!("label count {ln} does not match image count {n}"),
        ));
    }
    let raw_labels = lr.bytes(ln, "label data")?;

    let data: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    let name = images_path
        .as_ref()
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(
        name,
        Tensor::new(&[n, 1, h, w], data)?,
        labels,
        classes,
    )
}
