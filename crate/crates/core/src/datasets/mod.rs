//! MNIST-family datasets: IDX and text parsers, and a deterministic
//! generator of similarity-transformed digits with per-sample provenance.

mod amat;
mod generate;
mod idx;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use amat::parse_amat;
pub use generate::{
    digit_geometry, generate, ks_uniform, DatasetName, DatasetSpec, DigitGeometry, Generated, Mnist, Placement,
};
pub use idx::{parse_idx, write_idx, IdxArray};

/// Similarity transform applied to a base digit: rotation by `angle`
/// (radians) and scaling by `scale` about the digit center, then translation
/// of that center by `(dx, dy)` pixels from the canvas center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sim2Params {
    pub angle: f64,
    pub scale: f64,
    pub dx: f64,
    pub dy: f64,
}

#[derive(Serialize, Deserialize)]
struct ProvenanceRow {
    index: usize,
    label: u8,
    angle_rad: f64,
    scale: f64,
    dx: f64,
    dy: f64,
}

/// Grayscale images stored as bytes (`0..=255` maps to `[0, 1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    pub provenance: Option<Vec<Sim2Params>>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// `N x 1 x H x W` tensor of the selected images, scaled to `[0, 1]`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let scale = T::lit(1.0 / 255.0);
        let mut data = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&b| T::from_u8(b).unwrap() * scale));
        }
        Tensor::new([indices.len(), 1, self.height, self.width], data).unwrap()
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i] as usize).collect()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            height: self.height,
            width: self.width,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            provenance: self
                .provenance
                .as_ref()
                .map(|p| indices.iter().map(|&i| p[i]).collect()),
        }
    }

    /// Splits off the last `fraction` of the items as a validation set.
    pub fn carve_validation(&self, fraction: f64) -> (Dataset, Dataset) {
        let n_val = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - n_val.min(self.len());
        let train: Vec<usize> = (0..cut).collect();
        let val: Vec<usize> = (cut..self.len()).collect();
        (self.select(&train), self.select(&val))
    }

    /// Number of items per class label.
    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    /// Builds a dataset from parsed IDX image (`N x H x W`) and label (`N`)
    /// arrays.
    pub fn from_idx(images: IdxArray, labels: IdxArray) -> Result<Dataset> {
        let [n, h, w] = *images.shape.as_slice() else {
            return Err(Error::shape(format!(
                "image file must be rank 3, got {:?}",
                images.shape
            )));
        };
        if labels.shape != [n] {
            return Err(Error::shape(format!("{n} images but label shape {:?}", labels.shape)));
        }
        Ok(Dataset {
            height: h,
            width: w,
            pixels: images.data,
            labels: labels.data,
            provenance: None,
        })
    }

    /// Writes `<split>-images-idx3-ubyte`, `<split>-labels-idx1-ubyte` and,
    /// when present, `<split>-provenance.csv` into `dir`.
    pub fn save(&self, dir: &Path, split: &str) -> Result<()> {
        let images = IdxArray {
            shape: vec![self.len(), self.height, self.width],
            data: self.pixels.clone(),
        };
        let labels = IdxArray {
            shape: vec![self.len()],
            data: self.labels.clone(),
        };
        write(&dir.join(format!("{split}-images-idx3-ubyte")), &write_idx(&images)?)?;
        write(&dir.join(format!("{split}-labels-idx1-ubyte")), &write_idx(&labels)?)?;
        if let Some(p) = &self.provenance {
            let path = dir.join(format!("{split}-provenance.csv"));
            write(&path, &provenance_csv(&self.labels, p)?)?;
        }
        Ok(())
    }

    /// Reads a split written by [`save`](Self::save); the provenance sidecar
    /// is optional.
    pub fn load(dir: &Path, split: &str) -> Result<Dataset> {
        let images = parse_idx(&read(&dir.join(format!("{split}-images-idx3-ubyte")))?)?;
        let labels = parse_idx(&read(&dir.join(format!("{split}-labels-idx1-ubyte")))?)?;
        let mut d = Dataset::from_idx(images, labels)?;
        let path = dir.join(format!("{split}-provenance.csv"));
        if path.exists() {
            let p = parse_provenance(&read(&path)?)?;
            if p.len() != d.len() {
                return Err(Error::Line {
                    line: p.len() + 1,
                    message: format!("provenance has {} rows for {} images", p.len(), d.len()),
                });
            }
            d.provenance = Some(p);
        }
        Ok(d)
    }
}

pub fn provenance_csv(labels: &[u8], params: &[Sim2Params]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (index, (&label, p)) in labels.iter().zip(params).enumerate() {
        w.serialize(ProvenanceRow {
            index,
            label,
            angle_rad: p.angle,
            scale: p.scale,
            dx: p.dx,
            dy: p.dy,
        })
        .map_err(|e| Error::arg(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::arg(e.to_string()))
}

pub fn parse_provenance(bytes: &[u8]) -> Result<Vec<Sim2Params>> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<ProvenanceRow>().enumerate() {
        let row = row.map_err(|e| Error::Line {
            line: i + 2,
            message: e.to_string(),
        })?;
        out.push(Sim2Params {
            angle: row.angle_rad,
            scale: row.scale,
            dx: row.dx,
            dy: row.dy,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset {
            height: 2,
            width: 3,
            pixels: (0..18).map(|v| v * 10).collect(),
            labels: vec![4, 0, 9],
            provenance: Some(vec![
                Sim2Params {
                    angle: 0.25,
                    scale: 1.5,
                    dx: -2.0,
                    dy: 3.125,
                };
                3
            ]),
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny();
        d.save(dir.path(), "train").unwrap();
        assert_eq!(Dataset::load(dir.path(), "train").unwrap(), d);
        let header = fs::read_to_string(dir.path().join("train-provenance.csv")).unwrap();
        assert!(header.starts_with("index,label,angle_rad,scale,dx,dy\n"));
    }

    #[test]
    fn batch_layout() {
        let d = tiny();
        let b = d.batch::<f64>(&[2, 0]);
        assert_eq!(b.shape(), &[2, 1, 2, 3]);
        assert_eq!(b.data()[0], 120.0 / 255.0);
        assert_eq!(d.labels_of(&[2, 0]), vec![9, 4]);
    }

    #[test]
    fn validation_carve() {
        let (t, v) = tiny().carve_validation(0.34);
        assert_eq!((t.len(), v.len()), (2, 1));
        assert_eq!(v.labels, vec![9]);
    }
}
