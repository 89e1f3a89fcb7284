//! Integer label maps and their 8-bit PGM (P5) encoding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `H×W` class map, row-major. Pixels equal to the ignore value carry no label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::Contract(format!(
                "label mask {height}x{width} cannot hold {} labels",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u32) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u32) -> Self {
        let labels = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, labels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, h: usize, w: usize) -> u32 {
        self.labels[h * self.width + w]
    }

    pub fn set(&mut self, h: usize, w: usize, label: u32) {
        self.labels[h * self.width + w] = label;
    }

    /// Checks every label is a class index below `classes` or the ignore value.
    pub fn validate(&self, classes: usize, ignore: u32) -> Result<()> {
        match self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l != ignore && l as usize >= classes)
        {
            Some((index, &value)) => Err(Error::InvalidLabel { value, index, classes }),
            None => Ok(()),
        }
    }

    /// `[H·W, K]` indicator; ignored pixels are all-zero rows.
    pub fn one_hot<T: Scalar>(&self, classes: usize, ignore: u32) -> Result<Tensor<T>> {
        self.validate(classes, ignore)?;
        let mut t = Tensor::zeros(&[self.len(), classes]);
        for (i, &l) in self.labels.iter().enumerate() {
            if l != ignore {
                t.data_mut()[i * classes + l as usize] = T::one();
            }
        }
        Ok(t)
    }

    /// Pixel count per class over non-ignored pixels.
    pub fn class_counts(&self, classes: usize, ignore: u32) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.labels {
            if l != ignore && (l as usize) < classes {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    pub fn to_pgm(&self) -> Result<Vec<u8>> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        for (i, &l) in self.labels.iter().enumerate() {
            let b = u8::try_from(l).map_err(|_| {
                Error::Contract(format!("label {l} at pixel {i} does not fit an 8-bit PGM"))
            })?;
            out.push(b);
        }
        Ok(out)
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // whitespace and comments between header tokens
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(pos as u64, "truncated PGM header"));
            }
            fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
        }
        if fields[0].1 != "P5" {
            return Err(Error::format(0, format!("expected P5 magic, found {:?}", fields[0].1)));
        }
        let num = |(at, s): &(usize, String)| {
            s.parse::<usize>()
                .map_err(|_| Error::format(*at as u64, format!("bad PGM header field {s:?}")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::format(fields[3].0 as u64, format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height;
        if bytes.len() < pos + n {
            return Err(Error::format(
                bytes.len() as u64,
                format!("PGM raster truncated: need {n} bytes after offset {pos}"),
            ));
        }
        let labels = bytes[pos..pos + n].iter().map(|&b| b as u32).collect();
        Self::new(height, width, labels)
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_pgm()?)?;
        Ok(())
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_pgm(&fs::read(path)?)
    }
}
