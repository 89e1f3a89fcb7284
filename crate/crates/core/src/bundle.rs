//! Named-tensor bundle used for checkpoints and head-output dumps.
//!
//! ```text
//! SSAH1\n
//! cfg.<key>=<value>\n          metadata, any number
//! <name>=<offset>\n            absolute byte offset of that tensor's SSAT record
//! \n                           end of manifest
//! <SSAT record>...             in manifest order
//! ```
//! Offsets are written zero-padded to a fixed width so the manifest length
//! does not depend on the values it contains.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::io::{decode_tensor, encode_tensor};
use crate::tensor::Tensor;

pub const BUNDLE_MAGIC: &str = "SSAH1";
const META_PREFIX: &str = "cfg.";
const OFFSET_WIDTH: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle<T> {
    meta: Vec<(String, String)>,
    tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for Bundle<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_key(key: &str) -> Result<()> {
    if key.is_empty() || key.contains(['=', '\n', '\r']) {
        return Err(Error::Contract(format!("invalid bundle key {key:?}")));
    }
    Ok(())
}

impl<T: Scalar> Bundle<T> {
    pub fn new() -> Self {
        Self {
            meta: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) -> Result<()> {
        check_key(key)?;
        let value = value.to_string();
        if value.contains(['\n', '\r']) {
            return Err(Error::Contract(format!("metadata value for {key} spans lines")));
        }
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_entries(&self) -> &[(String, String)] {
        &self.meta
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        check_key(name)?;
        if name.starts_with(META_PREFIX) {
            return Err(Error::Contract(format!("tensor name {name:?} uses the metadata prefix")));
        }
        match self.tensors.iter_mut().find(|(k, _)| k == name) {
            Some(slot) => slot.1 = t,
            None => self.tensors.push((name.to_string(), t)),
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(k, _)| k == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("bundle has no tensor named {name:?}")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        let i = self.tensors.iter().position(|(k, _)| k == name)?;
        Some(self.tensors.remove(i).1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(k, _)| k.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{BUNDLE_MAGIC}\n");
        for (k, v) in &self.meta {
            header.push_str(&format!("{META_PREFIX}{k}={v}\n"));
        }
        let manifest_len = header.len()
            + self
                .tensors
                .iter()
                .map(|(k, _)| k.len() + 1 + OFFSET_WIDTH + 1)
                .sum::<usize>()
            + 1;
        let mut payload = Vec::new();
        for (k, t) in &self.tensors {
            let offset = manifest_len + payload.len();
            header.push_str(&format!("{k}={offset:0width$}\n", width = OFFSET_WIDTH));
            encode_tensor(t, &mut payload);
        }
        header.push('\n');
        debug_assert_eq!(header.len(), manifest_len);
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<(usize, String)> {
            let start = *pos;
            let end = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|i| start + i)
                .ok_or_else(|| Error::format(start as u64, "unterminated manifest line"))?;
            *pos = end + 1;
            let line = std::str::from_utf8(&bytes[start..end])
                .map_err(|_| Error::format(start as u64, "manifest line is not UTF-8"))?;
            Ok((start, line.to_string()))
        };
        let (_, magic) = next_line(&mut pos)?;
        if magic != BUNDLE_MAGIC {
            return Err(Error::format(0, format!("expected {BUNDLE_MAGIC} header, found {magic:?}")));
        }
        let mut bundle = Self::new();
        let mut entries = Vec::new();
        loop {
            let (at, line) = next_line(&mut pos)?;
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(at as u64, format!("manifest line without '=': {line:?}")))?;
            if let Some(meta_key) = k.strip_prefix(META_PREFIX) {
                bundle.meta.push((meta_key.to_string(), v.to_string()));
            } else {
                let offset: usize = v
                    .parse()
                    .map_err(|_| Error::format(at as u64, format!("bad offset {v:?} for {k}")))?;
                entries.push((k.to_string(), offset));
            }
        }
        for (name, offset) in entries {
            if offset < pos || offset >= bytes.len() {
                return Err(Error::format(offset as u64, format!("offset for {name} outside payload")));
            }
            let (t, _) = decode_tensor(&bytes[offset..], offset as u64)?;
            bundle.tensors.push((name, t));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bundle<f64> {
        let mut b = Bundle::new();
        b.set_meta("num_classes", 3).unwrap();
        b.insert("student.S", Tensor::from_fn(&[3, 2], |i| i as f64 * 0.5)).unwrap();
        b.insert("bias", Tensor::from_f64(&[2], &[-1.0, 2.0]).unwrap()).unwrap();
        b
    }

    #[test]
    fn round_trip_preserves_order_and_values() {
        let b = sample();
        let back = Bundle::<f64>::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["student.S", "bias"]);
    }

    #[test]
    fn offsets_are_absolute() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes);
        let line = text.lines().find(|l| l.starts_with("bias=")).unwrap();
        let offset: usize = line[5..].parse().unwrap();
        assert_eq!(&bytes[offset..offset + 4], b"SSAT");
    }

    #[test]
    fn corrupt_payload_reports_offset() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes.truncate(n - 4);
        assert!(matches!(Bundle::<f64>::from_bytes(&bytes), Err(Error::Format { .. })));
    }
}
