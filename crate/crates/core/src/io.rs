//! Binary containers: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header, then a little-endian payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

/// Writes `magic | len(header) | header | payload`.
pub fn write_container<H: Serialize>(
    w: &mut impl Write,
    magic: &[u8; 8],
    header: &H,
    payload: &[u8],
) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    w.write_all(magic)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(payload)?;
    Ok(())
}

pub fn read_container<H: DeserializeOwned>(
    r: &mut impl Read,
    magic: &[u8; 8],
) -> Result<(H, Vec<u8>)> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(Error::Format(format!("header length {} too large", len)));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header = serde_json::from_slice(&json)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    Ok((header, payload))
}

pub fn f64s_to_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "payload of {} bytes is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NamedHeader {
    format_version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// Ordered set of named `f64` arrays with free-form JSON metadata.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NamedArrays {
    pub meta: serde_json::Value,
    pub arrays: Vec<(ArrayEntry, Vec<f64>)>,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FGQCKPT1";

impl NamedArrays {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        self.arrays.push((
            ArrayEntry {
                name: name.into(),
                shape: shape.to_vec(),
            },
            data,
        ));
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.arrays
            .iter()
            .find(|(e, _)| e.name == name)
            .map(|(e, d)| (e.shape.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::Format(format!("missing array `{}`", name)))
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let header = NamedHeader {
            format_version: 1,
            meta: self.meta.clone(),
            arrays: self.arrays.iter().map(|(e, _)| e.clone()).collect(),
        };
        let mut payload = Vec::new();
        for (_, d) in &self.arrays {
            payload.extend(f64s_to_le(d));
        }
        write_container(w, CHECKPOINT_MAGIC, &header, &payload)
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let (header, payload): (NamedHeader, _) = read_container(r, CHECKPOINT_MAGIC)?;
        if header.format_version != 1 {
            return Err(Error::Format(format!(
                "unsupported version {}",
                header.format_version
            )));
        }
        let values = le_to_f64s(&payload)?;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        let mut off = 0;
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            if off + n > values.len() {
                return Err(Error::Format(format!("payload too short for `{}`", e.name)));
            }
            arrays.push((e, values[off..off + n].to_vec()));
            off += n;
        }
        if off != values.len() {
            return Err(Error::Format(format!(
                "{} trailing values",
                values.len() - off
            )));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_arrays_round_trip_bit_exact() {
        let mut a = NamedArrays {
            meta: serde_json::json!({"k": 1}),
            ..Default::default()
        };
        a.push("x", &[2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]);
        a.push("y", &[], vec![std::f64::consts::PI]);
        let mut buf = Vec::new();
        a.write(&mut buf).unwrap();
        let b = NamedArrays::read(&mut buf.as_slice()).unwrap();
        assert_eq!(a.meta, b.meta);
        for ((ea, da), (eb, db)) in a.arrays.iter().zip(&b.arrays) {
            assert_eq!(ea, eb);
            let ba: Vec<u64> = da.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = db.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb);
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut buf = Vec::new();
        let mut a = NamedArrays::default();
        a.push("x", &[3], vec![1.0, 2.0, 3.0]);
        a.write(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            NamedArrays::read(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        buf.truncate(buf.len() - 8);
        assert!(NamedArrays::read(&mut buf.as_slice()).is_err());
    }
}
