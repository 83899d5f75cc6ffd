//! Flat binary model checkpoints.
//!
//! Layout, all little-endian: the magic `HILM`, a `u32` version, a `u32`
//! tensor count, then per tensor a `u32` name length, the UTF-8 name, a `u32`
//! rank, `rank` × `u64` dims and the row-major `f64` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Mlp;

pub const MAGIC: &[u8; 4] = b"HILM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::DimensionMismatch {
                what: "tensor size",
                expected: count,
                actual: data.len(),
            });
        }
        if self.get(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name:?}")));
        }
        self.tensors.push(Tensor { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    /// Stores the layer sizes as `{prefix}.sizes` next to the layer tensors.
    pub fn push_mlp(&mut self, prefix: &str, net: &Mlp) -> Result<()> {
        let sizes: Vec<f64> = net.sizes().iter().map(|&s| s as f64).collect();
        self.push(format!("{prefix}.sizes"), vec![sizes.len()], sizes)?;
        for (name, shape, data) in net.tensors(prefix) {
            self.push(name, shape, data.to_vec())?;
        }
        Ok(())
    }

    pub fn mlp(&self, prefix: &str) -> Result<Mlp> {
        let sizes: Vec<usize> = self
            .require(&format!("{prefix}.sizes"))?
            .data
            .iter()
            .map(|&s| s as usize)
            .collect();
        let mut params = Vec::new();
        for i in 0..sizes.len().saturating_sub(1) {
            params.extend_from_slice(&self.require(&format!("{prefix}.l{i}.weight"))?.data);
            params.extend_from_slice(&self.require(&format!("{prefix}.l{i}.bias"))?.data);
        }
        Mlp::from_params(&sizes, params)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.require(name)?;
        t.data
            .first()
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("empty tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("shape overflow in {name:?}")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ck.push(name, shape, data)?;
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = Streams::new(3).stream("init", 0);
        let net = Mlp::new(&[5, 7, 3], &mut rng);
        let mut ck = Checkpoint::new();
        ck.push_mlp("policy", &net).unwrap();
        ck.push("odd", vec![3], vec![f64::MIN_POSITIVE, -0.0, 1e300]).unwrap();
        ck.push("scalar", vec![], vec![42.5]).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hilm");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
        let net2 = back.mlp("policy").unwrap();
        let bits = |n: &Mlp| n.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&net), bits(&net2));
        assert_eq!(back.get("odd").unwrap().data[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.scalar("scalar").unwrap(), 42.5);
    }

    #[test]
    fn header_layout() {
        let mut ck = Checkpoint::new();
        ck.push("ab", vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"HILM");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), VERSION);
        assert_eq!(b.len(), 4 + 4 + 4 + 4 + 2 + 4 + 16 + 16);
    }

    #[test]
    fn corrupt_input_rejected() {
        let mut ck = Checkpoint::new();
        ck.push("w", vec![2], vec![1.0, 2.0]).unwrap();
        let b = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = b.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
        assert!(ck.push("w", vec![1], vec![0.0]).is_err());
        assert!(ck.push("v", vec![3], vec![0.0]).is_err());
        assert!(ck.mlp("missing").is_err());
    }
}
