//! JSON checkpoints: `{"version": 1, "matrices": {name: {rows, cols, data}}}`
//! with an optional `"metadata"` object. Floats are written with 17
//! significant digits so every `f64` survives the round trip bit-exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub matrices: BTreeMap<String, Matrix>,
    pub metadata: Option<serde_json::Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCheckpoint {
    version: u32,
    matrices: BTreeMap<String, RawMatrix>,
    #[serde(default)]
    metadata: Option<serde_json::Value>,
}

fn write_f64(out: &mut String, v: f64) {
    // {:.16e} prints exactly 17 significant digits
    write!(out, "{v:.16e}").expect("writing to a String cannot fail");
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) {
        self.matrices.insert(name.into(), m);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.matrices
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no matrix {name:?}")))
    }

    pub fn to_json(&self) -> String {
        let mut out = String::new();
        write!(out, "{{\"version\":{CHECKPOINT_VERSION},\"matrices\":{{").unwrap();
        for (k, (name, m)) in self.matrices.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let key = serde_json::to_string(name).expect("string keys serialize");
            write!(out, "{key}:{{\"rows\":{},\"cols\":{},\"data\":[", m.rows(), m.cols()).unwrap();
            for (i, v) in m.data().iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_f64(&mut out, *v);
            }
            out.push_str("]}");
        }
        out.push('}');
        if let Some(meta) = &self.metadata {
            write!(out, ",\"metadata\":{meta}").unwrap();
        }
        out.push('}');
        out
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: RawCheckpoint = serde_json::from_str(s)?;
        if raw.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint version {}",
                raw.version
            )));
        }
        let matrices = raw
            .matrices
            .into_iter()
            .map(|(name, m)| Ok((name, Matrix::new(m.rows, m.cols, m.data)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            matrices,
            metadata: raw.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    #[test]
    fn layout_and_precision() {
        let mut ck = Checkpoint::new();
        ck.insert("adapter.A", Matrix::from_rows(&[vec![0.1, -2.0]]).unwrap());
        let s = ck.to_json();
        assert!(s.starts_with("{\"version\":1,\"matrices\":{\"adapter.A\":{\"rows\":1,\"cols\":2,"));
        assert!(s.contains("1.0000000000000001e-1"), "{s}");
    }

    #[test]
    fn rejects_malformed() {
        assert!(Checkpoint::from_json("{\"version\":2,\"matrices\":{}}").is_err());
        assert!(
            Checkpoint::from_json("{\"version\":1,\"matrices\":{\"a\":{\"rows\":2,\"cols\":2,\"data\":[1]}}}").is_err()
        );
        assert!(Checkpoint::from_json("{\"version\":1,\"matrices\":{},\"extra\":0}").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5, scale in -300i32..300) {
            let m = Matrix::randn(&mut Rng::new(seed), rows, cols, 10f64.powi(scale / 10));
            let mut ck = Checkpoint::new();
            ck.insert("m", m.clone());
            ck.metadata = Some(serde_json::json!({"kind": "aurora"}));
            let back = Checkpoint::from_json(&ck.to_json()).unwrap();
            let bm = back.get("m").unwrap();
            prop_assert!(bm.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.metadata, ck.metadata);
        }
    }
}
