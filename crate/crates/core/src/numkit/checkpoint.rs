//! JSON checkpoint files: `{format_version, architecture, tensors}`.
//!
//! Values are written as nested arrays of single-precision numbers shaped
//! like the tensor. Tensors are listed in name order.

use std::fs;
use std::path::Path;

use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(serialize_with = "serialize_nested")]
    pub values: NestedF32,
}

/// Flat `f32` data that serializes as arrays nested by `shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct NestedF32 {
    shape: Vec<usize>,
    data: Vec<f32>,
}

struct Nested<'a> {
    shape: &'a [usize],
    data: &'a [f32],
}

impl Serialize for Nested<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.shape {
            [] => s.serialize_f32(self.data[0]),
            [n] => {
                let mut seq = s.serialize_seq(Some(*n))?;
                for v in self.data {
                    seq.serialize_element(v)?;
                }
                seq.end()
            }
            [n, rest @ ..] => {
                let stride: usize = rest.iter().product();
                let mut seq = s.serialize_seq(Some(*n))?;
                for chunk in self.data.chunks(stride) {
                    seq.serialize_element(&Nested { shape: rest, data: chunk })?;
                }
                seq.end()
            }
        }
    }
}

fn serialize_nested<S: Serializer>(v: &NestedF32, s: S) -> Result<S::Ok, S::Error> {
    Nested { shape: &v.shape, data: &v.data }.serialize(s)
}

impl<'de> Deserialize<'de> for NestedF32 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        fn walk(v: &Value, depth: usize, shape: &mut Vec<usize>, out: &mut Vec<f32>) -> Result<(), String> {
            match v {
                Value::Number(n) => {
                    out.push(n.as_f64().ok_or("bad number")? as f32);
                    if depth != shape.len() {
                        return Err("ragged nesting".into());
                    }
                    Ok(())
                }
                Value::Array(items) => {
                    if shape.len() == depth {
                        shape.push(items.len());
                    } else if shape[depth] != items.len() {
                        return Err("ragged nesting".into());
                    }
                    items.iter().try_for_each(|it| walk(it, depth + 1, shape, out))
                }
                _ => Err("expected number or array".into()),
            }
        }
        let v = Value::deserialize(d)?;
        let mut shape = Vec::new();
        let mut data = Vec::new();
        walk(&v, 0, &mut shape, &mut data).map_err(serde::de::Error::custom)?;
        Ok(NestedF32 { shape, data })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub architecture: Value,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_store(architecture: Value, store: &ParamStore) -> Self {
        let tensors = store
            .iter()
            .map(|(name, t)| TensorRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: NestedF32 {
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|&v| v as f32).collect(),
                },
            })
            .collect();
        Self { format_version: FORMAT_VERSION, architecture, tensors }
    }

    /// Rebuilds a store, widening values back to `f64`.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for rec in &self.tensors {
            let nested_len: usize = rec.values.shape.iter().product();
            let declared: usize = rec.shape.iter().product();
            if nested_len != declared || rec.values.data.len() != declared {
                return Err(Error::dim("checkpoint tensor", &rec.shape, &rec.values.shape));
            }
            let data = rec.values.data.iter().map(|&v| v as f64).collect();
            store.insert(rec.name.clone(), Tensor::new(rec.shape.clone(), data)?)?;
        }
        Ok(store)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format_version {}",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_layout_and_round_trip() {
        let mut store = ParamStore::new();
        store
            .insert("b", Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap())
            .unwrap();
        store.insert("a", Tensor::vector(vec![1.0, -2.5]).unwrap()).unwrap();
        let ck = Checkpoint::from_store(serde_json::json!({"kind": "test", "width": 3}), &store);
        let json = ck.to_json().unwrap();
        assert!(json.contains("0.1,") && !json.contains("0.100000"), "{json}");
        // name order and f32 shortest formatting
        assert!(json.find("\"a\"").unwrap() < json.find("\"b\"").unwrap());
        let back = Checkpoint::from_json(&json).unwrap().to_store().unwrap();
        assert_eq!(back.value("b").unwrap().shape(), &[2, 3]);
        assert_eq!(back.value("b").unwrap().data()[0], 0.1f32 as f64);
        assert_eq!(back.value("a").unwrap().data(), &[1.0, -2.5]);
        assert_eq!(Checkpoint::from_store(ck.architecture.clone(), &back).to_json().unwrap(), json);
    }

    #[test]
    fn rejects_ragged_values() {
        let bad = r#"{"format_version":1,"architecture":{},"tensors":[{"name":"x","shape":[2,2],"values":[[1,2],[3]]}]}"#;
        assert!(Checkpoint::from_json(bad).is_err());
        let mismatch = r#"{"format_version":1,"architecture":{},"tensors":[{"name":"x","shape":[3],"values":[1,2]}]}"#;
        assert!(Checkpoint::from_json(mismatch).unwrap().to_store().is_err());
    }
}
