//! Self-describing checkpoint archive: a safetensors file whose header
//! metadata carries a format tag and JSON documents (model configuration,
//! counters), and whose body holds named numeric arrays. Tensors are stored
//! in their native precision, so a save/load cycle is bitwise lossless.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{Device, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const FORMAT_KEY: &str = "format";
pub const FORMAT_VERSION_KEY: &str = "format_version";
pub const FORMAT_VERSION: &str = "1";
const METADATA_KEY: &str = "__metadata__";

#[derive(Clone, Debug, Default)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new(kind: &str) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert(FORMAT_KEY.to_string(), kind.to_string());
        metadata.insert(FORMAT_VERSION_KEY.to_string(), FORMAT_VERSION.to_string());
        Self { metadata, tensors: BTreeMap::new() }
    }

    pub fn kind(&self) -> Option<&str> {
        self.metadata.get(FORMAT_KEY).map(String::as_str)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Archive(format!("expected a `{kind}` archive, found {other:?}"))),
        }
    }

    pub fn put_json<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.metadata.insert(key.to_string(), serde_json::to_string(value)?);
        Ok(())
    }

    pub fn get_json<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let raw = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Archive(format!("missing metadata entry `{key}`")))?;
        Ok(serde_json::from_str(raw)?)
    }

    /// Insert every tensor of `map` under `prefix.`.
    pub fn put_group(&mut self, prefix: &str, map: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, t) in map {
            self.tensors.insert(format!("{prefix}.{k}"), t.contiguous()?);
        }
        Ok(())
    }

    /// Tensors stored under `prefix.`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(&p).map(|name| (name.to_string(), t.clone())))
            .collect()
    }

    /// Safetensors bytes. The metadata is spliced into the header in key
    /// order, so equal archives always serialize to identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bare = safetensors::serialize(self.tensors.iter(), None).map_err(|e| Error::Archive(e.to_string()))?;
        let header_len = u64::from_le_bytes(bare[..8].try_into().expect("8-byte prefix")) as usize;
        let mut header: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(&bare[8..8 + header_len])?;
        let mut entries = serde_json::Map::new();
        entries.insert(METADATA_KEY.to_string(), serde_json::to_value(&self.metadata)?);
        entries.append(&mut header);
        let mut text = serde_json::to_vec(&entries)?;
        while text.len() % 8 != 0 {
            text.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + text.len() + bare.len() - 8 - header_len);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        out.extend_from_slice(&bare[8 + header_len..]);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = safetensors::SafeTensors::deserialize(bytes).map_err(|e| Error::Archive(e.to_string()))?;
        let (_, header) =
            safetensors::SafeTensors::read_metadata(bytes).map_err(|e| Error::Archive(e.to_string()))?;
        let metadata = header
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect::<BTreeMap<_, _>>();
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            tensors.insert(name, view.load(&Device::Cpu)?);
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let bytes = self.to_bytes()?;
        // Atomic replace: readers see the old or the new archive, never a partial one.
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn serialization_is_deterministic() {
        let build = || {
            let mut a = Archive::new("test");
            for i in 0..20 {
                a.metadata.insert(format!("key{i}"), format!("value{i}"));
            }
            a.tensors.insert("w".into(), Tensor::from_vec(vec![1f32, 2.0], 2, &Device::Cpu).unwrap());
            a
        };
        let bytes = build().to_bytes().unwrap();
        assert_eq!(bytes, build().to_bytes().unwrap());
        let back = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(back.metadata, build().metadata);
    }

    #[test]
    fn bytes_round_trip_is_bitwise() {
        let mut a = Archive::new("test");
        a.put_json("config", &vec![1, 2, 3]).unwrap();
        let t = Tensor::from_vec(vec![0.1f32, -3.5e-20, f32::MIN_POSITIVE, 7.0], (2, 2), &Device::Cpu).unwrap();
        let d = Tensor::from_vec(vec![std::f64::consts::PI; 3], 3, &Device::Cpu).unwrap();
        a.tensors.insert("x".into(), t.clone());
        a.tensors.insert("y".into(), d.clone());
        let b = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(b.kind(), Some("test"));
        assert_eq!(b.get_json::<Vec<i32>>("config").unwrap(), vec![1, 2, 3]);
        assert_eq!(b.tensors["x"].dtype(), DType::F32);
        assert_eq!(b.tensors["x"].to_vec2::<f32>().unwrap(), t.to_vec2::<f32>().unwrap());
        assert_eq!(b.tensors["y"].to_vec1::<f64>().unwrap(), d.to_vec1::<f64>().unwrap());
        assert!(b.expect_kind("other").is_err());
    }

    #[test]
    fn groups_strip_prefix() {
        let mut a = Archive::new("test");
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::zeros(2, DType::F32, &Device::Cpu).unwrap());
        a.put_group("gen", &m).unwrap();
        assert!(a.tensors.contains_key("gen.w"));
        assert_eq!(a.group("gen").keys().collect::<Vec<_>>(), vec!["w"]);
        assert!(a.group("disc").is_empty());
    }
}
