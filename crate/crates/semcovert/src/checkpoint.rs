//! Checkpoint container: named f64 weight tensors plus a JSON metadata
//! record, in one file.
//!
//! Layout (little-endian):
//!
//! ```text
//! bytes 0..4    magic "SCKP"
//! bytes 4..8    u32 format version (currently 1)
//! bytes 8..16   u64 header length in bytes
//! header        JSON: {"meta": <arbitrary>, "tensors": [{"name", "shape", "offset", "len"}]}
//! payload       concatenated f64 tensor data; offset/len count f64 elements
//! ```
//!
//! Tensors are stored sorted by name, so identical contents produce
//! identical bytes. Model weights live under the namespaces `codec.*`,
//! `hider.*`, and `extractor.*`; optimizer moments use `adam.<param>.m`
//! and `.v`. RNG state reduces to the base seed and step counter in
//! `meta`, since all randomness derives from those. Writes go to a
//! temporary file in the target directory and are renamed into place.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::params::ParamStore;

const MAGIC: &[u8; 4] = b"SCKP";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Drop every tensor whose name starts with `prefix` (e.g. `"extractor."`).
    pub fn remove_namespace(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    /// Copy all parameters of `store` in under `prefix`.
    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore) {
        for id in store.ids() {
            self.insert(&format!("{prefix}{}", store.name(id)), store.value(id).clone());
        }
    }

    /// Load every parameter of `store` from `prefix`-qualified tensors.
    /// Fails naming the first tensor that is absent or misshapen.
    pub fn load_into_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let full = format!("{prefix}{name}");
            let tensor = self
                .tensors
                .get(&full)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{full}'")))?;
            store.set_value(&name, tensor.clone()).map_err(|e| {
                Error::Checkpoint(format!("tensor '{full}' rejected: {e}"))
            })?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = t.len() as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors: entries })?;

        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        std::fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
        ));
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(MAGIC)?;
            f.write_all(&VERSION.to_le_bytes())?;
            f.write_all(&(header.len() as u64).to_le_bytes())?;
            f.write_all(&header)?;
            for t in self.tensors.values() {
                let std_layout = t.as_standard_layout();
                for v in std_layout.iter() {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
            Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
        })?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}, want {MAGIC:?}")));
        }
        let mut word = [0u8; 4];
        f.read_exact(&mut word).map_err(|_| Error::Checkpoint("missing version".into()))?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, this build reads {VERSION}"
            )));
        }
        let mut wide = [0u8; 8];
        f.read_exact(&mut wide).map_err(|_| Error::Checkpoint("missing header length".into()))?;
        let header_len = u64::from_le_bytes(wide) as usize;
        let mut header_bytes = vec![0u8; header_len];
        f.read_exact(&mut header_bytes)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Checkpoint(format!("header parse failed: {e}")))?;

        let mut payload = Vec::new();
        f.read_to_end(&mut payload)?;
        let total: u64 = header.tensors.iter().map(|t| t.len).sum();
        if payload.len() != total as usize * 8 {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, header expects {}",
                payload.len(),
                total * 8
            )));
        }

        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let expect: usize = entry.shape.iter().product();
            if expect != entry.len as usize {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' shape {:?} disagrees with element count {}",
                    entry.name, entry.shape, entry.len
                )));
            }
            let start = entry.offset as usize * 8;
            let end = start + entry.len as usize * 8;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' extends past payload end",
                    entry.name
                )));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::Checkpoint(format!("tensor '{}': {e}", entry.name)))?;
            tensors.insert(entry.name, arr);
        }
        Ok(Self { meta: header.meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand::Rng;
    use serde_json::json;

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = stream(seed, 0, Stream::DataGen);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.sckp");
        let mut ck = Checkpoint::new(json!({"step": 42, "seed": 7}));
        ck.insert("codec.enc0.w", rand_arr(&[8, 3, 3, 3], 1));
        ck.insert("hider.stem.b", rand_arr(&[16], 2));
        ck.insert("tiny", ArrayD::from_elem(IxDyn(&[1]), f64::MIN_POSITIVE / 2.0));
        ck.save(&path).unwrap();

        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.len(), 3);
        for name in ck.names() {
            let a = ck.get(name).unwrap();
            let b = back.get(name).unwrap();
            assert_eq!(a.shape(), b.shape());
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn identical_contents_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.sckp"), dir.path().join("b.sckp"));
        let build = || {
            let mut ck = Checkpoint::new(json!({"step": 1}));
            ck.insert("z.w", rand_arr(&[4, 4], 3));
            ck.insert("a.w", rand_arr(&[2, 2], 4));
            ck
        };
        build().save(&p1).unwrap();
        build().save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn no_temp_file_left_behind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.sckp");
        let mut ck = Checkpoint::new(json!({}));
        ck.insert("w", rand_arr(&[4], 5));
        ck.save(&path).unwrap();
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["ckpt.sckp"]);
    }

    #[test]
    fn store_round_trip_and_missing_tensor_named() {
        let mut store = ParamStore::new();
        let rng = &mut stream(9, 0, Stream::ParamInit);
        let a = store.register("layer.w", {
            let mut r = rand_arr(&[3, 3], 6);
            r.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
            r
        });
        let b = store.register("layer.b", rand_arr(&[3], 7));

        let mut ck = Checkpoint::new(json!({}));
        ck.insert_store("codec.", &store);

        let mut other = ParamStore::new();
        other.register("layer.w", ArrayD::zeros(IxDyn(&[3, 3])));
        other.register("layer.b", ArrayD::zeros(IxDyn(&[3])));
        ck.load_into_store("codec.", &mut other).unwrap();
        assert_eq!(other.value(other.id("layer.w").unwrap()), store.value(a));
        assert_eq!(other.value(other.id("layer.b").unwrap()), store.value(b));

        let err = ck.load_into_store("extractor.", &mut other).unwrap_err();
        assert!(err.to_string().contains("extractor.layer.w"), "{err}");
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let mut ck = Checkpoint::new(json!({}));
        ck.insert("codec.layer.w", rand_arr(&[2, 2], 8));
        let mut store = ParamStore::new();
        store.register("layer.w", ArrayD::zeros(IxDyn(&[3, 3])));
        let err = ck.load_into_store("codec.", &mut store).unwrap_err();
        assert!(err.to_string().contains("codec.layer.w"), "{err}");
    }

    #[test]
    fn namespace_removal_preserves_others() {
        let mut ck = Checkpoint::new(json!({}));
        ck.insert("codec.w", rand_arr(&[2], 10));
        ck.insert("extractor.w", rand_arr(&[2], 11));
        ck.insert("hider.w", rand_arr(&[2], 12));
        ck.remove_namespace("extractor.");
        assert!(ck.get("extractor.w").is_none());
        assert!(ck.get("codec.w").is_some());
        assert!(ck.get("hider.w").is_some());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.sckp");
        let mut ck = Checkpoint::new(json!({}));
        ck.insert("w", rand_arr(&[4], 13));
        ck.save(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.sckp");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(Checkpoint::load(&bad).unwrap_err().to_string().contains("magic"));

        let full = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("short.sckp");
        std::fs::write(&truncated, &full[..full.len() - 8]).unwrap();
        let err = Checkpoint::load(&truncated).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
    }
}
