//! Checkpoint container: named flat vectors with a fixed little-endian
//! binary layout, stamped with a schema version, config hash, and step.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::ParameterStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CKPT";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub slots: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_store(config_hash: u64, step: u64, store: &ParameterStore) -> Self {
        let slots = store
            .slots()
            .map(|(name, offset, len)| (name.to_string(), store.flat()[offset..offset + len].to_vec()))
            .collect();
        Checkpoint {
            config_hash,
            step,
            slots,
        }
    }

    /// Rebuild a parameter store with the checkpoint's slot order.
    pub fn to_store(&self) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        for (name, values) in &self.slots {
            store.push(name, values.clone())?;
        }
        Ok(store)
    }

    /// Copy values into an existing store; slot names, order, and sizes must
    /// match exactly.
    pub fn apply_to(&self, store: &mut ParameterStore) -> Result<()> {
        let expected: Vec<(String, usize)> = store
            .slots()
            .map(|(n, _, l)| (n.to_string(), l))
            .collect();
        if expected.len() != self.slots.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} slots, model has {}",
                self.slots.len(),
                expected.len()
            )));
        }
        for ((name, values), (expect_name, expect_len)) in self.slots.iter().zip(&expected) {
            if name != expect_name || values.len() != *expect_len {
                return Err(Error::Config(format!(
                    "checkpoint slot {name} ({}) does not match model slot {expect_name} ({expect_len})",
                    values.len()
                )));
            }
        }
        for (name, values) in &self.slots {
            store
                .get_mut(name)
                .expect("slot verified above")
                .copy_from_slice(values);
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ckpt.config_hash.to_le_bytes());
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&(ckpt.slots.len() as u32).to_le_bytes());
    for (name, values) in &ckpt.slots {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };
    if take(&mut cursor, 4)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config_hash = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
    let step = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
    let n_slots = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let mut slots = Vec::with_capacity(n_slots);
    for _ in 0..n_slots {
        let name_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
            .map_err(|_| Error::Format("invalid slot name".into()))?;
        let len = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()));
        }
        slots.push((name, values));
    }
    if cursor != bytes.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Ok(Checkpoint {
        config_hash,
        step,
        slots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_stable() {
        let mut store = ParameterStore::new();
        store.push("a.w", vec![1.5, -2.25, 1.0 / 3.0]).unwrap();
        store.push("b.w", vec![0.0; 4]).unwrap();
        let ckpt = Checkpoint::from_store(0xdeadbeef, 42, &store);

        let dir = std::env::temp_dir().join("consensus-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let first = std::fs::read(&path).unwrap();
        save_checkpoint(&path, &ckpt).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config_hash, 0xdeadbeef);
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.slots.len(), 2);
        let rebuilt = loaded.to_store().unwrap();
        assert_eq!(rebuilt.flat(), store.flat());
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn apply_rejects_mismatched_slots() {
        let mut store = ParameterStore::new();
        store.push("a.w", vec![1.0, 2.0]).unwrap();
        let ckpt = Checkpoint::from_store(1, 0, &store);

        let mut other = ParameterStore::new();
        other.push("b.w", vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            ckpt.apply_to(&mut other),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let dir = std::env::temp_dir().join("consensus-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
        std::fs::remove_file(&path).unwrap();
    }
}
