//! The `SFG1` checkpoint container.
//!
//! Layout: magic bytes `SFG1`, a little-endian u64 section count, a section
//! table of (name length, name bytes, absolute offset, byte length) entries,
//! then the raw payloads. Numeric payloads are little-endian 64-bit floats;
//! counts are little-endian 64-bit unsigned integers. Section order is
//! preserved, so a container written twice from the same state is
//! byte-identical.

use std::path::Path;

use crate::error::{Result, SfError};

const MAGIC: &[u8; 4] = b"SFG1";

/// An ordered set of named binary sections.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Container {
    sections: Vec<(String, Vec<u8>)>,
}

impl Container {
    pub fn new() -> Container {
        Container::default()
    }

    /// Store raw bytes under `name`, replacing any existing section in place.
    pub fn put_bytes(&mut self, name: &str, data: Vec<u8>) {
        if let Some(slot) = self.sections.iter_mut().find(|(n, _)| n == name) {
            slot.1 = data;
        } else {
            self.sections.push((name.to_string(), data));
        }
    }

    pub fn put_f64s(&mut self, name: &str, values: &[f64]) {
        let mut data = Vec::with_capacity(values.len() * 8);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        self.put_bytes(name, data);
    }

    pub fn put_u64s(&mut self, name: &str, values: &[u64]) {
        let mut data = Vec::with_capacity(values.len() * 8);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        self.put_bytes(name, data);
    }

    pub fn put_str(&mut self, name: &str, text: &str) {
        self.put_bytes(name, text.as_bytes().to_vec());
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.iter().any(|(n, _)| n == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
            .ok_or_else(|| SfError::Format(format!("checkpoint is missing section {name:?}")))
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        let data = self.bytes(name)?;
        if data.len() % 8 != 0 {
            return Err(SfError::Format(format!(
                "section {name:?} length {} is not a multiple of 8",
                data.len()
            )));
        }
        Ok(data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        let data = self.bytes(name)?;
        if data.len() % 8 != 0 {
            return Err(SfError::Format(format!(
                "section {name:?} length {} is not a multiple of 8",
                data.len()
            )));
        }
        Ok(data
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn str_section(&self, name: &str) -> Result<String> {
        let data = self.bytes(name)?;
        String::from_utf8(data.to_vec())
            .map_err(|_| SfError::Format(format!("section {name:?} is not UTF-8")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut table_len = 4 + 8;
        for (name, _) in &self.sections {
            table_len += 8 + name.len() + 8 + 8;
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.sections.len() as u64).to_le_bytes());
        let mut offset = table_len as u64;
        for (name, data) in &self.sections {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            offset += data.len() as u64;
        }
        for (_, data) in &self.sections {
            out.extend_from_slice(data);
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Container> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= data.len())
                .ok_or_else(|| SfError::Format("checkpoint truncated".into()))?;
            let slice = &data[*pos..end];
            *pos = end;
            Ok(slice)
        };
        let magic = take(&mut pos, 4)?;
        if magic != MAGIC {
            return Err(SfError::Format(format!(
                "bad magic bytes {magic:?} (expected {MAGIC:?})"
            )));
        }
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| SfError::Format("section name is not UTF-8".into()))?;
            let offset = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            entries.push((name, offset, len));
        }
        let mut sections = Vec::with_capacity(count);
        for (name, offset, len) in entries {
            let end = offset
                .checked_add(len)
                .filter(|&e| e <= data.len())
                .ok_or_else(|| SfError::Format(format!("section {name:?} exceeds file size")))?;
            sections.push((name, data[offset..end].to_vec()));
        }
        Ok(Container { sections })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Container> {
        let data = std::fs::read(path)
            .map_err(|e| SfError::Config(format!("cannot read checkpoint {path:?}: {e}")))?;
        Container::from_bytes(&data)
    }
}
