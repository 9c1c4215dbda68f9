//! Flat name -> tensor checkpoint container.
//!
//! Layout: 8-byte magic `BANTNSR\0`, a little-endian u64 header length, a
//! JSON header listing `{name, shape, offset}` per tensor (offset in f32
//! elements into the payload), then the payload as little-endian f32.
//! The same container stores encoder weights, learnable model weights,
//! and optional bridging traces.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BANTNSR\0";

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<HeaderEntry>,
}

/// An ordered collection of named f32 tensors.
#[derive(Debug, Clone, Default)]
pub struct Container {
    order: Vec<String>,
    tensors: BTreeMap<String, ArrayD<f32>>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f32>) {
        let name = name.into();
        if !self.tensors.contains_key(&name) {
            self.order.push(name.clone());
        }
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Fetch a tensor, or a checkpoint error naming the missing key.
    pub fn require(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.get(name)
            .ok_or_else(|| Error::checkpoint(format!("missing key: {name}")))
    }

    /// Serialize to the container byte format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.order.len());
        let mut offset = 0u64;
        for name in &self.order {
            let t = &self.tensors[name];
            entries.push(HeaderEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len() as u64;
        }
        let header = serde_json::to_vec(&Header { tensors: entries }).expect("header json");
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for name in &self.order {
            for v in self.tensors[name].iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::checkpoint("bad magic: not a checkpoint container"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16 + header_len;
        if bytes.len() < header_end {
            return Err(Error::checkpoint("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::checkpoint(format!("bad header json: {e}")))?;
        let payload = &bytes[header_end..];
        let mut container = Container::new();
        for entry in header.tensors {
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize * 4;
            let end = start + count * 4;
            if payload.len() < end {
                return Err(Error::checkpoint(format!(
                    "truncated payload for {}: need {} bytes, have {}",
                    entry.name,
                    end,
                    payload.len()
                )));
            }
            let values: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
                .map_err(|e| Error::checkpoint(format!("bad shape for {}: {e}", entry.name)))?;
            container.insert(entry.name, arr);
        }
        Ok(container)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Container> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes)
    }
}

/// Compare a container's keys against an expected set: absent keys are an
/// error listing all of them, extra keys produce a warning list the caller
/// may log.
pub fn check_keys(container: &Container, expected: &[String]) -> Result<Vec<String>> {
    let missing: Vec<&String> = expected
        .iter()
        .filter(|k| container.get(k).is_none())
        .collect();
    if !missing.is_empty() {
        let list = missing
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::checkpoint(format!("missing keys: {list}")));
    }
    let expected_set: std::collections::BTreeSet<&str> =
        expected.iter().map(|s| s.as_str()).collect();
    Ok(container
        .names()
        .filter(|n| !expected_set.contains(n))
        .map(|n| n.to_string())
        .collect())
}
