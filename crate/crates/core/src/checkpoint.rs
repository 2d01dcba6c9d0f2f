//! Checkpoint archives: a tar file holding `metadata.json` and one
//! `params/<name>.npy` (little-endian `f4`, 4-D) per parameter. Entries carry
//! fixed timestamps and modes so identical states give identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::network::ModelVariant;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const METADATA_ENTRY: &str = "metadata.json";
const PARAM_DIR: &str = "params/";
const NPY_MAGIC: &[u8] = b"\x93NUMPY";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: ModelVariant,
    pub epoch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub config_digest: String,
    pub metric_snapshot: BTreeMap<String, f64>,
    pub encoder: EncoderConfig,
}

/// Hex SHA-256 of a configuration's canonical text.
pub fn config_digest(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialises one array in `.npy` version 1.0 format.
pub fn encode_npy(t: &Tensor<f32>) -> Vec<u8> {
    let [a, b, c, d] = t.shape();
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({a}, {b}, {c}, {d}), }}");
    let unpadded = NPY_MAGIC.len() + 2 + 2 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(NPY_MAGIC.len() + 4 + header.len() + 4 * t.len());
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_npy(bytes: &[u8], what: &str) -> Result<Tensor<f32>> {
    let bad = |msg: &str| Error::Data(format!("{what}: {msg}"));
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(bad("not an npy array"));
    }
    let (start, hlen) = match bytes[6] {
        1 => (10, u16::from_le_bytes([bytes[8], bytes[9]]) as usize),
        2 | 3 if bytes.len() >= 12 => (12, u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize),
        _ => return Err(bad("unsupported npy version")),
    };
    let header = std::str::from_utf8(bytes.get(start..start + hlen).ok_or_else(|| bad("truncated header"))?)
        .map_err(|_| bad("header is not text"))?;
    if !header.contains("'descr': '<f4'") {
        return Err(bad("only little-endian f4 arrays are supported"));
    }
    if header.contains("'fortran_order': True") {
        return Err(bad("fortran-ordered arrays are not supported"));
    }
    let open = header.find("'shape': (").ok_or_else(|| bad("missing shape"))? + "'shape': (".len();
    let close = header[open..].find(')').ok_or_else(|| bad("malformed shape"))? + open;
    let dims = header[open..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad("malformed shape")))
        .collect::<Result<Vec<_>>>()?;
    if dims.len() != 4 {
        return Err(bad(&format!("expected a 4-d array, got {} dims", dims.len())));
    }
    let body = &bytes[start + hlen..];
    let n: usize = dims.iter().product();
    if body.len() != 4 * n {
        return Err(bad(&format!("expected {} data bytes, found {}", 4 * n, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec([dims[0], dims[1], dims[2], dims[3]], data)
}

fn append<W: Write>(builder: &mut tar::Builder<W>, name: &str, bytes: &[u8], path: &Path) -> Result<()> {
    let mut header = tar::Header::new_ustar();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_entry_type(tar::EntryType::Regular);
    builder
        .append_data(&mut header, name, bytes)
        .map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, store: &ParameterStore<f32>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // Write to a sibling file first so an interrupted save never clobbers a
    // good checkpoint.
    let tmp = path.with_extension("partial");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut builder = tar::Builder::new(BufWriter::new(file));
        let json = serde_json::to_vec_pretty(meta)?;
        append(&mut builder, METADATA_ENTRY, &json, &tmp)?;
        for (name, p) in store.iter() {
            append(&mut builder, &format!("{PARAM_DIR}{name}.npy"), &encode_npy(&p.value), &tmp)?;
        }
        let mut w = builder.into_inner().map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ParameterStore<f32>)> {
    let file = File::open(path).map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut archive = tar::Archive::new(BufReader::new(file));
    let mut meta = None;
    let mut store = ParameterStore::new();
    let entries = archive.entries().map_err(|e| Error::io(path, e))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| Error::io(path, e))?;
        let name = entry
            .path()
            .map_err(|e| Error::io(path, e))?
            .to_string_lossy()
            .into_owned();
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if name == METADATA_ENTRY {
            meta = Some(serde_json::from_slice::<CheckpointMeta>(&bytes)?);
        } else if let Some(param) = name.strip_prefix(PARAM_DIR).and_then(|n| n.strip_suffix(".npy")) {
            store.insert(param, decode_npy(&bytes, &name)?)?;
        } else {
            return Err(Error::Data(format!("{}: unexpected archive entry `{name}`", path.display())));
        }
    }
    let meta = meta.ok_or_else(|| Error::Data(format!("{}: missing {METADATA_ENTRY}", path.display())))?;
    Ok((meta, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn npy_round_trip_and_alignment() {
        let t = Tensor::from_fn([2, 3, 1, 2], |[a, b, _, d]| (a * 6 + b * 2 + d) as f32 - 3.5);
        let bytes = encode_npy(&t);
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        assert_eq!(decode_npy(&bytes, "t").unwrap(), t);
        assert!(decode_npy(&bytes[..bytes.len() - 1], "t").is_err());
    }

    #[test]
    fn digest_is_hex_sha256() {
        assert_eq!(
            config_digest("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
