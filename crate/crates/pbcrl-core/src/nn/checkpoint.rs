//! Flat binary checkpoints with a JSON sidecar.
//!
//! Layout: magic `PBNC`, format version (u32 LE), activation tag (u8),
//! layer count (u32 LE), layer sizes (u32 LE each), then every parameter as
//! f64 LE in `params()` order. The sidecar (`<file>.json`) duplicates the
//! structural header in readable form plus caller-supplied metadata, and the
//! loader cross-checks the two.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::error::{Error, Result};

use super::{Activation, Network};

const MAGIC: &[u8; 4] = b"PBNC";
const VERSION: u32 = 1;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the binary checkpoint and its sidecar. `extra` lands in the
/// sidecar's `"meta"` object (hyperparameters such as a dead-zone width).
pub fn save_checkpoint(net: &Network, path: &Path, extra: &Value) -> Result<()> {
    net.check_finite()?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(net.activation().tag());
    let sizes = net.sizes();
    buf.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for &s in sizes {
        buf.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for p in net.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;

    let sidecar = json!({
        "format": "pbnc",
        "version": VERSION,
        "activation": net.activation(),
        "layer_sizes": sizes,
        "param_count": net.param_count(),
        "meta": extra,
    });
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(sidecar_path(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a checkpoint, validating magic, version, counts, and agreement with
/// the sidecar. Returns the network and the sidecar's `"meta"` value.
pub fn load_checkpoint(path: &Path) -> Result<(Network, Value)> {
    let mut f = fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    let mut cur = 0usize;

    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {cur}",
                cur = *cur
            )));
        }
        let s = &buf[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };

    if take(&mut cur, 4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let activation = Activation::from_tag(take(&mut cur, 1)?[0])?;
    let n_sizes = u32::from_le_bytes(take(&mut cur, 4)?.try_into().expect("4 bytes")) as usize;
    if !(2..=64).contains(&n_sizes) {
        return Err(Error::Checkpoint(format!("implausible layer count {n_sizes}")));
    }
    let mut sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        let s = u32::from_le_bytes(take(&mut cur, 4)?.try_into().expect("4 bytes")) as usize;
        sizes.push(s);
    }
    let mut net = Network::zeros(&sizes, activation)
        .map_err(|e| Error::Checkpoint(format!("invalid stored sizes: {e}")))?;
    let expected = net.param_count();
    let remaining = buf.len() - cur;
    if remaining != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "parameter payload holds {} bytes, sizes {sizes:?} need {}",
            remaining,
            expected * 8
        )));
    }
    let mut params = Vec::with_capacity(expected);
    for _ in 0..expected {
        let b: [u8; 8] = take(&mut cur, 8)?.try_into().expect("8 bytes");
        params.push(f64::from_le_bytes(b));
    }
    net.set_params(&params)
        .map_err(|e| Error::Checkpoint(format!("stored parameters rejected: {e}")))?;

    let sidecar = read_sidecar(path)?;
    let side_sizes: Vec<usize> = sidecar
        .get("layer_sizes")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| Error::Checkpoint("sidecar missing layer_sizes".into()))?;
    if side_sizes != sizes {
        return Err(Error::Checkpoint(format!(
            "sidecar layer_sizes {side_sizes:?} disagree with binary {sizes:?}"
        )));
    }
    let meta = sidecar.get("meta").cloned().unwrap_or(Value::Null);
    Ok((net, meta))
}
