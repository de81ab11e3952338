//! Tensor container format.
//!
//! ```text
//! GSA-CHECKPOINT v1
//! tensors <n>
//! <name> <rank> <extent>...      (n lines)
//! end
//! <little-endian f64 payload, tensors in header order>
//! ```

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &str = "GSA-CHECKPOINT v1";

pub fn write_tensors<W: Write>(w: &mut W, tensors: &[(String, Tensor)]) -> std::io::Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "tensors {}", tensors.len())?;
    for (name, t) in tensors {
        let extents: Vec<String> = t.shape().iter().map(|e| e.to_string()).collect();
        writeln!(w, "{name} {} {}", t.rank(), extents.join(" "))?;
    }
    writeln!(w, "end")?;
    for (_, t) in tensors {
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_tensors<R: BufRead>(r: &mut R, path: &Path) -> Result<Vec<(String, Tensor)>> {
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String> {
        line.clear();
        let n = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(fmt("unexpected end of header".into()));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };

    let magic = next_line(r)?;
    if magic != MAGIC {
        return Err(fmt(format!("bad magic line `{magic}`")));
    }
    let count_line = next_line(r)?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| fmt(format!("bad count line `{count_line}`")))?;

    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        let l = next_line(r)?;
        let mut parts = l.split(' ');
        let name = parts.next().filter(|n| !n.is_empty()).ok_or_else(|| fmt(format!("bad tensor line `{l}`")))?;
        let nums: Option<Vec<usize>> = parts.map(|p| p.parse().ok()).collect();
        let nums = nums.ok_or_else(|| fmt(format!("bad tensor line `{l}`")))?;
        match nums.split_first() {
            Some((&rank, extents)) if rank == extents.len() => specs.push((name.to_string(), extents.to_vec())),
            _ => return Err(fmt(format!("bad tensor line `{l}`"))),
        }
    }
    if next_line(r)? != "end" {
        return Err(fmt("missing `end` line".into()));
    }

    let mut out = Vec::with_capacity(count);
    for (name, shape) in specs {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| fmt(format!("truncated payload for `{name}`")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| fmt(format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(fmt("trailing bytes after payload".into()));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_tensors(&mut w, tensors)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensors(&mut BufReader::new(file), path)
}

pub fn store_tensors(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect()
}

/// Copies every store parameter from `tensors`, matched by name and shape.
/// Entries with unknown names are returned untouched.
pub fn restore_store(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<Vec<(String, Tensor)>> {
    let mut seen = vec![false; store.len()];
    let mut rest = Vec::new();
    for (name, t) in tensors {
        match store.find(&name) {
            Some(id) => {
                store.set_value(id, t)?;
                seen[id.index()] = true;
            }
            None => rest.push((name, t)),
        }
    }
    if let Some((_, p)) = store.iter().find(|(id, _)| !seen[id.index()]) {
        return Err(Error::Data(format!("checkpoint has no tensor for parameter `{}`", p.name)));
    }
    Ok(rest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a.weight".into(), Tensor::from_rows(&[&[1.5, -0.0], &[f64::MIN_POSITIVE, 1e300]]).unwrap()),
            ("b".into(), Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap()),
            ("c".into(), Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_is_bitwise() {
        let f = tempfile::NamedTempFile::new().unwrap();
        save(f.path(), &sample()).unwrap();
        let back = load(f.path()).unwrap();
        assert_eq!(back.len(), 3);
        for ((n0, t0), (n1, t1)) in sample().iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let b0: Vec<u64> = t0.data().iter().map(|v| v.to_bits()).collect();
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b0, b1);
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &sample()).unwrap();
        let p = Path::new("mem");
        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(read_tensors(&mut &truncated[..], p), Err(Error::Format { .. })));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_tensors(&mut &extra[..], p), Err(Error::Format { .. })));
        let bad = b"NOT-A-CHECKPOINT\n".to_vec();
        assert!(matches!(read_tensors(&mut &bad[..], p), Err(Error::Format { .. })));
    }

    #[test]
    fn restore_requires_every_param() {
        let mut store = ParamStore::new();
        store.add("b", Tensor::zeros(&[3]));
        let rest = restore_store(&mut store, sample()).unwrap();
        assert_eq!(rest.len(), 2);
        assert_eq!(store.value(store.find("b").unwrap()).data(), &[0.1, 0.2, 0.3]);
        store.add("missing", Tensor::zeros(&[1]));
        assert!(restore_store(&mut store, sample()).is_err());
    }
}
