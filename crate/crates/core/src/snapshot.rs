//! Value-stack container: a plain-text `key = value` header terminated by
//! `end_header`, followed by raw little-endian `f64` samples in `n,i,j,k`
//! row-major order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::bounds::{DomainBounds, Grid};
use crate::error::{Error, Result};
use crate::hjb::{Field3, ValueStack};
use crate::market::ModelParams;

const MAGIC: &str = "windtrade-snapshot 1";
const ORDER: &str = "n,i,j,k";
const END: &str = "end_header";

/// SHA-256 of the canonical serialisation of the model parameters.
pub fn params_hash(params: &ModelParams) -> String {
    let text = toml::to_string(params).expect("parameters serialise");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Writes through a sibling temporary file renamed into place on success.
pub fn atomic_write(path: &Path, fill: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut tmp: PathBuf = path.to_path_buf();
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid("path", format!("`{}` has no file name", path.display())))?
        .to_string_lossy()
        .into_owned();
    tmp.set_file_name(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        fill(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        Ok(())
    })();
    match result {
        Ok(()) => {
            std::fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

/// Snapshot header fields besides the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMeta {
    pub params_hash: String,
}

fn header(stack: &ValueStack, meta: &SnapshotMeta) -> String {
    let g = &stack.grid;
    let b = &g.bounds;
    let level = g.level_len();
    let mut h = String::new();
    let mut kv = |k: &str, v: String| {
        h.push_str(k);
        h.push_str(" = ");
        h.push_str(&v);
        h.push('\n');
    };
    kv("index_order", ORDER.into());
    kv("levels", stack.levels.len().to_string());
    kv("top_index", stack.top_index.to_string());
    for (k, v) in [("n_x", g.n_x), ("n_y", g.n_y), ("n_q", g.n_q), ("n_m", g.n_m), ("n_t", g.n_t), ("idx_gc", g.idx_gc), ("idx_delivery", g.idx_delivery)] {
        kv(k, v.to_string());
    }
    for (k, v) in [
        ("dx", g.dx),
        ("dy", g.dy),
        ("dq", g.dq),
        ("dm", g.dm),
        ("dt", g.dt),
        ("horizon", g.horizon),
        ("y_min", b.y_min),
        ("y_max", b.y_max),
        ("q_min", b.q_min),
        ("q_max", b.q_max),
        ("psi_min", b.psi_min),
        ("psi_max", b.psi_max),
        ("m_max", b.m_max),
    ] {
        kv(k, format!("{v:?}"));
    }
    kv("params_hash", meta.params_hash.clone());
    kv("payload_bytes", (stack.levels.len() * level * 8).to_string());
    format!("{MAGIC}\n{h}{END}\n")
}

/// Serialises a stack into any writer.
pub fn write_stack_to(w: &mut impl Write, stack: &ValueStack, meta: &SnapshotMeta) -> Result<()> {
    let level = stack.grid.level_len();
    for (n, f) in stack.levels.iter().enumerate() {
        if f.data.len() != level {
            return Err(Error::Dimension { expected: level, actual: f.data.len() });
        }
        if !f.all_finite() {
            return Err(Error::NonFinite { stage: "snapshot", step: n });
        }
    }
    w.write_all(header(stack, meta).as_bytes())?;
    let mut buf = Vec::with_capacity(level * 8);
    for f in &stack.levels {
        buf.clear();
        for v in &f.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn write_stack(path: &Path, stack: &ValueStack, meta: &SnapshotMeta) -> Result<()> {
    atomic_write(path, |w| write_stack_to(w, stack, meta))
}

fn field<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = map.get(key).ok_or_else(|| Error::SnapshotFormat(format!("header lacks `{key}`")))?;
    raw.parse().map_err(|_| Error::SnapshotFormat(format!("header `{key}` has unparsable value `{raw}`")))
}

/// Deserialises a stack from any reader.
pub fn read_stack_from(r: &mut impl BufRead) -> Result<(ValueStack, SnapshotMeta)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::SnapshotFormat(format!("unexpected magic line `{}`", line.trim_end())));
    }
    let mut map = BTreeMap::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::SnapshotFormat("header not terminated".into()));
        }
        let l = line.trim_end();
        if l == END {
            break;
        }
        let (k, v) = l
            .split_once(" = ")
            .ok_or_else(|| Error::SnapshotFormat(format!("header line `{l}` is not `key = value`")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let order: String = field(&map, "index_order")?;
    if order != ORDER {
        return Err(Error::SnapshotOrder { found: order });
    }
    let bounds = DomainBounds {
        y_min: field(&map, "y_min")?,
        y_max: field(&map, "y_max")?,
        q_min: field(&map, "q_min")?,
        q_max: field(&map, "q_max")?,
        psi_min: field(&map, "psi_min")?,
        psi_max: field(&map, "psi_max")?,
        m_max: field(&map, "m_max")?,
    };
    let grid = Grid {
        n_x: field(&map, "n_x")?,
        n_y: field(&map, "n_y")?,
        n_q: field(&map, "n_q")?,
        n_m: field(&map, "n_m")?,
        n_t: field(&map, "n_t")?,
        dx: field(&map, "dx")?,
        dy: field(&map, "dy")?,
        dq: field(&map, "dq")?,
        dm: field(&map, "dm")?,
        dt: field(&map, "dt")?,
        horizon: field(&map, "horizon")?,
        idx_gc: field(&map, "idx_gc")?,
        idx_delivery: field(&map, "idx_delivery")?,
        bounds,
    };
    let levels: usize = field(&map, "levels")?;
    let top_index: usize = field(&map, "top_index")?;
    let declared: u64 = field(&map, "payload_bytes")?;
    let level = grid.level_len();
    let expected = (levels * level * 8) as u64;
    if declared != expected {
        return Err(Error::SnapshotSize { expected, actual: declared });
    }
    let mut fields = Vec::with_capacity(levels);
    let mut buf = Vec::with_capacity(level * 8);
    let mut consumed = 0u64;
    for _ in 0..levels {
        buf.clear();
        r.by_ref().take((level * 8) as u64).read_to_end(&mut buf)?;
        consumed += buf.len() as u64;
        if buf.len() != level * 8 {
            return Err(Error::SnapshotSize { expected, actual: consumed });
        }
        fields.push(Field3 {
            nx1: grid.n_x + 1,
            ny1: grid.n_y + 1,
            nq1: grid.n_q + 1,
            data: buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::SnapshotSize { expected, actual: consumed + rest.len() as u64 });
    }
    let meta = SnapshotMeta { params_hash: field(&map, "params_hash")? };
    Ok((ValueStack { grid, levels: fields, top_index }, meta))
}

pub fn read_stack(path: &Path) -> Result<(ValueStack, SnapshotMeta)> {
    read_stack_from(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::{build_grid, Resolution};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack() -> ValueStack {
        let p = ModelParams { t_gc: 1.0 - 1.0 / 12.0, delivery: 0.25, ..ModelParams::default() };
        let bounds = DomainBounds::from_parts(&p, -10.0, 90.0, 1.0);
        let grid = build_grid(&p, bounds, Resolution { n_x: 3, n_y: 4, n_q: 5, n_m: 3, n_t: 12 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let levels = (0..=grid.idx_gc)
            .map(|_| Field3::from_fn(4, 5, 6, |_, _, _| rng.random::<f64>() * 1e6 - 5e5))
            .collect();
        ValueStack { top_index: grid.idx_gc, grid, levels }
    }

    fn bytes(stack: &ValueStack) -> Vec<u8> {
        let mut out = Vec::new();
        write_stack_to(&mut out, stack, &SnapshotMeta { params_hash: "abc".into() }).unwrap();
        out
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = random_stack();
        let (back, meta) = read_stack_from(&mut &bytes(&s)[..]).unwrap();
        assert_eq!(meta.params_hash, "abc");
        assert_eq!(back.grid, s.grid);
        assert_eq!(back.top_index, s.top_index);
        for (a, b) in back.levels.iter().zip(&s.levels) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_payload_names_both_sizes() {
        let s = random_stack();
        let mut b = bytes(&s);
        b.truncate(b.len() - 3);
        let expected = (s.levels.len() * s.grid.level_len() * 8) as u64;
        match read_stack_from(&mut &b[..]) {
            Err(Error::SnapshotSize { expected: e, actual }) => {
                assert_eq!(e, expected);
                assert_eq!(actual, expected - 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tampered_order_is_rejected() {
        let b = bytes(&random_stack());
        let text = String::from_utf8_lossy(&b).replacen("index_order = n,i,j,k", "index_order = n,k,j,i", 1);
        let raw = text.into_bytes();
        assert!(matches!(read_stack_from(&mut &raw[..]), Err(Error::SnapshotOrder { found }) if found == "n,k,j,i"));
    }

    #[test]
    fn file_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.snap");
        let s = random_stack();
        let meta = SnapshotMeta { params_hash: params_hash(&ModelParams::default()) };
        write_stack(&path, &s, &meta).unwrap();
        let (back, m) = read_stack(&path).unwrap();
        assert_eq!(m, meta);
        assert_eq!(back.levels, s.levels);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert_ne!(params_hash(&ModelParams::default()), params_hash(&ModelParams { beta: 1.0, ..ModelParams::default() }));
    }
}
