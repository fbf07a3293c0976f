//! Dataset files.
//!
//! Text format (JSON lines): the first line is a header
//! `{"format":"vmg-dataset","version":1,"state_dim":..,"action_dim":..,"env":..,"seed":..}`,
//! followed by one episode per line:
//! `{"observations":[[..]],"actions":[[..]],"rewards":[..],"next_observations":[[..]],"terminal":bool}`.
//! Reals are written in shortest round-trip form, so text files reload bit-exactly.
//!
//! Binary format (little-endian): magic `"VMGDATA\0"`, `u32` version, `u32`
//! header length, JSON header `{"state_dim","action_dim","env","seed","episodes"}`,
//! then per episode `u64 T`, `u8 terminal`, `(T+1)*state_dim` f64 states,
//! `T*action_dim` f64 actions, `T` f64 rewards.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, Episode};
use crate::error::{Result, VmgError};

const BIN_MAGIC: &[u8; 8] = b"VMGDATA\0";
const VERSION: u32 = 1;
const TEXT_FORMAT: &str = "vmg-dataset";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Text,
    Binary,
}

impl DatasetFormat {
    /// `.bin` selects the binary format; anything else is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => DatasetFormat::Binary,
            _ => DatasetFormat::Text,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextHeader {
    format: String,
    version: u32,
    state_dim: usize,
    action_dim: usize,
    env: String,
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextEpisode {
    observations: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    next_observations: Vec<Vec<f64>>,
    terminal: bool,
}

#[derive(Serialize, Deserialize)]
struct BinHeader {
    state_dim: usize,
    action_dim: usize,
    env: String,
    seed: Option<u64>,
    episodes: usize,
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    let bytes = match DatasetFormat::from_path(path) {
        DatasetFormat::Text => to_text(dataset),
        DatasetFormat::Binary => to_binary(dataset),
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Loads either format, detected by the leading magic bytes.
pub fn load(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(BIN_MAGIC) {
        from_binary(&bytes)
    } else {
        from_text(&bytes)
    }
}

pub(crate) fn to_text(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    let header = TextHeader {
        format: TEXT_FORMAT.into(),
        version: VERSION,
        state_dim: ds.state_dim,
        action_dim: ds.action_dim,
        env: ds.meta.env.clone(),
        seed: ds.meta.seed,
    };
    serde_json::to_writer(&mut out, &header).expect("header serializes");
    out.push(b'\n');
    for ep in &ds.episodes {
        let rows = |a: &Array2<f64>| -> Vec<Vec<f64>> { a.rows().into_iter().map(|r| r.to_vec()).collect() };
        let states = rows(&ep.states);
        let rec = TextEpisode {
            observations: states[..ep.len()].to_vec(),
            actions: rows(&ep.actions),
            rewards: ep.rewards.clone(),
            next_observations: states[1..].to_vec(),
            terminal: ep.terminal,
        };
        serde_json::to_writer(&mut out, &rec).expect("episode serializes");
        out.push(b'\n');
    }
    out
}

fn rows_to_array(rows: &[Vec<f64>], dim: usize, what: &str, record: usize) -> Result<Array2<f64>> {
    let mut flat = Vec::with_capacity(rows.len() * dim);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(VmgError::Schema(format!(
                "record {record}: {what}[{i}] has {} entries, expected {dim}",
                r.len()
            )));
        }
        flat.extend_from_slice(r);
    }
    Ok(Array2::from_shape_vec((rows.len(), dim), flat).expect("checked shape"))
}

fn from_text(bytes: &[u8]) -> Result<Dataset> {
    let reader = BufReader::new(bytes);
    let mut lines = reader.lines().enumerate().filter(|(_, l)| match l {
        Ok(l) => !l.trim().is_empty(),
        Err(_) => true,
    });
    let Some((_, first)) = lines.next() else {
        return Err(VmgError::Schema("no episodes".into()));
    };
    let header: TextHeader = serde_json::from_str(&first?).map_err(|e| VmgError::Parse {
        record: 1,
        detail: format!("header: {e}"),
    })?;
    if header.format != TEXT_FORMAT || header.version != VERSION {
        return Err(VmgError::Schema(format!(
            "unsupported dataset format {} v{}",
            header.format, header.version
        )));
    }

    let mut episodes = Vec::new();
    for (idx, line) in lines {
        let record = idx + 1;
        let rec: TextEpisode = serde_json::from_str(&line?).map_err(|e| VmgError::Parse {
            record,
            detail: e.to_string(),
        })?;
        let t = rec.actions.len();
        if rec.observations.len() != t || rec.next_observations.len() != t || rec.rewards.len() != t
        {
            return Err(VmgError::Schema(format!(
                "record {record}: observations/actions/rewards/next_observations lengths differ"
            )));
        }
        for i in 0..t.saturating_sub(1) {
            if rec.next_observations[i] != rec.observations[i + 1] {
                return Err(VmgError::Schema(format!(
                    "record {record}: next_observations[{i}] does not equal observations[{}]",
                    i + 1
                )));
            }
        }
        let mut state_rows = rec.observations;
        if let Some(last) = rec.next_observations.last() {
            state_rows.push(last.clone());
        }
        let states = rows_to_array(&state_rows, header.state_dim, "observations", record)?;
        let actions = rows_to_array(&rec.actions, header.action_dim, "actions", record)?;
        let ep = Episode::new(states, actions, rec.rewards, rec.terminal).map_err(|e| match e {
            VmgError::Schema(m) => VmgError::Schema(format!("record {record}: {m}")),
            other => other,
        })?;
        episodes.push(ep);
    }
    Dataset::new(
        episodes,
        DatasetMeta {
            env: header.env,
            seed: header.seed,
        },
    )
}

pub(crate) fn to_binary(ds: &Dataset) -> Vec<u8> {
    let header = serde_json::to_vec(&BinHeader {
        state_dim: ds.state_dim,
        action_dim: ds.action_dim,
        env: ds.meta.env.clone(),
        seed: ds.meta.seed,
        episodes: ds.episodes.len(),
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(BIN_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for ep in &ds.episodes {
        out.extend_from_slice(&(ep.len() as u64).to_le_bytes());
        out.push(ep.terminal as u8);
        for v in ep.states.iter().chain(ep.actions.iter()).chain(ep.rewards.iter()) {
            out.write_all(&v.to_le_bytes()).expect("vec write");
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    record: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(VmgError::Parse {
                record: self.record,
                detail: "unexpected end of binary dataset".into(),
            });
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn from_binary(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor {
        bytes: &bytes[BIN_MAGIC.len()..],
        record: 0,
    };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(VmgError::Schema(format!("unsupported binary dataset version {version}")));
    }
    let hlen = cur.u32()? as usize;
    let header: BinHeader = serde_json::from_slice(cur.take(hlen)?).map_err(|e| VmgError::Parse {
        record: 0,
        detail: format!("header: {e}"),
    })?;
    let mut episodes = Vec::with_capacity(header.episodes);
    for e in 0..header.episodes {
        cur.record = e + 1;
        let t = cur.u64()? as usize;
        let terminal = match cur.take(1)?[0] {
            0 => false,
            1 => true,
            b => {
                return Err(VmgError::Parse {
                    record: e + 1,
                    detail: format!("terminal flag byte {b}"),
                })
            }
        };
        let states = cur.f64s((t + 1) * header.state_dim)?;
        let actions = cur.f64s(t * header.action_dim)?;
        let rewards = cur.f64s(t)?;
        let states = Array2::from_shape_vec((t + 1, header.state_dim), states).expect("sized");
        let actions = Array2::from_shape_vec((t, header.action_dim), actions).expect("sized");
        episodes.push(Episode::new(states, actions, rewards, terminal)?);
    }
    if !cur.bytes.is_empty() {
        return Err(VmgError::Parse {
            record: header.episodes,
            detail: "trailing bytes after last episode".into(),
        });
    }
    Dataset::new(
        episodes,
        DatasetMeta {
            env: header.env,
            seed: header.seed,
        },
    )
}
