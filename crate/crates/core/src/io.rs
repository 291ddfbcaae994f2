//! On-disk artifacts: checkpoints, metrics CSV, JSON reports and the run
//! manifest.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic "MCRLCKPT" | u32 version | u8 mode (0 plain, 1 causal)
//! u32 len | config TOML | u32 len | config hash (hex)
//! u32 count | per parameter: u32 len | name | u32 rank | u64 dims.. | f64 values..
//! 32-byte SHA-256 of everything above
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamSet, Tensor};
use crate::config::{parse_config_str, ExperimentConfig, Mode};
use crate::error::{Error, Result};
use crate::meta::MetricsRow;
use crate::models::{Architecture, ModelBundle};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MCRLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    put_u32(buf, b.len())?;
    buf.extend_from_slice(b);
    Ok(())
}

/// Serialises a bundle together with the config that built it.
pub fn encode_checkpoint(bundle: &ModelBundle, cfg: &ExperimentConfig) -> Result<Vec<u8>> {
    if bundle.arch.mode != cfg.mode {
        return Err(Error::Checkpoint("bundle mode differs from config mode".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(match bundle.arch.mode {
        Mode::Plain => 0,
        Mode::Causal => 1,
    });
    put_bytes(&mut buf, cfg.to_toml().as_bytes())?;
    put_bytes(&mut buf, cfg.hash().as_bytes())?;
    let params = bundle.all_params();
    put_u32(&mut buf, params.len())?;
    for (name, t) in params.iter() {
        put_bytes(&mut buf, name.as_bytes())?;
        put_u32(&mut buf, t.shape().len())?;
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} out of range")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

/// Decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub config: ExperimentConfig,
    pub config_hash: String,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing magic header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (corrupt or edited file)".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let mode = match r.take(1, "mode tag")?[0] {
        0 => Mode::Plain,
        1 => Mode::Causal,
        t => return Err(Error::Checkpoint(format!("unknown mode tag {t}"))),
    };
    let config = parse_config_str(&r.string("config")?)?;
    let config_hash = r.string("config hash")?;
    if config.mode != mode {
        return Err(Error::Checkpoint("mode tag disagrees with stored config".into()));
    }
    let count = r.u32("parameter count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u64("dimension")).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Checkpoint(format!("shape {shape:?} overflows")))?;
        let raw = r.take(numel * 8, "parameter values")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(&name, Tensor::new(&shape, values)?)?;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let bundle = ModelBundle::from_params(Architecture::from_config(&config)?, &params)?;
    Ok(Checkpoint {
        bundle,
        config,
        config_hash,
    })
}

pub fn save_checkpoint(bundle: &ModelBundle, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(bundle, cfg)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint. When `expected` is given and its hash differs from
/// the stored one, a warning is printed and returned; loading proceeds
/// with the stored config.
pub fn load_checkpoint(path: &Path, expected: Option<&ExperimentConfig>) -> Result<(Checkpoint, Option<String>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = decode_checkpoint(&bytes)?;
    let warning = expected.and_then(|cfg| {
        let h = cfg.hash();
        (h != ck.config_hash).then(|| {
            format!(
                "warning: {} was written under config {}, current config is {}",
                path.display(),
                &ck.config_hash[..12.min(ck.config_hash.len())],
                &h[..12]
            )
        })
    });
    if let Some(w) = &warning {
        eprintln!("{w}");
    }
    Ok((ck, warning))
}

pub const METRICS_HEADER: &str = "iteration,split,pred-loss,score,l-dm-xi,l-dm-fgr,seconds";

pub fn format_metrics(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iteration, r.split, r.pred_loss, r.score, r.dm_xi, r.dm_fgr, r.seconds
        ));
    }
    s
}

pub fn emit_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    fs::write(path, format_metrics(rows)).map_err(|e| Error::io(path, e))
}

pub fn parse_metrics(text: &str, path: &Path) -> Result<Vec<MetricsRow>> {
    let bad = |line: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => return Err(bad(1, format!("expected header, found {other:?}"))),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(i + 2, format!("expected 7 fields, found {}", f.len())));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|e| bad(i + 2, format!("field {}: {e}", k + 1)));
            Ok(MetricsRow {
                iteration: f[0].parse().map_err(|e| bad(i + 2, format!("iteration: {e}")))?,
                split: f[1].to_string(),
                pred_loss: num(2)?,
                score: num(3)?,
                dm_xi: num(4)?,
                dm_fgr: num(5)?,
                seconds: num(6)?,
            })
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text, path)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Square matrix as CSV without a header.
pub fn write_matrix_csv(m: &[Vec<f64>], path: &Path) -> Result<()> {
    let text: String = m
        .iter()
        .map(|row| row.iter().map(f64::to_string).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.parse::<f64>().map_err(|e| Error::Format {
                        path: path.to_path_buf(),
                        reason: e.to_string(),
                    })
                })
                .collect()
        })
        .collect()
}

/// Record of a completed run; written after every other output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub code_version: String,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
    /// Output files relative to the run directory, manifest excluded.
    pub outputs: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &ExperimentConfig) -> Self {
        RunManifest {
            subcommand: subcommand.into(),
            config: config.clone(),
            seed: config.seed,
            code_version: env!("CARGO_PKG_VERSION").into(),
            started: unix_now(),
            finished: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished = unix_now();
        let path = dir.join(MANIFEST_FILE);
        write_json(&self, &path)?;
        Ok(path)
    }
}
