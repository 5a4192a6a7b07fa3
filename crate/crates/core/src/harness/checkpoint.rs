//! Binary checkpoints holding parameters, optimizer state and the config
//! that produced them.
//!
//! Layout, little endian: magic `DHCK`, `u32` version, then the strings
//! problem hash, optimizer tag and config TOML (each `u64` length + UTF-8),
//! the `u64` iteration, a `u64` record count and the records. A record is a
//! name string, `u64` rows, `u64` cols and `rows·cols` row-major `f64`s.
//! Parameter records are named `param.<name>`; optimizer records keep the
//! optimizer's own names.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::{ExperimentConfig, OptimizerKind};
use super::train::OptimizerState;
use super::{HarnessError, HarnessResult};
use crate::matrix::Matrix64;
use crate::policy::{init_params, PolicyParams};

const MAGIC: &[u8; 4] = b"DHCK";
const VERSION: u32 = 1;
const PARAM_PREFIX: &str = "param.";
/// Upper bound on any single length field, to reject garbage early.
const MAX_LEN: u64 = 1 << 34;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub problem_hash: String,
    pub optimizer: OptimizerKind,
    pub config_toml: String,
    pub iteration: u64,
    pub records: Vec<(String, Matrix64)>,
}

impl Checkpoint {
    pub fn capture(cfg: &ExperimentConfig, params: &PolicyParams, optimizer: &OptimizerState) -> Self {
        let mut records: Vec<(String, Matrix64)> = params
            .names
            .iter()
            .zip(&params.values)
            .map(|(n, v)| (format!("{PARAM_PREFIX}{n}"), v.clone()))
            .collect();
        records.extend(optimizer.export());
        Self {
            problem_hash: cfg.problem_hash(),
            optimizer: optimizer.kind(),
            config_toml: cfg.to_toml(),
            iteration: optimizer.iteration(),
            records,
        }
    }

    pub fn config(&self) -> HarnessResult<ExperimentConfig> {
        ExperimentConfig::from_toml(&self.config_toml)
    }

    /// Fails unless the checkpoint was trained on the problem `cfg` describes.
    pub fn check_problem(&self, cfg: &ExperimentConfig) -> HarnessResult<()> {
        let expected = cfg.problem_hash();
        if expected != self.problem_hash {
            return Err(HarnessError::HashMismatch {
                expected,
                found: self.problem_hash.clone(),
            });
        }
        Ok(())
    }

    /// Policy parameters, shaped by the architecture in `cfg`.
    pub fn params(&self, cfg: &ExperimentConfig) -> HarnessResult<PolicyParams> {
        self.check_problem(cfg)?;
        let mut params = init_params(&cfg.policy_config(), 0);
        for (name, value) in params.names.iter().zip(params.values.iter_mut()) {
            let key = format!("{PARAM_PREFIX}{name}");
            let rec = self
                .records
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| HarnessError::Checkpoint(format!("missing record {key}")))?;
            if rec.1.shape() != value.shape() {
                return Err(HarnessError::Checkpoint(format!(
                    "record {key} has shape {:?}, expected {:?}",
                    rec.1.shape(),
                    value.shape()
                )));
            }
            *value = rec.1.clone();
        }
        Ok(params)
    }

    /// Parameters and optimizer state for resuming training.
    pub fn restore(&self, cfg: &ExperimentConfig) -> HarnessResult<(PolicyParams, OptimizerState)> {
        let params = self.params(cfg)?;
        let mut opt = OptimizerState::new(cfg, self.optimizer, &params);
        let state: Vec<(String, Matrix64)> = self
            .records
            .iter()
            .filter(|(n, _)| !n.starts_with(PARAM_PREFIX))
            .cloned()
            .collect();
        opt.import(&state)?;
        Ok((params, opt))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> HarnessResult<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> HarnessResult<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(w, &self.problem_hash)?;
        write_str(w, &self.optimizer.to_string())?;
        write_str(w, &self.config_toml)?;
        w.write_all(&self.iteration.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for (name, m) in &self.records {
            write_str(w, name)?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
            for x in m.as_slice() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> HarnessResult<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from(r: &mut impl Read) -> HarnessResult<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(HarnessError::Checkpoint("not a checkpoint file".into()));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v).map_err(truncated)?;
        let version = u32::from_le_bytes(v);
        if version != VERSION {
            return Err(HarnessError::Checkpoint(format!("unsupported version {version}")));
        }
        let problem_hash = read_str(r)?;
        let optimizer: OptimizerKind = read_str(r)?.parse().map_err(HarnessError::Checkpoint)?;
        let config_toml = read_str(r)?;
        let iteration = read_u64(r)?;
        let n = read_u64(r)?;
        if n > MAX_LEN {
            return Err(HarnessError::Checkpoint(format!("record count {n}")));
        }
        let mut records = Vec::new();
        for _ in 0..n {
            let name = read_str(r)?;
            let rows = read_u64(r)?;
            let cols = read_u64(r)?;
            if rows.saturating_mul(cols) > MAX_LEN {
                return Err(HarnessError::Checkpoint(format!("record {name} of {rows}x{cols}")));
            }
            let mut data = vec![0.0; (rows * cols) as usize];
            let mut buf = [0u8; 8];
            for x in &mut data {
                r.read_exact(&mut buf).map_err(truncated)?;
                *x = f64::from_le_bytes(buf);
            }
            let m = Matrix64::from_vec(rows as usize, cols as usize, data)
                .map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
            records.push((name, m));
        }
        Ok(Self {
            problem_hash,
            optimizer,
            config_toml,
            iteration,
            records,
        })
    }
}

fn truncated(e: std::io::Error) -> HarnessError {
    HarnessError::Checkpoint(format!("truncated file: {e}"))
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u64(r: &mut impl Read) -> HarnessResult<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> HarnessResult<String> {
    let n = read_u64(r)?;
    if n > MAX_LEN {
        return Err(HarnessError::Checkpoint(format!("string length {n}")));
    }
    let mut b = vec![0u8; n as usize];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|e| HarnessError::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.policy.n_blocks = 1;
        cfg.policy.hidden = 4;
        cfg
    }

    #[test]
    fn round_trip_restores_params_and_state() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Kfac] {
            let cfg = small_config();
            let params = init_params(&cfg.policy_config(), 3);
            let opt = OptimizerState::new(&cfg, kind, &params);
            let ck = Checkpoint::capture(&cfg, &params, &opt);
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
            assert_eq!(back, ck);
            let (p, o) = back.restore(&cfg).unwrap();
            assert_eq!(p, params);
            assert_eq!(o, opt);
        }
    }

    #[test]
    fn foreign_problem_is_rejected() {
        let cfg = small_config();
        let params = init_params(&cfg.policy_config(), 3);
        let opt = OptimizerState::new(&cfg, OptimizerKind::Adam, &params);
        let ck = Checkpoint::capture(&cfg, &params, &opt);
        let mut other = cfg.clone();
        other.gamma = 10.0;
        assert!(matches!(ck.params(&other), Err(HarnessError::HashMismatch { .. })));
    }

    #[test]
    fn truncated_and_foreign_bytes_are_rejected() {
        let cfg = small_config();
        let params = init_params(&cfg.policy_config(), 3);
        let opt = OptimizerState::new(&cfg, OptimizerKind::Kfac, &params);
        let mut buf = Vec::new();
        Checkpoint::capture(&cfg, &params, &opt).write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(Checkpoint::read_from(&mut buf.as_slice()), Err(HarnessError::Checkpoint(_))));
        assert!(matches!(Checkpoint::read_from(&mut &b"HPTH0000"[..]), Err(HarnessError::Checkpoint(_))));
    }
}
