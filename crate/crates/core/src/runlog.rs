//! Append-only JSONL run logs.

use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const SFT_SCHEMA: &str = "rlrf.sft.v1";
pub const GRPO_SCHEMA: &str = "rlrf.grpo.v1";
pub const REWARD_SCHEMA: &str = "rlrf.reward.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub schema: String,
    pub step: usize,
    pub nll: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoRecord {
    pub schema: String,
    pub step: usize,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub mean_kl: f64,
    pub mean_seq_length: f64,
    pub lr: f64,
    pub length_weight: f64,
    pub surrogate_value: f64,
    pub grad_norm: f64,
    /// Sampling cap for this step.
    pub max_len: usize,
    /// Longest ground truth among this step's conditions.
    pub max_gt_length: usize,
    pub mean_gt_length: f64,
    pub max_rollout_length: usize,
    /// Mean pixel reward over the step's rollouts, when the spec scores it.
    pub mean_l2: Option<f64>,
}

#[derive(Debug)]
pub struct RunLog {
    out: BufWriter<File>,
}

impl RunLog {
    /// Opens `path` for appending, creating it if needed.
    pub fn append(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(f),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

/// Reads every line of a JSONL file as `T`.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> std::io::Result<Vec<T>> {
    let f = File::open(path)?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| l.and_then(|s| serde_json::from_str(&s).map_err(std::io::Error::other)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn appends_and_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        for step in 0..2 {
            let mut log = RunLog::append(&path).unwrap();
            log.write(&SftRecord {
                schema: SFT_SCHEMA.into(),
                step,
                nll: 1.5,
                lr: 0.1,
                grad_norm: 2.0,
            })
            .unwrap();
        }
        let back: Vec<SftRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1]);
        assert!(back.iter().all(|r| r.schema == SFT_SCHEMA));
    }
}
