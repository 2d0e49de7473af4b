//! The persisted training/evaluation log: one CSV row per
//! (epoch, split, attack) with the exact column set
//! `epoch,split,attack,accuracy,loss,wall_ms,gen_updates`.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,split,attack,accuracy,loss,wall_ms,gen_updates";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl Split {
    pub fn parse(text: &str) -> Result<Split> {
        match text {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Dataset(format!("unknown split '{text}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub attack: String,
    pub accuracy: f64,
    pub loss: f64,
    pub wall_ms: u64,
    pub gen_updates: u64,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::Dataset(format!(
                "accuracy {} outside [0, 1]",
                self.accuracy
            )));
        }
        Ok(())
    }

    /// One CSV line (no trailing newline). Float fields use the shortest
    /// representation that round-trips, so parsing back is lossless.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.split, self.attack, self.accuracy, self.loss, self.wall_ms,
            self.gen_updates
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<MetricsRecord> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Dataset(format!(
                "metrics row needs 7 fields, got {}: '{line}'",
                fields.len()
            )));
        }
        let parse_err = |what: &str| Error::Dataset(format!("bad {what} in metrics row '{line}'"));
        Ok(MetricsRecord {
            epoch: fields[0].parse().map_err(|_| parse_err("epoch"))?,
            split: Split::parse(fields[1])?,
            attack: fields[2].to_string(),
            accuracy: fields[3].parse().map_err(|_| parse_err("accuracy"))?,
            loss: fields[4].parse().map_err(|_| parse_err("loss"))?,
            wall_ms: fields[5].parse().map_err(|_| parse_err("wall_ms"))?,
            gen_updates: fields[6].parse().map_err(|_| parse_err("gen_updates"))?,
        })
    }
}

pub fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&r.to_csv_row());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == CSV_HEADER => {}
        other => {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("bad metrics header: {other:?}"),
            })
        }
    }
    lines.map(MetricsRecord::parse_csv_row).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_is_lossless() {
        let records = vec![
            MetricsRecord {
                epoch: 3,
                split: Split::Test,
                attack: "pgd10".into(),
                accuracy: 0.123456789123,
                loss: 1.0 / 3.0,
                wall_ms: 8123,
                gen_updates: 5,
            },
            MetricsRecord {
                epoch: 4,
                split: Split::Train,
                attack: "clean".into(),
                accuracy: 1.0,
                loss: f64::EPSILON,
                wall_ms: 0,
                gen_updates: 0,
            },
        ];
        for r in &records {
            let back = MetricsRecord::parse_csv_row(&r.to_csv_row()).unwrap();
            assert_eq!(*r, back);
            assert_eq!(r.accuracy.to_bits(), back.accuracy.to_bits());
            assert_eq!(r.loss.to_bits(), back.loss.to_bits());
        }

        let dir = std::env::temp_dir().join(format!("advt-metrics-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("metrics.csv");
        write_csv(&path, &records).unwrap();
        let loaded = read_csv(&path).unwrap();
        assert_eq!(records, loaded);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn malformed_rows_are_rejected() {
        assert!(MetricsRecord::parse_csv_row("1,test,clean,0.5,0.5,0").is_err());
        assert!(MetricsRecord::parse_csv_row("x,test,clean,0.5,0.5,0,0").is_err());
        assert!(MetricsRecord::parse_csv_row("1,val,clean,0.5,0.5,0,0").is_err());
    }
}
