//! Newline-delimited JSON record files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Result, RunRecord};

/// Append-only record stream, one JSON object per line.
pub struct RecordWriter<W: Write> {
    out: W,
    lines: u64,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out, lines: 0 }
    }

    pub fn append(&mut self, record: &RunRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.lines += 1;
        Ok(())
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = RecordWriter::new(BufWriter::new(File::create(path)?));
    for r in records {
        w.append(r)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::RewardUid;

    #[test]
    fn roundtrip() {
        let rec = RunRecord {
            epoch: 1,
            step: 3,
            arm: 2,
            uid: RewardUid(9),
            j_hat: 0.25,
            best_so_far_j: 0.5,
            d_hat: Some(2.0),
            phi: Some(3.4641016151377544),
            prob: None,
            score: None,
            dead: false,
            episodes_cum: 80,
            env_steps_cum: 1234,
            wall_ms: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        write_records(&path, &[rec.clone(), rec.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"wall_ms\":null"));
        assert_eq!(read_records(&path).unwrap(), vec![rec.clone(), rec]);
    }
}
