//! JSONL dataset files: one example per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ExamplePair, FeatureGrid, Split};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct PairRecord {
    id: String,
    n: usize,
    d: usize,
    src: Vec<f64>,
    trg: Vec<f64>,
    captions: Vec<String>,
    split: Split,
}

pub fn write_dataset<P: AsRef<Path>>(path: P, dataset: &Dataset) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for ex in &dataset.examples {
        let record = PairRecord {
            id: ex.id.clone(),
            n: ex.src.n,
            d: ex.src.d,
            src: ex.src.features.clone(),
            trg: ex.trg.features.clone(),
            captions: ex.captions.clone(),
            split: ex.split,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<P: AsRef<Path>>(path: P) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    let mut geometry: Option<(usize, usize)> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord = serde_json::from_str(&line).map_err(|e| Error::DataFormat {
            line: line_no,
            msg: e.to_string(),
        })?;
        let fmt = |msg: String| Error::DataFormat { line: line_no, msg };
        match geometry {
            None => geometry = Some((record.n, record.d)),
            Some((n, d)) if (n, d) != (record.n, record.d) => {
                return Err(fmt(format!(
                    "grid geometry n={} d={} differs from first line's n={n} d={d}",
                    record.n, record.d
                )));
            }
            _ => {}
        }
        let src = FeatureGrid::new(record.n, record.d, record.src)
            .map_err(|e| fmt(format!("src: {e}")))?;
        let trg = FeatureGrid::new(record.n, record.d, record.trg)
            .map_err(|e| fmt(format!("trg: {e}")))?;
        let ex = ExamplePair {
            id: record.id,
            src,
            trg,
            captions: record.captions,
            split: record.split,
        };
        ex.validate().map_err(|e| fmt(e.to_string()))?;
        examples.push(ex);
    }
    Ok(Dataset { examples })
}
