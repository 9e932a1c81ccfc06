//! Scene corpus files: one JSON object per line with the image as
//! nested `[row][col][rgb]` float arrays. Loading reports the offending
//! line number on any malformed record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use capforge_core::corpus::SceneSample;
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    image: Vec<Vec<Vec<f64>>>,
    captions: Vec<String>,
    attributes: Vec<f64>,
}

fn to_record(s: &SceneSample) -> Record {
    let g = s.grid;
    let image = (0..g)
        .map(|r| {
            (0..g)
                .map(|c| s.image[(r * g + c) * 3..(r * g + c) * 3 + 3].to_vec())
                .collect()
        })
        .collect();
    Record {
        id: s.id.clone(),
        image,
        captions: s.captions.clone(),
        attributes: s.attribute_labels.clone(),
    }
}

fn from_record(rec: Record) -> Result<SceneSample> {
    let grid = rec.image.len();
    if grid == 0 {
        bail!("empty image");
    }
    let mut image = Vec::with_capacity(grid * grid * 3);
    for row in &rec.image {
        if row.len() != grid {
            bail!("image is not square: {} rows but a row of {} cells", grid, row.len());
        }
        for px in row {
            if px.len() != 3 {
                bail!("pixel with {} channels, expected 3", px.len());
            }
            image.extend_from_slice(px);
        }
    }
    Ok(SceneSample {
        id: rec.id,
        grid,
        image,
        captions: rec.captions,
        attribute_labels: rec.attributes,
    })
}

pub fn save_dataset(path: &Path, samples: &[SceneSample]) -> Result<()> {
    let file = File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut out, &to_record(s))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Empty file is a valid empty corpus.
pub fn load_dataset(path: &Path) -> Result<Vec<SceneSample>> {
    let file = File::open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line =
            line.with_context(|| format!("{}:{lineno}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .with_context(|| format!("{}:{lineno}: malformed record", path.display()))?;
        let sample = from_record(rec)
            .with_context(|| format!("{}:{lineno}: bad sample", path.display()))?;
        samples.push(sample);
    }
    Ok(samples)
}
