//! Model files and GNN datasets on disk.
//!
//! A model file is one line of JSON (the header) followed by the parameters
//! as little-endian `f64`, layer by layer, weights row-major then biases.
//!
//! A dataset row is `sample_id, L, x_1, y_1, range_1, ..., x_L, y_L, range_L,
//! label_x, label_y` in metres, without a header line. The label may be
//! omitted.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::graph::StarGraph;
use super::model::{Aggregation, GnnModel, Widths};
use crate::error::{Error, Result};
use crate::world::Room;

pub const MODEL_FORMAT: &str = "voi-twin-gnn";
pub const MODEL_VERSION: u32 = 1;

/// Context stored next to the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelMeta {
    /// Room used to normalize features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub room: Option<Room>,
    /// Seed of the train/validation split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_samples: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    widths: Widths,
    aggregation: Aggregation,
    param_count: usize,
    #[serde(flatten)]
    meta: ModelMeta,
}

pub fn save_model(path: &Path, model: &GnnModel, meta: &ModelMeta) -> Result<()> {
    let header = Header {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        widths: model.widths().clone(),
        aggregation: model.aggregation(),
        param_count: model.param_count(),
        meta: meta.clone(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(GnnModel, ModelMeta)> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    let header: Header = serde_json::from_slice(&line)
        .map_err(|e| Error::ModelFormat(format!("bad header: {e}")))?;
    if header.format != MODEL_FORMAT || header.version != MODEL_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported model {} v{}",
            header.format, header.version
        )));
    }
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    if body.len() != header.param_count * 8 {
        return Err(Error::ModelFormat(format!(
            "expected {} parameter bytes, found {}",
            header.param_count * 8,
            body.len()
        )));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let model = GnnModel::from_params(header.widths, header.aggregation, params)
        .map_err(|e| Error::ModelFormat(e.to_string()))?;
    Ok((model, header.meta))
}

/// One dataset row in metres.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `(x_l, y_l, range_l)` per anchor.
    pub anchors: Vec<[f64; 3]>,
    pub label: Option<[f64; 2]>,
}

impl Sample {
    pub fn to_graph(&self, room: &Room) -> Result<StarGraph> {
        StarGraph::from_features(&self.anchors, room, self.label.map(|l| Vector2::new(l[0], l[1])))
    }
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).has_headers(false).from_path(path)?;
    for s in samples {
        let mut rec = vec![s.id.to_string(), s.anchors.len().to_string()];
        rec.extend(s.anchors.iter().flatten().map(|v| v.to_string()));
        if let Some(l) = s.label {
            rec.extend(l.iter().map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let mut r = csv::ReaderBuilder::new().flexible(true).has_headers(false).from_path(path)?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |msg: &str| Error::Config(format!("dataset row {}: {msg}", line + 1));
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| bad("missing field"))?
                .trim()
                .parse::<f64>()
                .map_err(|_| bad("non-numeric field"))
        };
        let id: usize = rec.get(0).unwrap_or("").trim().parse().map_err(|_| bad("bad sample id"))?;
        let l: usize = rec.get(1).unwrap_or("").trim().parse().map_err(|_| bad("bad anchor count"))?;
        let base = 2 + 3 * l;
        let label = match rec.len() {
            n if n == base => None,
            n if n == base + 2 => Some([num(base)?, num(base + 1)?]),
            n => return Err(bad(&format!("{n} fields do not match L = {l}"))),
        };
        let anchors = (0..l)
            .map(|k| Ok([num(2 + 3 * k)?, num(3 + 3 * k)?, num(4 + 3 * k)?]))
            .collect::<Result<Vec<_>>>()?;
        out.push(Sample { id, anchors, label });
    }
    Ok(out)
}
