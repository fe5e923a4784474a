//! Model checkpoints: one JSON header line (shapes, hyperparameters, seed,
//! step) followed by FVEC-style float32 parameter blobs in declared order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{FVEC_MAGIC, FVEC_VERSION};
use crate::nn::{NonLocalNeck, ScorerHead, ScorerModel};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub dropout_rate: f64,
    pub has_neck: bool,
    pub seed: u64,
    pub step: u64,
    pub params: Vec<ParamInfo>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

pub fn save_checkpoint(model: &ScorerModel, seed: u64, step: u64, path: &Path) -> Result<()> {
    let mut params = Vec::new();
    model.visit_params(&mut |name, rows, cols, _| {
        params.push(ParamInfo { name: name.to_string(), rows, cols });
    });
    let header = CheckpointHeader {
        format_version: 1,
        dim: model.input_dim(),
        hidden1: model.head.hidden1,
        hidden2: model.head.hidden2,
        dropout_rate: model.head.dropout_rate,
        has_neck: model.neck.is_some(),
        seed,
        step,
        params,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Json { path: path.into(), source: e })?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    let mut io_err = None;
    model.visit_params(&mut |_, rows, cols, data| {
        if io_err.is_some() {
            return;
        }
        let res = (|| -> std::io::Result<()> {
            w.write_all(&FVEC_MAGIC)?;
            w.write_all(&FVEC_VERSION.to_le_bytes())?;
            w.write_all(&0u16.to_le_bytes())?;
            w.write_all(&(rows as u32).to_le_bytes())?;
            w.write_all(&(cols as u32).to_le_bytes())?;
            for &v in data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
            Ok(())
        })();
        if let Err(e) = res {
            io_err = Some(e);
        }
    });
    if let Some(e) = io_err {
        return Err(Error::io(path, e));
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ScorerModel, CheckpointHeader)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header_line = String::new();
    r.read_line(&mut header_line).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Json { path: path.into(), source: e })?;
    if header.format_version != 1 {
        return Err(Error::format(path, format!("unsupported checkpoint version {}", header.format_version)));
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut model = ScorerModel {
        neck: header.has_neck.then(|| NonLocalNeck::new(header.dim, &mut rng).zeros_like()),
        head: ScorerHead::new(header.dim, header.hidden1, header.hidden2, header.dropout_rate, &mut rng)
            .zeros_like(),
    };
    model.head.dropout_rate = header.dropout_rate;

    // collect declared order from the live model and cross-check the header
    let mut declared = Vec::new();
    model.visit_params(&mut |name, rows, cols, _| declared.push((name, rows, cols)));
    if declared.len() != header.params.len()
        || declared
            .iter()
            .zip(&header.params)
            .any(|(&(n, rr, cc), p)| n != p.name || rr != p.rows || cc != p.cols)
    {
        return Err(Error::format(path, "checkpoint parameter list does not match architecture"));
    }

    let mut values = Vec::with_capacity(declared.len());
    for (name, rows, cols) in &declared {
        let mut head = [0u8; 16];
        r.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
        if head[0..4] != FVEC_MAGIC {
            return Err(Error::format(path, format!("bad blob magic for {name}")));
        }
        let t = u32::from_le_bytes([head[8], head[9], head[10], head[11]]) as usize;
        let d = u32::from_le_bytes([head[12], head[13], head[14], head[15]]) as usize;
        if t != *rows || d != *cols {
            return Err(Error::format(path, format!("blob {name}: {t}x{d}, expected {rows}x{cols}")));
        }
        let mut payload = vec![0u8; t * d * 4];
        r.read_exact(&mut payload)
            .map_err(|_| Error::format(path, format!("truncated blob {name}")))?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        values.push(data);
    }
    let mut it = values.into_iter();
    model.visit_params_mut(&mut |_, data| {
        data.copy_from_slice(&it.next().expect("declared order mismatch"));
    });
    Ok((model, header))
}
