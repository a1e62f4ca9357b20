//! CSV and PGM serialization for pmfs and sample batches.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::statespace::{Pmf, SampleBatch, StateSpace, Symbol};

/// Writes `index,d_0,..,d_{D-1},weight` rows for every state with non-zero mass.
pub fn write_pmf_csv<W: Write>(pmf: &Pmf, out: W) -> Result<()> {
    let space = pmf.space();
    let d = space.dims();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["index".to_string()];
    header.extend((0..d).map(|k| format!("d_{k}")));
    header.push("weight".into());
    w.write_record(&header)?;
    let mut x = vec![0 as Symbol; d];
    let mut record = Vec::with_capacity(d + 2);
    for (idx, &weight) in pmf.weights().iter().enumerate() {
        if weight == 0.0 {
            continue;
        }
        space.state_at(idx, &mut x);
        record.clear();
        record.push(idx.to_string());
        record.extend(x.iter().map(|s| s.to_string()));
        // `{:e}` round-trips f64 exactly.
        record.push(format!("{weight:e}"));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a pmf written by [`write_pmf_csv`]. Missing states have zero mass.
pub fn read_pmf_csv<R: Read>(input: R, space: StateSpace) -> Result<Pmf> {
    let n = space.checked_num_states(crate::statespace::DEFAULT_ENUMERATION_CAP)?;
    let d = space.dims();
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.len() != d + 2 {
        return Err(Error::InvalidConfig(format!(
            "pmf csv has {} columns, expected {}",
            headers.len(),
            d + 2
        )));
    }
    let mut weights = vec![0.0; n];
    let mut x = vec![0 as Symbol; d];
    for rec in r.records() {
        let rec = rec?;
        for (k, slot) in x.iter_mut().enumerate() {
            *slot = parse_field(&rec, k + 1)?;
        }
        if !space.contains(&x) {
            return Err(Error::InvalidConfig(format!("pmf csv state {x:?} outside {space}")));
        }
        let weight: f64 = parse_field(&rec, d + 1)?;
        weights[space.index_of(&x)] += weight;
    }
    Pmf::new(space, weights)
}

/// Writes `chain_id,d_0,..,d_{D-1}` rows.
pub fn write_samples_csv<W: Write>(batch: &SampleBatch, out: W) -> Result<()> {
    let d = batch.dims();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["chain_id".to_string()];
    header.extend((0..d).map(|k| format!("d_{k}")));
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(d + 1);
    for (i, x) in batch.iter().enumerate() {
        record.clear();
        record.push(i.to_string());
        record.extend(x.iter().map(|s| s.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a batch written by [`write_samples_csv`]; the batch time is 1.
pub fn read_samples_csv<R: Read>(input: R) -> Result<SampleBatch> {
    let mut r = csv::Reader::from_reader(input);
    let cols = r.headers()?.len();
    if cols < 2 {
        return Err(Error::InvalidConfig("sample csv needs chain_id and at least one coordinate".into()));
    }
    let d = cols - 1;
    let mut states = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        for k in 0..d {
            states.push(parse_field::<Symbol>(&rec, k + 1)?);
        }
    }
    SampleBatch::new(d, states, 1.0)
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    let raw = rec.get(i).ok_or_else(|| Error::InvalidConfig(format!("missing csv column {i}")))?;
    raw.trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("cannot parse csv field '{raw}'")))
}

/// A grayscale image with values in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Heatmap of a 2-D pmf over the data symbols: row index is coordinate 0,
    /// column index coordinate 1. Values are divided by the maximum.
    pub fn from_pmf(pmf: &Pmf) -> Result<Self> {
        let space = pmf.space();
        if space.dims() != 2 {
            return Err(Error::Precondition("heatmaps need a 2-D space".into()));
        }
        let symbols: Vec<Symbol> = space.data_symbols().collect();
        let side = symbols.len();
        let mut values = Vec::with_capacity(side * side);
        for &a in &symbols {
            for &b in &symbols {
                values.push(pmf.prob(&[a, b]));
            }
        }
        let max = values.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            values.iter_mut().for_each(|v| *v /= max);
        }
        Ok(Self { width: side, height: side, values })
    }

    /// Arranges equally sized panels in a grid separated by `gap` pixels of
    /// full intensity.
    pub fn grid(rows: &[Vec<Heatmap>], gap: usize) -> Result<Self> {
        let first = rows
            .first()
            .and_then(|r| r.first())
            .ok_or_else(|| Error::Precondition("empty panel grid".into()))?;
        let (pw, ph) = (first.width, first.height);
        let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
        let width = ncols * pw + ncols.saturating_sub(1) * gap;
        let height = rows.len() * ph + rows.len().saturating_sub(1) * gap;
        let mut values = vec![1.0; width * height];
        for (ri, row) in rows.iter().enumerate() {
            for (ci, panel) in row.iter().enumerate() {
                if panel.width != pw || panel.height != ph {
                    return Err(Error::Precondition("panels differ in size".into()));
                }
                let (oy, ox) = (ri * (ph + gap), ci * (pw + gap));
                for y in 0..ph {
                    let dst = (oy + y) * width + ox;
                    values[dst..dst + pw].copy_from_slice(&panel.values[y * pw..(y + 1) * pw]);
                }
            }
            // Short rows are padded with blank (zero) panels.
            for ci in row.len()..ncols {
                let (oy, ox) = (ri * (ph + gap), ci * (pw + gap));
                for y in 0..ph {
                    let dst = (oy + y) * width + ox;
                    values[dst..dst + pw].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        Ok(Self { width, height, values })
    }

    /// Binary PGM (P5), 16-bit big-endian samples, maxval 65535.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P5\n{} {}\n65535\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.values.len() * 2);
        for &v in &self.values {
            let level = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            buf.extend_from_slice(&level.to_be_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }
}
