//! Time-series files: a header `t,w1..wL,r1..rL`, then one row per sample.
//! Values are written in the shortest form that parses back to the same
//! `f64`, so a write/read cycle is exact.

use std::path::Path;

use nalgebra::DMatrix;
use netident::network::DataRecord;

use crate::CliError;

pub fn header(nodes: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain((1..=nodes).map(|j| format!("w{j}")))
        .chain((1..=nodes).map(|j| format!("r{j}")))
        .collect()
}

pub fn write_data_csv(path: &Path, data: &DataRecord) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    w.write_record(header(data.nodes())).map_err(io)?;
    for t in 0..data.samples() {
        let row: Vec<String> = std::iter::once(t.to_string())
            .chain((0..data.nodes()).map(|j| data.w[(t, j)].to_string()))
            .chain((0..data.nodes()).map(|j| data.r[(t, j)].to_string()))
            .collect();
        w.write_record(row).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads a data file. The seed is not part of the file and is set to 0.
pub fn read_data_csv(path: &Path) -> Result<DataRecord, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let parse = |msg: String| CliError::Parse(format!("{}: {msg}", path.display()));
    let head: Vec<String> = r
        .headers()
        .map_err(|e| parse(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if head.len() < 3 || (head.len() - 1) % 2 != 0 {
        return Err(parse(format!("header has {} columns, expected t,w1..wL,r1..rL", head.len())));
    }
    let nodes = (head.len() - 1) / 2;
    if head != header(nodes) {
        return Err(parse(format!("header `{}` is not t,w1..w{nodes},r1..r{nodes}", head.join(","))));
    }
    let mut w = Vec::new();
    let mut rr = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse(format!("line {line}: {e}")))?;
        let t: usize = rec[0]
            .parse()
            .map_err(|_| parse(format!("line {line}: bad sample index `{}`", &rec[0])))?;
        if t != i {
            return Err(parse(format!("line {line}: sample index {t}, expected {i}")));
        }
        for c in 1..rec.len() {
            let x: f64 = rec[c]
                .parse()
                .map_err(|_| parse(format!("line {line}, column {}: bad number `{}`", head[c], &rec[c])))?;
            if c <= nodes { w.push(x) } else { rr.push(x) }
        }
    }
    let n = w.len() / nodes;
    if n == 0 {
        return Err(parse("no samples".into()));
    }
    Ok(DataRecord {
        w: DMatrix::from_row_slice(n, nodes, &w),
        r: DMatrix::from_row_slice(n, nodes, &rr),
        seed: 0,
    })
}
