//! Delimited-text persistence of joint datasets.
//!
//! Header `d1..dm,x1..xn,y`; values printed with 17 significant digits so
//! a save/load round trip is bit-exact.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scenario::Dataset;

pub fn header(m: usize, n: usize) -> Vec<String> {
    (1..=m)
        .map(|i| format!("d{i}"))
        .chain((1..=n).map(|i| format!("x{i}")))
        .chain(std::iter::once("y".to_string()))
        .collect()
}

pub fn save_dataset(table: &Dataset, path: &Path) -> Result<()> {
    let m = table.d.first().map_or(table.d_names.len(), Vec::len);
    let n = table.x.first().map_or(table.x_names.len(), Vec::len);
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header(m, n).join(","))?;
    let mut line = String::new();
    for j in 0..table.len() {
        line.clear();
        for v in table.d[j].iter().chain(&table.x[j]).chain(std::iter::once(&table.y[j])) {
            if !line.is_empty() {
                line.push(',');
            }
            line.push_str(&format!("{v:.16e}"));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(csv_err)?;
    let hdr: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let m = hdr.iter().filter(|h| is_indexed(h, 'd')).count();
    let n = hdr.iter().filter(|h| is_indexed(h, 'x')).count();
    let expected = header(m, n);
    let mut cols = Vec::with_capacity(expected.len());
    for name in &expected {
        cols.push(hdr.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.clone()))?);
    }
    if m == 0 {
        return Err(Error::MissingColumn("d1".into()));
    }
    let mut out =
        Dataset { d_names: expected[..m].to_vec(), x_names: expected[m..m + n].to_vec(), ..Default::default() };
    for (k, rec) in rdr.records().enumerate() {
        let line = k as u64 + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let mut vals = Vec::with_capacity(cols.len());
        for (&c, name) in cols.iter().zip(&expected) {
            let s = rec.get(c).ok_or_else(|| Error::Parse { line, msg: format!("missing field {name}") })?;
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Parse { line, msg: format!("column {name}: cannot parse `{s}`") })?;
            vals.push(v);
        }
        out.d.push(vals[..m].to_vec());
        out.x.push(vals[m..m + n].to_vec());
        out.y.push(vals[m + n]);
    }
    Ok(out)
}

fn is_indexed(h: &str, prefix: char) -> bool {
    h.strip_prefix(prefix).is_some_and(|r| !r.is_empty() && r.bytes().all(|b| b.is_ascii_digit()))
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        k => Error::Parse { line, msg: format!("{k:?}") },
    }
}
