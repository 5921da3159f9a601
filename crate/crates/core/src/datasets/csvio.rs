use std::io::{Read, Write};
use std::path::Path;

use super::LabeledDataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const LABEL_COLUMN: &str = "y";
pub const CLUSTER_COLUMN: &str = "cluster";

/// Writes `x_0..x_{d-1}, y, <attributes...>[, cluster]` with 17 significant
/// digits per input value.
pub fn write_csv<W: Write>(ds: &LabeledDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let d = ds.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("x_{j}")).collect();
    header.push(LABEL_COLUMN.into());
    header.extend(ds.attributes().iter().map(|a| a.name.clone()));
    if ds.clusters().is_some() {
        header.push(CLUSTER_COLUMN.into());
    }
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut record: Vec<String> = ds.inputs().row(i).iter().map(|v| format!("{v:.16e}")).collect();
        record.push(ds.labels()[i].to_string());
        record.extend(ds.attributes().iter().map(|a| a.values[i].to_string()));
        if let Some(c) = ds.clusters() {
            record.push(c[i].to_string());
        }
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Parses the layout written by [`write_csv`]. `source` names the input in
/// error messages.
pub fn read_csv<R: Read>(reader: R, source: &str) -> Result<LabeledDataset> {
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: source.to_string(),
        line,
        detail,
    };
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = r.headers()?.clone();
    let mut d = 0;
    while header.get(d) == Some(format!("x_{d}").as_str()) {
        d += 1;
    }
    if header.get(d) != Some(LABEL_COLUMN) {
        return Err(parse_err(1, format!("expected x_0..x_k then `{LABEL_COLUMN}`")));
    }
    let extra: Vec<&str> = header.iter().skip(d + 1).collect();
    let cluster_col = extra.iter().position(|&c| c == CLUSTER_COLUMN);
    if let Some(dup) = extra.iter().enumerate().find(|(i, c)| extra[..*i].contains(c)) {
        return Err(parse_err(1, format!("duplicate column `{}`", dup.1)));
    }

    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut columns: Vec<Vec<usize>> = vec![Vec::new(); extra.len()];
    for (row, record) in r.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        if record.len() != header.len() {
            return Err(parse_err(
                line,
                format!("{} fields, header has {}", record.len(), header.len()),
            ));
        }
        for j in 0..d {
            let v: f64 = record[j]
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("x_{j}: `{}` is not a number", &record[j])))?;
            inputs.push(v);
        }
        let int = |j: usize| -> Result<usize> {
            record[j]
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("{}: `{}` is not a label", &header[j], &record[j])))
        };
        labels.push(int(d)?);
        for (k, col) in columns.iter_mut().enumerate() {
            col.push(int(d + 1 + k)?);
        }
    }

    let n = labels.len();
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    let mut ds = LabeledDataset::new(Tensor::matrix(n, d, inputs)?, labels, classes)?;
    for (k, (name, values)) in extra.iter().zip(columns).enumerate() {
        if Some(k) == cluster_col {
            ds.set_clusters(Some(values))?;
        } else {
            let card = values.iter().max().map_or(2, |m| (m + 1).max(2));
            ds = ds.with_attribute(name, values, card)?;
        }
    }
    Ok(ds)
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(ds, std::io::BufWriter::new(file))
}

/// Loads a dataset and checks that every attribute in `required` is present.
pub fn load_dataset(path: &Path, required: &[&str]) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let ds = read_csv(std::io::BufReader::new(file), &path.display().to_string())?;
    for name in required {
        ds.attribute(name)?;
    }
    Ok(ds)
}
