use std::io;

use super::ClassifierError;

/// Binary feature rows with 0/1 labels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub features: usize,
    pub rows: Vec<(Vec<u8>, u8)>,
}

impl Dataset {
    pub fn positives(&self) -> usize {
        self.rows.iter().filter(|(_, y)| *y == 1).count()
    }
}

fn parse_bit(s: &str, line: u64, column: &str) -> Result<u8, ClassifierError> {
    match s.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(ClassifierError::Malformed { line, message: format!("`{column}` is `{other}`, expected 0 or 1") }),
    }
}

/// Reads `feature_1..feature_F,label`. Feature columns are every column
/// except `label`, in file order.
pub fn read_training_csv<R: io::Read>(r: R) -> Result<Dataset, ClassifierError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let malformed = |line: u64, message: String| ClassifierError::Malformed { line, message };
    let headers = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(malformed(1, "empty file".into()));
    }
    let label_col =
        headers.iter().position(|h| h.trim() == "label").ok_or_else(|| malformed(1, "no `label` column".into()))?;
    let features = headers.len() - 1;
    if features == 0 {
        return Err(malformed(1, "no feature columns".into()));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            malformed(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let mut x = Vec::with_capacity(features);
        let mut y = 0;
        for (i, field) in record.iter().enumerate() {
            if i == label_col {
                y = parse_bit(field, line, "label")?;
            } else {
                x.push(parse_bit(field, line, &headers[i])?);
            }
        }
        rows.push((x, y));
    }
    if rows.is_empty() {
        return Err(malformed(1, "no data rows".into()));
    }
    Ok(Dataset { features, rows })
}

pub fn write_training_csv<W: io::Write>(w: W, data: &Dataset) -> Result<(), ClassifierError> {
    let mut out = csv::Writer::from_writer(w);
    let to_io = |e: csv::Error| ClassifierError::Io(io::Error::other(e));
    let mut header: Vec<String> = (1..=data.features).map(|i| format!("feature_{i}")).collect();
    header.push("label".into());
    out.write_record(&header).map_err(to_io)?;
    for (x, y) in &data.rows {
        let mut rec: Vec<&str> = x.iter().map(|v| if *v == 1 { "1" } else { "0" }).collect();
        rec.push(if *y == 1 { "1" } else { "0" });
        out.write_record(&rec).map_err(to_io)?;
    }
    out.flush()?;
    Ok(())
}
