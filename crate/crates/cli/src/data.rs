//! Tabular data: CSV ingestion with type inference, frequency expansion and
//! the embedded chromosome-aberration table.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("CSV parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("CSV input has no header row")]
    Empty,
    #[error("row {row}, column {column:?}: {message}")]
    Value { row: usize, column: String, message: String },
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("column {column:?} must hold non-negative integers (row {row}: {value})")]
    NegativeResponse { column: String, row: usize, value: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Integer(Vec<i64>),
    Real(Vec<f64>),
    Categorical(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Integer(v) => v.len(),
            Column::Real(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Numeric view, `None` for categorical columns.
    pub fn as_f64(&self) -> Option<Vec<f64>> {
        match self {
            Column::Integer(v) => Some(v.iter().map(|&x| x as f64).collect()),
            Column::Real(v) => Some(v.clone()),
            Column::Categorical(_) => None,
        }
    }

    /// Sorted distinct levels of a categorical column.
    pub fn levels(&self) -> Option<Vec<String>> {
        match self {
            Column::Categorical(v) => Some(v.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()),
            _ => None,
        }
    }

    fn repeat(&self, counts: &[u64]) -> Column {
        fn rep<T: Clone>(v: &[T], counts: &[u64]) -> Vec<T> {
            v.iter()
                .zip(counts)
                .flat_map(|(x, &c)| std::iter::repeat_n(x.clone(), c as usize))
                .collect()
        }
        match self {
            Column::Integer(v) => Column::Integer(rep(v, counts)),
            Column::Real(v) => Column::Real(rep(v, counts)),
            Column::Categorical(v) => Column::Categorical(rep(v, counts)),
        }
    }
}

/// Parsing overrides.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SchemaHints {
    /// Columns read as categorical even when every value is numeric.
    pub categorical: Vec<String>,
    /// Frequency column: each row is repeated this many times and the column
    /// dropped. Defaults to a column named `count` when present.
    pub count_column: Option<String>,
    /// Columns that must hold non-negative integers.
    pub responses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTable {
    names: Vec<String>,
    columns: Vec<Column>,
    rows: usize,
}

impl DatasetTable {
    pub fn new(names: Vec<String>, columns: Vec<Column>) -> Result<Self, DataError> {
        let rows = columns.first().map_or(0, Column::len);
        if names.len() != columns.len() {
            return Err(DataError::Value {
                row: 0,
                column: String::new(),
                message: "names and columns differ in number".into(),
            });
        }
        if let Some((name, _)) = names.iter().zip(&columns).find(|(_, c)| c.len() != rows) {
            return Err(DataError::Value {
                row: 0,
                column: name.clone(),
                message: "column length differs from the first column".into(),
            });
        }
        Ok(Self { names, columns, rows })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn column(&self, name: &str) -> Result<&Column, DataError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.columns[i])
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))
    }

    /// Non-negative integer view of a column.
    pub fn counts(&self, name: &str) -> Result<Vec<u64>, DataError> {
        let bad = |row: usize, value: String| DataError::NegativeResponse {
            column: name.to_string(),
            row: row + 1,
            value,
        };
        match self.column(name)? {
            Column::Integer(v) => v
                .iter()
                .enumerate()
                .map(|(i, &x)| u64::try_from(x).map_err(|_| bad(i, x.to_string())))
                .collect(),
            Column::Real(v) => v
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    if x >= 0.0 && x.fract() == 0.0 && x < 2f64.powi(53) {
                        Ok(x as u64)
                    } else {
                        Err(bad(i, x.to_string()))
                    }
                })
                .collect(),
            Column::Categorical(v) => Err(bad(0, v.first().cloned().unwrap_or_default())),
        }
    }

    /// Repeat each row by the counts in `name` and drop that column.
    pub fn expand_frequencies(&self, name: &str) -> Result<DatasetTable, DataError> {
        let counts = self.counts(name)?;
        let keep: Vec<usize> = (0..self.names.len()).filter(|&i| self.names[i] != name).collect();
        DatasetTable::new(
            keep.iter().map(|&i| self.names[i].clone()).collect(),
            keep.iter().map(|&i| self.columns[i].repeat(&counts)).collect(),
        )
    }

    /// CSV text with a header row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.names).expect("in-memory write");
        for r in 0..self.rows {
            let record: Vec<String> = self
                .columns
                .iter()
                .map(|c| match c {
                    Column::Integer(v) => v[r].to_string(),
                    Column::Real(v) => v[r].to_string(),
                    Column::Categorical(v) => v[r].clone(),
                })
                .collect();
            w.write_record(&record).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

fn infer(name: &str, raw: Vec<String>, hints: &SchemaHints) -> Result<Column, DataError> {
    if hints.categorical.iter().any(|c| c == name) {
        return Ok(Column::Categorical(raw));
    }
    if let Ok(v) = raw.iter().map(|s| s.trim().parse::<i64>()).collect::<Result<Vec<_>, _>>() {
        return Ok(Column::Integer(v));
    }
    let reals: Vec<Option<f64>> = raw.iter().map(|s| s.trim().parse::<f64>().ok().filter(|x| x.is_finite())).collect();
    let numeric = reals.iter().filter(|r| r.is_some()).count();
    if numeric == raw.len() {
        return Ok(Column::Real(reals.into_iter().map(|r| r.unwrap_or_default()).collect()));
    }
    if numeric > 0 && hints.responses.iter().any(|c| c == name) {
        let row = reals.iter().position(|r| r.is_none()).unwrap_or(0);
        return Err(DataError::Value {
            row: row + 1,
            column: name.to_string(),
            message: format!("{:?} is not a number", raw[row]),
        });
    }
    Ok(Column::Categorical(raw))
}

/// Parse CSV text from any reader.
pub fn parse_csv<R: Read>(reader: R, hints: &SchemaHints) -> Result<DatasetTable, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let parse_err = |e: csv::Error| DataError::Parse {
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    };
    let names: Vec<String> = rdr.headers().map_err(parse_err)?.iter().map(|h| h.trim().to_string()).collect();
    if names.is_empty() || names.iter().all(String::is_empty) {
        return Err(DataError::Empty);
    }
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); names.len()];
    for record in rdr.records() {
        let record = record.map_err(parse_err)?;
        for (col, field) in raw.iter_mut().zip(record.iter()) {
            col.push(field.to_string());
        }
    }
    let columns = names
        .iter()
        .zip(raw)
        .map(|(n, r)| infer(n, r, hints))
        .collect::<Result<Vec<_>, _>>()?;
    let table = DatasetTable::new(names, columns)?;
    for r in &hints.responses {
        table.counts(r)?;
    }
    let count = hints
        .count_column
        .clone()
        .or_else(|| table.names().iter().any(|n| n == "count").then(|| "count".to_string()));
    match count {
        Some(c) => table.expand_frequencies(&c),
        None => Ok(table),
    }
}

pub fn load_csv(path: &Path, hints: &SchemaHints) -> Result<DatasetTable, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv(file, hints)
}

/// Dicentric and centric-ring counts per cell after neutron irradiation:
/// frequency of each count `y` at each dose (Gy).
const DICENTRICS: [(f64, [u64; 8]); 5] = [
    (0.1, [2281, 130, 21, 1, 0, 0, 0, 0]),
    (0.3, [847, 127, 19, 6, 1, 0, 0, 0]),
    (0.5, [567, 165, 49, 16, 2, 0, 0, 0]),
    (0.7, [356, 167, 62, 9, 5, 1, 0, 0]),
    (1.0, [169, 131, 72, 18, 9, 0, 0, 1]),
];

pub const EMBEDDED_DATASETS: [&str; 1] = ["dicentrics"];

/// The embedded table as `dose, y, count` triples.
pub fn dicentrics_table() -> DatasetTable {
    let mut dose = Vec::new();
    let mut y = Vec::new();
    let mut count = Vec::new();
    for (d, freq) in DICENTRICS {
        for (k, &c) in freq.iter().enumerate() {
            dose.push(d);
            y.push(k as i64);
            count.push(c as i64);
        }
    }
    DatasetTable::new(
        vec!["dose".into(), "y".into(), "count".into()],
        vec![Column::Real(dose), Column::Integer(y), Column::Integer(count)],
    )
    .expect("rectangular")
}

/// One row per cell.
pub fn dicentrics() -> DatasetTable {
    dicentrics_table().expand_frequencies("count").expect("non-negative counts")
}

pub fn embedded(name: &str) -> Option<DatasetTable> {
    (name == "dicentrics").then(dicentrics_table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_table_expands_to_all_cells() {
        let t = dicentrics_table();
        assert_eq!(t.rows(), 40);
        let long = dicentrics();
        assert_eq!(long.rows(), 2433 + 1000 + 799 + 600 + 400);
        assert_eq!(long.names(), ["dose", "y"]);
    }

    #[test]
    fn csv_round_trip_of_embedded_table() {
        let text = dicentrics_table().to_csv();
        let back = parse_csv(text.as_bytes(), &SchemaHints::default()).unwrap();
        assert_eq!(back, dicentrics());
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(parse_csv("".as_bytes(), &SchemaHints::default()), Err(DataError::Empty)));
    }

    #[test]
    fn unit_counts_are_identity() {
        let plain = parse_csv("x,y\n1.5,2\n2.5,0\n".as_bytes(), &SchemaHints::default()).unwrap();
        let weighted = parse_csv("x,y,count\n1.5,2,1\n2.5,0,1\n".as_bytes(), &SchemaHints::default()).unwrap();
        assert_eq!(plain, weighted);
    }

    #[test]
    fn type_inference_and_hints() {
        let t = parse_csv("a,b,c\n1,x,2.5\n2,y,3\n".as_bytes(), &SchemaHints::default()).unwrap();
        assert!(matches!(t.column("a").unwrap(), Column::Integer(_)));
        assert!(matches!(t.column("b").unwrap(), Column::Categorical(_)));
        assert!(matches!(t.column("c").unwrap(), Column::Real(_)));
        let hints = SchemaHints {
            categorical: vec!["a".into()],
            ..Default::default()
        };
        let t = parse_csv("a\n2\n1\n".as_bytes(), &hints).unwrap();
        assert_eq!(t.column("a").unwrap().levels().unwrap(), ["1", "2"]);
    }

    #[test]
    fn negative_response_rejected() {
        let hints = SchemaHints {
            responses: vec!["y".into()],
            ..Default::default()
        };
        assert!(matches!(
            parse_csv("y\n1\n-2\n".as_bytes(), &hints),
            Err(DataError::NegativeResponse { row: 2, .. })
        ));
        assert!(matches!(
            parse_csv("y\n1\nfoo\n".as_bytes(), &hints),
            Err(DataError::Value { row: 2, .. })
        ));
    }

    #[test]
    fn ragged_rows_report_position() {
        let err = parse_csv("a,b\n1,2\n3\n".as_bytes(), &SchemaHints::default()).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 3, .. }), "{err}");
    }
}
