//! CSV ingestion of price or return series.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ReturnSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Values are prices; returns are `ln P_t - ln P_{t-1}`.
    Prices,
    #[default]
    Returns,
}

impl std::str::FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prices" => Ok(Self::Prices),
            "returns" => Ok(Self::Returns),
            other => Err(Error::InvalidInput(format!(
                "mode must be 'prices' or 'returns', got '{other}'"
            ))),
        }
    }
}

/// Column selector: header name or 0-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Column {
    Index(usize),
    Name(String),
}

impl std::str::FromStr for Column {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => Column::Index(i),
            Err(_) => Column::Name(s.to_string()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSpec {
    pub path: PathBuf,
    /// Defaults to the first numeric column.
    pub column: Option<Column>,
    pub mode: InputMode,
    pub scale: f64,
}

impl IngestSpec {
    pub fn new(path: impl AsRef<Path>) -> Self {
        Self {
            path: path.as_ref().to_path_buf(),
            column: None,
            mode: InputMode::Returns,
            scale: 1.0,
        }
    }
}

pub fn load_series(spec: &IngestSpec) -> Result<ReturnSeries> {
    let file = std::fs::File::open(&spec.path)?;
    read_series(file, spec.column.as_ref(), spec.mode, spec.scale)
}

fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Parses a CSV stream. A first row whose selected cell is not numeric is
/// treated as a header; rows are read in file order.
pub fn read_series<R: Read>(
    reader: R,
    column: Option<&Column>,
    mode: InputMode,
    scale: f64,
) -> Result<ReturnSeries> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidInput(format!("scale must be positive, got {scale}")));
    }
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = Vec::new();
    for rec in csv.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(records.len() + 1, |p| p.line() as usize);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        records.push((line, rec));
    }
    let Some((_, first)) = records.first() else {
        return Err(Error::InvalidInput("input contains no rows".into()));
    };

    let first_numeric = |rec: &csv::StringRecord| rec.iter().position(|f| parse_number(f).is_some());
    let (index, has_header) = match column {
        Some(Column::Name(name)) => {
            let idx = first.iter().position(|f| f == name).ok_or_else(|| {
                Error::InvalidInput(format!("column '{name}' not found in the header"))
            })?;
            (idx, true)
        }
        Some(Column::Index(i)) => {
            let header = first.get(*i).is_some_and(|f| parse_number(f).is_none());
            (*i, header)
        }
        None => match first_numeric(first) {
            Some(i) => (i, false),
            None => {
                let second = records
                    .get(1)
                    .ok_or_else(|| Error::InvalidInput("input has a header but no data".into()))?;
                let i = first_numeric(&second.1).ok_or(Error::Parse {
                    line: second.0,
                    message: "no numeric column".into(),
                })?;
                (i, true)
            }
        },
    };

    let mut values = Vec::with_capacity(records.len());
    for (line, rec) in records.iter().skip(usize::from(has_header)) {
        let cell = rec.get(index).ok_or_else(|| Error::Parse {
            line: *line,
            message: format!("missing column {index}"),
        })?;
        let v = parse_number(cell).ok_or_else(|| Error::Parse {
            line: *line,
            message: format!("'{cell}' is not a finite number"),
        })?;
        if mode == InputMode::Prices && v <= 0.0 {
            return Err(Error::NonPositivePrice { line: *line, value: v });
        }
        values.push(v);
    }
    let returns: Vec<f64> = match mode {
        InputMode::Returns => values.iter().map(|v| v * scale).collect(),
        InputMode::Prices => {
            if values.len() < 2 {
                return Err(Error::InvalidInput("need at least two prices".into()));
            }
            values.windows(2).map(|w| scale * (w[1].ln() - w[0].ln())).collect()
        }
    };
    if returns.is_empty() {
        return Err(Error::InvalidInput("input contains no observations".into()));
    }
    ReturnSeries::new(returns)
}

/// Writes one column `x` of values.
pub fn write_series<W: std::io::Write>(writer: W, series: &ReturnSeries) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["x"]).map_err(csv_io)?;
    for v in series.values() {
        out.write_record([format!("{v:?}")]).map_err(csv_io)?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(s: &str, column: Option<Column>, mode: InputMode) -> Result<ReturnSeries> {
        read_series(s.as_bytes(), column.as_ref(), mode, 1.0)
    }

    #[test]
    fn returns_single_column() {
        let s = read("0.1\n-0.2\n0.3\n0.0\n0.5\n", None, InputMode::Returns).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.values()[1], -0.2);
    }

    #[test]
    fn prices_are_log_differenced() {
        let e = std::f64::consts::E;
        let text = format!("price\n1\n{e}\n{}\n", e * e);
        let s = read(&text, None, InputMode::Prices).unwrap();
        assert_eq!(s.len(), 2);
        assert!((s.values()[0] - 1.0).abs() < 1e-15);
        assert!((s.values()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn header_and_named_column() {
        let text = "date,close\n2020-01-01,1.0\n2020-01-02,2.0\n2020-01-03,4.0\n";
        let s = read(text, Some(Column::Name("close".into())), InputMode::Prices).unwrap();
        assert_eq!(s.len(), 2);
        let d = read(text, None, InputMode::Prices).unwrap();
        assert_eq!(s, d);
    }

    #[test]
    fn errors_carry_lines() {
        match read("x\n1\n\n2\nNaN\n", None, InputMode::Returns) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        match read("1\n2\n-3\n", None, InputMode::Prices) {
            Err(Error::NonPositivePrice { line, value }) => {
                assert_eq!(line, 3);
                assert_eq!(value, -3.0);
            }
            other => panic!("{other:?}"),
        }
        assert!(read("", None, InputMode::Returns).is_err());
    }

    #[test]
    fn scale_and_round_trip() {
        let s = read_series("0.01\n-0.02\n".as_bytes(), None, InputMode::Returns, 100.0).unwrap();
        assert_eq!(s.values(), &[1.0, -2.0]);
        let mut buf = Vec::new();
        write_series(&mut buf, &s).unwrap();
        let back = read(std::str::from_utf8(&buf).unwrap(), None, InputMode::Returns).unwrap();
        assert_eq!(back, s);
    }
}
