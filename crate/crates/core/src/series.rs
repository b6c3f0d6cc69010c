//! Fixed-step multivariate series keyed by node name, with CSV import and
//! export.
//!
//! The CSV layout is one `time` column followed by one column per node.
//! Lines starting with `#` before the header carry `key=value` metadata.
//! Floats are written in shortest round-trip form, so export followed by
//! import reproduces values exactly.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use crate::graph::NodeId;

#[derive(Debug, thiserror::Error)]
pub enum SeriesError {
    #[error("duplicate column {0}")]
    DuplicateColumn(NodeId),
    #[error("unknown column {0}")]
    UnknownColumn(NodeId),
    #[error("row has {got} values, series has {want} columns")]
    RowShape { got: usize, want: usize },
    #[error("non-finite value for {node} at step {step}")]
    NonFinite { node: NodeId, step: usize },
    #[error("csv line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("time column must increase by 1 per row (line {line})")]
    NonContiguousTime { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Column-major series. All columns have equal length and finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    names: Vec<NodeId>,
    index: BTreeMap<NodeId, usize>,
    columns: Vec<Vec<f64>>,
}

impl Series {
    pub fn new(names: impl IntoIterator<Item = impl Into<NodeId>>) -> Result<Self, SeriesError> {
        let names: Vec<NodeId> = names.into_iter().map(Into::into).collect();
        let mut index = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(SeriesError::DuplicateColumn(n.clone()));
            }
        }
        let columns = vec![Vec::new(); names.len()];
        Ok(Series { names, index, columns })
    }

    pub fn names(&self) -> &[NodeId] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.columns.first().map(Vec::len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_column(&self, node: &NodeId) -> bool {
        self.index.contains_key(node)
    }

    pub fn column(&self, node: &NodeId) -> Result<&[f64], SeriesError> {
        self.index
            .get(node)
            .map(|&i| self.columns[i].as_slice())
            .ok_or_else(|| SeriesError::UnknownColumn(node.clone()))
    }

    pub fn value(&self, node: &NodeId, step: usize) -> Result<f64, SeriesError> {
        Ok(self.column(node)?[step])
    }

    /// Append one row; values are given in column order.
    pub fn push_row(&mut self, row: &[f64]) -> Result<(), SeriesError> {
        if row.len() != self.names.len() {
            return Err(SeriesError::RowShape { got: row.len(), want: self.names.len() });
        }
        for (i, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(SeriesError::NonFinite {
                    node: self.names[i].clone(),
                    step: self.len(),
                });
            }
        }
        for (col, &v) in self.columns.iter_mut().zip(row) {
            col.push(v);
        }
        Ok(())
    }

    /// Copy of the rows in `[from, to)` keeping all columns.
    pub fn slice(&self, from: usize, to: usize) -> Series {
        let columns = self.columns.iter().map(|c| c[from..to].to_vec()).collect();
        Series { names: self.names.clone(), index: self.index.clone(), columns }
    }

    pub fn write_csv<W: Write>(
        &self,
        start_step: usize,
        metadata: &BTreeMap<String, String>,
        mut out: W,
    ) -> Result<(), SeriesError> {
        for (k, v) in metadata {
            writeln!(out, "# {k}={v}")?;
        }
        let header: Vec<&str> =
            std::iter::once("time").chain(self.names.iter().map(NodeId::as_str)).collect();
        writeln!(out, "{}", header.join(","))?;
        let mut line = String::new();
        for step in 0..self.len() {
            line.clear();
            line.push_str(&(start_step + step).to_string());
            for col in &self.columns {
                line.push(',');
                line.push_str(&format!("{}", col[step]));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Read a series written by [`Series::write_csv`]. Returns the series,
    /// the step of its first row and the metadata comments.
    pub fn read_csv<R: Read>(
        input: R,
    ) -> Result<(Series, usize, BTreeMap<String, String>), SeriesError> {
        let reader = BufReader::new(input);
        let mut metadata = BTreeMap::new();
        let mut header: Option<Vec<String>> = None;
        let mut series: Option<Series> = None;
        let mut start_step = 0usize;
        let mut expect_step = 0usize;
        let mut row: Vec<f64> = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(comment) = trimmed.strip_prefix('#') {
                if header.is_none() {
                    if let Some((k, v)) = comment.trim().split_once('=') {
                        metadata.insert(k.trim().to_owned(), v.trim().to_owned());
                    }
                }
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').collect();
            match &mut series {
                None => {
                    if fields.first() != Some(&"time") {
                        return Err(SeriesError::Format {
                            line: lineno,
                            message: "header must start with `time`".into(),
                        });
                    }
                    header = Some(fields.iter().map(|s| s.to_string()).collect());
                    series = Some(Series::new(fields[1..].iter().copied())?);
                }
                Some(s) => {
                    let want = header.as_ref().unwrap().len();
                    if fields.len() != want {
                        return Err(SeriesError::Format {
                            line: lineno,
                            message: format!("expected {want} fields, got {}", fields.len()),
                        });
                    }
                    let step: usize = fields[0].parse().map_err(|_| SeriesError::Format {
                        line: lineno,
                        message: format!("bad time value {:?}", fields[0]),
                    })?;
                    if s.is_empty() {
                        start_step = step;
                        expect_step = step;
                    }
                    if step != expect_step {
                        return Err(SeriesError::NonContiguousTime { line: lineno });
                    }
                    expect_step += 1;
                    row.clear();
                    for f in &fields[1..] {
                        row.push(f.parse().map_err(|_| SeriesError::Format {
                            line: lineno,
                            message: format!("bad float {f:?}"),
                        })?);
                    }
                    s.push_row(&row)?;
                }
            }
        }
        let series = series.ok_or(SeriesError::Format {
            line: 0,
            message: "missing header row".into(),
        })?;
        Ok((series, start_step, metadata))
    }
}
