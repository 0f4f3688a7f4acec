//! Per-(layer, head) attention score rows recorded during generation.
//!
//! A row holds one score per attendable key position, starting at position 0.
//! Keys missing from a compressed cache carry score 0, so rows from a
//! reference run and a compressed run line up position by position.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Column header of the trace CSV.
pub const TRACE_CSV_HEADER: [&str; 5] = ["layer", "head", "query_pos", "key_pos", "score"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub query_pos: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    layers: usize,
    heads: usize,
    /// Indexed by `layer * heads + head`; each list ascends in `query_pos`.
    rows: Vec<Vec<TraceRow>>,
}

impl AttentionTrace {
    pub fn new(layers: usize, heads: usize) -> Self {
        Self {
            layers,
            heads,
            rows: vec![Vec::new(); layers * heads],
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn is_empty(&self) -> bool {
        self.rows.iter().all(Vec::is_empty)
    }

    /// Total number of rows across all heads.
    pub fn len(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    fn slot(&self, layer: usize, head: usize) -> Result<usize> {
        ensure!(
            layer < self.layers && head < self.heads,
            "no trace for layer {layer}, head {head}"
        );
        Ok(layer * self.heads + head)
    }

    /// Append a row; query positions must ascend per head and scores sum to 1.
    pub fn push(
        &mut self,
        layer: usize,
        head: usize,
        query_pos: usize,
        scores: Vec<f64>,
    ) -> Result<()> {
        let slot = self.slot(layer, head)?;
        ensure!(!scores.is_empty(), "empty score row at query {query_pos}");
        ensure!(
            scores.iter().all(|s| s.is_finite() && *s >= 0.0),
            "score row at query {query_pos} has a negative or non-finite entry"
        );
        let total: f64 = scores.iter().sum();
        ensure!(
            (total - 1.0).abs() <= 1e-9,
            "score row at query {query_pos} sums to {total}"
        );
        if let Some(last) = self.rows[slot].last() {
            ensure!(
                query_pos > last.query_pos,
                "query position {query_pos} not after {}",
                last.query_pos
            );
        }
        self.rows[slot].push(TraceRow { query_pos, scores });
        Ok(())
    }

    pub fn rows(&self, layer: usize, head: usize) -> Result<&[TraceRow]> {
        Ok(&self.rows[self.slot(layer, head)?])
    }

    pub fn row(&self, layer: usize, head: usize, query_pos: usize) -> Result<&[f64]> {
        let rows = self.rows(layer, head)?;
        rows.binary_search_by_key(&query_pos, |r| r.query_pos)
            .map(|i| rows[i].scores.as_slice())
            .map_err(|_| {
                Error::Contract(format!(
                    "no recorded row for layer {layer}, head {head}, query {query_pos}"
                ))
            })
    }

    pub fn query_positions(&self, layer: usize, head: usize) -> Result<Vec<usize>> {
        Ok(self
            .rows(layer, head)?
            .iter()
            .map(|r| r.query_pos)
            .collect())
    }

    /// Write as CSV rows `layer,head,query_pos,key_pos,score`, preceded by
    /// optional `#` comment lines.
    pub fn write_csv<W: Write>(&self, mut w: W, comments: &[String]) -> Result<()> {
        for c in comments {
            writeln!(w, "# {c}")?;
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(TRACE_CSV_HEADER)?;
        for layer in 0..self.layers {
            for head in 0..self.heads {
                for row in &self.rows[layer * self.heads + head] {
                    for (k, s) in row.scores.iter().enumerate() {
                        out.write_record([
                            layer.to_string(),
                            head.to_string(),
                            row.query_pos.to_string(),
                            k.to_string(),
                            s.to_string(),
                        ])?;
                    }
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Parse the CSV produced by [`write_csv`](Self::write_csv). Lines starting
    /// with `#` are skipped. Each (layer, head, query) row must list key
    /// positions `0, 1, 2, ...` in order and sum to 1 within 1e-6.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(r);
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != TRACE_CSV_HEADER {
            return Err(Error::Parse {
                line: headers.position().map_or(1, |p| p.line() as usize),
                message: format!("expected header {}", TRACE_CSV_HEADER.join(",")),
            });
        }
        // (layer, head, query) -> (scores, line of first record)
        let mut grouped: BTreeMap<(usize, usize, usize), (Vec<f64>, usize)> = BTreeMap::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let bad = |message: String| Error::Parse { line, message };
            if rec.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", rec.len())));
            }
            let int = |i: usize| {
                rec[i]
                    .parse::<usize>()
                    .map_err(|e| bad(format!("field {}: {e}", TRACE_CSV_HEADER[i])))
            };
            let (layer, head, query, key) = (int(0)?, int(1)?, int(2)?, int(3)?);
            let score: f64 = rec[4]
                .parse()
                .map_err(|e| bad(format!("field score: {e}")))?;
            if !score.is_finite() || score < 0.0 {
                return Err(bad(format!("score {score} must be finite and nonnegative")));
            }
            let entry = grouped
                .entry((layer, head, query))
                .or_insert_with(|| (Vec::new(), line));
            if key != entry.0.len() {
                return Err(bad(format!(
                    "expected key_pos {} for query {query}, found {key}",
                    entry.0.len()
                )));
            }
            entry.0.push(score);
        }
        let layers = grouped.keys().map(|k| k.0 + 1).max().unwrap_or(0);
        let heads = grouped.keys().map(|k| k.1 + 1).max().unwrap_or(0);
        let mut trace = AttentionTrace::new(layers, heads);
        for ((layer, head, query), (scores, line)) in grouped {
            let total: f64 = scores.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::Parse {
                    line,
                    message: format!("row for query {query} sums to {total}"),
                });
            }
            let slot = layer * heads + head;
            trace.rows[slot].push(TraceRow {
                query_pos: query,
                scores,
            });
        }
        Ok(trace)
    }
}
