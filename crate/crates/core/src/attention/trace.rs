use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use crate::error::{ChaiError, Result};

pub const TRACE_CSV_HEADER: &str = "layer,head,step,position,probability";

/// Attention probability rows captured while decoding, keyed by
/// `(layer, head, step)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionTrace {
    num_layers: usize,
    num_heads: usize,
    rows: BTreeMap<(usize, usize, usize), Vec<f32>>,
    steps: BTreeSet<usize>,
}

impl AttentionTrace {
    pub fn new(num_layers: usize, num_heads: usize) -> Self {
        AttentionTrace {
            num_layers,
            num_heads,
            rows: BTreeMap::new(),
            steps: BTreeSet::new(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn record(&mut self, layer: usize, head: usize, step: usize, row: Vec<f32>) {
        debug_assert!(layer < self.num_layers && head < self.num_heads);
        self.steps.insert(step);
        self.rows.insert((layer, head, step), row);
    }

    pub fn row(&self, layer: usize, head: usize, step: usize) -> Option<&[f32]> {
        self.rows.get(&(layer, head, step)).map(Vec::as_slice)
    }

    /// Steps with at least one recorded row, ascending.
    pub fn steps(&self) -> Vec<usize> {
        self.steps.iter().copied().collect()
    }

    pub fn first_step(&self) -> Option<usize> {
        self.steps.first().copied()
    }

    pub fn last_step(&self) -> Option<usize> {
        self.steps.last().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// True if every head of `layer` has a row for `step`.
    pub fn covers(&self, layer: usize, step: usize) -> bool {
        (0..self.num_heads).all(|h| self.rows.contains_key(&(layer, h, step)))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{TRACE_CSV_HEADER}")?;
        for (&(layer, head, step), row) in &self.rows {
            for (pos, p) in row.iter().enumerate() {
                writeln!(out, "{layer},{head},{step},{pos},{p}")?;
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec");
        String::from_utf8(buf).expect("ascii")
    }

    /// Parses the CSV written by [`write_csv`](Self::write_csv). Layer and
    /// head counts are inferred from the largest indices present.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| ChaiError::Parse("empty trace file".into()))?
            .map_err(|e| ChaiError::Parse(e.to_string()))?;
        if header.trim() != TRACE_CSV_HEADER {
            return Err(ChaiError::Parse(format!(
                "unexpected trace header {header:?}, want {TRACE_CSV_HEADER:?}"
            )));
        }
        let mut cells: BTreeMap<(usize, usize, usize), Vec<(usize, f32)>> = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| ChaiError::Parse(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || ChaiError::Parse(format!("trace line {}: {line:?}", i + 2));
            let mut f = line.split(',');
            let mut idx = || -> Result<usize> {
                f.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())
            };
            let (layer, head, step, pos) = (idx()?, idx()?, idx()?, idx()?);
            let p: f32 = f
                .next()
                .ok_or_else(bad)?
                .trim()
                .parse()
                .map_err(|_| bad())?;
            cells.entry((layer, head, step)).or_default().push((pos, p));
        }
        let num_layers = cells.keys().map(|k| k.0 + 1).max().unwrap_or(0);
        let num_heads = cells.keys().map(|k| k.1 + 1).max().unwrap_or(0);
        let mut trace = AttentionTrace::new(num_layers, num_heads);
        for (key, mut entries) in cells {
            entries.sort_by_key(|e| e.0);
            if entries.iter().enumerate().any(|(i, e)| e.0 != i) {
                return Err(ChaiError::Parse(format!(
                    "layer {} head {} step {}: positions are not contiguous from 0",
                    key.0, key.1, key.2
                )));
            }
            trace.record(key.0, key.1, key.2, entries.into_iter().map(|e| e.1).collect());
        }
        Ok(trace)
    }
}

/// Where [`mha_forward`](super::mha_forward) writes probability rows.
///
/// Query row `i` of a forward call is recorded as step `first_step + i`. With
/// `last_only`, only the final query row is recorded, as `first_step`.
#[derive(Debug)]
pub struct TraceTarget<'a> {
    pub trace: &'a mut AttentionTrace,
    pub first_step: usize,
    pub last_only: bool,
}

impl TraceTarget<'_> {
    pub(crate) fn step_of_row(&self, row: usize, rows: usize) -> Option<usize> {
        if self.last_only {
            (row + 1 == rows).then_some(self.first_step)
        } else {
            Some(self.first_step + row)
        }
    }
}
