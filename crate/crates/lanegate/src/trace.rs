//! JSON-lines rollout traces.
//!
//! One line per simulation step. Lines are emitted with serde_json's
//! shortest-round-trip float formatting and BTreeMap key ordering, so a
//! fixed-seed rollout reproduces a byte-identical file.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceVehicle {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub lane: usize,
    pub is_slow: bool,
}

/// Per-agent slice of one step: the lane decision, collision flags from the
/// transition, and the named reward terms granted for it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceAgent {
    pub id: usize,
    pub decision: usize,
    pub hit_agent: bool,
    pub hit_boundary: bool,
    pub reward: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceStep {
    pub step_index: u64,
    pub vehicles: Vec<TraceVehicle>,
    pub agents: Vec<TraceAgent>,
}

pub struct TraceWriter<W: Write> {
    out: W,
}

impl TraceWriter<BufWriter<std::fs::File>> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path)?;
        Ok(TraceWriter {
            out: BufWriter::new(file),
        })
    }
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        TraceWriter { out }
    }

    pub fn write_step(&mut self, step: &TraceStep) -> Result<()> {
        let line = serde_json::to_string(step)?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceStep>> {
    let file = std::fs::File::open(path)?;
    parse_trace(BufReader::new(file))
}

pub fn parse_trace<R: std::io::Read>(reader: BufReader<R>) -> Result<Vec<TraceStep>> {
    let mut steps = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let step: TraceStep = serde_json::from_str(&line).map_err(|e| Error::MalformedTrace {
            line: i + 1,
            reason: e.to_string(),
        })?;
        steps.push(step);
    }
    validate_trace(&steps)?;
    Ok(steps)
}

/// Structural checks shared by every trace consumer: contiguous step indices
/// and a stable agent roster.
pub fn validate_trace(steps: &[TraceStep]) -> Result<()> {
    for (i, step) in steps.iter().enumerate() {
        if step.step_index != i as u64 {
            return Err(Error::MalformedTrace {
                line: i + 1,
                reason: format!("step_index {} at position {i}", step.step_index),
            });
        }
        if step.agents.is_empty() {
            return Err(Error::MalformedTrace {
                line: i + 1,
                reason: "no agents".into(),
            });
        }
        let ids: Vec<usize> = step.agents.iter().map(|a| a.id).collect();
        let first: Vec<usize> = steps[0].agents.iter().map(|a| a.id).collect();
        if ids != first {
            return Err(Error::MalformedTrace {
                line: i + 1,
                reason: format!("agent roster changed: {ids:?} vs {first:?}"),
            });
        }
    }
    Ok(())
}
