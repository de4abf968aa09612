use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One gate decision of the alternating framework.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub epoch: usize,
    pub batch: usize,
    pub attempt: usize,
    pub alpha: f64,
    pub accepted: bool,
    /// Refined masks under the updated reconstructor.
    pub q_refined: f64,
    /// Predicted masks under the updated reconstructor.
    pub q_predicted: f64,
    /// Uniform random masks under the frozen initial reconstructor.
    pub q_random: f64,
    pub adaptive: bool,
    pub random_init: bool,
    pub sampling_ratio: f64,
    pub mb_loss_first: f64,
    pub mb_loss_last: f64,
    pub mnet_steps: usize,
    pub mnet_loss_first: Option<f64>,
    pub mnet_loss_last: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    Gate(GateRecord),
    Skipped {
        epoch: usize,
        batch: usize,
        reason: String,
    },
    Epoch {
        stage: String,
        epoch: usize,
        train_loss: f64,
        val_loss: Option<f64>,
        lr: f64,
        sampling_ratio: Option<f64>,
    },
    LrReduced {
        stage: String,
        epoch: usize,
        lr: f64,
    },
}

/// Collects events in memory and optionally appends them as JSON lines.
#[derive(Debug, Default)]
pub struct EventLog {
    events: Vec<TrainEvent>,
    sink: Option<BufWriter<File>>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            events: Vec::new(),
            sink: Some(BufWriter::new(file)),
        })
    }

    /// Keeps the lines already in `path`, for resumed runs.
    pub fn append_to(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            events: Vec::new(),
            sink: Some(BufWriter::new(file)),
        })
    }

    pub fn push(&mut self, event: TrainEvent) -> Result<()> {
        if let Some(w) = self.sink.as_mut() {
            serde_json::to_writer(&mut *w, &event)?;
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io("event log", e))?;
        }
        self.events.push(event);
        Ok(())
    }

    pub fn events(&self) -> &[TrainEvent] {
        &self.events
    }

    pub fn gates(&self) -> impl Iterator<Item = &GateRecord> {
        self.events.iter().filter_map(|e| match e {
            TrainEvent::Gate(g) => Some(g),
            _ => None,
        })
    }
}
