//! Append-only record of a training run.

use serde::{Deserialize, Serialize};

use crate::qlearn::GuidanceSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Paused,
    Finished,
    Failed,
    Stopped,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Finished | RunStatus::Failed | RunStatus::Stopped)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Pending => "pending",
            RunStatus::Running => "running",
            RunStatus::Paused => "paused",
            RunStatus::Finished => "finished",
            RunStatus::Failed => "failed",
            RunStatus::Stopped => "stopped",
        }
    }
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventPayload {
    TransitionBatch {
        transitions: u64,
        episodes: u64,
        dataset_size: usize,
    },
    Evaluation {
        mean_return: f64,
        std_return: f64,
        episodes: usize,
    },
    GuidanceReceived {
        guidance_id: u64,
        source: GuidanceSource,
        triples: usize,
    },
    GuidanceApplied {
        guidance_id: u64,
        /// `bootstrap`, `window` or `reward_bonus`.
        mode: String,
        cells: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bootstrap_iterations: Option<usize>,
    },
    GuidanceDropped {
        guidance_id: u64,
        reason: String,
    },
    Checkpoint {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<String>,
    },
    Status {
        status: RunStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        message: Option<String>,
    },
}

impl EventPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            EventPayload::TransitionBatch { .. } => "transition_batch",
            EventPayload::Evaluation { .. } => "evaluation",
            EventPayload::GuidanceReceived { .. } => "guidance_received",
            EventPayload::GuidanceApplied { .. } => "guidance_applied",
            EventPayload::GuidanceDropped { .. } => "guidance_dropped",
            EventPayload::Checkpoint { .. } => "checkpoint",
            EventPayload::Status { .. } => "status",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    /// Position in the log, starting at 0.
    pub seq: u64,
    /// Environment steps completed when the event was logged.
    pub step: u64,
    #[serde(flatten)]
    pub payload: EventPayload,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps_to_80pct: Option<u64>,
    pub peak_return: Option<f64>,
    pub final_return: Option<f64>,
    pub steps: u64,
    /// The live guidance channel closed before the run ended.
    pub guidance_channel_closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub run_id: String,
    pub status: RunStatus,
    pub events: Vec<RunEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<RunSummary>,
}

impl RunLog {
    pub fn new(run_id: impl Into<String>) -> Self {
        RunLog {
            run_id: run_id.into(),
            status: RunStatus::Pending,
            events: Vec::new(),
            summary: None,
        }
    }

    /// Appends an event. Steps never go backwards.
    pub fn push(&mut self, step: u64, payload: EventPayload) -> &RunEvent {
        let step = self.events.last().map_or(step, |e| e.step.max(step));
        let seq = self.events.len() as u64;
        self.events.push(RunEvent { seq, step, payload });
        self.events.last().expect("just pushed")
    }

    /// `(step, mean_return)` for every evaluation event.
    pub fn evaluations(&self) -> Vec<(u64, f64)> {
        self.events
            .iter()
            .filter_map(|e| match e.payload {
                EventPayload::Evaluation { mean_return, .. } => Some((e.step, mean_return)),
                _ => None,
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }
}
