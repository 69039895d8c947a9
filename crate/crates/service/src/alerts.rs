use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use iotsh_core::classify::{Classified, NORMAL_CLASS};
use iotsh_core::jsonl::{self, Sink};
use iotsh_core::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub id: u64,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub predicted_class: String,
    pub confidence: f64,
    pub row_text: String,
}

/// Alert feed with monotonically increasing ids, optionally mirrored to an
/// append-only file and restored from it.
pub struct AlertLog {
    threshold: f64,
    alerts: Mutex<Vec<Alert>>,
    sink: Option<Sink>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl AlertLog {
    pub fn in_memory(threshold: f64) -> Self {
        AlertLog {
            threshold,
            alerts: Mutex::new(Vec::new()),
            sink: None,
        }
    }

    pub fn open(path: &Path, threshold: f64) -> Result<Self> {
        let existing = if path.exists() {
            jsonl::read(path)?
        } else {
            Vec::new()
        };
        Ok(AlertLog {
            threshold,
            alerts: Mutex::new(existing),
            sink: Some(Sink::open(path)?),
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Raises one alert per non-Normal prediction at or above the threshold.
    pub fn record(&self, texts: &[&str], batch: &Classified<f64>) -> Result<Vec<Alert>> {
        let mut alerts = self.alerts.lock().unwrap_or_else(|p| p.into_inner());
        let mut raised = Vec::new();
        for (text, p) in texts.iter().zip(&batch.predictions) {
            let confidence = p.confidence();
            if p.label == NORMAL_CLASS || confidence < self.threshold {
                continue;
            }
            let alert = Alert {
                id: alerts.last().map_or(1, |a| a.id + 1),
                timestamp: now_ms(),
                predicted_class: p.label.clone(),
                confidence,
                row_text: (*text).to_owned(),
            };
            if let Some(sink) = &self.sink {
                sink.append(&alert)?;
            }
            alerts.push(alert.clone());
            raised.push(alert);
        }
        Ok(raised)
    }

    /// Alerts with id greater than `cursor`, and the cursor to poll with next.
    pub fn since(&self, cursor: u64) -> (Vec<Alert>, u64) {
        let alerts = self.alerts.lock().unwrap_or_else(|p| p.into_inner());
        let newer: Vec<Alert> = alerts.iter().filter(|a| a.id > cursor).cloned().collect();
        let next = newer.last().map_or(cursor, |a| a.id);
        (newer, next)
    }
}
