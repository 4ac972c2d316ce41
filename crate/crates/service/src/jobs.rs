use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossSummary {
    pub steps: usize,
    pub initial: f32,
    pub final_loss: f32,
    pub best: f32,
    pub best_step: usize,
    /// Pixel MSE between the target and the re-rendered archive.
    pub mse: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Queued { model_id: String },
    Running { model_id: String },
    Done { model_id: String, latent_id: String, loss: LossSummary },
    Failed { model_id: String, code: String, message: String },
}

#[derive(Default)]
pub struct JobTable {
    next: AtomicU64,
    jobs: Mutex<HashMap<String, JobStatus>>,
}

impl JobTable {
    pub fn create(&self, model_id: &str) -> String {
        let id = format!("job-{:08x}", self.next.fetch_add(1, Ordering::Relaxed));
        self.set(&id, JobStatus::Queued {
            model_id: model_id.to_string(),
        });
        id
    }

    pub fn set(&self, id: &str, status: JobStatus) {
        self.jobs.lock().expect("job lock").insert(id.to_string(), status);
    }

    pub fn get(&self, id: &str) -> Option<JobStatus> {
        self.jobs.lock().expect("job lock").get(id).cloned()
    }
}
