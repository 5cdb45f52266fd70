// SPDX-License-Identifier: MIT OR Apache-2.0

//! Polled background jobs on a bounded worker pool.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use tokio::sync::Semaphore;

use crate::ApiError;

pub const DEFAULT_WORKERS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct JobStatus {
    pub id: u64,
    pub state: JobState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<serde_json::Value>,
}

pub(crate) struct JobQueue {
    next: AtomicU64,
    permits: Arc<Semaphore>,
    table: Arc<Mutex<HashMap<u64, JobStatus>>>,
}

impl JobQueue {
    pub(crate) fn new(workers: usize) -> Self {
        Self {
            next: AtomicU64::new(1),
            permits: Arc::new(Semaphore::new(workers)),
            table: Arc::new(Mutex::new(HashMap::new())),
        }
    }

    fn set(table: &Mutex<HashMap<u64, JobStatus>>, status: JobStatus) {
        table.lock().expect("job table").insert(status.id, status);
    }

    /// Queue blocking `work`; it runs once a worker slot frees up.
    pub(crate) fn submit<F>(&self, work: F) -> u64
    where
        F: FnOnce() -> Result<serde_json::Value, ApiError> + Send + 'static,
    {
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        let status = move |state, result, error| JobStatus {
            id,
            state,
            result,
            error,
        };
        Self::set(&self.table, status(JobState::Queued, None, None));
        let (permits, table) = (Arc::clone(&self.permits), Arc::clone(&self.table));
        tokio::spawn(async move {
            let Ok(_permit) = permits.acquire_owned().await else {
                return;
            };
            Self::set(&table, status(JobState::Running, None, None));
            let outcome = tokio::task::spawn_blocking(work).await;
            let done = match outcome {
                Ok(Ok(v)) => status(JobState::Done, Some(v), None),
                Ok(Err(e)) => status(
                    JobState::Failed,
                    None,
                    Some(serde_json::json!({ "code": e.code, "message": e.message })),
                ),
                Err(e) => status(
                    JobState::Failed,
                    None,
                    Some(serde_json::json!({ "code": "job_panicked", "message": e.to_string() })),
                ),
            };
            Self::set(&table, done);
        });
        id
    }

    pub(crate) fn get(&self, id: u64) -> Option<JobStatus> {
        self.table.lock().expect("job table").get(&id).cloned()
    }
}
