// SPDX-License-Identifier: MIT OR Apache-2.0

//! # mifin-server
//!
//! JSON-over-HTTP access to a loaded model: tokenization, logit lens,
//! patch scans (as polled jobs), feature search and top activations,
//! steered generation (optionally streamed), bias scans and gated
//! retrieval answers. The route table is described in `openapi.yaml`.
//!
//! The model is immutable for the life of the process. SAE checkpoints
//! live in a registry keyed by checkpoint hash; replacing an entry swaps
//! an `Arc`, so requests already holding the old entry finish against it.

mod error;
mod jobs;
mod routes;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock};

use mifin_core::fin::ChunkIndex;
use mifin_core::interp::FeatureCatalog;
use mifin_core::sae::Sae;
use mifin_core::store::ActivationStore;
use mifin_core::ModelBundle;
use serde::Serialize;

pub use error::ApiError;
pub use jobs::{JobState, JobStatus, DEFAULT_WORKERS};
pub use routes::router;

/// An SAE checkpoint with its catalog and, optionally, the store used
/// for top activations.
#[derive(Debug)]
pub struct SaeEntry {
    pub sae: Arc<Sae>,
    pub catalog: FeatureCatalog,
    pub store: Option<Arc<ActivationStore>>,
}

/// A chunk index plus the SAE and feature set its gate uses by default.
#[derive(Debug)]
pub struct IndexEntry {
    pub index: ChunkIndex,
    pub sae: String,
    pub finance_set: std::collections::BTreeSet<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SaeSummary {
    pub hash: String,
    pub hook: String,
    pub d_in: usize,
    pub d_hid: usize,
    pub has_store: bool,
}

/// Shared server state. Cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    bundle: Option<Arc<ModelBundle>>,
    saes: RwLock<HashMap<String, Arc<SaeEntry>>>,
    indexes: RwLock<HashMap<String, Arc<IndexEntry>>>,
    jobs: jobs::JobQueue,
}

impl AppState {
    pub fn new(bundle: Option<ModelBundle>) -> Self {
        Self::with_workers(bundle, DEFAULT_WORKERS)
    }

    pub fn with_workers(bundle: Option<ModelBundle>, workers: usize) -> Self {
        Self {
            inner: Arc::new(Inner {
                bundle: bundle.map(Arc::new),
                saes: RwLock::new(HashMap::new()),
                indexes: RwLock::new(HashMap::new()),
                jobs: jobs::JobQueue::new(workers.max(1)),
            }),
        }
    }

    pub fn bundle(&self) -> Result<Arc<ModelBundle>, ApiError> {
        self.inner.bundle.clone().ok_or_else(ApiError::model_not_loaded)
    }

    /// Insert or atomically replace the entry for this checkpoint's hash.
    pub fn register_sae(&self, entry: SaeEntry) -> String {
        let hash = entry.sae.hash().to_string();
        self.inner
            .saes
            .write()
            .expect("registry lock")
            .insert(hash.clone(), Arc::new(entry));
        hash
    }

    /// Load a checkpoint directory, with an optional catalog file and store
    /// directory, and register it.
    pub fn load_sae(
        &self,
        dir: &Path,
        catalog: Option<&Path>,
        store: Option<&Path>,
    ) -> mifin_core::Result<String> {
        let sae = Sae::load(dir)?;
        let store = store
            .map(|p| ActivationStore::open(p, self.inner.bundle.as_deref()))
            .transpose()?;
        let catalog = match catalog {
            Some(p) => FeatureCatalog::load(p, Some(&sae))?,
            None => FeatureCatalog::new(&sae, store.as_ref())?,
        };
        Ok(self.register_sae(SaeEntry {
            sae: Arc::new(sae),
            catalog,
            store: store.map(Arc::new),
        }))
    }

    pub fn sae(&self, hash: &str) -> Result<Arc<SaeEntry>, ApiError> {
        self.inner
            .saes
            .read()
            .expect("registry lock")
            .get(hash)
            .cloned()
            .ok_or_else(|| ApiError::not_found("sae_not_found", format!("no SAE with hash {hash}")))
    }

    /// The named SAE, or the only registered one when `hash` is absent.
    pub fn sae_or_default(&self, hash: Option<&str>) -> Result<Arc<SaeEntry>, ApiError> {
        if let Some(h) = hash {
            return self.sae(h);
        }
        let saes = self.inner.saes.read().expect("registry lock");
        match saes.len() {
            1 => Ok(saes.values().next().cloned().expect("one entry")),
            0 => Err(ApiError::not_found("sae_not_found", "no SAE is registered")),
            _ => Err(ApiError::bad_request("sae_required", "several SAEs are registered; pass `sae`")),
        }
    }

    pub fn saes(&self) -> Vec<SaeSummary> {
        let mut out: Vec<SaeSummary> = self
            .inner
            .saes
            .read()
            .expect("registry lock")
            .values()
            .map(|e| SaeSummary {
                hash: e.sae.hash().to_string(),
                hook: e.sae.hook.to_string(),
                d_in: e.sae.params.d_in(),
                d_hid: e.sae.d_hid(),
                has_store: e.store.is_some(),
            })
            .collect();
        out.sort_by(|a, b| a.hash.cmp(&b.hash));
        out
    }

    pub fn register_index(&self, id: &str, entry: IndexEntry) {
        self.inner
            .indexes
            .write()
            .expect("index lock")
            .insert(id.to_string(), Arc::new(entry));
    }

    pub fn index(&self, id: &str) -> Result<Arc<IndexEntry>, ApiError> {
        self.inner
            .indexes
            .read()
            .expect("index lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("index_not_found", format!("no chunk index {id:?}")))
    }

    fn jobs(&self) -> &jobs::JobQueue {
        &self.inner.jobs
    }
}

/// Serve until the process is interrupted.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
