//! Analysis, synthesis, hyper and fusion networks plus their parameters.

pub mod config;
pub mod network;
pub mod params;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

pub use config::{Geometry, ModelConfig, LATENT_STRIDE};
pub use network::{InterContext, InterSynthesis, Net};
pub use params::{model_id, Checkpoint, ParamStore, GDN_BETA_MIN};

use crate::error::Result;

/// A loaded model: immutable config and weights, plus a call counter on the
/// reconstruction head so callers can prove a path never touched it.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    id: u64,
    reconstruct_calls: AtomicUsize,
}

impl Model {
    pub fn new(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.validate(&config)?;
        let id = model_id(&config, &params);
        Ok(Model { config, params, id, reconstruct_calls: AtomicUsize::new(0) })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParamStore::init(&config, seed)?;
        Self::new(config, params)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        Self::new(ck.config, ck.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.config.clone(), self.params.clone())
    }

    pub fn reconstruct_calls(&self) -> usize {
        self.reconstruct_calls.load(Ordering::Relaxed)
    }

    pub(crate) fn note_reconstruct(&self) {
        self.reconstruct_calls.fetch_add(1, Ordering::Relaxed);
    }
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            id: self.id,
            reconstruct_calls: AtomicUsize::new(0),
        }
    }
}
