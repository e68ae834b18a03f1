//! Name-keyed factories for the pluggable strategies.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::agent::{Backend, LiveBackend, LiveBackendConfig, ScriptedBackend};
use crate::config::MeloConfig;
use crate::error::{Error, Result};
use crate::similarity::{BleuScorer, EmbedScorer, Scorer};

pub type Factory<T, C> = Box<dyn Fn(&C) -> Result<Arc<T>> + Send + Sync>;

pub struct Registry<T: ?Sized, C> {
    kind: &'static str,
    factories: BTreeMap<String, Factory<T, C>>,
}

impl<T: ?Sized, C> Registry<T, C> {
    pub fn new(kind: &'static str) -> Self {
        Registry { kind, factories: BTreeMap::new() }
    }

    /// Replaces any factory already under `name`.
    pub fn register(&mut self, name: impl Into<String>, factory: impl Fn(&C) -> Result<Arc<T>> + Send + Sync + 'static) {
        self.factories.insert(name.into(), Box::new(factory));
    }

    pub fn build(&self, name: &str, ctx: &C) -> Result<Arc<T>> {
        let f = self.factories.get(name).ok_or_else(|| Error::UnknownStrategy { kind: self.kind, name: name.to_string() })?;
        f(ctx)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }
}

pub fn default_scorers() -> Registry<dyn Scorer, MeloConfig> {
    let mut r: Registry<dyn Scorer, MeloConfig> = Registry::new("scorer");
    r.register("bleu", |c: &MeloConfig| {
        Ok(Arc::new(BleuScorer { max_ngram: c.bleu_max_ngram, smoothing: c.bleu_smoothing, direction: c.bleu_direction })
            as Arc<dyn Scorer>)
    });
    r.register("embed", |c: &MeloConfig| Ok(Arc::new(EmbedScorer::new(c.embed())?) as Arc<dyn Scorer>));
    r
}

pub fn default_backends() -> Registry<dyn Backend, MeloConfig> {
    let mut r: Registry<dyn Backend, MeloConfig> = Registry::new("backend");
    r.register("scripted", |c: &MeloConfig| {
        let path = c.script_path.as_ref().ok_or_else(|| Error::Config("backend \"scripted\" needs script_path".into()))?;
        let mut b = ScriptedBackend::load(path)?;
        if let Some(seed) = c.seed {
            b = b.with_seed(seed);
        }
        Ok(Arc::new(b) as Arc<dyn Backend>)
    });
    r.register("openai", |c: &MeloConfig| {
        let cfg = LiveBackendConfig { concurrency: c.concurrency, ..LiveBackendConfig::from_env() };
        Ok(Arc::new(LiveBackend::new(cfg)?) as Arc<dyn Backend>)
    });
    r
}
