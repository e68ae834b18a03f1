use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AgentRequest, Backend, Role};
use crate::error::{Error, Result};

/// One scripted matching rule. Every present condition must hold.
///
/// The n-th time a given prompt hits a rule it receives `replies[n]`, the
/// last reply repeating after the list runs out. Counting per exact prompt
/// keeps replies independent of how mentions interleave across workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excludes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default)]
    pub replies: Vec<String>,
    /// Fail with `BackendUnreachable` instead of replying.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<String>,
}

impl ScriptRule {
    pub fn new(role: Role) -> Self {
        ScriptRule {
            role: Some(role),
            prompt_hash: None,
            contains: Vec::new(),
            excludes: Vec::new(),
            image: None,
            replies: Vec::new(),
            fail: None,
        }
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.contains.push(needle.into());
        self
    }

    pub fn excluding(mut self, needle: impl Into<String>) -> Self {
        self.excludes.push(needle.into());
        self
    }

    pub fn for_hash(mut self, hash: impl Into<String>) -> Self {
        self.prompt_hash = Some(hash.into());
        self
    }

    pub fn for_image(mut self, image: impl Into<String>) -> Self {
        self.image = Some(image.into());
        self
    }

    pub fn reply(mut self, text: impl Into<String>) -> Self {
        self.replies.push(text.into());
        self
    }

    pub fn replies<I, S>(mut self, texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.replies.extend(texts.into_iter().map(Into::into));
        self
    }

    pub fn failing(mut self, message: impl Into<String>) -> Self {
        self.fail = Some(message.into());
        self
    }

    fn matches(&self, req: &AgentRequest, hash: &str) -> bool {
        self.role.is_none_or(|r| r == req.role)
            && self.prompt_hash.as_deref().is_none_or(|h| h == hash)
            && self.image.as_deref().is_none_or(|img| req.image.as_deref() == Some(img))
            && self.contains.iter().all(|n| req.prompt.contains(n.as_str()))
            && !self.excludes.iter().any(|n| req.prompt.contains(n.as_str()))
    }
}

/// Script file contents.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    /// Used when no rule matches; chosen by a seeded hash of role and prompt.
    #[serde(default)]
    pub default_replies: HashMap<Role, Vec<String>>,
}

pub type Responder = Arc<dyn Fn(&AgentRequest) -> Option<String> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedCall {
    pub role: Role,
    pub prompt_hash: String,
    pub prompt: String,
}

/// Deterministic backend: a reply is a pure function of the role, the
/// prompt hash, the seed and how many times that prompt was seen before.
pub struct ScriptedBackend {
    script: Script,
    seed: u64,
    responder: Option<Responder>,
    seen: Mutex<HashMap<(usize, String), usize>>,
    calls: Mutex<Vec<ScriptedCall>>,
}

impl fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("rules", &self.script.rules.len())
            .field("seed", &self.seed)
            .field("responder", &self.responder.is_some())
            .finish()
    }
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self::from_script(Script { rules, default_replies: HashMap::new() })
    }

    pub fn from_script(script: Script) -> Self {
        ScriptedBackend { script, seed: 0, responder: None, seen: Mutex::new(HashMap::new()), calls: Mutex::new(Vec::new()) }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading script {}", path.display()), e))?;
        let script: Script = serde_json::from_str(&text)?;
        Ok(Self::from_script(script))
    }

    /// Consulted before the rule table; `None` falls through to the rules.
    pub fn with_responder(mut self, f: impl Fn(&AgentRequest) -> Option<String> + Send + Sync + 'static) -> Self {
        self.responder = Some(Arc::new(f));
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_default(mut self, role: Role, replies: Vec<String>) -> Self {
        self.script.default_replies.insert(role, replies);
        self
    }

    pub fn calls(&self) -> Vec<ScriptedCall> {
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn call_count(&self, role: Role) -> usize {
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).iter().filter(|c| c.role == role).count()
    }

    fn pick_default(&self, req: &AgentRequest, hash: &str) -> Option<String> {
        let pool = self.script.default_replies.get(&req.role).filter(|p| !p.is_empty())?;
        let seed = req.params.seed.unwrap_or(self.seed);
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(req.role.as_str().as_bytes());
        h.update(hash.as_bytes());
        let digest = h.finalize();
        let idx = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % pool.len() as u64;
        Some(pool[idx as usize].clone())
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, req: &AgentRequest) -> Result<String> {
        let hash = req.prompt_hash();
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).push(ScriptedCall {
            role: req.role,
            prompt_hash: hash.clone(),
            prompt: req.prompt.clone(),
        });

        if let Some(text) = self.responder.as_ref().and_then(|f| f(req)) {
            return Ok(text);
        }

        if let Some((idx, rule)) = self.script.rules.iter().enumerate().find(|(_, r)| r.matches(req, &hash)) {
            if let Some(msg) = &rule.fail {
                return Err(Error::BackendUnreachable(msg.clone()));
            }
            if rule.replies.is_empty() {
                return Err(Error::NoScriptedReply { role: req.role.to_string(), prompt_hash: hash });
            }
            let n = {
                let mut seen = self.seen.lock().unwrap_or_else(|e| e.into_inner());
                let slot = seen.entry((idx, hash.clone())).or_insert(0);
                let n = *slot;
                *slot += 1;
                n
            };
            return Ok(rule.replies[n.min(rule.replies.len() - 1)].clone());
        }

        self.pick_default(req, &hash).ok_or_else(|| Error::NoScriptedReply { role: req.role.to_string(), prompt_hash: hash })
    }
}
