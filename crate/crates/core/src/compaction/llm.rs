//! Chat-style LLM summarizer: prompt template, request/reply handling, and the
//! on-disk reply cache.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::hex;
use crate::error::{Error, Result};
use crate::http::{HttpSettings, JsonClient};

pub const TEMPLATE_ID: &str = "sentence-summarizer/v1";

const SYSTEM_TEMPLATE: &str = "You are a sentence summarizer. You will receive a numbered list of \
sentences that describe related steps or events from videos. Write exactly one sentence of at most \
{max_words} words that states what they have in common. Reply with that sentence only: no preamble, \
no quotation marks, no list, and no additional explanation.";

const USER_TEMPLATE: &str = "Summarize the following sentences into one sentence.\n\n{sentences}";

const REPROMPT_TEMPLATE: &str =
    "That reply has {words} words. Rewrite it as one sentence of at most \
{max_words} words. Reply with the sentence only.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    fn new(role: &str, content: String) -> Self {
        Self {
            role: role.into(),
            content,
        }
    }
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
}

#[derive(Debug, Deserialize)]
struct ChatReply {
    content: String,
}

/// Renders the instruction and the numbered member list.
pub fn render_prompt(members: &[&str], max_words: usize) -> Vec<ChatMessage> {
    let sentences = members
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {}", i + 1, t.trim()))
        .collect::<Vec<_>>()
        .join("\n");
    vec![
        ChatMessage::new(
            "system",
            SYSTEM_TEMPLATE.replace("{max_words}", &max_words.to_string()),
        ),
        ChatMessage::new("user", USER_TEMPLATE.replace("{sentences}", &sentences)),
    ]
}

fn reprompt(words: usize, max_words: usize) -> ChatMessage {
    ChatMessage::new(
        "user",
        REPROMPT_TEMPLATE
            .replace("{words}", &words.to_string())
            .replace("{max_words}", &max_words.to_string()),
    )
}

/// Trims whitespace and one layer of surrounding quote characters.
pub fn clean_reply(raw: &str) -> String {
    let mut s = raw.trim();
    for (open, close) in [('"', '"'), ('\'', '\''), ('“', '”'), ('‘', '’'), ('`', '`')] {
        if s.len() >= 2 && s.starts_with(open) && s.ends_with(close) {
            s = s[open.len_utf8()..s.len() - close.len_utf8()].trim();
            break;
        }
    }
    s.to_owned()
}

pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Cache key over (template, model, sorted member texts).
pub fn cache_key(model: &str, members: &[&str]) -> String {
    let mut sorted: Vec<&str> = members.to_vec();
    sorted.sort_unstable();
    let mut members_hash = Sha256::new();
    for t in sorted {
        members_hash.update((t.len() as u64).to_le_bytes());
        members_hash.update(t.as_bytes());
    }
    let mut h = Sha256::new();
    h.update(TEMPLATE_ID.as_bytes());
    h.update([0]);
    h.update(model.as_bytes());
    h.update([0]);
    h.update(members_hash.finalize());
    hex(&h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub text: String,
    pub created_at: String,
    pub backend: String,
}

/// Content-addressed reply store: one JSON file per key.
#[derive(Debug, Clone)]
pub struct ReplyCache {
    dir: PathBuf,
}

impl ReplyCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        let bytes = std::fs::read(self.path(key)).ok()?;
        let entry: CacheEntry = serde_json::from_slice(&bytes).ok()?;
        (entry.key == key).then_some(entry)
    }

    pub fn put(&self, entry: &CacheEntry) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.path(&entry.key);
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec_pretty(entry).expect("cache entry serializes");
        std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

pub struct LlmSummarizer {
    model: String,
    max_words: usize,
    client: JsonClient,
    cache: Option<ReplyCache>,
}

impl LlmSummarizer {
    pub fn new(
        model: String,
        max_words: usize,
        settings: HttpSettings,
        cache: Option<ReplyCache>,
    ) -> Self {
        Self {
            model,
            max_words,
            client: JsonClient::new("llm", settings),
            cache,
        }
    }

    pub fn with_timeout(
        url: &str,
        model: &str,
        max_words: usize,
        timeout: Duration,
        retries: u32,
    ) -> Self {
        Self::new(
            model.into(),
            max_words,
            HttpSettings {
                url: url.into(),
                timeout,
                retries,
                backoff_base: Duration::from_millis(10),
                max_in_flight: 4,
                bearer_token: None,
            },
            None,
        )
    }

    pub fn max_in_flight(&self) -> usize {
        self.client.settings().max_in_flight
    }

    fn ask(&self, messages: &[ChatMessage]) -> Result<String> {
        let reply: ChatReply = self.client.post(&ChatRequest {
            model: &self.model,
            messages,
        })?;
        Ok(clean_reply(&reply.content))
    }

    /// One summary sentence for `members`, from the cache when present.
    /// An over-long reply gets one re-prompt.
    pub fn summarize(&self, members: &[&str]) -> Result<String> {
        let key = cache_key(&self.model, members);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(hit.text);
        }
        let mut messages = render_prompt(members, self.max_words);
        let mut text = self.ask(&messages)?;
        if text.is_empty() {
            return Err(self.format_error("empty reply"));
        }
        let words = word_count(&text);
        if words > self.max_words {
            messages.push(ChatMessage::new("assistant", text));
            messages.push(reprompt(words, self.max_words));
            text = self.ask(&messages)?;
            if text.is_empty() {
                return Err(self.format_error("empty reply after re-prompt"));
            }
            let words = word_count(&text);
            if words > self.max_words {
                return Err(self.format_error(&format!(
                    "reply has {words} words after re-prompt, limit {}",
                    self.max_words
                )));
            }
        }
        if let Some(cache) = &self.cache {
            cache.put(&CacheEntry {
                key,
                text: text.clone(),
                created_at: chrono::Utc::now().to_rfc3339(),
                backend: format!("llm_http:{}", self.model),
            })?;
        }
        Ok(text)
    }

    fn format_error(&self, message: &str) -> Error {
        Error::Backend {
            backend: "llm",
            attempts: 1,
            message: message.into(),
        }
    }
}
