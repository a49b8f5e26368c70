//! Corpus ingestion: Reddit comment-tree extraction, comment cleaning and
//! context filtering.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BotId, Conversation, Origin, Speaker, Utterance};
use crate::embeddings::tokenize;
use crate::io::{read_jsonl, JsonlError};

pub const UNKNOWN_TOKEN: &str = "<unknown>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("comment parent links form a cycle through `{0}`")]
    CycleDetected(String),
    #[error("comment `{0}` has an empty id or is its own parent")]
    InvalidComment(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// One comment in Reddit dump shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawComment {
    pub id: String,
    #[serde(default)]
    pub parent_id: String,
    pub body: String,
    #[serde(default)]
    pub author: String,
    #[serde(default)]
    pub created_utc: i64,
}

/// Strips links, edit postscripts and removal tags. `None` means the comment carries no usable text.
pub fn clean_comment(body: &str) -> Option<String> {
    let mut kept = Vec::new();
    for line in body.lines() {
        let without_links: Vec<&str> = line.split_whitespace().filter(|tok| !is_link(tok)).collect();
        let line = without_links.join(" ");
        if starts_edit_marker(&line) {
            break;
        }
        kept.push(line);
    }
    let cleaned = kept.join(" ").split_whitespace().collect::<Vec<_>>().join(" ");
    let lowered = cleaned.to_lowercase();
    if cleaned.is_empty() || lowered == "[removed]" || lowered == "[deleted]" {
        return None;
    }
    Some(cleaned)
}

fn is_link(token: &str) -> bool {
    let t = token.to_ascii_lowercase();
    t.starts_with("http://") || t.starts_with("https://") || t.starts_with("www.")
}

fn starts_edit_marker(line: &str) -> bool {
    let head: String = line.trim_start().chars().take(5).collect::<String>().to_lowercase();
    head == "edit:" || head == "edit " || line.trim().eq_ignore_ascii_case("edit")
}

fn reddit_bot() -> BotId {
    BotId::new("human", "reddit", "corpus")
}

/// Enumerates root-to-leaf reply paths as alternating conversations.
///
/// Each path stops before the first comment whose cleaned body is empty;
/// consecutive comments by the same author merge into one utterance; paths
/// with fewer than `min_turns` utterances are dropped. Parents that are not in
/// the input turn their children into roots. Reddit's `t1_` prefix on
/// `parent_id` is accepted.
pub fn extract_conversations<I>(comments: I, min_turns: usize) -> Result<Vec<Conversation>, CorpusError>
where
    I: IntoIterator<Item = RawComment>,
{
    let comments: Vec<RawComment> = comments.into_iter().collect();
    let mut index: HashMap<&str, usize> = HashMap::with_capacity(comments.len());
    for (i, c) in comments.iter().enumerate() {
        if c.id.is_empty() || c.parent_id == c.id {
            return Err(CorpusError::InvalidComment(c.id.clone()));
        }
        index.entry(c.id.as_str()).or_insert(i);
    }

    let mut children: Vec<Vec<usize>> = vec![Vec::new(); comments.len()];
    let mut roots = Vec::new();
    for (i, c) in comments.iter().enumerate() {
        if index[c.id.as_str()] != i {
            log::warn!("duplicate comment id `{}` ignored", c.id);
            continue;
        }
        let parent = resolve_parent(&c.parent_id, &index);
        match parent {
            Some(p) => children[p].push(i),
            None => {
                if !c.parent_id.is_empty() && !c.parent_id.starts_with("t3_") {
                    log::debug!("comment `{}` has unknown parent `{}`, treating as root", c.id, c.parent_id);
                }
                roots.push(i);
            }
        }
    }

    let cleaned: Vec<Option<String>> = comments.iter().map(|c| clean_comment(&c.body)).collect();
    let mut visited = vec![false; comments.len()];
    let mut out = Vec::new();
    for &root in &roots {
        let mut path = Vec::new();
        walk(root, &children, &cleaned, &mut visited, &mut path, &mut |p| {
            if let Some(conv) = path_to_conversation(&comments, &cleaned, p, min_turns) {
                out.push(conv);
            }
        });
    }
    for (i, c) in comments.iter().enumerate() {
        if !visited[i] && index[c.id.as_str()] == i {
            return Err(CorpusError::CycleDetected(c.id.clone()));
        }
    }
    Ok(out)
}

fn resolve_parent(parent_id: &str, index: &HashMap<&str, usize>) -> Option<usize> {
    if parent_id.is_empty() {
        return None;
    }
    index
        .get(parent_id)
        .or_else(|| parent_id.strip_prefix("t1_").and_then(|p| index.get(p)))
        .copied()
}

fn walk(
    node: usize,
    children: &[Vec<usize>],
    cleaned: &[Option<String>],
    visited: &mut [bool],
    path: &mut Vec<usize>,
    emit: &mut dyn FnMut(&[usize]),
) {
    visited[node] = true;
    if cleaned[node].is_none() {
        // truncation point; still mark the subtree as reachable
        mark(node, children, visited);
        if !path.is_empty() {
            emit(path);
        }
        return;
    }
    path.push(node);
    let kids = &children[node];
    if kids.is_empty() {
        emit(path);
    } else {
        let mut emitted_truncated = false;
        for &k in kids {
            if cleaned[k].is_none() {
                mark(k, children, visited);
                if !emitted_truncated {
                    emit(path);
                    emitted_truncated = true;
                }
            } else {
                walk(k, children, cleaned, visited, path, emit);
            }
        }
    }
    path.pop();
}

fn mark(node: usize, children: &[Vec<usize>], visited: &mut [bool]) {
    let mut stack = vec![node];
    while let Some(n) = stack.pop() {
        visited[n] = true;
        stack.extend(children[n].iter().copied().filter(|&c| !visited[c]));
    }
}

fn path_to_conversation(
    comments: &[RawComment],
    cleaned: &[Option<String>],
    path: &[usize],
    min_turns: usize,
) -> Option<Conversation> {
    let mut merged: Vec<(String, String)> = Vec::new();
    for &i in path {
        let text = cleaned[i].as_deref()?;
        match merged.last_mut() {
            Some((author, acc)) if *author == comments[i].author => {
                acc.push(' ');
                acc.push_str(text);
            }
            _ => merged.push((comments[i].author.clone(), text.to_string())),
        }
    }
    if merged.len() < min_turns.max(1) {
        return None;
    }
    let root = &comments[path[0]].id;
    let leaf = &comments[*path.last()?].id;
    let id = if root == leaf { root.clone() } else { format!("{root}/{leaf}") };
    Conversation::from_texts(id, reddit_bot(), Origin::Corpus, merged.into_iter().map(|(_, t)| t)).ok()
}

/// A named collection of conversations with its token counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    conversations: Vec<Conversation>,
    vocabulary: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, conversations: Vec<Conversation>) -> Self {
        let mut vocabulary = BTreeMap::new();
        for conv in &conversations {
            for text in conv.texts() {
                for tok in tokenize(text) {
                    *vocabulary.entry(tok).or_insert(0) += 1;
                }
            }
        }
        Corpus {
            name: name.into(),
            conversations,
            vocabulary,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Corpus::new(name, read_jsonl(path)?))
    }

    pub fn conversations(&self) -> &[Conversation] {
        &self.conversations
    }

    pub fn vocabulary(&self) -> &BTreeMap<String, usize> {
        &self.vocabulary
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }
}

/// A context (every utterance before the target) and the utterance that follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextPair {
    pub conversation_id: String,
    pub context: Vec<Utterance>,
    pub target: Utterance,
}

impl ContextPair {
    pub fn context_tokens(&self) -> usize {
        self.context.iter().map(|u| tokenize(&u.text).len()).sum()
    }
}

/// Every (prefix, next utterance) pair whose prefix has at least `min_tokens`
/// tokens and, if `exclude_unknown`, no `<unknown>` marker.
pub fn filter_contexts(corpus: &Corpus, min_tokens: usize, exclude_unknown: bool) -> Vec<ContextPair> {
    let mut out = Vec::new();
    for conv in corpus.conversations() {
        let utts = conv.utterances();
        let mut tokens = 0;
        let mut has_unknown = false;
        for k in 1..utts.len() {
            tokens += tokenize(&utts[k - 1].text).len();
            has_unknown |= utts[k - 1].text.contains(UNKNOWN_TOKEN);
            if tokens < min_tokens || (exclude_unknown && has_unknown) {
                continue;
            }
            out.push(ContextPair {
                conversation_id: conv.id.clone(),
                context: utts[..k].to_vec(),
                target: utts[k].clone(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub conversation_count: usize,
    pub median_turns: usize,
    pub vocabulary_size: usize,
}

/// Count, lower median of utterance counts, and vocabulary size.
pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut lengths: Vec<usize> = corpus.conversations().iter().map(Conversation::len).collect();
    lengths.sort_unstable();
    Ok(CorpusStats {
        conversation_count: lengths.len(),
        median_turns: lengths[(lengths.len() - 1) / 2],
        vocabulary_size: corpus.vocabulary().len(),
    })
}

/// Role-A/B view used by the speaker-agnostic helpers below.
pub fn speakers_alternate(conv: &Conversation) -> bool {
    conv.utterances().windows(2).all(|w| w[0].speaker != w[1].speaker)
        && conv.utterances().first().is_none_or(|u| u.speaker == Speaker::A)
}
