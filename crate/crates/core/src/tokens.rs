//! Semantic prompts and backbone input assembly.
//!
//! A prompt is rendered from a fixed template, lexed into a closed word-level
//! vocabulary, embedded through the backbone's frozen text table, and followed
//! by the projected spatial-temporal tokens of the prior hours.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::rc::Rc;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{default_channel_names, Region};
use crate::nn::layers::Linear;
use crate::nn::{Graph, ParamId, ParamStore, Var};

/// Per-slot spatial-temporal tokens `u_t = concat(v_t, v^k_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `(slots, d_v + d_k)`.
    pub tokens: Array2<f64>,
    pub provenance: Option<(Region, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }

    /// Rows for the given 0-based slots, in order.
    pub fn select(&self, slots: &[usize]) -> Result<TokenSequence> {
        if let Some(&bad) = slots.iter().find(|&&s| s >= self.len()) {
            return Err(Error::invalid(format!("slot {bad} out of range for {} tokens", self.len())));
        }
        Ok(TokenSequence {
            tokens: self.tokens.select(Axis(0), slots),
            provenance: self.provenance,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptContext {
    pub city: String,
    pub top_left: (usize, usize),
    pub side: usize,
    /// 1-based hour labels of the observed slots.
    pub prior_hours: Vec<usize>,
    /// 1-based hour labels of the slots to predict.
    pub target_hours: Vec<usize>,
    pub task: String,
}

fn is_punct(c: char) -> bool {
    matches!(c, '(' | ')' | ',' | '.' | ':')
}

fn is_single_word(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || is_punct(c))
}

impl PromptContext {
    pub fn validate(&self, channels: &[String]) -> Result<()> {
        if self.prior_hours.is_empty() || self.target_hours.is_empty() {
            return Err(Error::invalid("prior and target hours must be non-empty"));
        }
        if self.prior_hours.iter().any(|h| self.target_hours.contains(h)) {
            return Err(Error::invalid("prior and target hours overlap"));
        }
        if !channels.iter().any(|c| c == &self.task) {
            return Err(Error::invalid(format!("task `{}` is not a known channel", self.task)));
        }
        if !is_single_word(&self.city) || !is_single_word(&self.task) {
            return Err(Error::invalid("city and task must be single words without punctuation"));
        }
        Ok(())
    }
}

fn join_hours(hours: &[usize]) -> String {
    hours.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",")
}

pub fn build_prompt(ctx: &PromptContext) -> String {
    let mut s = String::new();
    write!(
        s,
        "City: {}. Region top-left: ({},{}). Side: {}. Task: {}. Given hours {} predict hours {}.",
        ctx.city,
        ctx.top_left.0,
        ctx.top_left.1,
        ctx.side,
        ctx.task,
        join_hours(&ctx.prior_hours),
        join_hours(&ctx.target_hours)
    )
    .expect("writing to a String");
    s
}

/// Splits on whitespace and isolates the punctuation marks `( ) , . :`.
pub fn lex(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in chunk.char_indices() {
            if is_punct(c) {
                if start < i {
                    out.push(&chunk[start..i]);
                }
                out.push(&chunk[i..i + 1]);
                start = i + 1;
            }
        }
        if start < chunk.len() {
            out.push(&chunk[start..]);
        }
    }
    out
}

struct Cursor<'a> {
    items: Vec<&'a str>,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let item = self
            .items
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::invalid("prompt ends early"))?;
        self.pos += 1;
        Ok(item)
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let got = self.next()?;
        if got != want {
            return Err(Error::invalid(format!("expected `{want}`, found `{got}`")));
        }
        Ok(())
    }

    fn number(&mut self) -> Result<usize> {
        let got = self.next()?;
        got.parse().map_err(|_| Error::invalid(format!("expected a number, found `{got}`")))
    }

    fn numbers_until(&mut self, stop: &str) -> Result<Vec<usize>> {
        let mut out = vec![self.number()?];
        loop {
            let sep = self.next()?;
            if sep == stop {
                return Ok(out);
            }
            if sep != "," {
                return Err(Error::invalid(format!("expected `,` or `{stop}`, found `{sep}`")));
            }
            out.push(self.number()?);
        }
    }
}

/// Inverse of [`build_prompt`].
pub fn parse_prompt(text: &str) -> Result<PromptContext> {
    let mut c = Cursor { items: lex(text), pos: 0 };
    c.expect("City")?;
    c.expect(":")?;
    let city = c.next()?.to_string();
    c.expect(".")?;
    c.expect("Region")?;
    c.expect("top-left")?;
    c.expect(":")?;
    c.expect("(")?;
    let i = c.number()?;
    c.expect(",")?;
    let j = c.number()?;
    c.expect(")")?;
    c.expect(".")?;
    c.expect("Side")?;
    c.expect(":")?;
    let side = c.number()?;
    c.expect(".")?;
    c.expect("Task")?;
    c.expect(":")?;
    let task = c.next()?.to_string();
    c.expect(".")?;
    c.expect("Given")?;
    c.expect("hours")?;
    let prior_hours = c.numbers_until("predict")?;
    c.expect("hours")?;
    let target_hours = c.numbers_until(".")?;
    if c.pos != c.items.len() {
        return Err(Error::invalid("trailing text after prompt"));
    }
    Ok(PromptContext {
        city,
        top_left: (i, j),
        side,
        prior_hours,
        target_hours,
        task,
    })
}

pub const UNK: &str = "<unk>";
const TEMPLATE_WORDS: [&str; 13] = [
    "City", "Region", "top-left", "Side", "Task", "Given", "hours", "predict", "(", ")", ",", ".", ":",
];
pub const MAX_NUMBER: usize = 255;
pub const KNOWN_CITIES: [&str; 4] = ["Xi'an", "Chengdu", "Shenzhen", "synthetic"];

/// Closed word-level vocabulary: template words, the integers
/// `0..=MAX_NUMBER`, city names and channel names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Vocabulary { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(cities: &[S], tasks: &[S]) -> Self {
        let mut words: Vec<String> = vec![UNK.to_string()];
        words.extend(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
        words.extend((0..=MAX_NUMBER).map(|n| n.to_string()));
        for w in cities.iter().chain(tasks) {
            let w = w.as_ref();
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
        Vocabulary::from(words)
    }

    /// The known cities plus `city`, with the default channel names and `channels`.
    pub fn for_data(city: &str, channels: &[String]) -> Self {
        let mut cities: Vec<String> = KNOWN_CITIES.iter().map(|s| s.to_string()).collect();
        cities.push(city.to_string());
        let mut tasks = default_channel_names(8);
        tasks.extend(channels.iter().cloned());
        Vocabulary::new(&cities, &tasks)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn word(&self, id: u32) -> &str {
        self.words.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        lex(text).into_iter().map(|w| self.id(w)).collect()
    }
}

/// Prompt embeddings followed by projected tokens, for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneInput {
    /// `(n_text + h, hidden_dim)`.
    pub embedded_sequence: Array2<f64>,
    /// Index of the first token position (equals the number of text positions).
    pub boundary: usize,
}

impl BackboneInput {
    pub fn len(&self) -> usize {
        self.embedded_sequence.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embedded_sequence.nrows() == 0
    }
}

/// Graph form of [`assemble_input`] over a batch: every sequence is its text
/// ids followed by its rows of `tokens` (`h` rows each, stacked in order).
pub fn assemble_graph(
    g: &mut Graph,
    store: &ParamStore,
    embed_table: ParamId,
    projector: &Linear,
    text_ids: &[Vec<u32>],
    tokens: Var,
    h: usize,
) -> Var {
    let table = g.param(store, embed_table);
    let hidden = store.get(embed_table).ncols();
    let projected = projector.forward(g, store, tokens);
    let mut parts = Vec::with_capacity(2 * text_ids.len());
    for (b, ids) in text_ids.iter().enumerate() {
        let index: Vec<u32> = ids
            .iter()
            .flat_map(|&id| (0..hidden as u32).map(move |k| id * hidden as u32 + k))
            .collect();
        parts.push(g.gather(table, ids.len(), hidden, Rc::new(index)));
        let rows: Vec<u32> = (b * h..(b + 1) * h)
            .flat_map(|r| (0..hidden as u32).map(move |k| r as u32 * hidden as u32 + k))
            .collect();
        parts.push(g.gather(projected, h, hidden, Rc::new(rows)));
    }
    g.concat_rows(&parts)
}

/// `[embed(prompt words)] ++ [projector(u_t) for each token row]`.
pub fn assemble_input(
    prompt: &str,
    u: &TokenSequence,
    vocab: &Vocabulary,
    store: &ParamStore,
    embed_table: ParamId,
    projector: &Linear,
) -> Result<BackboneInput> {
    let w = store.get(projector.w);
    if w.nrows() != u.width() {
        return Err(Error::invalid(format!(
            "projector expects width {}, tokens have {}",
            w.nrows(),
            u.width()
        )));
    }
    if w.ncols() != store.get(embed_table).ncols() {
        return Err(Error::invalid("projector output width differs from the text embedding width"));
    }
    let ids = vocab.tokenize(prompt);
    let mut g = Graph::new();
    let tokens = g.constant(u.tokens.clone());
    let out = assemble_graph(&mut g, store, embed_table, projector, std::slice::from_ref(&ids), tokens, u.len());
    Ok(BackboneInput {
        embedded_sequence: g.value(out).clone(),
        boundary: ids.len(),
    })
}
