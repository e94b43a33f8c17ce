//! Instruction parsing into a segmentation prompt and a caption pair.
//!
//! The primary route prompts a chat model in-context with a context
//! description and a few worked task examples. An optional vision describer
//! contributes a one-line scene description first. [`fallback_parse`] is a
//! deterministic offline route for the common instruction shapes.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::segmenter::NONE_NEEDED;
use crate::{Error, Image, Result};

/// Trimmed, non-empty user instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Instruction(String);

impl Instruction {
    pub fn new(text: &str) -> Result<Self> {
        let t = text.trim();
        if t.is_empty() {
            return Err(Error::InvalidConfig("instruction must not be empty".into()));
        }
        Ok(Self(t.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Instruction {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Instruction::new(&s)
    }
}

impl From<Instruction> for String {
    fn from(i: Instruction) -> String {
        i.0
    }
}

impl std::fmt::Display for Instruction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Segmentation prompt `q`, input caption and edited caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPrompts {
    pub segmentation_prompt: String,
    pub input_caption: String,
    pub edited_caption: String,
}

impl ParsedPrompts {
    pub fn new(q: &str, input_caption: &str, edited_caption: &str) -> Result<Self> {
        let (q, ci, ce) = (q.trim(), input_caption.trim(), edited_caption.trim());
        if q.is_empty() || ci.is_empty() || ce.is_empty() {
            return Err(Error::InvalidPrompts("every prompt field must be non-empty".into()));
        }
        if ci == ce {
            return Err(Error::InvalidPrompts(format!(
                "input and edited captions are identical (`{ci}`)"
            )));
        }
        Ok(Self {
            segmentation_prompt: q.to_string(),
            input_caption: ci.to_string(),
            edited_caption: ce.to_string(),
        })
    }

    pub fn needs_full_mask(&self) -> bool {
        self.segmentation_prompt.eq_ignore_ascii_case(NONE_NEEDED)
    }

    /// The answer form the task examples teach.
    pub fn to_answer(&self) -> String {
        format!(
            "Segmentation prompt: {}. Editing prompt 1: ``{}''. Editing prompt 2: ``{}''.",
            self.segmentation_prompt, self.input_caption, self.edited_caption
        )
    }
}

/// Scene kind (photo, painting, ...) and a full description starting with it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub kind: String,
    pub text: String,
}

/// Context description plus ordered worked examples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    context_description: String,
    task_examples: Vec<String>,
}

/// Worked example kept verbatim, including its `prompt2` spelling.
pub const CANONICAL_TASK_EXAMPLE: &str = "For example, if the user says ``Change the dog to a cat'', you need to give the segmentation model only the keyword ``Dog''. You also need to give the image editing model two text prompts: ``Photo of a dog'', and ``Photo of a cat''. Your answer should be in the form of: Segmentation prompt: Dog. Editing prompt 1: ``Photo of a dog''. Editing prompt2: ``Photo of a cat''.";

// Non-canonical wording; only the first example above is reproduced verbatim.
const DEFAULT_CONTEXT: &str = "You are the language front end of an image editing system. A user describes in one sentence how an image should be changed. Identify the object or objects that must be edited and name them with a short keyword for a segmentation model. Then write two short captions for an image editing model: the first describes the original image, the second describes the image after the edit. Keep everything that is not edited identical between the two captions. If no specific object has to be edited, answer ``None needed'' as the segmentation prompt.";

const DEFAULT_EXTRA_EXAMPLES: [(&str, &str, &str, &str); 4] = [
    ("Make the flowers red", "Flowers", "Photo of flowers", "Photo of red flowers"),
    ("Replace the oranges with apples", "Oranges", "Photo of oranges", "Photo of apples"),
    ("Turn the clock into a curtain", "Clock", "Photo of a clock", "Photo of a curtain"),
    ("Color the lips purple", "Lips", "Photo of lips", "Photo of purple lips"),
];

fn example_text(instruction: &str, q: &str, ci: &str, ce: &str) -> String {
    format!(
        "If the user says ``{instruction}'', you need to give the segmentation model only the keyword ``{q}''. You also need to give the image editing model two text prompts: ``{ci}'', and ``{ce}''. Your answer should be in the form of: Segmentation prompt: {q}. Editing prompt 1: ``{ci}''. Editing prompt 2: ``{ce}''."
    )
}

fn has_all_labels(s: &str) -> bool {
    let labels = label_regex();
    let mut seen = [false; 3];
    for cap in labels.captures_iter(s) {
        seen[label_slot(&cap[1])] = true;
    }
    seen.iter().all(|b| *b)
}

impl PromptTemplate {
    pub fn new(context_description: &str, task_examples: Vec<String>) -> Result<Self> {
        if task_examples.is_empty() {
            return Err(Error::InvalidConfig("template needs at least one task example".into()));
        }
        if let Some(bad) = task_examples.iter().find(|e| !has_all_labels(e)) {
            return Err(Error::InvalidConfig(format!(
                "task example lacks a labeled answer field: {bad}"
            )));
        }
        Ok(Self {
            context_description: context_description.trim().to_string(),
            task_examples,
        })
    }

    pub fn context_description(&self) -> &str {
        &self.context_description
    }

    pub fn task_examples(&self) -> &[String] {
        &self.task_examples
    }

    /// Keeps only the first `n` examples (at least one).
    pub fn with_example_count(mut self, n: usize) -> Self {
        self.task_examples.truncate(n.max(1));
        self
    }
}

impl Default for PromptTemplate {
    /// Five examples, the canonical one first.
    fn default() -> Self {
        let mut examples = vec![CANONICAL_TASK_EXAMPLE.to_string()];
        examples.extend(
            DEFAULT_EXTRA_EXAMPLES
                .iter()
                .map(|(i, q, ci, ce)| example_text(i, q, ci, ce)),
        );
        Self::new(DEFAULT_CONTEXT, examples).expect("default template is valid")
    }
}

pub const INSTRUCTION_PREFIX: &str = "User instruction: ";
pub const DESCRIPTION_PREFIX: &str = "Image description: ";

/// Context, examples, optional description line, then the instruction.
pub fn build_task_prompt(
    instruction: &Instruction,
    description: Option<&SceneDescription>,
    template: &PromptTemplate,
) -> String {
    let mut out = String::new();
    out.push_str(&template.context_description);
    out.push_str("\n\n");
    for ex in &template.task_examples {
        out.push_str(ex);
        out.push('\n');
    }
    out.push('\n');
    if let Some(d) = description {
        out.push_str(DESCRIPTION_PREFIX);
        out.push_str(&d.text);
        out.push('\n');
    }
    out.push_str(INSTRUCTION_PREFIX);
    out.push_str("``");
    out.push_str(instruction.as_str());
    out.push_str("''\n");
    out
}

/// Recovers the instruction from a prompt built by [`build_task_prompt`].
pub fn instruction_from_prompt(prompt: &str) -> Option<&str> {
    let line = prompt.lines().rev().find(|l| l.starts_with(INSTRUCTION_PREFIX))?;
    let rest = &line[INSTRUCTION_PREFIX.len()..];
    Some(rest.strip_prefix("``").unwrap_or(rest).strip_suffix("''").unwrap_or(rest))
}

pub trait ChatClient: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String>;
}

pub trait VisionDescriber: Send + Sync {
    fn name(&self) -> &str;
    fn answer(&self, image: &Image, question: &str) -> Result<String>;
}

/// One request/response pair with a remote or scripted backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub backend: String,
    pub request: String,
    pub response: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub exchanges: Vec<Exchange>,
}

impl Transcript {
    pub fn record(&mut self, backend: &str, request: &str, result: &Result<String>) {
        self.exchanges.push(Exchange {
            backend: backend.to_string(),
            request: request.to_string(),
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(|e| e.to_string()),
        });
    }
}

pub const KIND_QUESTION: &str = "Is this a photo, a painting or another kind of art?";

/// Two-query description protocol: ask for the kind, then complete
/// `"<kind> of"`. Any describer failure yields `None`.
pub fn describe_image(
    image: &Image,
    describer: &dyn VisionDescriber,
    transcript: &mut Transcript,
) -> Option<SceneDescription> {
    let first = describer.answer(image, KIND_QUESTION);
    transcript.record(describer.name(), KIND_QUESTION, &first);
    let kind = match first {
        Ok(a) => a.trim().trim_end_matches(['.', '!', '?']).trim().to_string(),
        Err(e) => {
            tracing::warn!("describer `{}` failed: {e}", describer.name());
            return None;
        }
    };
    if kind.is_empty() {
        return None;
    }
    let follow_up = format!("{kind} of");
    let second = describer.answer(image, &follow_up);
    transcript.record(describer.name(), &follow_up, &second);
    let completion = match second {
        Ok(a) => a.trim().to_string(),
        Err(e) => {
            tracing::warn!("describer `{}` failed: {e}", describer.name());
            return None;
        }
    };
    let text = if completion.to_lowercase().starts_with(&kind.to_lowercase()) {
        completion
    } else {
        format!("{follow_up} {completion}")
    };
    Some(SceneDescription { kind, text })
}

fn label_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)(segmentation\s+prompt|editing\s+prompt\s*1|editing\s+prompt\s*2)\s*:")
            .expect("static regex")
    })
}

fn label_slot(label: &str) -> usize {
    let l = label.to_lowercase();
    if l.starts_with("segmentation") {
        0
    } else if l.ends_with('1') {
        1
    } else {
        2
    }
}

const QUOTE_CHARS: [char; 9] = ['`', '\'', '"', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}', '.', ','];

fn clean_field(raw: &str) -> String {
    let mut s = raw.trim();
    loop {
        let next = s.trim_matches(|c: char| c.is_whitespace() || QUOTE_CHARS.contains(&c));
        if next == s {
            break;
        }
        s = next;
    }
    s.to_string()
}

/// Extracts the three labeled fields, in any order. Quote styles and
/// trailing periods are stripped; `Editing prompt2:` is accepted.
pub fn parse_llm_response(text: &str) -> Result<ParsedPrompts> {
    let re = label_regex();
    let marks: Vec<(usize, usize, usize)> = re
        .captures_iter(text)
        .map(|c| {
            let m = c.get(0).unwrap();
            (label_slot(&c[1]), m.start(), m.end())
        })
        .collect();
    let mut fields: [Option<String>; 3] = [None, None, None];
    for (k, &(slot, _, end)) in marks.iter().enumerate() {
        let stop = marks.get(k + 1).map_or(text.len(), |m| m.1);
        if fields[slot].is_none() {
            fields[slot] = Some(clean_field(&text[end..stop]));
        }
    }
    const NAMES: [&str; 3] = ["Segmentation prompt", "Editing prompt 1", "Editing prompt 2"];
    for (slot, f) in fields.iter().enumerate() {
        if f.as_deref().is_none_or(str::is_empty) {
            return Err(Error::MissingField(NAMES[slot]));
        }
    }
    let [q, ci, ce] = fields.map(Option::unwrap);
    ParsedPrompts::new(&q, &ci, &ce)
}

const COLORS: [&str; 24] = [
    "red", "blue", "green", "yellow", "white", "black", "brown", "pink", "purple", "orange",
    "gray", "grey", "golden", "gold", "silver", "wooden", "cyan", "violet", "beige", "blond",
    "blonde", "dark", "light", "navy",
];

const PRONOUNS: [&str; 9] = ["it", "him", "her", "them", "this", "that", "these", "those", "everything"];

fn rules() -> &'static [(Regex, Rule)] {
    static RULES: OnceLock<Vec<(Regex, Rule)>> = OnceLock::new();
    RULES.get_or_init(|| {
        let r = |p: &str| Regex::new(&format!("(?i)^{p}$")).expect("static regex");
        vec![
            (r(r"change (?P<x>.+?) colou?r to (?P<y>.+)"), Rule::Attribute),
            (r(r"(?:change|turn) (?P<x>.+?) (?:to|into) (?P<y>.+)"), Rule::Replace),
            (r(r"replace (?P<x>.+?) with (?P<y>.+)"), Rule::Replace),
            (r(r"make (?P<x>.+?) look like (?P<y>.+)"), Rule::Replace),
            (r(r"make (?P<x>.+) (?P<y>\S+)"), Rule::Attribute),
            (r(r"colou?r (?P<x>.+) (?P<y>\S+)"), Rule::Attribute),
        ]
    })
}

#[derive(Debug, Clone, Copy)]
enum Rule {
    /// `y` is a new object.
    Replace,
    /// `y` is an adjective applied to `x`.
    Attribute,
}

fn strip_determiners(s: &str) -> &str {
    let mut s = s.trim();
    for p in ["all of the ", "all the ", "the ", "all "] {
        if s.len() > p.len() && s[..p.len()].eq_ignore_ascii_case(p) {
            s = s[p.len()..].trim_start();
        }
    }
    s
}

fn is_plural(phrase: &str) -> bool {
    let last = phrase.split_whitespace().last().unwrap_or("").to_lowercase();
    last.len() > 2 && last.ends_with('s') && !last.ends_with("ss") && !last.ends_with("us")
}

fn has_article(phrase: &str) -> bool {
    let first = phrase.split_whitespace().next().unwrap_or("").to_lowercase();
    matches!(first.as_str(), "a" | "an" | "the")
}

/// Adds `a`/`an` to singular common nouns; plurals, proper nouns and
/// phrases that already carry an article are left alone.
fn with_article(phrase: &str) -> String {
    let starts_upper = phrase.chars().next().is_some_and(char::is_uppercase);
    if has_article(phrase) || is_plural(phrase) || starts_upper {
        return phrase.to_string();
    }
    let article = if phrase
        .chars()
        .next()
        .is_some_and(|c| "aeiouAEIOU".contains(c))
    {
        "an"
    } else {
        "a"
    };
    format!("{article} {phrase}")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn is_color(w: &str) -> bool {
    COLORS.contains(&w.to_lowercase().as_str())
}

/// `adj` applied to `object`, replacing a leading colour word if present.
fn apply_attribute(object: &str, adj: &str) -> String {
    let mut words: Vec<&str> = object.split_whitespace().collect();
    if words.len() > 1 && is_color(words[0]) {
        words.remove(0);
    }
    format!("{} {}", adj.to_lowercase(), words.join(" "))
}

/// Deterministic offline parse for the instruction shapes
/// `Change the X to Y`, `Turn the X into Y`, `Replace the X with Y`,
/// `Make the X ADJ`, `Make the X look like Y`, `Color the X ADJ`
/// and `Change the X color to ADJ`.
pub fn fallback_parse(instruction: &Instruction) -> Result<ParsedPrompts> {
    let text = instruction
        .as_str()
        .trim()
        .trim_end_matches(['.', '!', '?'])
        .trim();
    let miss = || Error::NeedsChatBackend(instruction.as_str().to_string());
    let (caps, rule) = rules()
        .iter()
        .find_map(|(re, rule)| re.captures(text).map(|c| (c, *rule)))
        .ok_or_else(miss)?;
    let x = strip_determiners(&caps["x"]).to_string();
    let mut y = caps["y"].trim().to_string();
    if x.is_empty() || y.is_empty() || PRONOUNS.contains(&x.to_lowercase().as_str()) {
        return Err(miss());
    }
    let head = x.split_whitespace().last().unwrap_or(&x).to_string();

    // "a silver one" -> "a silver jacket"
    for one in [" one", " ones"] {
        if let Some(stem) = y.strip_suffix(one) {
            y = format!("{stem} {head}");
        }
    }
    let y_words: Vec<&str> = y.split_whitespace().collect();
    let rule = match rule {
        Rule::Replace if y_words.len() == 1 && is_color(y_words[0]) => Rule::Attribute,
        r => r,
    };
    let (q, original, edited) = match rule {
        Rule::Replace => {
            let y_obj = y.clone();
            // "a silver jacket" replacing "green jacket": colour swap
            let y_stripped = y_obj.trim_start_matches("a ").trim_start_matches("an ");
            let mut ys = y_stripped.split_whitespace();
            let edited = match (ys.next(), ys.next(), ys.next()) {
                (Some(c), Some(h), None) if is_color(c) && h.eq_ignore_ascii_case(&head) => {
                    apply_attribute(&x, c)
                }
                _ => y_obj,
            };
            (x.clone(), x.clone(), edited)
        }
        Rule::Attribute => {
            // proper nouns ("like Mars") are objects, not attributes
            if !y_words.iter().all(|w| w.chars().all(|c| c.is_alphabetic() && c.is_lowercase())) {
                return Err(miss());
            }
            (x.clone(), x.clone(), apply_attribute(&x, &y))
        }
    };
    ParsedPrompts::new(
        &capitalize(&q),
        &format!("Photo of {}", with_article(&original)),
        &format!("Photo of {}", with_article(&edited)),
    )
}
