//! Lexicon-driven {entity, position, exist} extraction from report text and
//! prompt rendering for the retrieval knowledge branch.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, tokenize_keeping, Report, TokenizerConfig, PERIOD};
use crate::error::{Error, Result};
use crate::retrieval::Encoder;
use crate::tensor::Tensor;
use crate::wck::Category;

const DEFAULT_LEXICONS: &str = include_str!("../assets/lexicons.json");
const CLAUSE_MARKS: [char; 1] = [';'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Existence {
    Exist,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub entity: Vec<String>,
    pub category: Category,
    pub position: Option<Vec<String>>,
    pub exist: Existence,
}

impl Triplet {
    pub fn new(entity: &str, category: Category, position: Option<&str>, exist: Existence) -> Self {
        Triplet {
            entity: words(entity),
            category,
            position: position.map(words),
            exist,
        }
    }
}

fn words(s: &str) -> Vec<String> {
    tokenize(s, &TokenizerConfig::default()).into_iter().filter(|t| t != PERIOD).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LexiconFile {
    entities: Vec<EntityEntry>,
    positions: Vec<String>,
    negation_cues: Vec<String>,
    #[serde(default)]
    scope_breakers: Vec<String>,
    #[serde(default = "default_window")]
    scope_window: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntityEntry {
    name: String,
    category: Category,
}

fn default_window() -> usize {
    6
}

/// Entity, position and negation vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicons {
    entities: HashMap<Vec<String>, Category>,
    positions: HashSet<Vec<String>>,
    cues: Vec<Vec<String>>,
    breakers: HashSet<String>,
    window: usize,
    max_span: usize,
}

impl Lexicons {
    fn from_file(f: LexiconFile) -> Result<Self> {
        let entities: HashMap<Vec<String>, Category> = f.entities.into_iter().map(|e| (words(&e.name), e.category)).collect();
        let positions: HashSet<Vec<String>> = f.positions.iter().map(|p| words(p)).collect();
        if let Some(both) = entities.keys().find(|e| positions.contains(*e)) {
            return Err(Error::Config(format!("{:?} is both an entity and a position", both.join(" "))));
        }
        if entities.keys().chain(positions.iter()).any(Vec::is_empty) {
            return Err(Error::Config("empty lexicon entry".into()));
        }
        let cues: Vec<Vec<String>> = f.negation_cues.iter().map(|c| words(c)).filter(|c| !c.is_empty()).collect();
        // breakers may be punctuation, so they are kept verbatim
        let breakers = f.scope_breakers.into_iter().map(|b| b.to_lowercase()).collect();
        let max_span = entities.keys().chain(positions.iter()).map(Vec::len).max().unwrap_or(0);
        Ok(Lexicons {
            entities,
            positions,
            cues,
            breakers,
            window: f.scope_window,
            max_span,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn builtin() -> Self {
        Self::from_json(DEFAULT_LEXICONS).expect("bundled lexicons are valid")
    }

    pub fn without_entities(mut self) -> Self {
        self.entities.clear();
        self.max_span = self.positions.iter().map(Vec::len).max().unwrap_or(0);
        self
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn entity_category(&self, entity: &[String]) -> Option<Category> {
        self.entities.get(entity).copied()
    }

    pub fn is_position(&self, span: &[String]) -> bool {
        self.positions.contains(span)
    }
}

/// True if a negation cue ends before `span` within the scope window with no
/// scope breaker in between.
pub fn detect_negation(sentence: &[String], span: Range<usize>, lex: &Lexicons) -> Existence {
    let start = span.start.min(sentence.len());
    for cue in &lex.cues {
        let n = cue.len();
        if n > start {
            continue;
        }
        for c0 in 0..=start - n {
            if sentence[c0..c0 + n] != cue[..] {
                continue;
            }
            let c1 = c0 + n;
            if start - c1 > lex.window {
                continue;
            }
            if sentence[c1..start].iter().any(|t| lex.breakers.contains(t)) {
                continue;
            }
            return Existence::Absent;
        }
    }
    Existence::Exist
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SpanKind {
    Entity(Category),
    Position,
}

fn tag_spans(sentence: &[String], lex: &Lexicons) -> Vec<(Range<usize>, SpanKind)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < sentence.len() {
        let mut found = None;
        for len in (1..=lex.max_span.min(sentence.len() - i)).rev() {
            let cand = &sentence[i..i + len];
            if let Some(&cat) = lex.entities.get(cand) {
                found = Some((len, SpanKind::Entity(cat)));
            } else if lex.positions.contains(cand) {
                found = Some((len, SpanKind::Position));
            }
            if found.is_some() {
                break;
            }
        }
        match found {
            Some((len, kind)) => {
                out.push((i..i + len, kind));
                i += len;
            }
            None => i += 1,
        }
    }
    out
}

fn gap(a: &Range<usize>, b: &Range<usize>) -> usize {
    if b.end <= a.start {
        a.start - b.end
    } else {
        b.start.saturating_sub(a.end)
    }
}

/// Triplets of one report in text order, duplicates removed.
pub fn extract_triplets(report: &Report, lex: &Lexicons) -> Vec<Triplet> {
    let tokens = tokenize_keeping(&report.text, &TokenizerConfig::default(), &CLAUSE_MARKS);
    extract_from_tokens(&tokens, lex)
}

pub fn extract_from_tokens(tokens: &[String], lex: &Lexicons) -> Vec<Triplet> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for sentence in tokens.split(|t| t == PERIOD) {
        let spans = tag_spans(sentence, lex);
        let positions: Vec<&Range<usize>> = spans.iter().filter(|(_, k)| *k == SpanKind::Position).map(|(r, _)| r).collect();
        for (span, kind) in &spans {
            let SpanKind::Entity(category) = *kind else { continue };
            // nearest position; on a tie the earlier one wins
            let position = positions
                .iter()
                .min_by_key(|p| (gap(span, p), p.start))
                .map(|p| sentence[(*p).clone()].to_vec());
            let t = Triplet {
                entity: sentence[span.clone()].to_vec(),
                category,
                position,
                exist: detect_negation(sentence, span.clone(), lex),
            };
            if seen.insert(t.clone()) {
                out.push(t);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// "no [entity]"
    Absent,
    /// "[position] is [entity]"
    PositionIs,
    /// "[entity] is located at [position]"
    LocatedAt,
    /// "[entity] is present"; used when an existing entity has no position.
    Present,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub template: Template,
}

impl Prompt {
    pub fn is_fallback(&self) -> bool {
        self.template == Template::Present
    }
}

pub fn render_prompt(t: &Triplet) -> Prompt {
    let entity = t.entity.join(" ").to_lowercase();
    let position = t.position.as_ref().map(|p| p.join(" ").to_lowercase());
    let (text, template) = match (t.exist, t.category, position) {
        (Existence::Absent, _, _) => (format!("no {entity}"), Template::Absent),
        (Existence::Exist, Category::Adjective, Some(p)) => (format!("{p} is {entity}"), Template::PositionIs),
        (Existence::Exist, Category::Noun, Some(p)) => (format!("{entity} is located at {p}"), Template::LocatedAt),
        (Existence::Exist, _, None) => (format!("{entity} is present"), Template::Present),
    };
    Prompt { text, template }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TripletRecord {
    report_id: String,
    entity: String,
    category: Category,
    #[serde(default)]
    position: Option<String>,
    exist: Existence,
}

/// Reads pre-extracted triplets (JSON-lines) grouped by report id, keeping
/// file order within each report.
pub fn load_triplets(path: &Path) -> Result<BTreeMap<String, Vec<Triplet>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triplets(&text)
}

pub fn parse_triplets(text: &str) -> Result<BTreeMap<String, Vec<Triplet>>> {
    let mut out: BTreeMap<String, Vec<Triplet>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: TripletRecord = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        let t = Triplet::new(&r.entity, r.category, r.position.as_deref(), r.exist);
        if t.entity.is_empty() {
            return Err(Error::MalformedLine {
                line: i + 1,
                message: "empty entity".into(),
            });
        }
        out.entry(r.report_id).or_default().push(t);
    }
    Ok(out)
}

pub fn triplet_to_json(report_id: &str, t: &Triplet) -> String {
    let rec = TripletRecord {
        report_id: report_id.to_string(),
        entity: t.entity.join(" "),
        category: t.category,
        position: t.position.as_ref().map(|p| p.join(" ")),
        exist: t.exist,
    };
    serde_json::to_string(&rec).expect("serializable")
}

/// Encoded retrieval knowledge `K_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletKnowledge {
    pub matrix: Tensor,
    pub prompts: Vec<Prompt>,
    /// Unique prompts dropped by the cap.
    pub truncated: usize,
}

/// One row per unique rendered prompt across `groups`, first occurrence
/// first, keeping at most `max_rows`. No prompts gives a single zero row.
pub fn encode_triplets(groups: &[Vec<Triplet>], encoder: &dyn Encoder, max_rows: usize) -> Result<TripletKnowledge> {
    let d = encoder.dim();
    let mut seen = HashSet::new();
    let mut prompts = Vec::new();
    for t in groups.iter().flatten() {
        let p = render_prompt(t);
        if seen.insert(p.text.clone()) {
            prompts.push(p);
        }
    }
    let truncated = prompts.len().saturating_sub(max_rows);
    prompts.truncate(max_rows);
    if prompts.is_empty() {
        return Ok(TripletKnowledge {
            matrix: Tensor::zeros(&[1, d]),
            prompts,
            truncated,
        });
    }
    let mut data = Vec::with_capacity(prompts.len() * d);
    for p in &prompts {
        let v = encoder.encode_text(&p.text)?;
        if v.len() != d {
            return Err(Error::shape("encode_triplets", &[d], &[v.len()]));
        }
        data.extend(v);
    }
    Ok(TripletKnowledge {
        matrix: Tensor::matrix(prompts.len(), d, data)?,
        prompts,
        truncated,
    })
}
