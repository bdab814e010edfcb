//! Cloze prompt templates with morphological features.
//!
//! Grammar (everything outside square brackets is literal text):
//!
//! ```text
//! template  := ( literal | '[' node ']' )+
//! node      := branch ( '|' branch )*
//! branch    := body ( ';' guard )?
//! body      := slot | text
//! slot      := ('X' | 'Y') ( '.' feature )*
//! guard     := binding ( ',' binding )*
//! binding   := ('X' | 'Y') '=' feature
//! ```
//!
//! A bracket holding a single unguarded slot is a slot reference, e.g.
//! `[X.Nom]`; anything else is an alternation whose branch is chosen by the
//! entity's features, e.g. `[родился;X=MASC | родилась;X=FEM]`. Features come
//! from a closed registry (case, gender, number). Branch bodies and guards are
//! trimmed. A backslash escapes `[ ] | ; \`.
//!
//! Whitespace between two bracketed nodes is a word boundary rather than a
//! literal: it is rendered with the language's word separator, and dropped
//! entirely when either side renders empty (e.g. an empty agreement suffix).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SlotName {
    X,
    Y,
}

impl fmt::Display for SlotName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SlotName::X => "X",
            SlotName::Y => "Y",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Case,
    Gender,
    Number,
}

const CASES: &[&str] = &[
    "Nom", "Acc", "Gen", "Dat", "Ins", "Loc", "Ess", "Abl", "All", "Ela", "Ill", "Ine", "Ade", "Par", "Tra", "Voc",
    "Com", "Abs", "Erg", "Prl",
];
const GENDERS: &[&str] = &["MASC", "FEM", "NEUT"];
const NUMBERS: &[&str] = &["SG", "PL"];

/// Attribute a registry symbol belongs to, if it is registered.
pub fn attribute_of(symbol: &str) -> Option<Attribute> {
    if CASES.contains(&symbol) {
        Some(Attribute::Case)
    } else if GENDERS.contains(&symbol) {
        Some(Attribute::Gender)
    } else if NUMBERS.contains(&symbol) {
        Some(Attribute::Number)
    } else {
        None
    }
}

fn registry() -> Vec<String> {
    CASES.iter().chain(GENDERS).chain(NUMBERS).map(|s| s.to_string()).collect()
}

/// Feature bundle for one slot, e.g. `X.Nom` or the guard `X=FEM`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub slot: SlotName,
    pub attrs: BTreeMap<Attribute, String>,
}

impl FeatureSpec {
    pub fn bare(slot: SlotName) -> Self {
        Self { slot, attrs: BTreeMap::new() }
    }

    /// Adds a registry symbol; returns `None` for an unknown symbol.
    pub fn with(mut self, symbol: &str) -> Option<Self> {
        self.attrs.insert(attribute_of(symbol)?, symbol.to_string());
        Some(self)
    }

    pub fn get(&self, attr: Attribute) -> Option<&str> {
        self.attrs.get(&attr).map(String::as_str)
    }

    fn render_ref(&self) -> String {
        let mut out = self.slot.to_string();
        for v in self.attrs.values() {
            out.push('.');
            out.push_str(v);
        }
        out
    }

    fn render_guard(&self) -> String {
        self.attrs.values().map(|v| format!("{}={v}", self.slot)).collect::<Vec<_>>().join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchBody {
    Text(String),
    Slot(FeatureSpec),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    pub body: BranchBody,
    /// `None` for an unconditional branch.
    pub guard: Option<FeatureSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateNode {
    Literal(String),
    SlotRef(FeatureSpec),
    Alternation(Vec<Branch>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub nodes: Vec<TemplateNode>,
    pub relation_id: String,
    pub language: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at byte {offset}: {message} (expected one of: {})", expected.join(", "))]
pub struct ParseError {
    pub offset: usize,
    pub expected: Vec<String>,
    pub message: String,
}

impl ParseError {
    fn new(offset: usize, message: impl Into<String>, expected: &[&str]) -> Self {
        Self { offset, message: message.into(), expected: expected.iter().map(|s| s.to_string()).collect() }
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("no branch matches the {slot} features")]
    NoBranchMatches { slot: SlotName },
    #[error("cannot choose a branch: {slot} lacks the {attribute:?} feature")]
    AmbiguousFeatures { slot: SlotName, attribute: Attribute },
    #[error("entity {entity} has no surface form for case {case}")]
    MissingSurfaceForm { entity: String, case: String },
    #[error("mask count must be at least 1")]
    NoMasks,
    #[error("template file name {0:?} is not <relation>.<lang>.tmpl")]
    FileName(String),
    #[error("reading template: {0}")]
    Io(#[from] std::io::Error),
}

const SPECIAL: &[char] = &['[', ']', '|', ';', '\\'];

/// Parses template text into an AST; `relation_id` and `language` are left empty.
pub fn parse_template(text: &str) -> Result<PromptTemplate, ParseError> {
    if text.is_empty() {
        return Err(ParseError::new(0, "empty template", &["text", "["]));
    }
    let mut nodes = Vec::new();
    let mut literal = String::new();
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        match c {
            '\\' => match chars.next() {
                Some((_, e)) if SPECIAL.contains(&e) => literal.push(e),
                _ => return Err(ParseError::new(i, "bad escape", &["\\[", "\\]", "\\|", "\\;", "\\\\"])),
            },
            '[' => {
                let boundary = literal.trim().is_empty() && nodes.last().is_some_and(is_bracketed);
                if boundary {
                    literal.clear();
                } else if !literal.is_empty() {
                    nodes.push(TemplateNode::Literal(std::mem::take(&mut literal)));
                }
                let (node, next) = parse_bracket(text, i)?;
                nodes.push(node);
                while chars.peek().is_some_and(|&(j, _)| j < next) {
                    chars.next();
                }
            }
            ']' => return Err(ParseError::new(i, "unmatched ']'", &["text", "["])),
            _ => literal.push(c),
        }
    }
    if !literal.is_empty() {
        nodes.push(TemplateNode::Literal(literal));
    }
    check_slots(&nodes, text.len())?;
    Ok(PromptTemplate { nodes, relation_id: String::new(), language: String::new() })
}

fn is_bracketed(node: &TemplateNode) -> bool {
    !matches!(node, TemplateNode::Literal(_))
}

struct RawPart {
    text: String,
    offset: usize,
}

struct RawBranch {
    body: RawPart,
    guard: Option<RawPart>,
}

impl RawBranch {
    fn part(&mut self) -> &mut RawPart {
        match self.guard.as_mut() {
            Some(g) => g,
            None => &mut self.body,
        }
    }
}

/// Parses the bracket opening at `open`; returns the node and the byte index
/// just past the closing bracket.
fn parse_bracket(text: &str, open: usize) -> Result<(TemplateNode, usize), ParseError> {
    let mut branches = Vec::new();
    let mut current = RawBranch { body: RawPart { text: String::new(), offset: open + 1 }, guard: None };
    let mut chars = text[open + 1..].char_indices().map(|(j, c)| (j + open + 1, c));
    let close = loop {
        let Some((i, c)) = chars.next() else {
            return Err(ParseError::new(text.len(), "unclosed '['", &["]"]));
        };
        match c {
            '\\' => match chars.next() {
                Some((_, e)) if SPECIAL.contains(&e) => current.part().text.push(e),
                _ => return Err(ParseError::new(i, "bad escape", &["\\[", "\\]", "\\|", "\\;", "\\\\"])),
            },
            '[' => return Err(ParseError::new(i, "nested '['", &["]", "|", ";", "text"])),
            ';' if current.guard.is_none() => current.guard = Some(RawPart { text: String::new(), offset: i + 1 }),
            ';' => return Err(ParseError::new(i, "second ';' in one branch", &["|", "]", ","])),
            '|' => {
                let next = RawBranch { body: RawPart { text: String::new(), offset: i + 1 }, guard: None };
                branches.push(std::mem::replace(&mut current, next));
            }
            ']' => break i,
            _ => current.part().text.push(c),
        }
    };
    branches.push(current);

    if branches.len() == 1 && branches[0].guard.is_none() {
        let body = branches[0].body.text.trim();
        if body.is_empty() {
            return Err(ParseError::new(branches[0].body.offset, "empty brackets", &["X", "Y", "text"]));
        }
        if is_slot_syntax(body) {
            return Ok((TemplateNode::SlotRef(parse_slot(body, branches[0].body.offset)?), close + 1));
        }
    }

    let mut out = Vec::with_capacity(branches.len());
    let mut guard_slot: Option<SlotName> = None;
    for raw in branches {
        let body_text = raw.body.text.trim();
        let body = if is_slot_syntax(body_text) {
            BranchBody::Slot(parse_slot(body_text, raw.body.offset)?)
        } else {
            BranchBody::Text(body_text.to_string())
        };
        let guard = match raw.guard {
            None => None,
            Some(g) => {
                let spec = parse_guard(g.text.trim(), g.offset)?;
                if guard_slot.is_some_and(|s| s != spec.slot) {
                    return Err(ParseError::new(
                        g.offset,
                        "guards in one alternation must constrain the same slot",
                        &[&guard_slot.unwrap().to_string()],
                    ));
                }
                guard_slot = Some(spec.slot);
                Some(spec)
            }
        };
        out.push(Branch { body, guard });
    }
    Ok((TemplateNode::Alternation(out), close + 1))
}

fn is_slot_syntax(body: &str) -> bool {
    matches!(body, "X" | "Y") || body.starts_with("X.") || body.starts_with("Y.")
}

fn slot_name(s: &str, offset: usize) -> Result<SlotName, ParseError> {
    match s {
        "X" => Ok(SlotName::X),
        "Y" => Ok(SlotName::Y),
        _ => Err(ParseError::new(offset, format!("unknown slot {s:?}"), &["X", "Y"])),
    }
}

fn feature(spec: &mut FeatureSpec, symbol: &str, offset: usize) -> Result<(), ParseError> {
    let Some(attr) = attribute_of(symbol) else {
        let expected = registry();
        return Err(ParseError { offset, message: format!("unknown feature {symbol:?}"), expected });
    };
    if spec.attrs.insert(attr, symbol.to_string()).is_some() {
        return Err(ParseError::new(offset, format!("{attr:?} given twice"), &["a different attribute"]));
    }
    Ok(())
}

fn parse_slot(body: &str, offset: usize) -> Result<FeatureSpec, ParseError> {
    let mut parts = body.split('.');
    let mut spec = FeatureSpec::bare(slot_name(parts.next().unwrap_or(""), offset)?);
    for part in parts {
        feature(&mut spec, part, offset)?;
    }
    Ok(spec)
}

fn parse_guard(text: &str, offset: usize) -> Result<FeatureSpec, ParseError> {
    let mut spec: Option<FeatureSpec> = None;
    for binding in text.split(',') {
        let Some((slot, value)) = binding.split_once('=') else {
            return Err(ParseError::new(offset, format!("bad guard {binding:?}"), &["X=<feature>", "Y=<feature>"]));
        };
        let slot = slot_name(slot.trim(), offset)?;
        let s = spec.get_or_insert_with(|| FeatureSpec::bare(slot));
        if s.slot != slot {
            return Err(ParseError::new(offset, "one guard binds two slots", &[&s.slot.to_string()]));
        }
        feature(s, value.trim(), offset)?;
    }
    spec.ok_or_else(|| ParseError::new(offset, "empty guard", &["X=<feature>", "Y=<feature>"]))
}

fn check_slots(nodes: &[TemplateNode], end: usize) -> Result<(), ParseError> {
    let mut x = 0;
    let mut y = 0;
    for node in nodes {
        match node {
            TemplateNode::SlotRef(f) if f.slot == SlotName::X => x += 1,
            TemplateNode::SlotRef(_) => y += 1,
            TemplateNode::Alternation(bs) => {
                if bs.iter().any(|b| matches!(&b.body, BranchBody::Slot(f) if f.slot == SlotName::Y)) {
                    return Err(ParseError::new(end, "[Y] may not appear inside an alternation", &["[Y]"]));
                }
                if bs.iter().any(|b| matches!(&b.body, BranchBody::Slot(_))) {
                    x += 1;
                }
            }
            TemplateNode::Literal(_) => {}
        }
    }
    if x != 1 {
        return Err(ParseError::new(end, format!("template must reference [X] exactly once, found {x}"), &["[X]"]));
    }
    if y != 1 {
        return Err(ParseError::new(end, format!("template must contain [Y] exactly once, found {y}"), &["[Y]"]));
    }
    Ok(())
}

fn escape(text: &str, specials: &[char]) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if specials.contains(&c) {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

/// Canonical text of a template; parsing it yields the same AST.
pub fn serialize_template(t: &PromptTemplate) -> String {
    let mut out = String::new();
    let mut prev_bracketed = false;
    for node in &t.nodes {
        if prev_bracketed && is_bracketed(node) {
            out.push(' ');
        }
        prev_bracketed = is_bracketed(node);
        match node {
            TemplateNode::Literal(s) => out.push_str(&escape(s, &['[', ']', '\\'])),
            TemplateNode::SlotRef(f) => {
                out.push('[');
                out.push_str(&f.render_ref());
                out.push(']');
            }
            TemplateNode::Alternation(branches) => {
                let parts: Vec<String> = branches
                    .iter()
                    .map(|b| {
                        let mut s = match &b.body {
                            BranchBody::Text(t) => escape(t, SPECIAL),
                            BranchBody::Slot(f) => f.render_ref(),
                        };
                        if let Some(g) = &b.guard {
                            s.push(';');
                            s.push_str(&g.render_guard());
                        }
                        s
                    })
                    .collect();
                out.push('[');
                out.push_str(&parts.join(" | "));
                out.push(']');
            }
        }
    }
    out
}

enum GuardFit {
    Yes(usize),
    No,
    Unknown(Attribute),
}

fn fit(guard: &Option<FeatureSpec>, features: &FeatureSpec) -> GuardFit {
    let Some(g) = guard else { return GuardFit::Yes(0) };
    let mut unknown = None;
    for (attr, want) in &g.attrs {
        match features.attrs.get(attr) {
            Some(have) if have == want => {}
            Some(_) => return GuardFit::No,
            None => unknown = unknown.or(Some(*attr)),
        }
    }
    match unknown {
        Some(a) => GuardFit::Unknown(a),
        None => GuardFit::Yes(g.attrs.len()),
    }
}

/// Chooses the branch whose guard the features satisfy. An unconditional
/// branch acts as a fallback: among satisfied branches the one with the most
/// bindings wins. Branches with identical bodies never conflict.
pub fn select_branch<'a>(branches: &'a [Branch], features: &FeatureSpec) -> Result<&'a Branch, PromptError> {
    let slot = branches.iter().find_map(|b| b.guard.as_ref().map(|g| g.slot)).unwrap_or(features.slot);
    if branches.len() == 1 {
        return Ok(&branches[0]);
    }
    let mut satisfied: Vec<(usize, &Branch)> = Vec::new();
    let mut undecided: Option<(Attribute, &Branch)> = None;
    for b in branches {
        match fit(&b.guard, features) {
            GuardFit::Yes(n) => satisfied.push((n, b)),
            GuardFit::No => {}
            GuardFit::Unknown(a) => undecided = undecided.or(Some((a, b))),
        }
    }
    if let Some((attribute, b)) = undecided {
        if satisfied.iter().all(|(_, s)| s.body == b.body)
            && branches.iter().all(|o| matches!(fit(&o.guard, features), GuardFit::No) || o.body == b.body)
        {
            return Ok(b);
        }
        return Err(PromptError::AmbiguousFeatures { slot, attribute });
    }
    let most = satisfied.iter().map(|(n, _)| *n).max().ok_or(PromptError::NoBranchMatches { slot })?;
    let top: Vec<&Branch> = satisfied.iter().filter(|(n, _)| *n == most).map(|(_, b)| *b).collect();
    if top.iter().all(|b| b.body == top[0].body) {
        Ok(top[0])
    } else {
        let attribute = top[0].guard.as_ref().and_then(|g| g.attrs.keys().next().copied()).unwrap_or(Attribute::Gender);
        Err(PromptError::AmbiguousFeatures { slot, attribute })
    }
}

/// Surface forms and grammatical features of a subject entity. Inflected
/// forms are produced upstream and supplied as data.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EntityForm {
    pub entity_id: String,
    /// Citation form, also used for the nominative when no explicit form exists.
    pub base: String,
    /// Case symbol (e.g. "Ess") to inflected surface.
    #[serde(default)]
    pub inflected: BTreeMap<String, String>,
    #[serde(default)]
    pub gender: Option<String>,
    #[serde(default)]
    pub number: Option<String>,
}

impl EntityForm {
    pub fn new(entity_id: &str, base: &str) -> Self {
        Self { entity_id: entity_id.into(), base: base.into(), ..Default::default() }
    }

    pub fn features(&self) -> FeatureSpec {
        let mut f = FeatureSpec::bare(SlotName::X);
        if let Some(g) = self.gender.as_deref().filter(|g| attribute_of(g) == Some(Attribute::Gender)) {
            f.attrs.insert(Attribute::Gender, g.to_string());
        }
        if let Some(n) = self.number.as_deref().filter(|n| attribute_of(n) == Some(Attribute::Number)) {
            f.attrs.insert(Attribute::Number, n.to_string());
        }
        f
    }

    pub fn surface(&self, spec: &FeatureSpec) -> Result<&str, PromptError> {
        match spec.get(Attribute::Case) {
            None => Ok(&self.base),
            Some(case) => match self.inflected.get(case) {
                Some(s) => Ok(s),
                None if case == "Nom" => Ok(&self.base),
                None => Err(PromptError::MissingSurfaceForm { entity: self.entity_id.clone(), case: case.to_string() }),
            },
        }
    }
}

/// Languages written without spaces between words; masks are joined
/// without a separator for them.
const UNSPACED: &[&str] = &["zh", "ja", "th", "lo", "km", "my"];

pub fn mask_separator(language: &str) -> &'static str {
    if UNSPACED.contains(&language) {
        ""
    } else {
        " "
    }
}

/// Instantiated text on either side of the `[Y]` slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instantiated {
    pub prefix: String,
    pub suffix: String,
}

/// Resolves the subject and alternations; `[Y]` is left as the split point.
pub fn instantiate_parts(t: &PromptTemplate, subject: &EntityForm) -> Result<Instantiated, PromptError> {
    let features = subject.features();
    let mut prefix = String::new();
    let mut suffix = String::new();
    let sep = mask_separator(&t.language);
    let mut seen_y = false;
    // whether the previous node was bracketed and rendered non-empty text
    let mut pending_boundary = false;
    for node in &t.nodes {
        let piece = match node {
            TemplateNode::Literal(s) => {
                pending_boundary = false;
                if seen_y { &mut suffix } else { &mut prefix }.push_str(s);
                continue;
            }
            TemplateNode::SlotRef(f) if f.slot == SlotName::Y => {
                if pending_boundary {
                    prefix.push_str(sep);
                }
                seen_y = true;
                pending_boundary = true;
                continue;
            }
            TemplateNode::SlotRef(f) => subject.surface(f)?,
            TemplateNode::Alternation(branches) => {
                let slot = branches.iter().find_map(|b| b.guard.as_ref().map(|g| g.slot)).unwrap_or(SlotName::X);
                let feats = if slot == SlotName::X { features.clone() } else { FeatureSpec::bare(SlotName::Y) };
                match &select_branch(branches, &feats)?.body {
                    BranchBody::Text(s) => s.as_str(),
                    BranchBody::Slot(f) => subject.surface(f)?,
                }
            }
        };
        if piece.is_empty() {
            continue;
        }
        let out = if seen_y { &mut suffix } else { &mut prefix };
        if pending_boundary {
            out.push_str(sep);
        }
        out.push_str(piece);
        pending_boundary = true;
    }
    Ok(Instantiated { prefix, suffix })
}

/// Full cloze sentence with `mask_count` copies of `mask_text` in place of `[Y]`.
pub fn instantiate(
    t: &PromptTemplate,
    subject: &EntityForm,
    mask_count: usize,
    mask_text: &str,
) -> Result<String, PromptError> {
    if mask_count == 0 {
        return Err(PromptError::NoMasks);
    }
    let parts = instantiate_parts(t, subject)?;
    let masks = vec![mask_text; mask_count].join(mask_separator(&t.language));
    Ok(format!("{}{}{}", parts.prefix, masks, parts.suffix))
}

/// Loads `<relation_id>.<lang>.tmpl`.
pub fn load_template(path: &Path) -> Result<PromptTemplate, PromptError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
    let stem = name.strip_suffix(".tmpl").ok_or_else(|| PromptError::FileName(name.clone()))?;
    let (relation, lang) = stem.rsplit_once('.').ok_or_else(|| PromptError::FileName(name.clone()))?;
    if relation.is_empty() || lang.is_empty() {
        return Err(PromptError::FileName(name));
    }
    let text = std::fs::read_to_string(path)?;
    let mut t = parse_template(text.trim_end_matches(['\n', '\r']))?;
    t.relation_id = relation.to_string();
    t.language = lang.to_string();
    Ok(t)
}

pub fn template_path(dir: &Path, relation_id: &str, language: &str) -> std::path::PathBuf {
    dir.join(format!("{relation_id}.{language}.tmpl"))
}
