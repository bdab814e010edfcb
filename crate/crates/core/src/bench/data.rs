//! Fact and entity records and their JSON-lines files.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::prompt::EntityForm;

/// One knowledge-base triple family: a subject, a relation and every valid object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    #[serde(rename = "relation")]
    pub relation_id: String,
    #[serde(rename = "subject")]
    pub subject_id: String,
    #[serde(rename = "objects")]
    pub object_ids: BTreeSet<String>,
    #[serde(default)]
    pub frequency: u64,
}

impl Fact {
    pub fn new(relation: &str, subject: &str, objects: &[&str], frequency: u64) -> Self {
        Self {
            relation_id: relation.into(),
            subject_id: subject.into(),
            object_ids: objects.iter().map(|s| s.to_string()).collect(),
            frequency,
        }
    }

    /// Stable identifier used for resuming runs and ordering results.
    pub fn fact_id(&self) -> String {
        format!("{}/{}", self.relation_id, self.subject_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EntityRecord {
    #[serde(rename = "id")]
    pub entity_id: String,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    #[serde(default)]
    pub aliases: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub number: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instance_of: Vec<String>,
    /// Per-language inflected forms of the entity, keyed by case symbol.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub forms: BTreeMap<String, BTreeMap<String, String>>,
    /// Per-language mention counts for aliases, used when sampling a surface
    /// for code-switching. Aliases without a count weigh 1.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub alias_frequencies: BTreeMap<String, BTreeMap<String, u64>>,
}

impl EntityRecord {
    pub fn new(id: &str) -> Self {
        Self { entity_id: id.into(), ..Default::default() }
    }

    /// Sets the canonical label for `lang` and makes sure it is also an alias.
    pub fn with_label(mut self, lang: &str, label: &str) -> Self {
        self.labels.insert(lang.into(), label.into());
        self.normalize();
        self
    }

    pub fn with_aliases(mut self, lang: &str, aliases: &[&str]) -> Self {
        self.aliases.entry(lang.into()).or_default().extend(aliases.iter().map(|s| s.to_string()));
        self.normalize();
        self
    }

    /// Puts every canonical label at the front of its language's alias list
    /// and drops duplicate aliases.
    pub fn normalize(&mut self) {
        for (lang, label) in &self.labels {
            let list = self.aliases.entry(lang.clone()).or_default();
            if !list.contains(label) {
                list.insert(0, label.clone());
            }
        }
        for list in self.aliases.values_mut() {
            let mut seen = BTreeSet::new();
            list.retain(|a| seen.insert(a.clone()));
        }
    }

    pub fn label(&self, lang: &str) -> Option<&str> {
        self.labels.get(lang).map(String::as_str)
    }

    pub fn aliases_in(&self, lang: &str) -> &[String] {
        self.aliases.get(lang).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Surface forms for prompt instantiation, or `None` without a label in `lang`.
    pub fn entity_form(&self, lang: &str) -> Option<EntityForm> {
        let base = self.label(lang)?;
        Some(EntityForm {
            entity_id: self.entity_id.clone(),
            base: base.to_string(),
            inflected: self.forms.get(lang).cloned().unwrap_or_default(),
            gender: self.gender.clone(),
            number: self.number.clone(),
        })
    }
}

pub type Entities = HashMap<String, EntityRecord>;

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, BenchError> {
    let file = std::fs::File::open(path).map_err(|e| BenchError::Io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| BenchError::Io(path.display().to_string(), e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Parses fact rows; rows sharing (relation, subject) are merged by taking the
/// union of their objects and summing their frequencies. Order follows first
/// appearance.
pub fn parse_facts<'a>(lines: impl IntoIterator<Item = (usize, &'a str)>) -> Result<Vec<Fact>, BenchError> {
    let mut out: Vec<Fact> = Vec::new();
    let mut index: HashMap<(String, String), usize> = HashMap::new();
    for (line, text) in lines {
        let fact: Fact = serde_json::from_str(text).map_err(|e| BenchError::Schema { line, message: e.to_string() })?;
        if fact.object_ids.is_empty() {
            return Err(BenchError::Schema { line, message: "objects must not be empty".into() });
        }
        match index.get(&(fact.relation_id.clone(), fact.subject_id.clone())) {
            Some(&i) => {
                out[i].object_ids.extend(fact.object_ids);
                out[i].frequency = out[i].frequency.saturating_add(fact.frequency);
            }
            None => {
                index.insert((fact.relation_id.clone(), fact.subject_id.clone()), out.len());
                out.push(fact);
            }
        }
    }
    Ok(out)
}

pub fn load_facts(path: &Path) -> Result<Vec<Fact>, BenchError> {
    let lines = read_lines(path)?;
    parse_facts(lines.iter().map(|(n, s)| (*n, s.as_str())))
}

pub fn parse_entities<'a>(lines: impl IntoIterator<Item = (usize, &'a str)>) -> Result<Entities, BenchError> {
    let mut out = Entities::new();
    for (line, text) in lines {
        let mut e: EntityRecord =
            serde_json::from_str(text).map_err(|err| BenchError::Schema { line, message: err.to_string() })?;
        e.normalize();
        if out.insert(e.entity_id.clone(), e).is_some() {
            return Err(BenchError::Schema { line, message: "duplicate entity id".into() });
        }
    }
    Ok(out)
}

pub fn load_entities(path: &Path) -> Result<Entities, BenchError> {
    let lines = read_lines(path)?;
    parse_entities(lines.iter().map(|(n, s)| (*n, s.as_str())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(text: &str) -> Vec<(usize, &str)> {
        text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty()).collect()
    }

    #[test]
    fn two_objects_in_one_fact() {
        let facts = parse_facts(lines(r#"{"relation":"P530","subject":"Q30","objects":["Q142","Q16"],"frequency":4}"#))
            .unwrap();
        assert_eq!(facts.len(), 1);
        assert_eq!(facts[0].object_ids.len(), 2);
    }

    #[test]
    fn duplicate_rows_merge() {
        let text = r#"{"relation":"P530","subject":"Q30","objects":["Q142"],"frequency":2}
{"relation":"P19","subject":"Q1","objects":["Q2"],"frequency":1}
{"relation":"P530","subject":"Q30","objects":["Q16","Q142"],"frequency":3}"#;
        let facts = parse_facts(lines(text)).unwrap();
        assert_eq!(facts.len(), 2);
        assert_eq!(facts[0].object_ids, ["Q142", "Q16"].iter().map(|s| s.to_string()).collect());
        assert_eq!(facts[0].frequency, 5);
        assert_eq!(facts[1].fact_id(), "P19/Q1");
    }

    #[test]
    fn malformed_line_is_named() {
        let text = "{\"relation\":\"P1\",\"subject\":\"Q1\",\"objects\":[\"Q2\"],\"frequency\":1}\n\nnot json";
        match parse_facts(lines(text)) {
            Err(BenchError::Schema { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let neg = r#"{"relation":"P1","subject":"Q1","objects":["Q2"],"frequency":-1}"#;
        assert!(matches!(parse_facts(lines(neg)), Err(BenchError::Schema { line: 1, .. })));
        let empty = r#"{"relation":"P1","subject":"Q1","objects":[],"frequency":1}"#;
        assert!(matches!(parse_facts(lines(empty)), Err(BenchError::Schema { line: 1, .. })));
    }

    #[test]
    fn empty_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("facts.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_facts(&p).unwrap().is_empty());
        assert!(load_entities(&p).unwrap().is_empty());
    }

    #[test]
    fn label_is_always_an_alias() {
        let text = r#"{"id":"Q60","labels":{"es":"Nueva York"},"aliases":{"es":["NY","NY"]},"gender":"FEM"}"#;
        let ents = parse_entities(lines(text)).unwrap();
        let e = &ents["Q60"];
        assert_eq!(e.aliases_in("es"), ["Nueva York", "NY"]);
        assert_eq!(e.entity_form("es").unwrap().gender.as_deref(), Some("FEM"));
        assert!(e.entity_form("fr").is_none());
    }
}
