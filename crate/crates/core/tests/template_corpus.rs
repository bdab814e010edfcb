//! Every shipped template parses, round-trips, and instantiates.

use std::path::PathBuf;

use cloze_forge::prompt::{instantiate, load_template, parse_template, serialize_template, EntityForm};

fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/templates")
}

fn shipped() -> Vec<PathBuf> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(corpus_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "tmpl"))
        .collect();
    paths.sort();
    paths
}

#[test]
fn covers_all_languages() {
    let langs: std::collections::BTreeSet<String> =
        shipped().iter().map(|p| load_template(p).unwrap().language).collect();
    for lang in [
        "en", "fr", "nl", "es", "ru", "ja", "zh", "hu", "he", "tr", "ko", "vi", "el", "ceb", "mr", "bn", "war", "tl",
        "sw", "pa", "mg", "yo", "ilo",
    ] {
        assert!(langs.contains(lang), "no template for {lang}");
    }
}

#[test]
fn shipped_templates_round_trip() {
    for path in shipped() {
        let t = load_template(&path).unwrap();
        let text = serialize_template(&t);
        let mut back = parse_template(&text).unwrap();
        back.relation_id = t.relation_id.clone();
        back.language = t.language.clone();
        assert_eq!(back, t, "{}", path.display());
        assert_eq!(serialize_template(&back), text);
    }
}

#[test]
fn shipped_templates_instantiate() {
    let mut subject = EntityForm::new("Q1", "Subject");
    subject.gender = Some("FEM".into());
    for case in ["Gen", "Ess", "Loc", "Ine"] {
        subject.inflected.insert(case.into(), format!("Subject-{case}"));
    }
    for path in shipped() {
        let t = load_template(&path).unwrap();
        for m in 1..=3 {
            let s = instantiate(&t, &subject, m, "<mask>").unwrap();
            assert_eq!(s.matches("<mask>").count(), m, "{}", path.display());
            assert!(s.contains("Subject"));
        }
    }
}

#[test]
fn russian_feminine_subject() {
    let t = load_template(&corpus_dir().join("P19.ru.tmpl")).unwrap();
    assert_eq!(t.nodes.len(), 5);
    let mut e = EntityForm::new("Q7186", "Мария Кюри");
    e.gender = Some("FEM".into());
    e.inflected.insert("Ess".into(), "unused".into());
    let s = instantiate(&t, &e, 1, "[MASK]").unwrap();
    assert_eq!(s, "Мария Кюри родилась в [MASK].");
}
