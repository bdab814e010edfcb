//! Code-switched fine-tuning data: swap every entity mention in a sentence
//! for an alias in another language, then choose which words to mask.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{draw_index, Entities};

#[derive(Debug, Error)]
pub enum CsError {
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("mention {index}: {message}")]
    Mention { index: usize, message: String },
    #[error("{0} must be a probability in [0, 1]")]
    Probability(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Entity mention as a byte range into the sentence text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention(pub usize, pub usize, pub String);

impl Mention {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.0..self.1
    }

    pub fn entity_id(&self) -> &str {
        &self.2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionSentence {
    pub text: String,
    pub mentions: Vec<Mention>,
    #[serde(rename = "lang")]
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_plan: Option<Vec<usize>>,
}

impl MentionSentence {
    pub fn new(text: &str, mentions: &[(usize, usize, &str)], language: &str) -> Result<Self, CsError> {
        let s = Self {
            text: text.into(),
            mentions: mentions.iter().map(|&(a, b, id)| Mention(a, b, id.into())).collect(),
            language: language.into(),
            mask_plan: None,
        };
        s.validate()?;
        Ok(s)
    }

    /// Checks that mentions are sorted, disjoint, non-empty and on UTF-8 boundaries.
    pub fn validate(&self) -> Result<(), CsError> {
        let mut prev_end = 0;
        for (index, m) in self.mentions.iter().enumerate() {
            let err = |message: &str| Err(CsError::Mention { index, message: message.into() });
            if m.0 >= m.1 || m.1 > self.text.len() {
                return err("span is empty or out of bounds");
            }
            if !self.text.is_char_boundary(m.0) || !self.text.is_char_boundary(m.1) {
                return err("span splits a UTF-8 character");
            }
            if m.0 < prev_end {
                return err("spans overlap or are out of order");
            }
            prev_end = m.1;
        }
        Ok(())
    }

    pub fn mention_text(&self, m: &Mention) -> &str {
        &self.text[m.range()]
    }
}

/// How sentences are cut into maskable words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segmentation {
    /// Maximal runs of non-whitespace.
    #[default]
    Whitespace,
    /// Every non-whitespace character, for scripts written without spaces.
    Characters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchConfig {
    pub p_switch: f64,
    pub p_mask_word: f64,
    pub p_mask_mention: f64,
    pub target_language: String,
    pub seed: u64,
    #[serde(default)]
    pub segmentation: Segmentation,
}

impl SwitchConfig {
    pub fn new(target_language: &str, seed: u64) -> Self {
        Self {
            p_switch: 0.30,
            p_mask_word: 0.15,
            p_mask_mention: 0.50,
            target_language: target_language.into(),
            seed,
            segmentation: Segmentation::Whitespace,
        }
    }

    pub fn validate(&self) -> Result<(), CsError> {
        for (name, p) in
            [("p_switch", self.p_switch), ("p_mask_word", self.p_mask_word), ("p_mask_mention", self.p_mask_mention)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(CsError::Probability(name));
            }
        }
        Ok(())
    }

    /// Random stream for sentence `index`, independent of processing order.
    pub fn sentence_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

/// What happened to one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchOutcome {
    Switched,
    Kept,
    /// Some mentioned entity has no alias in the target language.
    MissingAlias,
}

/// With probability `p_switch`, replaces every mention with an alias of its
/// entity in the target language, chosen in proportion to alias frequency.
/// Text outside mentions is copied byte for byte and spans are moved to the
/// new aliases. Sentences with an unswitchable mention pass through unchanged.
pub fn code_switch<R: Rng>(
    s: &MentionSentence,
    entities: &Entities,
    cfg: &SwitchConfig,
    rng: &mut R,
) -> (MentionSentence, SwitchOutcome) {
    let lang = cfg.target_language.as_str();
    let switchable =
        s.mentions.iter().all(|m| entities.get(m.entity_id()).is_some_and(|e| !e.aliases_in(lang).is_empty()));
    if !switchable {
        return (s.clone(), SwitchOutcome::MissingAlias);
    }
    if s.mentions.is_empty() || rng.gen::<f64>() >= cfg.p_switch {
        return (s.clone(), SwitchOutcome::Kept);
    }
    let mut text = String::with_capacity(s.text.len());
    let mut mentions = Vec::with_capacity(s.mentions.len());
    let mut cursor = 0;
    for m in &s.mentions {
        let e = &entities[m.entity_id()];
        let aliases = e.aliases_in(lang);
        let freqs = e.alias_frequencies.get(lang);
        let weights = aliases.iter().map(|a| freqs.and_then(|f| f.get(a)).copied().unwrap_or(1));
        let alias = &aliases[draw_index(rng, weights)];
        text.push_str(&s.text[cursor..m.0]);
        let start = text.len();
        text.push_str(alias);
        mentions.push(Mention(start, text.len(), m.2.clone()));
        cursor = m.1;
    }
    text.push_str(&s.text[cursor..]);
    let out = MentionSentence { text, mentions, language: s.language.clone(), mask_plan: None };
    (out, SwitchOutcome::Switched)
}

/// Byte ranges of the maskable words of `text`.
pub fn segment(text: &str, how: Segmentation) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(s..i);
            }
        } else if how == Segmentation::Characters {
            out.push(i..i + c.len_utf8());
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(s..text.len());
    }
    out
}

/// Indices of words to mask: words overlapping a mention are picked with
/// `p_mask_mention`, all others with `p_mask_word`, each independently.
pub fn masking_plan<R: Rng>(s: &MentionSentence, cfg: &SwitchConfig, rng: &mut R) -> BTreeSet<usize> {
    segment(&s.text, cfg.segmentation)
        .into_iter()
        .enumerate()
        .filter(|(_, w)| {
            let in_mention = s.mentions.iter().any(|m| m.0 < w.end && w.start < m.1);
            let p = if in_mention { cfg.p_mask_mention } else { cfg.p_mask_word };
            rng.gen::<f64>() < p
        })
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub switched: usize,
    pub missing_alias: usize,
}

/// Switches and plans masks for sentence `index` using its own random stream.
pub fn process_sentence(
    index: u64,
    s: &MentionSentence,
    entities: &Entities,
    cfg: &SwitchConfig,
) -> (MentionSentence, SwitchOutcome) {
    let mut rng = cfg.sentence_rng(index);
    let (mut out, outcome) = code_switch(s, entities, cfg, &mut rng);
    out.mask_plan = Some(masking_plan(&out, cfg, &mut rng).into_iter().collect());
    (out, outcome)
}

pub fn process_corpus(
    sentences: &[MentionSentence],
    entities: &Entities,
    cfg: &SwitchConfig,
) -> (Vec<MentionSentence>, CorpusStats) {
    let mut stats = CorpusStats { sentences: sentences.len(), ..Default::default() };
    let out = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (o, outcome) = process_sentence(i as u64, s, entities, cfg);
            match outcome {
                SwitchOutcome::Switched => stats.switched += 1,
                SwitchOutcome::MissingAlias => stats.missing_alias += 1,
                SwitchOutcome::Kept => {}
            }
            o
        })
        .collect();
    (out, stats)
}

pub fn read_sentences<R: BufRead>(reader: R) -> Result<Vec<MentionSentence>, CsError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: MentionSentence =
            serde_json::from_str(&line).map_err(|e| CsError::Schema { line: i + 1, message: e.to_string() })?;
        s.validate().map_err(|e| CsError::Schema { line: i + 1, message: e.to_string() })?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_sentences<W: Write>(mut writer: W, sentences: &[MentionSentence]) -> Result<(), CsError> {
    for s in sentences {
        serde_json::to_writer(&mut writer, s).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::EntityRecord;
    use proptest::prelude::*;

    fn entities() -> Entities {
        let mut obama = EntityRecord::new("Q76").with_label("en", "Obama").with_label("el", "Oμπάμα");
        obama.normalize();
        let mut paris = EntityRecord::new("Q90").with_label("en", "Paris").with_aliases("fr", &["Paris", "Lutèce"]);
        paris.alias_frequencies.insert("fr".into(), [("Paris".into(), 9), ("Lutèce".into(), 1)].into());
        let hawaii = EntityRecord::new("Q782").with_label("en", "Hawaii").with_label("el", "Χαβάη");
        [obama, paris, hawaii].into_iter().map(|e| (e.entity_id.clone(), e)).collect()
    }

    fn forced(lang: &str) -> SwitchConfig {
        SwitchConfig { p_switch: 1.0, ..SwitchConfig::new(lang, 1) }
    }

    #[test]
    fn greek_switch() {
        let s = MentionSentence::new("Obama later reflected on his years …", &[(0, 5, "Q76")], "en").unwrap();
        let (out, outcome) = code_switch(&s, &entities(), &forced("el"), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(outcome, SwitchOutcome::Switched);
        assert_eq!(out.text, "Oμπάμα later reflected on his years …");
        assert_eq!(out.mention_text(&out.mentions[0]), "Oμπάμα");
        out.validate().unwrap();
    }

    #[test]
    fn all_mentions_switch_together() {
        let s = MentionSentence::new("Obama was born in Hawaii.", &[(0, 5, "Q76"), (18, 24, "Q782")], "en").unwrap();
        let (out, _) = code_switch(&s, &entities(), &forced("el"), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.text, "Oμπάμα was born in Χαβάη.");
        assert_eq!(out.mention_text(&out.mentions[1]), "Χαβάη");
    }

    #[test]
    fn zero_probability_is_identity() {
        let s = MentionSentence::new("Obama later", &[(0, 5, "Q76")], "en").unwrap();
        let cfg = SwitchConfig { p_switch: 0.0, ..SwitchConfig::new("el", 3) };
        for seed in 0..100 {
            let (out, o) = code_switch(&s, &entities(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!((out, o), (s.clone(), SwitchOutcome::Kept));
        }
    }

    #[test]
    fn missing_alias_passes_through() {
        let s = MentionSentence::new("Obama in Paris", &[(0, 5, "Q76"), (9, 14, "Q90")], "en").unwrap();
        let (out, o) = code_switch(&s, &entities(), &forced("el"), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!((out, o), (s, SwitchOutcome::MissingAlias));
    }

    #[test]
    fn alias_choice_follows_frequency() {
        let s = MentionSentence::new("Paris", &[(0, 5, "Q90")], "en").unwrap();
        let ents = entities();
        let cfg = forced("fr");
        let hits = (0..10_000u64)
            .filter(|&i| code_switch(&s, &ents, &cfg, &mut cfg.sentence_rng(i)).0.text == "Paris")
            .count();
        let share = hits as f64 / 10_000.0;
        assert!((share - 0.9).abs() <= 0.015, "{share}");
    }

    #[test]
    fn switch_rate_converges() {
        let s = MentionSentence::new("Obama later", &[(0, 5, "Q76")], "en").unwrap();
        let corpus = vec![s; 10_000];
        let (_, stats) = process_corpus(&corpus, &entities(), &SwitchConfig::new("el", 11));
        let rate = stats.switched as f64 / 10_000.0;
        assert!((rate - 0.30).abs() <= 0.01, "{rate}");
    }

    #[test]
    fn masking_plan_degenerate_rates() {
        let s = MentionSentence::new("Barack Obama later reflected", &[(0, 12, "Q76")], "en").unwrap();
        let mut cfg = SwitchConfig { p_mask_word: 0.0, p_mask_mention: 1.0, ..SwitchConfig::new("el", 0) };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(masking_plan(&s, &cfg, &mut rng), BTreeSet::from([0, 1]));
        cfg.p_mask_mention = 0.0;
        assert!(masking_plan(&s, &cfg, &mut rng).is_empty());
    }

    #[test]
    fn masking_rate_without_mentions() {
        let text = vec!["w"; 10_000].join(" ");
        let s = MentionSentence::new(&text, &[], "en").unwrap();
        let plan = masking_plan(&s, &SwitchConfig::new("el", 0), &mut ChaCha8Rng::seed_from_u64(8));
        let rate = plan.len() as f64 / 10_000.0;
        assert!((rate - 0.15).abs() <= 0.01, "{rate}");
    }

    #[test]
    fn segmentation_modes() {
        assert_eq!(segment("  ab c\td ", Segmentation::Whitespace), vec![2..4, 5..6, 7..8]);
        assert_eq!(segment("東京 都", Segmentation::Characters), vec![0..3, 3..6, 7..10]);
    }

    #[test]
    fn bad_mentions_rejected() {
        assert!(MentionSentence::new("Oμπάμα", &[(0, 2, "Q")], "el").is_err());
        assert!(MentionSentence::new("abc", &[(0, 2, "Q"), (1, 3, "Q")], "en").is_err());
        assert!(MentionSentence::new("abc", &[(0, 4, "Q")], "en").is_err());
        assert!(SwitchConfig { p_switch: 1.5, ..SwitchConfig::new("el", 0) }.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let line = r#"{"text":"Obama later","mentions":[[0,5,"Q76"]],"lang":"en"}"#;
        let sents = read_sentences(line.as_bytes()).unwrap();
        let (out, _) = process_corpus(&sents, &entities(), &forced("el"));
        let mut buf = Vec::new();
        write_sentences(&mut buf, &out).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(r#"{"text":"Oμπάμα later","mentions":[[0,11,"Q76"]],"lang":"en","mask_plan":["#));
        assert_eq!(read_sentences(text.as_bytes()).unwrap(), out);
        assert!(matches!(read_sentences("{}".as_bytes()), Err(CsError::Schema { line: 1, .. })));
    }

    fn arb_sentence() -> impl Strategy<Value = MentionSentence> {
        let piece = prop_oneof![
            "[a-zé …]{0,6}".prop_map(|t| (t, None)),
            prop::sample::select(vec![("Obama", "Q76"), ("Hawaii", "Q782"), ("Paris", "Q90")])
                .prop_map(|(t, id)| (t.to_string(), Some(id.to_string()))),
        ];
        prop::collection::vec(piece, 0..8).prop_map(|pieces| {
            let mut text = String::new();
            let mut mentions = Vec::new();
            for (t, id) in pieces {
                let start = text.len();
                text.push_str(&t);
                if let Some(id) = id {
                    mentions.push(Mention(start, text.len(), id));
                }
                text.push(' ');
            }
            MentionSentence { text, mentions, language: "en".into(), mask_plan: None }
        })
    }

    proptest! {
        #[test]
        fn non_mention_bytes_preserved(s in arb_sentence(), seed: u64, lang in prop::sample::select(vec!["el", "fr", "en"])) {
            let cfg = forced(lang);
            let (out, outcome) = code_switch(&s, &entities(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            out.validate().unwrap();
            prop_assert_eq!(out.mentions.len(), s.mentions.len());
            let gaps = |x: &MentionSentence| {
                let mut v = Vec::new();
                let mut c = 0;
                for m in &x.mentions {
                    v.push(x.text[c..m.0].to_string());
                    c = m.1;
                }
                v.push(x.text[c..].to_string());
                v
            };
            prop_assert_eq!(gaps(&out), gaps(&s));
            if outcome == SwitchOutcome::Switched {
                let ents = entities();
                for m in &out.mentions {
                    prop_assert!(ents[m.entity_id()].aliases_in(lang).iter().any(|a| a == out.mention_text(m)));
                }
            } else {
                prop_assert_eq!(&out, &s);
            }
        }

        #[test]
        fn processing_is_order_independent(sents in prop::collection::vec(arb_sentence(), 1..6), seed: u64) {
            let cfg = SwitchConfig::new("el", seed);
            let (all, _) = process_corpus(&sents, &entities(), &cfg);
            for (i, s) in sents.iter().enumerate().rev() {
                prop_assert_eq!(&process_sentence(i as u64, s, &entities(), &cfg).0, &all[i]);
            }
        }
    }
}
