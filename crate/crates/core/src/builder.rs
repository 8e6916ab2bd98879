//! Building templated records from entity-mentioning question/answer pairs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_jsonl;
use crate::text::{char_len, replace_chars, tokenize};
use crate::types::{Answer, CharSpan, InstanceRecord, Split, Taxonomy};

pub const DEFAULT_PATTERN: &str = "this {t}";
pub const REASON_NO_MENTION: &str = "no-mention";
const DETERMINERS: [&str; 3] = ["a", "an", "the"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
    pub entity: String,
    #[serde(default)]
    pub source: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paraphrases: Vec<String>,
}

pub fn hypernym_of(entity: &str, taxonomy: &Taxonomy) -> Result<String> {
    if !taxonomy.contains(entity) {
        return Err(Error::Data(format!("entity {entity:?} is not in the taxonomy")));
    }
    taxonomy
        .parent(entity)
        .map(str::to_string)
        .ok_or_else(|| Error::Data(format!("entity {entity:?} is a root and has no parent")))
}

/// Char range of the first whole-word, case-insensitive mention of
/// `entity`. The last word may carry a plural "s"/"es".
pub fn find_mention(question: &str, entity: &str) -> Option<(usize, usize)> {
    let hay = tokenize(question);
    let needle: Vec<String> = tokenize(entity).iter().map(|t| t.text.to_lowercase()).collect();
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    let last = needle.len() - 1;
    (0..=hay.len() - needle.len()).find_map(|i| {
        let window = &hay[i..i + needle.len()];
        let ok = window.iter().zip(&needle).enumerate().all(|(j, (t, n))| {
            let t = t.text.to_lowercase();
            if j < last {
                t == *n
            } else {
                t == *n || t.strip_prefix(n.as_str()).is_some_and(|rest| rest == "s" || rest == "es")
            }
        });
        ok.then(|| (window[0].start, window[last].end))
    })
}

/// Replace the first mention of `entity` (and a directly preceding
/// determiner) with `pattern`, where `{t}` stands for the hypernym.
/// Returns the new question and the span of the inserted text.
pub fn apply_template_with(question: &str, entity: &str, hypernym: &str, pattern: &str) -> Result<(String, CharSpan)> {
    let (mut start, end) = find_mention(question, entity)
        .ok_or_else(|| Error::InvalidArgument(format!("question {question:?} does not mention {entity:?}")))?;
    let tokens = tokenize(question);
    if let Some(pos) = tokens.iter().position(|t| t.start == start) {
        if pos > 0 {
            let prev = &tokens[pos - 1];
            let gap_is_space = question
                .chars()
                .skip(prev.end)
                .take(start - prev.end)
                .all(char::is_whitespace);
            if gap_is_space && prev.end < start && DETERMINERS.contains(&prev.text.to_lowercase().as_str()) {
                start = prev.start;
            }
        }
    }
    let mut inserted = pattern.replace("{t}", hypernym);
    let sentence_start = question.chars().take(start).all(char::is_whitespace);
    if sentence_start {
        let mut chars = inserted.chars();
        if let Some(first) = chars.next() {
            inserted = first.to_uppercase().chain(chars).collect();
        }
    }
    let out = replace_chars(question, start, end, &inserted).expect("mention lies inside the question");
    let span = CharSpan::from_source(&out, start, start + char_len(&inserted))?;
    Ok((out, span))
}

pub fn apply_template(question: &str, entity: &str, hypernym: &str) -> Result<(String, CharSpan)> {
    apply_template_with(question, entity, hypernym, DEFAULT_PATTERN)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub index: usize,
    pub reason: String,
}

/// Extra filter: returns a reason code to reject a pair.
pub type PairPredicate = Box<dyn Fn(&QAPair) -> Option<String> + Send + Sync>;

pub fn filter_pairs(pairs: &[QAPair], hooks: &[PairPredicate]) -> (Vec<QAPair>, Vec<Rejection>) {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (index, pair) in pairs.iter().enumerate() {
        let reason = if find_mention(&pair.question, &pair.entity).is_none() {
            Some(REASON_NO_MENTION.to_string())
        } else {
            hooks.iter().find_map(|h| h(pair))
        };
        match reason {
            Some(reason) => {
                log::info!("rejecting pair {index}: {reason}");
                rejected.push(Rejection { index, reason });
            }
            None => kept.push(pair.clone()),
        }
    }
    (kept, rejected)
}

/// Entity label to image ids, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImagePool {
    images: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolLine {
    pub entity: String,
    pub image_id: String,
}

impl ImagePool {
    pub fn from_lines(lines: &[PoolLine]) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut images: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for l in lines {
            if !seen.insert(l.image_id.as_str()) {
                return Err(Error::validation("image_id", format!("{:?} appears twice in the pool", l.image_id)));
            }
            images.entry(l.entity.to_lowercase()).or_default().push(l.image_id.clone());
        }
        Ok(ImagePool { images })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_lines(&read_jsonl::<PoolLine>(path)?)
    }

    pub fn images(&self, entity: &str) -> &[String] {
        self.images.get(&entity.to_lowercase()).map_or(&[], Vec::as_slice)
    }
}

/// One distinct image per occurrence of each entity, taken in pool order.
pub fn assign_images(entities: &[&str], pool: &ImagePool) -> Result<Vec<String>> {
    let mut needed: BTreeMap<String, usize> = BTreeMap::new();
    for e in entities {
        *needed.entry(e.to_lowercase()).or_default() += 1;
    }
    for e in entities {
        let key = e.to_lowercase();
        let have = pool.images(&key).len();
        if needed[&key] > have {
            return Err(Error::PoolExhausted {
                entity: key.clone(),
                deficit: needed[&key] - have,
            });
        }
    }
    let mut cursor: BTreeMap<String, usize> = BTreeMap::new();
    Ok(entities
        .iter()
        .map(|e| {
            let key = e.to_lowercase();
            let i = cursor.entry(key.clone()).or_default();
            let id = pool.images(&key)[*i].clone();
            *i += 1;
            id
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub pattern: String,
    pub split: Split,
    pub id_prefix: String,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            pattern: DEFAULT_PATTERN.into(),
            split: Split::Test,
            id_prefix: "s3".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub records: Vec<InstanceRecord>,
    pub rejections: Vec<Rejection>,
}

pub fn build_dataset(
    pairs: &[QAPair],
    taxonomy: &Taxonomy,
    pool: &ImagePool,
    hooks: &[PairPredicate],
    options: &BuildOptions,
) -> Result<BuildOutput> {
    let (kept, rejections) = filter_pairs(pairs, hooks);
    let entities: Vec<&str> = kept.iter().map(|p| p.entity.as_str()).collect();
    let images = assign_images(&entities, pool)?;
    let mut records = Vec::with_capacity(kept.len());
    for (i, (pair, image_id)) in kept.iter().zip(images).enumerate() {
        let hypernym = hypernym_of(&pair.entity, taxonomy)?;
        let (question, span) = apply_template_with(&pair.question, &pair.entity, &hypernym, &options.pattern)?;
        let record = InstanceRecord {
            id: format!("{}-{:05}", options.id_prefix, i),
            question,
            image_id,
            detections: vec![],
            gold_span: Some(span),
            gold_object: Some(pair.entity.clone()),
            reformulated_gold: Some(pair.question.clone()),
            answers: vec![Answer::new(pair.answer.clone(), 1)],
            split: options.split,
            alternate_questions: pair.paraphrases.clone(),
        };
        record.validate_single_answer()?;
        records.push(record);
    }
    Ok(BuildOutput { records, rejections })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn taxonomy() -> Taxonomy {
        let mut t = Taxonomy::new();
        t.add_edge("peacock", "bird").unwrap();
        t.add_edge("bird", "animal").unwrap();
        t.add_edge("elephant", "animal").unwrap();
        t
    }

    fn pair(q: &str, e: &str) -> QAPair {
        QAPair {
            question: q.into(),
            answer: "india".into(),
            entity: e.into(),
            source: "wiki".into(),
            paraphrases: vec![],
        }
    }

    #[test]
    fn hypernym_lookup() {
        let t = taxonomy();
        assert_eq!(hypernym_of("peacock", &t).unwrap(), "bird");
        assert!(hypernym_of("animal", &t).is_err());
        assert!(hypernym_of("zebra", &t).is_err());
    }

    #[test]
    fn determiner_is_replaced_with_the_mention() {
        let (q, span) = apply_template("Where does a peacock live?", "peacock", "bird").unwrap();
        assert_eq!(q, "Where does this bird live?");
        assert_eq!((span.start, span.end, span.text.as_str()), (11, 20, "this bird"));
    }

    #[test]
    fn sentence_initial_mention_is_capitalized() {
        let (q, span) = apply_template("Peacocks dance when?", "peacock", "bird").unwrap();
        assert_eq!(q, "This bird dance when?");
        assert_eq!(span.text, "This bird");
    }

    #[test]
    fn missing_mention_is_an_error() {
        assert!(apply_template("Where do lions live?", "peacock", "bird").is_err());
        assert!(apply_template("Is peacockery a word?", "peacock", "bird").is_err());
    }

    #[test]
    fn only_the_first_mention_changes() {
        let (q, _) = apply_template("Is the peacock bigger than a peacock chick?", "peacock", "bird").unwrap();
        assert_eq!(q, "Is this bird bigger than a peacock chick?");
    }

    #[test]
    fn filter_counts() {
        let mut pairs: Vec<QAPair> = (0..7).map(|_| pair("where does a peacock live?", "peacock")).collect();
        pairs.insert(2, pair("where does it live?", "peacock"));
        pairs.insert(5, pair("what is this?", "elephant"));
        pairs.push(pair("how big is it?", "elephant"));
        let (kept, rejected) = filter_pairs(&pairs, &[]);
        assert_eq!(kept.len(), 7);
        assert_eq!(rejected.len(), 3);
        assert!(rejected.iter().all(|r| r.reason == REASON_NO_MENTION));
        assert_eq!(rejected[0].index, 2);
        let hook: PairPredicate = Box::new(|p| (p.answer == "india").then(|| "unanswerable".to_string()));
        let (kept, rejected) = filter_pairs(&pairs, &[hook]);
        assert!(kept.is_empty());
        assert_eq!(rejected.iter().filter(|r| r.reason == "unanswerable").count(), 7);
    }

    fn pool() -> ImagePool {
        let mut lines: Vec<PoolLine> = (0..5)
            .map(|i| PoolLine {
                entity: "peacock".into(),
                image_id: format!("p{i}"),
            })
            .collect();
        lines.extend((0..2).map(|i| PoolLine {
            entity: "elephant".into(),
            image_id: format!("e{i}"),
        }));
        ImagePool::from_lines(&lines).unwrap()
    }

    #[test]
    fn images_assigned_in_pool_order() {
        let ids = assign_images(&["peacock", "elephant", "peacock", "peacock"], &pool()).unwrap();
        assert_eq!(ids, ["p0", "e0", "p1", "p2"]);
    }

    #[test]
    fn pool_exhaustion_reports_deficit() {
        let err = assign_images(&["elephant"; 3], &pool()).unwrap_err();
        assert!(matches!(err, Error::PoolExhausted { ref entity, deficit: 1 } if entity == "elephant"));
    }

    #[test]
    fn duplicate_pool_ids_rejected() {
        let line = PoolLine {
            entity: "a".into(),
            image_id: "x".into(),
        };
        assert!(ImagePool::from_lines(&[line.clone(), line]).is_err());
    }

    #[test]
    fn one_pair_builds_one_record() {
        let out = build_dataset(
            &[pair("Where does a peacock live?", "peacock")],
            &taxonomy(),
            &pool(),
            &[],
            &BuildOptions::default(),
        )
        .unwrap();
        let r = &out.records[0];
        assert_eq!(r.gold_span.as_ref().unwrap().text, "this bird");
        assert_eq!(r.gold_object.as_deref(), Some("peacock"));
        assert_eq!(r.reformulated_gold.as_deref(), Some("Where does a peacock live?"));
        assert_eq!(r.image_id, "p0");
        let empty = build_dataset(&[], &taxonomy(), &pool(), &[], &BuildOptions::default()).unwrap();
        assert!(empty.records.is_empty());
    }

    proptest! {
        #[test]
        fn template_only_touches_the_replaced_segment(
            prefix in "[a-z]{1,6}( [a-z]{1,6}){0,3}",
            det in prop::sample::select(vec!["", "a ", "the ", "an "]),
            suffix in "( [a-z]{1,6}){0,3}\\?",
        ) {
            prop_assume!(!prefix.split(' ').any(|w| w.starts_with("peacock")));
            prop_assume!(!DETERMINERS.contains(&prefix.rsplit(' ').next().unwrap()));
            let question = format!("{prefix} {det}peacock{suffix}");
            let (out, span) = apply_template(&question, "peacock", "bird").unwrap();
            let head: String = question.chars().take(span.start).collect();
            prop_assert_eq!(&out.chars().take(span.start).collect::<String>(), &head);
            prop_assert!(question.ends_with(&out[out.len() - suffix.len()..]));
            let grown = char_len(&out) as i64 - char_len(&question) as i64;
            prop_assert_eq!(grown, char_len("this bird") as i64 - char_len(&format!("{det}peacock")) as i64);
        }

        #[test]
        fn assignment_is_deterministic_and_distinct(picks in prop::collection::vec(0usize..2, 0..6)) {
            let ents: Vec<&str> = picks.iter().map(|&i| ["peacock", "elephant"][i]).collect();
            let pool = pool();
            match (assign_images(&ents, &pool), assign_images(&ents, &pool)) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(&a, &b);
                    let distinct: BTreeSet<&String> = a.iter().collect();
                    prop_assert_eq!(distinct.len(), a.len());
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "non-deterministic"),
            }
        }
    }
}
