//! Synthetic fixtures: a toy taxonomy with ball coordinates, templated
//! questions over it, and snippets with planted answers.
#![allow(dead_code)]

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reformqa::io::CorpusDoc;
use reformqa::search::Reader;
use reformqa::select::SelectModel;
use reformqa::substitute::{reformulate, SubstituteModel};
use reformqa::types::{Answer, CharSpan, DetectedObject, InstanceRecord, SnippetCache, Split, Taxonomy};

pub const CATEGORIES: [(&str, [&str; 5]); 4] = [
    ("animal", ["elephant", "tiger", "zebra", "giraffe", "lion"]),
    ("bird", ["peacock", "parrot", "eagle", "owl", "penguin"]),
    ("vehicle", ["jeep", "truck", "bus", "tractor", "scooter"]),
    ("fruit", ["apple", "banana", "mango", "cherry", "grape"]),
];

/// Question templates; `{x}` is replaced by "this <hypernym>" or the entity.
pub const TEMPLATES: [&str; 4] = [
    "what is {x} known for?",
    "where does {x} come from?",
    "what is {x} used for?",
    "which word describes {x} best?",
];

const ANSWERS: [&str; 24] = [
    "tusk", "ivory", "stripes", "savanna", "india", "africa", "feathers", "speed", "farming", "transport",
    "juice", "vitamins", "jungle", "desert", "cargo", "roads", "sweetness", "seeds", "hunting", "night",
    "ice", "diesel", "orchards", "wine",
];

const FILLERS: [&str; 8] = [
    "the weather was pleasant for most of the week",
    "many people visit the museum on sundays",
    "this page lists several unrelated facts",
    "prices were updated at the start of the month",
    "the library opens early during exam season",
    "a short history of printing and paper",
    "see also the related articles below",
    "results may vary depending on the region",
];

pub struct Synthetic {
    pub records: Vec<InstanceRecord>,
    pub taxonomy: Taxonomy,
    pub cache: SnippetCache,
    pub corpus: Vec<CorpusDoc>,
}

pub fn taxonomy() -> Taxonomy {
    let mut t = Taxonomy::new();
    t.set_coords("entity", vec![0.0, 0.0]).unwrap();
    for (ci, (cat, members)) in CATEGORIES.iter().enumerate() {
        t.add_edge(cat, "entity").unwrap();
        let theta = ci as f64 * std::f64::consts::FRAC_PI_2;
        t.set_coords(cat, vec![0.5 * theta.cos(), 0.5 * theta.sin()]).unwrap();
        for (mi, m) in members.iter().enumerate() {
            t.add_edge(m, cat).unwrap();
            let phi = theta + (mi as f64 - 2.0) * 0.08;
            t.set_coords(m, vec![0.9 * phi.cos(), 0.9 * phi.sin()]).unwrap();
        }
    }
    t
}

/// `n` records over the toy taxonomy, each with three detections and a
/// snippet list in which exactly one snippet states the answer.
pub fn synthetic(n: usize, seed: u64) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut combos: Vec<(usize, usize, usize)> = Vec::new();
    for ci in 0..CATEGORIES.len() {
        for mi in 0..5 {
            for ti in 0..TEMPLATES.len() {
                combos.push((ci, mi, ti));
            }
        }
    }
    combos.shuffle(&mut rng);
    combos.truncate(n);
    let mut records = Vec::new();
    let mut cache = SnippetCache::new();
    let mut corpus = Vec::new();
    for (i, &(ci, mi, ti)) in combos.iter().enumerate() {
        let (cat, members) = CATEGORIES[ci];
        let entity = members[mi];
        let template = TEMPLATES[ti];
        let answer = ANSWERS[(ci * 5 + mi + 7 * ti) % ANSWERS.len()];
        let x_at = template.find("{x}").unwrap();
        let question = template.replace("{x}", &format!("this {cat}"));
        let span = CharSpan::from_source(&question, x_at, x_at + 5 + cat.len()).unwrap();
        let (reformulated, _) = reformulate(&question, &span, entity).unwrap();

        let mut detections = vec![DetectedObject::new(entity, rng.random_range(0.5..0.99))];
        let mut others: Vec<usize> = (0..CATEGORIES.len()).filter(|&c| c != ci).collect();
        others.shuffle(&mut rng);
        for &oc in others.iter().take(2) {
            let label = CATEGORIES[oc].1.choose(&mut rng).unwrap();
            detections.push(DetectedObject::new(*label, rng.random_range(0.5..0.99)));
        }
        detections.shuffle(&mut rng);

        let fact = format!("the {entity} is best known for {answer} according to most sources");
        let mut snippets: Vec<String> = FILLERS.choose_multiple(&mut rng, 2).map(|s| s.to_string()).collect();
        snippets.insert(rng.random_range(0..=snippets.len()), fact.clone());
        corpus.push(CorpusDoc {
            doc_id: format!("doc-{i:03}"),
            text: fact,
        });
        cache.insert(reformulated.clone(), snippets);

        records.push(InstanceRecord {
            id: format!("syn-{i:03}"),
            question,
            image_id: format!("img-{i:03}"),
            detections,
            gold_span: Some(span),
            gold_object: Some(entity.to_string()),
            reformulated_gold: Some(reformulated),
            answers: vec![Answer::new(answer, 1)],
            split: Split::Train,
            alternate_questions: vec![],
        });
    }
    for (j, f) in FILLERS.iter().enumerate() {
        corpus.push(CorpusDoc {
            doc_id: format!("filler-{j}"),
            text: f.to_string(),
        });
    }
    Synthetic {
        records,
        taxonomy: taxonomy(),
        cache,
        corpus,
    }
}

pub const DIM: usize = 16;

pub fn select_model(records: &[InstanceRecord], seed: u64) -> SelectModel {
    SelectModel::new(seed, SelectModel::vocab_for(records), DIM, 1)
}

pub fn substitute_model(records: &[InstanceRecord], seed: u64) -> SubstituteModel {
    SubstituteModel::new(seed, SubstituteModel::vocab_for(records), DIM, 1, 32, 16)
}

pub fn reader(vocab: reformqa::nn::encoder::Vocab, seed: u64) -> Reader {
    Reader::new(seed, vocab, DIM, 2)
}
