//! Extractive reader: predicts an answer span inside a passage.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::retrieve::Retriever;
use crate::error::{Error, Result};
use crate::nn::encoder::{MixerEncoder, TokenEncoder, Vocab, SEP_TOKEN};
use crate::nn::train::{run_epochs, TrainConfig, TrainReport};
use crate::nn::{cross_entropy, mean_rows, Linear, Module};
use crate::text::{find_token_sequence, tokenize, Token};
use crate::types::InstanceRecord;

pub const CHECKPOINT_KIND: &str = "reader";
pub const DEFAULT_MAX_ANSWER_TOKENS: usize = 30;
const SEPARATOR: &str = " [SEP] ";

/// Snippets joined into one passage. Separator tokens mark snippet
/// boundaries and can never be part of an answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub text: String,
    pub tokens: Vec<Token>,
}

impl Context {
    /// Join the non-empty snippets with separators.
    pub fn from_snippets<S: AsRef<str>>(snippets: &[S]) -> Self {
        let mut text = String::new();
        let mut tokens = Vec::new();
        let mut chars = 0;
        for snippet in snippets.iter().map(AsRef::as_ref).filter(|s| !s.trim().is_empty()) {
            if !text.is_empty() {
                let sep_start = chars + 1;
                tokens.push(Token {
                    text: SEP_TOKEN.to_string(),
                    start: sep_start,
                    end: sep_start + SEP_TOKEN.len(),
                    byte_start: text.len() + 1,
                    byte_end: text.len() + 1 + SEP_TOKEN.len(),
                });
                text.push_str(SEPARATOR);
                chars += SEPARATOR.len();
            }
            let byte_base = text.len();
            for mut t in tokenize(snippet) {
                t.start += chars;
                t.end += chars;
                t.byte_start += byte_base;
                t.byte_end += byte_base;
                tokens.push(t);
            }
            text.push_str(snippet);
            chars += snippet.chars().count();
        }
        Context { text, tokens }
    }

    pub fn single(passage: &str) -> Self {
        Self::from_snippets(&[passage])
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The tokenizer splits brackets, so only inserted markers carry this text.
    fn is_separator(&self, idx: usize) -> bool {
        self.tokens[idx].text == SEP_TOKEN
    }

    /// Earliest position where any of `answers` occurs as a whole-token,
    /// case-insensitive match: `(start, end)` inclusive token indices.
    pub fn find_answer<S: AsRef<str>>(&self, answers: &[S]) -> Option<(usize, usize)> {
        answers
            .iter()
            .filter_map(|a| {
                let needle = tokenize(a.as_ref());
                let start = find_token_sequence(&self.tokens, &needle)?;
                let end = start + needle.len() - 1;
                (!(start..=end).any(|i| self.is_separator(i))).then_some((start, end))
            })
            .min()
    }

    pub fn span_text(&self, start: usize, end: usize) -> &str {
        &self.text[self.tokens[start].byte_start..self.tokens[end].byte_end]
    }
}

/// A reader output. `answer == None` is the no-answer sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadSpan {
    pub answer: Option<String>,
    /// Inclusive token range within the context.
    pub tokens: Option<(usize, usize)>,
    pub rep: Array1<f64>,
    pub score: f64,
}

impl ReadSpan {
    pub fn no_answer(dim: usize) -> Self {
        ReadSpan {
            answer: None,
            tokens: None,
            rep: Array1::zeros(dim),
            score: f64::NEG_INFINITY,
        }
    }

    pub fn is_sentinel(&self) -> bool {
        self.answer.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reader {
    pub encoder: MixerEncoder,
    pub head: Linear,
    pub max_answer_tokens: usize,
}

/// Encoder input `question [SEP] context` and the offset of the first
/// context token.
fn joint_tokens(question: &[Token], context: &Context) -> (Vec<Token>, usize) {
    let mut tokens = question.to_vec();
    tokens.push(Token::marker(SEP_TOKEN));
    let offset = tokens.len();
    tokens.extend(context.tokens.iter().cloned());
    (tokens, offset)
}

impl Reader {
    pub fn new(seed: u64, vocab: Vocab, dim: usize, layers: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = MixerEncoder::new(&mut rng, vocab, dim, layers);
        let head = Linear::new(&mut rng, dim, 2);
        Reader {
            encoder,
            head,
            max_answer_tokens: DEFAULT_MAX_ANSWER_TOKENS,
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    /// Question summary used by the classifier: mean of its token encodings.
    pub fn question_rep(&self, question: &str) -> Array1<f64> {
        crate::select::mean_encoding(&self.encoder, &tokenize(question))
    }

    /// Best `(start, end)` over context tokens with `start <= end`, at most
    /// `max_answer_tokens` long, not containing a separator. Ties go to the
    /// earliest start, then the earliest end.
    pub fn best_span(&self, context: &Context, start_logits: &[f64], end_logits: &[f64]) -> Option<(usize, usize, f64)> {
        let n = context.tokens.len();
        let mut best: Option<(usize, usize, f64)> = None;
        for s in 0..n {
            if context.is_separator(s) {
                continue;
            }
            for e in s..n.min(s + self.max_answer_tokens) {
                if context.is_separator(e) {
                    break;
                }
                let score = start_logits[s] + end_logits[e];
                if best.is_none_or(|(_, _, b)| score > b) {
                    best = Some((s, e, score));
                }
            }
        }
        best
    }

    pub fn read(&self, question: &str, context: &Context) -> ReadSpan {
        if context.is_empty() {
            return ReadSpan::no_answer(self.dim());
        }
        let q = tokenize(question);
        let (tokens, offset) = joint_tokens(&q, context);
        let h = self.encoder.encode(&tokens);
        let logits = self.head.forward_rows(h.view());
        let start: Vec<f64> = logits.column(0).iter().skip(offset).copied().collect();
        let end: Vec<f64> = logits.column(1).iter().skip(offset).copied().collect();
        match self.best_span(context, &start, &end) {
            Some((s, e, score)) => ReadSpan {
                answer: Some(context.span_text(s, e).to_string()),
                tokens: Some((s, e)),
                rep: mean_rows(h.view(), offset + s, offset + e),
                score,
            },
            None => ReadSpan::no_answer(self.dim()),
        }
    }

    /// Span loss restricted to context positions; accumulates gradients.
    pub fn accumulate(&mut self, question: &[Token], context: &Context, gold: (usize, usize), train_encoder: bool) -> Result<f64> {
        let (tokens, offset) = joint_tokens(question, context);
        let (h, trace) = self.encoder.forward_traced(&tokens);
        let logits = self.head.forward_rows(h.view());
        let start: Vec<f64> = logits.column(0).iter().skip(offset).copied().collect();
        let end: Vec<f64> = logits.column(1).iter().skip(offset).copied().collect();
        if gold.0 >= start.len() || gold.1 >= start.len() {
            return Err(Error::InvalidArgument("gold span outside context".into()));
        }
        let (ls, gs) = cross_entropy(&start, gold.0);
        let (le, ge) = cross_entropy(&end, gold.1);
        let mut dlogits = Array2::zeros((tokens.len(), 2));
        for (i, (a, b)) in gs.iter().zip(&ge).enumerate() {
            dlogits[[offset + i, 0]] = *a;
            dlogits[[offset + i, 1]] = *b;
        }
        let dh = self.head.backward_rows(h.view(), dlogits.view());
        if train_encoder {
            self.encoder.backward(&trace, dh.view());
        }
        Ok(ls + le)
    }
}

impl Module for Reader {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.encoder.visit_params(f);
        self.head.visit_params(f);
    }
}

pub fn read_span(question: &str, context: &str, reader: &Reader) -> ReadSpan {
    reader.read(question, &Context::single(context))
}

/// Read all snippets as one separator-joined passage.
pub fn mrc_sing<S: AsRef<str>>(question: &str, snippets: &[S], reader: &Reader) -> ReadSpan {
    reader.read(question, &Context::from_snippets(snippets))
}

/// One supervised reader example.
#[derive(Debug, Clone)]
pub struct ReaderExample {
    pub id: String,
    pub question: Vec<Token>,
    pub context: Context,
    pub gold: (usize, usize),
}

/// Build reader supervision from records with a gold reformulation: the
/// first whole-token occurrence of any gold answer in the concatenated
/// snippets. Records without an occurrence are skipped and reported.
pub fn reader_examples(records: &[InstanceRecord], retriever: &dyn Retriever) -> (Vec<ReaderExample>, TrainReport) {
    let mut report = TrainReport {
        total: records.len(),
        ..Default::default()
    };
    let mut examples = Vec::new();
    for r in records {
        let found = r.reformulated_gold.as_deref().and_then(|q| {
            let retrieved = retriever.retrieve(q).ok()?;
            let context = Context::from_snippets(&retrieved.snippets.snippets);
            let answers: Vec<&str> = r.answers.iter().map(|a| a.answer.as_str()).collect();
            let gold = context.find_answer(&answers)?;
            Some(ReaderExample {
                id: r.id.clone(),
                question: tokenize(q),
                context,
                gold,
            })
        });
        match found {
            Some(ex) => examples.push(ex),
            None => {
                log::warn!("skipping {:?}: no snippets or no answer occurrence", r.id);
                report.skipped += 1;
                report.skipped_ids.push(r.id.clone());
            }
        }
    }
    report.used = examples.len();
    (examples, report)
}

pub fn finetune_reader(
    records: &[InstanceRecord],
    retriever: &dyn Retriever,
    reader: &mut Reader,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let (examples, mut report) = reader_examples(records, retriever);
    if examples.is_empty() {
        return Err(Error::NoUsableInstances {
            skipped: report.skipped,
            total: report.total,
        });
    }
    let train_encoder = config.train_encoder;
    report.epoch_losses = run_epochs(
        reader,
        examples.len(),
        config,
        |m, i| {
            let ex = &examples[i];
            m.accumulate(&ex.question, &ex.context, ex.gold, train_encoder)
                .expect("supervision lies inside the context")
        },
        |m| {
            if !train_encoder {
                m.encoder.zero_grad();
            }
        },
    );
    Ok(report)
}

/// Vocabulary over reformulated questions, questions and snippets.
pub fn reader_vocab(records: &[InstanceRecord], retriever: &dyn Retriever) -> Vocab {
    let mut texts: Vec<String> = Vec::new();
    for r in records {
        texts.push(r.question.clone());
        if let Some(q) = &r.reformulated_gold {
            texts.push(q.clone());
            if let Ok(found) = retriever.retrieve(q) {
                texts.extend(found.snippets.snippets);
            }
        }
    }
    Vocab::build(texts.iter().map(String::as_str))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reader() -> Reader {
        let vocab = Vocab::build(["what is elephant poached for? elephants are poached for their tusk"]);
        Reader::new(4, vocab, 8, 2)
    }

    #[test]
    fn context_joins_non_empty_snippets() {
        let ctx = Context::from_snippets(&["alpha beta", "", "gamma"]);
        assert_eq!(ctx.text, "alpha beta [SEP] gamma");
        let texts: Vec<_> = ctx.tokens.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["alpha", "beta", "[SEP]", "gamma"]);
        assert_eq!(&ctx.text[ctx.tokens[3].byte_start..ctx.tokens[3].byte_end], "gamma");
        assert_eq!(ctx.tokens[3].start, 17);
        assert!(ctx.is_separator(2));
        assert!(!Context::single("[SEP]").is_separator(1));
    }

    #[test]
    fn finds_first_answer_occurrence() {
        let passage = "Elephants are hunted mainly for their tusk, and the tusk trade is illegal.";
        let ctx = Context::single(passage);
        let (s, e) = ctx.find_answer(&["Tusk"]).unwrap();
        assert_eq!((s, e), (6, 6));
        assert_eq!(ctx.tokens[s].start, 38);
        assert!(ctx.find_answer(&["ivory"]).is_none());
        assert!(ctx.find_answer(&["tusks"]).is_none());
    }

    #[test]
    fn single_token_context_reads_that_token() {
        let r = read_span("what is elephant poached for?", "tusk", &reader());
        assert_eq!(r.answer.as_deref(), Some("tusk"));
    }

    #[test]
    fn empty_context_is_sentinel() {
        let r = read_span("what?", "   ", &reader());
        assert!(r.is_sentinel());
        assert_eq!(r.score, f64::NEG_INFINITY);
        assert!(mrc_sing("what?", &["", ""], &reader()).is_sentinel());
    }

    #[test]
    fn spans_respect_length_and_separators() {
        let mut rd = reader();
        rd.max_answer_tokens = 2;
        let ctx = Context::from_snippets(&["a b c", "d e"]);
        let n = ctx.tokens.len();
        // favour a span that would cross the separator
        let mut start = vec![0.0; n];
        let mut end = vec![0.0; n];
        start[2] = 10.0;
        end[4] = 10.0;
        let (s, e, _) = rd.best_span(&ctx, &start, &end).unwrap();
        assert!(e - s < 2);
        assert!(!(s..=e).any(|i| ctx.is_separator(i)));
    }

    #[test]
    fn sing_over_one_snippet_matches_direct_read() {
        let rd = reader();
        let q = "what is elephant poached for?";
        let mut snippets = vec![String::new(); 10];
        snippets[6] = "elephants are poached for their tusk".into();
        let a = mrc_sing(q, &snippets, &rd);
        let b = read_span(q, &snippets[6], &rd);
        assert_eq!(a, b);
    }
}
