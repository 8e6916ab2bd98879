//! End-to-end answering: select, substitute, retrieve, read.

use serde::{Deserialize, Serialize};

use super::aggregate::{mrc_mult, AttentionAggregator};
use super::classify::{features, Aggregation, AnswerClassifier};
use super::reader::{mrc_sing, Reader};
use super::retrieve::{RetrievalSource, Retriever};
use crate::error::{Error, Result};
use crate::select::SelectModel;
use crate::substitute::{predict_object, SubstituteModel};
use crate::types::{CharSpan, InstanceRecord, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    OpenDomain,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Reformulation {
    Original,
    Gold,
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settings {
    pub mode: Mode,
    pub aggregation: Aggregation,
    pub reformulation: Reformulation,
}

/// Whatever has been trained. Only the pieces the settings need must be
/// present.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub select: Option<&'a SelectModel>,
    pub substitute: Option<&'a SubstituteModel>,
    pub taxonomy: Option<&'a Taxonomy>,
    pub retriever: &'a dyn Retriever,
    pub reader: &'a Reader,
    pub aggregator: Option<&'a AttentionAggregator>,
    pub classifier: Option<&'a AnswerClassifier>,
}

pub const FLAG_EMPTY_SPAN: &str = "empty-span";
pub const FLAG_NO_DETECTIONS: &str = "no-detections";
pub const FLAG_NO_SNIPPETS: &str = "no-snippets";
pub const FLAG_UNIFORM_ATTENTION: &str = "uniform-attention";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub id: String,
    /// The question sent to retrieval.
    pub query: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_span: Option<CharSpan>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_object: Option<String>,
    pub retrieval: RetrievalSource,
    pub answer: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// The question to search with, plus stage predictions and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reformulated {
    pub id: String,
    pub query: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_span: Option<CharSpan>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_object: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

pub fn reformulate_record(
    record: &InstanceRecord,
    select: Option<&SelectModel>,
    substitute: Option<&SubstituteModel>,
    taxonomy: Option<&Taxonomy>,
    how: Reformulation,
) -> Result<Reformulated> {
    let mut out = Reformulated {
        id: record.id.clone(),
        query: record.question.clone(),
        predicted_span: None,
        predicted_object: None,
        flags: vec![],
    };
    match how {
        Reformulation::Original => {}
        Reformulation::Gold => {
            out.query = record.reformulated_gold.clone().ok_or_else(|| {
                Error::validation("reformulated_gold", format!("record {:?} has no gold reformulation", record.id))
            })?;
        }
        Reformulation::Predicted => {
            let select =
                select.ok_or_else(|| Error::InvalidArgument("predicted reformulation needs a select model".into()))?;
            let substitute = substitute
                .ok_or_else(|| Error::InvalidArgument("predicted reformulation needs a substitute model".into()))?;
            let prediction = select.predict(&record.question)?;
            let tokens = crate::text::tokenize(&record.question);
            out.predicted_span = prediction.char_span(&record.question, &tokens);
            let Some(span) = &out.predicted_span else {
                out.flags.push(FLAG_EMPTY_SPAN.into());
                return Ok(out);
            };
            if record.detections.is_empty() {
                out.flags.push(FLAG_NO_DETECTIONS.into());
                return Ok(out);
            }
            let empty = Taxonomy::new();
            let sub = predict_object(&record.question, Some(span), &record.detections, substitute, taxonomy.unwrap_or(&empty))?;
            out.query = sub.reformulated;
            out.predicted_object = sub.label;
        }
    }
    Ok(out)
}

pub fn answer_pipeline(record: &InstanceRecord, models: &Models, settings: &Settings) -> Result<PipelineOutput> {
    let Reformulated {
        query,
        predicted_span,
        predicted_object,
        mut flags,
        ..
    } = reformulate_record(record, models.select, models.substitute, models.taxonomy, settings.reformulation)?;
    let retrieved = models.retriever.retrieve(&query)?;
    if retrieved.is_all_padding() {
        flags.push(FLAG_NO_SNIPPETS.into());
    }
    let snippets = &retrieved.snippets.snippets;
    let answer = match settings.mode {
        Mode::OpenDomain => match settings.aggregation {
            Aggregation::Sing => mrc_sing(&query, snippets, models.reader).answer,
            Aggregation::Mult => {
                let uniform;
                let aggregator = match models.aggregator {
                    Some(a) => a,
                    None => {
                        flags.push(FLAG_UNIFORM_ATTENTION.into());
                        uniform = AttentionAggregator::uniform(models.reader.dim());
                        &uniform
                    }
                };
                mrc_mult(&query, snippets, models.reader, aggregator).answer
            }
        },
        Mode::Classification => {
            let classifier = models
                .classifier
                .ok_or_else(|| Error::InvalidArgument("classification mode needs a trained classifier".into()))?;
            if classifier.aggregation != settings.aggregation {
                return Err(Error::validation(
                    "aggregation",
                    format!("classifier was trained with {:?} aggregation", classifier.aggregation),
                ));
            }
            let f = features(&query, snippets, models.reader, settings.aggregation);
            Some(classifier.predict(&f)?.to_string())
        }
    };
    Ok(PipelineOutput {
        id: record.id.clone(),
        query,
        predicted_span,
        predicted_object,
        retrieval: retrieved.source,
        answer,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::encoder::Vocab;
    use crate::types::{DetectedObject, SnippetCache};

    fn record() -> InstanceRecord {
        let q = "what is this animal poached for?";
        InstanceRecord {
            id: "fig1".into(),
            question: q.into(),
            image_id: "img".into(),
            detections: vec![DetectedObject::new("elephant", 0.9)],
            gold_span: Some(CharSpan::from_source(q, 8, 19).unwrap()),
            gold_object: Some("elephant".into()),
            reformulated_gold: Some("what is elephant poached for?".into()),
            answers: vec![crate::types::Answer::new("tusk", 3)],
            ..Default::default()
        }
    }

    fn cache() -> SnippetCache {
        let mut c = SnippetCache::new();
        c.insert("what is elephant poached for?", vec!["tusk".into()]);
        c.insert("what is this animal poached for?", vec!["zoo".into()]);
        c
    }

    #[test]
    fn gold_and_original_send_different_queries() {
        let cache = cache();
        let reader = Reader::new(0, Vocab::build(["tusk zoo"]), 4, 1);
        let models = Models {
            select: None,
            substitute: None,
            taxonomy: None,
            retriever: &cache,
            reader: &reader,
            aggregator: None,
            classifier: None,
        };
        let mut settings = Settings {
            mode: Mode::OpenDomain,
            aggregation: Aggregation::Sing,
            reformulation: Reformulation::Gold,
        };
        let out = answer_pipeline(&record(), &models, &settings).unwrap();
        assert_eq!(out.query, "what is elephant poached for?");
        assert_eq!(out.answer.as_deref(), Some("tusk"));
        settings.reformulation = Reformulation::Original;
        let out = answer_pipeline(&record(), &models, &settings).unwrap();
        assert_eq!(out.query, record().question);
        assert_eq!(out.answer.as_deref(), Some("zoo"));
        settings.aggregation = Aggregation::Mult;
        let out = answer_pipeline(&record(), &models, &settings).unwrap();
        assert_eq!(out.flags, [FLAG_UNIFORM_ATTENTION]);
    }

    #[test]
    fn gold_mode_needs_annotation() {
        let cache = cache();
        let reader = Reader::new(0, Vocab::build(["tusk"]), 4, 1);
        let models = Models {
            select: None,
            substitute: None,
            taxonomy: None,
            retriever: &cache,
            reader: &reader,
            aggregator: None,
            classifier: None,
        };
        let settings = Settings {
            mode: Mode::OpenDomain,
            aggregation: Aggregation::Sing,
            reformulation: Reformulation::Gold,
        };
        let mut r = record();
        r.reformulated_gold = None;
        assert!(answer_pipeline(&r, &models, &settings).is_err());
        let settings = Settings {
            mode: Mode::Classification,
            ..settings
        };
        assert!(answer_pipeline(&record(), &models, &settings).is_err());
    }
}
