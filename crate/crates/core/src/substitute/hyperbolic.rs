//! Poincaré-ball distance and the taxonomy-based hypernym score.

use crate::error::{Error, Result};
use crate::text::tokenize;
use crate::types::Taxonomy;

/// Words skipped when picking the head noun of a span.
const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "its", "his", "her", "their", "my",
    "your", "our", "some", "any", "each", "every", "which", "what",
];

/// Hyperbolic distance between two points of the open unit ball:
/// `arcosh(1 + 2|u-v|^2 / ((1-|u|^2)(1-|v|^2)))`.
pub fn poincare_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Domain(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu: f64 = u.iter().map(|x| x * x).sum();
    let nv: f64 = v.iter().map(|x| x * x).sum();
    if !(nu < 1.0) || !(nv < 1.0) {
        return Err(Error::Domain(format!(
            "points must lie inside the unit ball (|u|^2 = {nu}, |v|^2 = {nv})"
        )));
    }
    let diff: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    let x = 2.0 * diff / ((1.0 - nu) * (1.0 - nv));
    // arcosh(1 + x) = ln(1 + x + sqrt(x (x + 2))), accurate for small x
    Ok((x + (x * (x + 2.0)).sqrt()).ln_1p())
}

/// Last token of the span that is a word but not a determiner, lowercased.
pub fn head_noun(span: &str) -> Option<String> {
    tokenize(span)
        .into_iter()
        .rev()
        .map(|t| t.text.to_lowercase())
        .find(|t| t.chars().any(char::is_alphanumeric) && !DETERMINERS.contains(&t.as_str()))
}

/// Coordinates for a phrase: the whole phrase, then its head noun, then the
/// head noun with a plural suffix removed.
pub fn lookup_coords<'a>(taxonomy: &'a Taxonomy, phrase: &str) -> Option<&'a [f64]> {
    let whole = phrase.trim().to_lowercase();
    if let Some(c) = taxonomy.coords(&whole) {
        return Some(c);
    }
    let head = head_noun(phrase)?;
    if let Some(c) = taxonomy.coords(&head) {
        return Some(c);
    }
    ["es", "s"]
        .iter()
        .filter_map(|suffix| head.strip_suffix(suffix))
        .find_map(|stem| taxonomy.coords(stem))
}

/// Negative Poincaré distance between the span's node and the object's
/// node; 0 when either is missing or not embedded.
pub fn hypernym_score(span: &str, label: &str, taxonomy: &Taxonomy) -> f64 {
    match (lookup_coords(taxonomy, span), lookup_coords(taxonomy, label)) {
        (Some(a), Some(b)) => poincare_distance(a, b).map(|d| -d).unwrap_or(0.0),
        _ => 0.0,
    }
}
