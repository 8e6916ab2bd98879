//! Python bindings for the numeric helpers, metrics and the command line.

use ndarray::ArrayView1;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use reformqa::eval;
use reformqa::types::Answer;
use reformqa::{Error, ErrorKind};

// File problems surface as OSError; everything else about bad input is a ValueError.
fn to_py(e: Error) -> PyErr {
    match (&e, e.kind()) {
        (Error::Io { .. }, _) => PyIOError::new_err(e.to_string()),
        (_, ErrorKind::Internal) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Geodesic distance between two points of the open unit ball.
#[pyfunction]
fn poincare_distance(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    reformqa::substitute::poincare_distance(&u, &v).map_err(to_py)
}

/// Soft accuracy against `(answer, human_count)` pairs.
#[pyfunction]
fn vqa_accuracy(predicted: &str, answers: Vec<(String, u32)>) -> f64 {
    let answers: Vec<Answer> = answers.into_iter().map(|(a, n)| Answer::new(a, n)).collect();
    eval::vqa_accuracy(predicted, &answers)
}

#[pyfunction]
fn exact_match(predicted: &str, gold: &str) -> f64 {
    eval::exact_match(predicted, gold)
}

/// Percentage of test records whose answer also occurs in train.
#[pyfunction]
fn audit_overlap(train_path: &str, test_path: &str) -> PyResult<f64> {
    let train = reformqa::io::load_dataset(train_path.as_ref()).map_err(to_py)?;
    let test = reformqa::io::load_dataset(test_path.as_ref()).map_err(to_py)?;
    eval::audit_overlap(&train, &test).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (s, p, negatives, margin=0.2))]
fn triplet_loss(s: Vec<f64>, p: Vec<f64>, negatives: Vec<Vec<f64>>, margin: f64) -> PyResult<f64> {
    let views: Vec<ArrayView1<f64>> = negatives.iter().map(|n| ArrayView1::from(n.as_slice())).collect();
    reformqa::substitute::triplet_loss(ArrayView1::from(s.as_slice()), ArrayView1::from(p.as_slice()), &views, margin)
        .map_err(to_py)
}

#[pyfunction]
fn bce_loss(logits: Vec<f64>, gold: Vec<bool>) -> PyResult<f64> {
    reformqa::substitute::bce_loss(&logits, &gold).map_err(to_py)
}

/// Returns the rewritten question and the character offsets of the inserted phrase.
#[pyfunction]
fn apply_template(question: &str, entity: &str, hypernym: &str) -> PyResult<(String, usize, usize)> {
    let (q, span) = reformqa::builder::apply_template(question, entity, hypernym).map_err(to_py)?;
    Ok((q, span.start, span.end))
}

/// Runs one command line invocation and returns its exit code.
/// Standard output of the command is returned alongside.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> (i32, String) {
    py.detach(|| {
        let mut out = Vec::new();
        let argv = std::iter::once("reformqa".to_string()).chain(args);
        let code = reformqa::cli::run(argv, &mut out);
        (code, String::from_utf8_lossy(&out).into_owned())
    })
}

#[pymodule]
fn reformqa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(poincare_distance, m)?)?;
    m.add_function(wrap_pyfunction!(vqa_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(audit_overlap, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(bce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(apply_template, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
