use super::{Episode, Label, Sample};
use crate::error::{Error, Result};
use crate::models::Token;

/// Expected output at a scored position.
#[derive(Clone, Debug, PartialEq)]
pub enum QueryTarget {
    Code(usize),
    Value(Vec<f64>),
}

/// Model-ready token sequence `x₁ y₁ … x_T y_T x_q`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub tokens: Vec<Token>,
    /// Positions whose outputs are scored (x-tokens only).
    pub query_positions: Vec<usize>,
    pub targets: Vec<QueryTarget>,
    /// Association identity of every stream sample, in stream order.
    pub stream_labels: Vec<u32>,
    /// Association identity of every scored query.
    pub query_labels: Vec<u32>,
}

fn y_token(episode: &Episode, s: &Sample) -> Result<Token> {
    match &s.label {
        Label::Class(c) => episode
            .token_codes
            .get(c)
            .map(|&code| Token::Code(code))
            .ok_or_else(|| Error::Contract(format!("class {c} has no vocabulary code in this episode"))),
        Label::Value(v) => Ok(Token::Target(v.clone())),
    }
}

fn target_of(episode: &Episode, s: &Sample) -> Result<QueryTarget> {
    match y_token(episode, s)? {
        Token::Code(c) => Ok(QueryTarget::Code(c)),
        Token::Target(v) => Ok(QueryTarget::Value(v)),
        Token::Input(_) => unreachable!("y tokens are never inputs"),
    }
}

/// The `2·K·S` stream tokens.
pub fn stream_tokens(episode: &Episode) -> Result<Vec<Token>> {
    let mut tokens = Vec::with_capacity(2 * episode.stream.len());
    for s in &episode.stream {
        tokens.push(Token::Input(s.x.clone()));
        tokens.push(y_token(episode, s)?);
    }
    Ok(tokens)
}

/// Query token and expected target for test item `query_index`.
pub fn query_token(episode: &Episode, query_index: usize) -> Result<(Token, QueryTarget)> {
    let q = episode.tests.get(query_index).ok_or_else(|| {
        Error::Contract(format!(
            "query {query_index} out of range for {} test items",
            episode.tests.len()
        ))
    })?;
    Ok((Token::Input(q.x.clone()), target_of(episode, q)?))
}

/// Single-query layout of length `2·K·S + 1`.
pub fn assemble_sequence(episode: &Episode, query_index: usize) -> Result<SequenceLayout> {
    let mut tokens = stream_tokens(episode)?;
    let (q, target) = query_token(episode, query_index)?;
    tokens.push(q);
    Ok(SequenceLayout {
        query_positions: vec![tokens.len() - 1],
        tokens,
        targets: vec![target],
        stream_labels: episode.stream.iter().map(|s| episode.association_label(s)).collect(),
        query_labels: vec![episode.association_label(&episode.tests[query_index])],
    })
}
