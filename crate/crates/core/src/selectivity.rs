//! Association targets, extracted association scores and the KL
//! selectivity loss.

use crate::autodiff::{Tape, Var};
use crate::episodes::SequenceLayout;
use crate::error::{Error, Result};
use crate::models::model::AssociationVars;
use crate::models::{Family, RunLog};
use crate::tensor::{self, dot};

/// Same-label indicator over the tokens preceding a query.
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationTarget {
    pub query_position: usize,
    /// One entry per preceding token; a sample's x- and y-token share it.
    pub pattern: Vec<bool>,
    pub num_matches: usize,
}

impl AssociationTarget {
    /// `pattern / num_matches`, or `None` when nothing matches.
    pub fn normalized(&self) -> Option<Vec<f64>> {
        if self.num_matches == 0 {
            return None;
        }
        let w = 1.0 / self.num_matches as f64;
        Some(self.pattern.iter().map(|&b| if b { w } else { 0.0 }).collect())
    }
}

/// Unnormalized association scores of one query against its preceding tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationScores {
    pub query_position: usize,
    pub scores: Vec<f64>,
    pub source: Family,
    pub layer: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectivityLoss {
    pub value: f64,
    /// Set when no preceding token matched, so the term was not scored.
    pub skipped: bool,
}

/// Which layers contribute to the regularizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LayerSelection {
    #[default]
    Final,
    All,
}

/// Which positions contribute to the regularizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PositionSelection {
    #[default]
    Queries,
    /// Queries plus every stream x-token with at least one earlier match.
    QueriesAndStream,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SelectivityConfig {
    pub layers: LayerSelection,
    pub positions: PositionSelection,
}

/// Pattern over the `2 · preceding.len()` tokens before `query_position`.
pub fn association_target(preceding: &[u32], query_label: u32, query_position: usize) -> AssociationTarget {
    let mut pattern = Vec::with_capacity(2 * preceding.len());
    for &l in preceding {
        let m = l == query_label;
        pattern.push(m);
        pattern.push(m);
    }
    let num_matches = pattern.iter().filter(|&&b| b).count();
    AssociationTarget {
        query_position,
        pattern,
        num_matches,
    }
}

/// `scores_j = q_{pos} · k_j` for every `j < pos`, from a recorded run.
pub fn extract_association(log: Option<&RunLog>, layer: usize, query_position: usize) -> Result<AssociationScores> {
    let log = log.ok_or_else(|| Error::Contract("associations were not recorded in inference mode".into()))?;
    let rec = log.layers.get(layer).ok_or_else(|| {
        Error::Contract(format!("layer {layer} out of range for a {}-layer log", log.layers.len()))
    })?;
    if query_position >= rec.queries.rows() {
        return Err(Error::Contract(format!(
            "query position {query_position} beyond the {} logged tokens",
            rec.queries.rows()
        )));
    }
    let q = rec.queries.row(query_position);
    let scores = (0..query_position).map(|j| dot(q, rec.keys.row(j))).collect();
    Ok(AssociationScores {
        query_position,
        scores,
        source: log.family,
        layer,
    })
}

/// `KL(p̂ ‖ softmax(scores))`; zero and flagged as skipped when nothing matches.
pub fn selectivity_loss(target: &AssociationTarget, scores: &AssociationScores) -> Result<SelectivityLoss> {
    if target.pattern.len() != scores.scores.len() {
        return Err(Error::Contract(format!(
            "pattern covers {} tokens, scores cover {}",
            target.pattern.len(),
            scores.scores.len()
        )));
    }
    let Some(p) = target.normalized() else {
        return Ok(SelectivityLoss {
            value: 0.0,
            skipped: true,
        });
    };
    let q = tensor::softmax(&scores.scores, 1.0)?;
    Ok(SelectivityLoss {
        value: tensor::kl_divergence(&p, &q)?,
        skipped: false,
    })
}

/// Every `(position, target)` pair scored under `cfg`.
pub fn scored_targets(layout: &SequenceLayout, cfg: &SelectivityConfig) -> Vec<AssociationTarget> {
    let mut out = Vec::new();
    if cfg.positions == PositionSelection::QueriesAndStream {
        for j in 1..layout.stream_labels.len() {
            let t = association_target(&layout.stream_labels[..j], layout.stream_labels[j], 2 * j);
            if t.num_matches > 0 {
                out.push(t);
            }
        }
    }
    for (&pos, &label) in layout.query_positions.iter().zip(&layout.query_labels) {
        let preceding = &layout.stream_labels[..(pos / 2).min(layout.stream_labels.len())];
        out.push(association_target(preceding, label, pos));
    }
    out
}

fn layers_for(cfg: &SelectivityConfig, num_layers: usize) -> std::ops::Range<usize> {
    match cfg.layers {
        LayerSelection::Final => num_layers.saturating_sub(1)..num_layers,
        LayerSelection::All => 0..num_layers,
    }
}

/// Mean selectivity loss over scored positions and selected layers,
/// skipping zero-match queries. `skipped` is set when nothing was scored.
pub fn episode_selectivity_loss(
    layout: &SequenceLayout,
    log: Option<&RunLog>,
    cfg: &SelectivityConfig,
) -> Result<SelectivityLoss> {
    let num_layers = log.map_or(0, |l| l.layers.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for layer in layers_for(cfg, num_layers.max(1)) {
        for target in scored_targets(layout, cfg) {
            let scores = extract_association(log, layer, target.query_position)?;
            let l = selectivity_loss(&target, &scores)?;
            if !l.skipped {
                total += l.value;
                count += 1;
            }
        }
    }
    Ok(if count == 0 {
        SelectivityLoss {
            value: 0.0,
            skipped: true,
        }
    } else {
        SelectivityLoss {
            value: total / count as f64,
            skipped: false,
        }
    })
}

/// Taped form of [`episode_selectivity_loss`]; `None` when nothing was scored.
pub fn selectivity_loss_on_tape(
    tape: &mut Tape,
    layout: &SequenceLayout,
    associations: &[AssociationVars],
    cfg: &SelectivityConfig,
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for layer in layers_for(cfg, associations.len()) {
        let a = associations[layer];
        for target in scored_targets(layout, cfg) {
            let Some(p) = target.normalized() else { continue };
            let pos = target.query_position;
            let q = tape.slice_rows(a.queries, pos, 1)?;
            let k = tape.slice_rows(a.keys, 0, pos)?;
            let scores = tape.matmul_t(q, k)?;
            terms.push(tape.softmax_kl(scores, &p)?);
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let n = terms.len();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / n as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::model::LayerAssociations;
    use crate::tensor::Tensor;

    fn scores(v: Vec<f64>) -> AssociationScores {
        AssociationScores {
            query_position: v.len(),
            scores: v,
            source: Family::Mamba,
            layer: 0,
        }
    }

    #[test]
    fn pattern_duplicates_each_sample() {
        let t = association_target(&[1, 2, 1], 1, 6);
        assert_eq!(t.pattern, vec![true, true, false, false, true, true]);
        assert_eq!(t.num_matches, 4);
        let none = association_target(&[2, 3], 1, 4);
        assert_eq!(none.num_matches, 0);
        assert!(none.pattern.iter().all(|&b| !b));
    }

    #[test]
    fn half_mass_on_uniform_scores_is_ln_two() {
        let t = association_target(&[7, 8], 7, 4);
        let l = selectivity_loss(&t, &scores(vec![0.0; 4])).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-12);
        assert!(!l.skipped);
    }

    #[test]
    fn separated_scores_drive_loss_to_zero() {
        let t = association_target(&[7, 8, 7], 7, 6);
        let mut prev = f64::INFINITY;
        for kappa in [1.0, 5.0, 20.0, 40.0] {
            let s: Vec<f64> = t.pattern.iter().map(|&b| if b { kappa } else { -kappa }).collect();
            let l = selectivity_loss(&t, &scores(s)).unwrap().value;
            assert!(l <= prev);
            prev = l;
        }
        assert!(prev < 1e-9);
    }

    #[test]
    fn zero_matches_skip() {
        let t = association_target(&[2, 3], 1, 4);
        let l = selectivity_loss(&t, &scores(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(l, SelectivityLoss { value: 0.0, skipped: true });
    }

    #[test]
    fn constant_shift_is_invisible() {
        let t = association_target(&[1, 2, 1, 3], 1, 8);
        let s = vec![0.3, -1.2, 2.0, 0.5, -0.7, 1.1, 0.0, 0.4];
        let a = selectivity_loss(&t, &scores(s.clone())).unwrap().value;
        let b = selectivity_loss(&t, &scores(s.iter().map(|x| x + 17.5).collect())).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        let t = association_target(&[1], 1, 2);
        assert!(matches!(selectivity_loss(&t, &scores(vec![0.0; 3])), Err(Error::Contract(_))));
    }

    #[test]
    fn missing_log_is_contract_error() {
        assert!(matches!(extract_association(None, 0, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_keys_give_zero_scores() {
        let log = RunLog {
            family: Family::Mamba,
            layers: vec![LayerAssociations {
                queries: Tensor::filled(&[5, 3], 0.7),
                keys: Tensor::zeros(&[5, 3]),
            }],
        };
        let s = extract_association(Some(&log), 0, 4).unwrap();
        assert_eq!(s.scores, vec![0.0; 4]);
    }
}
