//! DET-curve evaluation of the phrase branch and greedy-decode checks of
//! the phonetic branch.
//!
//! Each utterance streams through a session up to `trigger_end_frame + K`
//! frames, where K is the post-trigger context budget; its score is the
//! smoothed trigger score at the cutoff. Sweeping an accept threshold over
//! the observed scores yields one DET point per threshold: the false-trigger
//! rate over the negative utterances against the false-reject rate over the
//! true triggers. Both endpoints are always present, so the curve spans
//! (FRR 0, FT max) to (FRR max, FT 0).

use crate::error::{Error, Result};
use crate::losses::ctc_greedy_decode;
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::streaming::StreamingSession;
use crate::tensor::Matrix;

/// One threshold on the DET curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub false_trigger_rate: f64,
    pub frr: f64,
}

/// Per-utterance evaluation record.
#[derive(Debug, Clone)]
pub struct ScoredUtterance {
    pub id: String,
    pub phrase_true: bool,
    /// Smoothed trigger score at the post-trigger cutoff.
    pub score: f64,
    /// Greedy CTC decode of the phonetic branch over the streamed window.
    pub decoded: Vec<usize>,
    pub tokens: Vec<usize>,
}

/// Stream every utterance through `trigger_end_frame + post_trigger_frames`
/// frames (clipped to its length) and record score and decode.
pub fn score_corpus<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    utterances: &[crate::data::Utterance],
    post_trigger_frames: usize,
) -> Result<Vec<ScoredUtterance>> {
    let mut out = Vec::with_capacity(utterances.len());
    for u in utterances {
        let limit = u
            .trigger_end_frame
            .saturating_add(post_trigger_frames)
            .min(u.features.rows())
            .max(1);
        let features: Matrix<T> =
            Matrix::from_fn(limit, u.features.cols(), |r, c| {
                T::from_f64(u.features.at(r, c) as f64)
            });
        let mut session = StreamingSession::new(params, config)?;
        let mut emissions = session.push(&features)?;
        emissions.extend(session.finish()?);
        let score = session.smoothed_score()?;

        let classes = emissions[0].phonetic_log_probs.len();
        let log_probs = Matrix::from_fn(emissions.len(), classes, |r, c| {
            emissions[r].phonetic_log_probs[c]
        });
        let decoded = ctc_greedy_decode(&log_probs);
        out.push(ScoredUtterance {
            id: u.id.clone(),
            phrase_true: u.phrase_true,
            score,
            decoded,
            tokens: u.tokens.clone(),
        });
    }
    Ok(out)
}

/// Sweep accept thresholds over the observed scores. Needs at least one
/// utterance of each class. Points come back sorted by threshold; an
/// utterance is accepted when `score >= threshold`.
pub fn det_sweep(scored: &[ScoredUtterance]) -> Result<Vec<DetPoint>> {
    let positives: Vec<f64> = scored
        .iter()
        .filter(|s| s.phrase_true)
        .map(|s| s.score)
        .collect();
    let negatives: Vec<f64> = scored
        .iter()
        .filter(|s| !s.phrase_true)
        .map(|s| s.score)
        .collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidInput(
            "DET sweep needs both true triggers and negatives".into(),
        ));
    }
    let mut thresholds: Vec<f64> = scored.iter().map(|s| s.score).collect();
    thresholds.push(0.0);
    let top = thresholds.iter().cloned().fold(0.0f64, f64::max);
    thresholds.push(top + 1e-9);
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    let points = thresholds
        .into_iter()
        .map(|threshold| {
            let rejected_true = positives.iter().filter(|&&s| s < threshold).count();
            let accepted_false = negatives.iter().filter(|&&s| s >= threshold).count();
            DetPoint {
                threshold,
                false_trigger_rate: accepted_false as f64 / negatives.len() as f64,
                frr: rejected_true as f64 / positives.len() as f64,
            }
        })
        .collect();
    Ok(points)
}

/// Lowest false-trigger rate reachable while keeping FRR at or under
/// `max_frr`. The threshold-zero point has FRR 0, so a point always
/// qualifies.
pub fn ft_rate_at_frr(points: &[DetPoint], max_frr: f64) -> f64 {
    points
        .iter()
        .filter(|p| p.frr <= max_frr)
        .map(|p| p.false_trigger_rate)
        .fold(f64::INFINITY, f64::min)
}

/// CSV with the exact column contract: `threshold,false_trigger_rate,frr`.
pub fn det_csv(points: &[DetPoint]) -> String {
    let mut out = String::from("threshold,false_trigger_rate,frr\n");
    for p in points {
        out.push_str(&format!(
            "{:.9},{:.6},{:.6}\n",
            p.threshold, p.false_trigger_rate, p.frr
        ));
    }
    out
}

fn contains_run(haystack: &[usize], needle: &[usize]) -> bool {
    !needle.is_empty()
        && haystack
            .windows(needle.len())
            .any(|w| w == needle)
}

/// Voice-trigger detection quality from the phonetic branch: a detection is
/// the trigger token sequence appearing contiguously in the greedy decode,
/// and it is correct when that matches whether the utterance actually
/// carries the trigger.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VtdMetrics {
    pub utterances: usize,
    pub correct: usize,
    pub accuracy: f64,
}

pub fn vtd_metrics(scored: &[ScoredUtterance], trigger: &[usize]) -> Result<VtdMetrics> {
    if trigger.is_empty() {
        return Err(Error::InvalidInput("trigger sequence is empty".into()));
    }
    if scored.is_empty() {
        return Err(Error::InvalidInput("no utterances to evaluate".into()));
    }
    let correct = scored
        .iter()
        .filter(|s| contains_run(&s.decoded, trigger) == contains_run(&s.tokens, trigger))
        .count();
    Ok(VtdMetrics {
        utterances: scored.len(),
        correct,
        accuracy: correct as f64 / scored.len() as f64,
    })
}
