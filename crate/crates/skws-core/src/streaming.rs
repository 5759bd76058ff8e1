//! Incremental inference sessions: frames in, per-frame emissions out,
//! block by block.
//!
//! A session buffers pushed frames and runs one block through the model
//! whenever the buffer holds a full block: 2S frames for the first block,
//! S for every later one. Emitted values are final; the caches guarantee a
//! later push can never revisit an already-emitted frame. The trigger score
//! is the mean positive-class probability over the last ten emitted frames,
//! and the cancel policy watches that score after a given trigger frame.
//!
//! Resident inference state is the per-layer caches, the LSTM state, and
//! the score ring, all sized by config alone. Timings and the emitted score
//! history are instrumentation on top; they scale with the stream, the
//! inference state does not.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::{forward_block, phrase_positive_prob, BlockState, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Frames feeding the smoothed trigger score.
pub const SMOOTHING_WINDOW: usize = 10;

/// Session verdict; transitions are monotone, cancelled is terminal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionState {
    Pending,
    Triggered { frame: usize },
    Cancelled { frame: usize },
}

impl DecisionState {
    pub fn label(&self) -> &'static str {
        match self {
            DecisionState::Pending => "pending",
            DecisionState::Triggered { .. } => "triggered",
            DecisionState::Cancelled { .. } => "cancelled",
        }
    }
}

/// Per-frame trigger bookkeeping attached to each emission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerDecision {
    pub frame: usize,
    pub pos_prob: f64,
    pub smoothed: f64,
    pub verdict: DecisionState,
}

/// One emitted frame: phonetic branch output plus the trigger decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Emission<T> {
    pub frame_idx: usize,
    pub phonetic_log_probs: Vec<T>,
    pub decision: TriggerDecision,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Policy {
    threshold: f64,
    trigger_frame: usize,
}

/// Latency and memory instrumentation for one session.
#[derive(Debug, Clone)]
pub struct SessionStats {
    pub per_block_elapsed: Vec<Duration>,
    pub blocks_processed: usize,
    /// Analytic from config: caches + LSTM state + score ring.
    pub state_bytes: usize,
}

/// One streaming inference pass over one utterance.
pub struct StreamingSession<'a, T> {
    params: &'a ModelParams<T>,
    config: &'a ModelConfig,
    state: BlockState<T>,
    shift: usize,
    pending: Vec<T>,
    pending_rows: usize,
    ring: VecDeque<f64>,
    emitted: usize,
    finished: bool,
    policy: Option<Policy>,
    decision: DecisionState,
    /// (frame, pos prob, smoothed) per emitted frame, for policy replay.
    history: Vec<(usize, f64, f64)>,
    timings: Vec<Duration>,
}

impl<'a, T: Scalar> StreamingSession<'a, T> {
    pub fn new(params: &'a ModelParams<T>, config: &'a ModelConfig) -> Result<Self> {
        let spec = config
            .block_spec()
            .ok_or_else(|| Error::InvalidConfig("streaming requires block_shift >= 1".into()))?;
        Ok(StreamingSession {
            params,
            config,
            state: BlockState::new(config)?,
            shift: spec.shift(),
            pending: Vec::new(),
            pending_rows: 0,
            ring: VecDeque::with_capacity(SMOOTHING_WINDOW),
            emitted: 0,
            finished: false,
            policy: None,
            decision: DecisionState::Pending,
            history: Vec::new(),
            timings: Vec::new(),
        })
    }

    /// Frames ingested so far, emitted or still buffered.
    pub fn frames_consumed(&self) -> usize {
        self.state.offset() + self.pending_rows
    }

    pub fn decision(&self) -> DecisionState {
        self.decision
    }

    /// Frames the next block needs before it can run.
    fn block_need(&self) -> usize {
        if self.state.offset() == 0 {
            2 * self.shift
        } else {
            self.shift
        }
    }

    fn run_block(&mut self, rows: usize) -> Result<Vec<Emission<T>>> {
        let cols = self.config.feature_dim;
        let block_data: Vec<T> = self.pending.drain(..rows * cols).collect();
        self.pending_rows -= rows;
        let block = Matrix::from_vec(rows, cols, block_data)?;
        let base = self.state.offset();

        let started = Instant::now();
        let out = forward_block(&block, self.params, self.config, &mut self.state)?;
        self.timings.push(started.elapsed());

        let mut emissions = Vec::with_capacity(rows);
        for r in 0..rows {
            let frame = base + r;
            let pos = phrase_positive_prob(out.phrase_logits.row(r), self.config.phrase_loss)
                .as_f64();
            if self.ring.len() == SMOOTHING_WINDOW {
                self.ring.pop_front();
            }
            self.ring.push_back(pos);
            let smoothed = self.ring.iter().sum::<f64>() / self.ring.len() as f64;
            self.emitted += 1;
            self.history.push((frame, pos, smoothed));
            self.advance_decision(frame, smoothed);
            emissions.push(Emission {
                frame_idx: frame,
                phonetic_log_probs: out.phonetic_log_probs.row(r).to_vec(),
                decision: TriggerDecision {
                    frame,
                    pos_prob: pos,
                    smoothed,
                    verdict: self.decision,
                },
            });
        }
        Ok(emissions)
    }

    fn advance_decision(&mut self, frame: usize, smoothed: f64) {
        let Some(policy) = self.policy else {
            return;
        };
        match self.decision {
            DecisionState::Cancelled { .. } => {}
            DecisionState::Pending => {
                if frame >= policy.trigger_frame {
                    self.decision = DecisionState::Triggered {
                        frame: policy.trigger_frame,
                    };
                    if frame > policy.trigger_frame && smoothed < policy.threshold {
                        self.decision = DecisionState::Cancelled { frame };
                    }
                }
            }
            DecisionState::Triggered { .. } => {
                if frame > policy.trigger_frame && smoothed < policy.threshold {
                    self.decision = DecisionState::Cancelled { frame };
                }
            }
        }
    }

    /// Buffer frames and emit every block that becomes complete. Emissions
    /// are final.
    pub fn push(&mut self, frames: &Matrix<T>) -> Result<Vec<Emission<T>>> {
        if self.finished {
            return Err(Error::SessionClosed);
        }
        if frames.rows() > 0 && frames.cols() != self.config.feature_dim {
            return Err(Error::ShapeMismatch {
                op: "session push",
                left: frames.shape(),
                right: (frames.rows(), self.config.feature_dim),
            });
        }
        self.pending.extend_from_slice(frames.data());
        self.pending_rows += frames.rows();
        let mut emissions = Vec::new();
        while self.pending_rows >= self.block_need() {
            let need = self.block_need();
            emissions.extend(self.run_block(need)?);
        }
        Ok(emissions)
    }

    /// Flush the buffered partial block, if any, and close the session.
    pub fn finish(&mut self) -> Result<Vec<Emission<T>>> {
        if self.finished {
            return Err(Error::SessionClosed);
        }
        self.finished = true;
        if self.pending_rows == 0 {
            return Ok(Vec::new());
        }
        let rows = self.pending_rows;
        self.run_block(rows)
    }

    /// Mean positive-class probability over the last `min(10, emitted)`
    /// frames.
    pub fn smoothed_score(&self) -> Result<f64> {
        if self.ring.is_empty() {
            return Err(Error::NoEmissions);
        }
        Ok(self.ring.iter().sum::<f64>() / self.ring.len() as f64)
    }

    /// Install the cancel policy and evaluate it over everything emitted so
    /// far: after `trigger_frame`, the first frame whose smoothed score
    /// drops under `threshold` cancels the session. Later emissions keep
    /// applying the policy. Cancellation is terminal.
    pub fn apply_policy(&mut self, threshold: f64, trigger_frame: usize) -> DecisionState {
        self.policy = Some(Policy {
            threshold,
            trigger_frame,
        });
        if !matches!(self.decision, DecisionState::Cancelled { .. }) {
            self.decision = DecisionState::Pending;
            for (frame, _, smoothed) in self.history.clone() {
                self.advance_decision(frame, smoothed);
                if matches!(self.decision, DecisionState::Cancelled { .. }) {
                    break;
                }
            }
        }
        self.decision
    }

    pub fn stats(&self) -> SessionStats {
        SessionStats {
            per_block_elapsed: self.timings.clone(),
            blocks_processed: self.timings.len(),
            state_bytes: self.state.state_bytes(self.config)
                + SMOOTHING_WINDOW * self.config.precision.bytes(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_full, ModelConfig};
    use crate::rng::SplitMix64;
    use crate::scalar::Precision;

    fn small_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            ffn_dim: 10,
            vocab_size: 3,
            lstm_hidden: 5,
            block_shift: 3,
            precision: Precision::F64,
            ..ModelConfig::default()
        }
    }

    fn random_model(
        config: &ModelConfig,
        seed: u64,
    ) -> (crate::model::ModelParams<f64>, SplitMix64) {
        let mut rng = SplitMix64::new(seed);
        let params = crate::model::ModelParams::init(config, &mut rng).unwrap();
        (params, rng)
    }

    fn stream_all(
        params: &crate::model::ModelParams<f64>,
        config: &ModelConfig,
        features: &Matrix<f64>,
        chunk: usize,
    ) -> Vec<Emission<f64>> {
        let mut session = StreamingSession::new(params, config).unwrap();
        let mut emissions = Vec::new();
        let mut at = 0;
        while at < features.rows() {
            let take = chunk.min(features.rows() - at);
            let part = Matrix::from_fn(take, features.cols(), |r, c| features.at(at + r, c));
            emissions.extend(session.push(&part).unwrap());
            at += take;
        }
        emissions.extend(session.finish().unwrap());
        emissions
    }

    #[test]
    fn first_emission_waits_for_a_double_block() {
        let config = small_config();
        let (params, mut rng) = random_model(&config, 51);
        let s = config.block_shift;
        let mut session = StreamingSession::new(&params, &config).unwrap();
        let head = Matrix::from_fn(2 * s - 1, config.feature_dim, |_, _| rng.uniform(-1.0, 1.0));
        assert!(session.push(&head).unwrap().is_empty());
        let one = Matrix::from_fn(1, config.feature_dim, |_, _| rng.uniform(-1.0, 1.0));
        let burst = session.push(&one).unwrap();
        assert_eq!(burst.len(), 2 * s);
        assert_eq!(burst[0].frame_idx, 0);
        assert_eq!(burst.last().unwrap().frame_idx, 2 * s - 1);
        // The next block is a single shift.
        let next = Matrix::from_fn(s, config.feature_dim, |_, _| rng.uniform(-1.0, 1.0));
        assert_eq!(session.push(&next).unwrap().len(), s);
    }

    #[test]
    fn chunking_is_transparent_and_matches_full_pass() {
        let config = small_config();
        let (params, mut rng) = random_model(&config, 52);
        let frames = 17; // 2S + 3S + partial 2
        let features = Matrix::from_fn(frames, config.feature_dim, |_, _| rng.uniform(-1.0, 1.0));

        let one_by_one = stream_all(&params, &config, &features, 1);
        let all_at_once = stream_all(&params, &config, &features, frames);
        assert_eq!(one_by_one.len(), frames);
        assert_eq!(one_by_one, all_at_once);

        let full = forward_full(&features, &params, &config, false, None).unwrap();
        for e in &one_by_one {
            let t = e.frame_idx;
            for (c, &v) in e.phonetic_log_probs.iter().enumerate() {
                assert!(
                    (v - full.phonetic_log_probs.at(t, c)).abs() < 1e-10,
                    "frame {t} class {c}"
                );
            }
            let pos = phrase_positive_prob(full.phrase_logits.row(t), config.phrase_loss);
            assert!((e.decision.pos_prob - pos).abs() < 1e-10);
        }
    }

    #[test]
    fn fifty_random_streams_match_the_masked_full_pass() {
        let mut seed_rng = SplitMix64::new(53);
        for case in 0..50 {
            let shift = 1 + seed_rng.below(4);
            let heads = [1, 2, 4][seed_rng.below(3)];
            let config = ModelConfig {
                feature_dim: 1 + seed_rng.below(5),
                d_model: heads * (1 + seed_rng.below(3)),
                n_heads: heads,
                n_layers: 1 + seed_rng.below(3),
                ffn_dim: 1 + seed_rng.below(12),
                vocab_size: 1 + seed_rng.below(5),
                lstm_hidden: 1 + seed_rng.below(6),
                lstm_in_phrase_branch: seed_rng.below(2) == 0,
                block_shift: shift,
                precision: Precision::F64,
                ..ModelConfig::default()
            };
            let mut rng = seed_rng.fork(case as u64);
            let params = crate::model::ModelParams::init(&config, &mut rng).unwrap();
            let frames = 1 + seed_rng.below(6 * shift + 3);
            let features =
                Matrix::from_fn(frames, config.feature_dim, |_, _| rng.uniform(-1.5, 1.5));

            let chunk = 1 + seed_rng.below(2 * shift + 2);
            let emissions = stream_all(&params, &config, &features, chunk);
            assert_eq!(emissions.len(), frames, "case {case}");

            let full = forward_full(&features, &params, &config, false, None).unwrap();
            for e in &emissions {
                let t = e.frame_idx;
                for (c, &v) in e.phonetic_log_probs.iter().enumerate() {
                    assert!(
                        (v - full.phonetic_log_probs.at(t, c)).abs() < 1e-10,
                        "case {case} frame {t} class {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn emissions_are_final_across_later_pushes() {
        let config = small_config();
        let (params, mut rng) = random_model(&config, 54);
        let s = config.block_shift;
        let features =
            Matrix::from_fn(6 * s, config.feature_dim, |_, _| rng.uniform(-1.0, 1.0));

        let mut session = StreamingSession::new(&params, &config).unwrap();
        let head = Matrix::from_fn(2 * s, config.feature_dim, |r, c| features.at(r, c));
        let snapshot = session.push(&head).unwrap();

        let tail = Matrix::from_fn(4 * s, config.feature_dim, |r, c| features.at(2 * s + r, c));
        session.push(&tail).unwrap();
        session.finish().unwrap();

        // Re-stream everything; the first 2S emissions must be identical to
        // the snapshot taken before the later frames existed.
        let again = stream_all(&params, &config, &features, features.rows());
        assert_eq!(&again[..2 * s], &snapshot[..]);
    }

    #[test]
    fn finish_flushes_partial_blocks_only() {
        let config = small_config();
        let (params, mut rng) = random_model(&config, 55);
        let s = config.block_shift;

        // T a multiple of the protocol sizes: finish emits nothing.
        let exact = Matrix::from_fn(3 * s, config.feature_dim, |_, _| rng.uniform(-1.0, 1.0));
        let mut session = StreamingSession::new(&params, &config).unwrap();
        assert_eq!(session.push(&exact).unwrap().len(), 3 * s);
        assert!(session.finish().unwrap().is_empty());

        // T = 2S + 1: the single leftover frame comes out at finish.
        let long = Matrix::from_fn(2 * s + 1, config.feature_dim, |_, _| rng.uniform(-1.0, 1.0));
        let mut session = StreamingSession::new(&params, &config).unwrap();
        assert_eq!(session.push(&long).unwrap().len(), 2 * s);
        let flushed = session.finish().unwrap();
        assert_eq!(flushed.len(), 1);
        assert_eq!(flushed[0].frame_idx, 2 * s);
    }

    #[test]
    fn closed_sessions_reject_push_and_finish() {
        let config = small_config();
        let (params, mut rng) = random_model(&config, 56);
        let mut session = StreamingSession::new(&params, &config).unwrap();
        let one = Matrix::from_fn(1, config.feature_dim, |_, _| rng.uniform(-1.0, 1.0));
        session.push(&one).unwrap();
        session.finish().unwrap();
        assert!(matches!(session.push(&one), Err(Error::SessionClosed)));
        assert!(matches!(session.finish(), Err(Error::SessionClosed)));
    }

    #[test]
    fn smoothed_score_follows_the_spec_arithmetic() {
        // Exercise the ring directly through a session-shaped stand-in.
        let mut ring: VecDeque<f64> = VecDeque::new();
        let push = |p: f64, ring: &mut VecDeque<f64>| {
            if ring.len() == SMOOTHING_WINDOW {
                ring.pop_front();
            }
            ring.push_back(p);
            ring.iter().sum::<f64>() / ring.len() as f64
        };
        for _ in 0..10 {
            assert!((push(0.5, &mut ring) - 0.5).abs() < 1e-15);
        }
        let mut ring2: VecDeque<f64> = VecDeque::new();
        for _ in 0..9 {
            push(0.1, &mut ring2);
        }
        assert!((push(1.0, &mut ring2) - 0.19).abs() < 1e-12);

        let mut ring3: VecDeque<f64> = VecDeque::new();
        push(0.2, &mut ring3);
        push(0.4, &mut ring3);
        assert!((push(0.6, &mut ring3) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn session_smoothed_score_stays_inside_its_window() {
        let config = small_config();
        let (params, mut rng) = random_model(&config, 57);
        let features =
            Matrix::from_fn(25, config.feature_dim, |_, _| rng.uniform(-1.0, 1.0));
        let mut session = StreamingSession::new(&params, &config).unwrap();
        assert!(matches!(session.smoothed_score(), Err(Error::NoEmissions)));
        let mut probs = Vec::new();
        for e in session
            .push(&features)
            .unwrap()
            .into_iter()
            .chain(session.finish().unwrap())
        {
            probs.push(e.decision.pos_prob);
            let window = &probs[probs.len().saturating_sub(SMOOTHING_WINDOW)..];
            let lo = window.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(e.decision.smoothed >= lo - 1e-12 && e.decision.smoothed <= hi + 1e-12);
            assert!(e.decision.smoothed >= 0.0 && e.decision.smoothed <= 1.0);
        }
        let final_score = session.smoothed_score().unwrap();
        let window = &probs[probs.len() - SMOOTHING_WINDOW..];
        assert!((final_score - window.iter().sum::<f64>() / 10.0).abs() < 1e-12);
    }

    #[test]
    fn policy_edge_thresholds_behave() {
        let config = small_config();
        let (params, mut rng) = random_model(&config, 58);
        let features =
            Matrix::from_fn(20, config.feature_dim, |_, _| rng.uniform(-1.0, 1.0));

        // Threshold zero never cancels.
        let mut session = StreamingSession::new(&params, &config).unwrap();
        session.apply_policy(0.0, 5);
        session.push(&features).unwrap();
        session.finish().unwrap();
        assert_eq!(session.decision(), DecisionState::Triggered { frame: 5 });

        // Threshold above one cancels at the first post-trigger emission.
        let mut session = StreamingSession::new(&params, &config).unwrap();
        session.apply_policy(1.0 + 1e-9, 5);
        session.push(&features).unwrap();
        session.finish().unwrap();
        assert_eq!(session.decision(), DecisionState::Cancelled { frame: 6 });
    }

    #[test]
    fn policy_applies_retroactively_and_never_uncancels() {
        let config = small_config();
        let (params, mut rng) = random_model(&config, 59);
        let features =
            Matrix::from_fn(18, config.feature_dim, |_, _| rng.uniform(-1.0, 1.0));
        let mut session = StreamingSession::new(&params, &config).unwrap();
        session.push(&features).unwrap();
        session.finish().unwrap();

        // Applied after the fact, the policy scans the recorded history.
        let verdict = session.apply_policy(2.0, 3);
        assert_eq!(verdict, DecisionState::Cancelled { frame: 4 });
        // Re-applying with a permissive threshold cannot un-cancel.
        let verdict = session.apply_policy(0.0, 3);
        assert_eq!(verdict, DecisionState::Cancelled { frame: 4 });
    }

    #[test]
    fn stats_report_blocks_and_length_free_state() {
        let config = small_config();
        let (params, mut rng) = random_model(&config, 60);
        let s = config.block_shift;

        let mut stats_for = |frames: usize| {
            let features =
                Matrix::from_fn(frames, config.feature_dim, |_, _| rng.uniform(-1.0, 1.0));
            let mut session = StreamingSession::new(&params, &config).unwrap();
            session.push(&features).unwrap();
            session.finish().unwrap();
            session.stats()
        };

        let short = stats_for(10 * s);
        let long = stats_for(100 * s);
        assert_eq!(short.state_bytes, long.state_bytes);
        // blocks = ceil((T - 2S)/S) + 1 for T >= 2S.
        assert_eq!(short.blocks_processed, (10 * s - 2 * s).div_ceil(s) + 1);
        assert_eq!(long.blocks_processed, (100 * s - 2 * s).div_ceil(s) + 1);
        assert_eq!(short.per_block_elapsed.len(), short.blocks_processed);

        // Zero frames: session closes with zero blocks.
        let mut empty = StreamingSession::new(&params, &config).unwrap();
        assert!(empty.finish().unwrap().is_empty());
        assert_eq!(empty.stats().blocks_processed, 0);

        // Ring accounting on top of caches and LSTM state.
        let expected = (config.n_layers * s * config.d_model
            + 2 * config.lstm_hidden
            + SMOOTHING_WINDOW)
            * config.precision.bytes();
        assert_eq!(short.state_bytes, expected);
    }
}
