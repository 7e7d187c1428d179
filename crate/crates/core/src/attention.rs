//! Closed-loop sensor gating.
//!
//! At every step after warmup a policy decides whether the sensor's frame is
//! transferred (attended) or suppressed (gated). Gated steps are filled in by
//! the predictor's own output, which is also fed back as its next input.

use std::fmt;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::events::{EventFrame, FrameSequence};
use crate::evaluator::EvaluatorModel;
use crate::metrics;
use crate::predictor::{sample_events, PredictorModel, SampleMode};
use crate::rng;
use crate::snn::Real;

pub const DEFAULT_WARMUP: usize = 3;
pub const BITS_PER_EVENT: u64 = 24;
/// Declared range of link energy per bit, in joules.
pub const ENERGY_PER_BIT_RANGE: (f64, f64) = (3.1e-8, 1.4e-7);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GatePolicy {
    /// Attend when the estimated score falls below `threshold`.
    Predictive { threshold: f64 },
    /// Attend `round(rate * steps)` post-warmup steps chosen uniformly.
    Random { rate: f64, seed: u64 },
    /// Attend post-warmup step `k` when `k % period == phase % period`.
    Periodic { period: usize, phase: usize },
}

impl GatePolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Predictive { threshold } if !(0.0..=1.0).contains(&threshold) => {
                Err(Error::InvalidValue(format!("threshold {threshold} not in [0, 1]")))
            }
            Self::Random { rate, .. } if !(0.0..=1.0).contains(&rate) => Err(Error::InvalidValue(format!("rate {rate} not in [0, 1]"))),
            Self::Periodic { period: 0, .. } => Err(Error::InvalidValue("period must be at least 1".into())),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Predictive { .. } => "predictive",
            Self::Random { .. } => "random",
            Self::Periodic { .. } => "periodic",
        }
    }

    /// Periodic schedule whose attend rate is closest to `attend_rate`.
    pub fn periodic_for_rate(attend_rate: f64) -> Self {
        let period = if attend_rate > 0.0 { (1.0 / attend_rate).round().max(1.0) as usize } else { usize::MAX };
        Self::Periodic { period, phase: 0 }
    }
}

impl fmt::Display for GatePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Predictive { threshold } => write!(f, "predictive(theta={threshold})"),
            Self::Random { rate, seed } => write!(f, "random(rate={rate}, seed={seed})"),
            Self::Periodic { period, phase } => write!(f, "periodic(period={period}, phase={phase})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    pub attended: bool,
    /// Evaluator output; only the predictive policy asks for it.
    pub est_score: Option<f64>,
    /// Region esim of what the loop believes against the true frame.
    pub actual_esim4: f64,
    /// Events transferred over the link (zero when gated).
    pub input_event_count: u64,
    pub prediction_event_count: u64,
    /// Encoder spikes while consuming this step's frame.
    pub spike_count: u64,
}

impl TraceStep {
    pub fn link_bits(&self) -> u64 {
        if self.attended {
            self.input_event_count * BITS_PER_EVENT
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub policy: GatePolicy,
    pub warmup: usize,
    pub steps: Vec<TraceStep>,
    /// Predicted frame for every step from `warmup` on.
    pub predictions: Vec<EventFrame>,
    /// What the loop used at each step: the sensed frame when attended,
    /// otherwise the prediction.
    pub perceived: Vec<EventFrame>,
}

impl AttentionTrace {
    fn post_warmup(&self) -> Result<&[TraceStep]> {
        match self.steps.get(self.warmup..) {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(Error::Config("trace has no steps after warmup".into())),
        }
    }

    pub fn attended_after_warmup(&self) -> usize {
        self.steps.iter().skip(self.warmup).filter(|s| s.attended).count()
    }

    pub fn total_spikes(&self) -> u64 {
        self.steps.iter().map(|s| s.spike_count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,attended,est_score,actual_esim4,link_bits,spike_count\n");
        for s in &self.steps {
            let est = s.est_score.map(|e| format!("{e:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{:.6},{},{}\n",
                s.step,
                u8::from(s.attended),
                est,
                s.actual_esim4,
                s.link_bits(),
                s.spike_count
            ));
        }
        out
    }
}

/// Gated steps over post-warmup steps.
pub fn gating_rate(trace: &AttentionTrace) -> Result<f64> {
    let steps = trace.post_warmup()?;
    Ok(steps.iter().filter(|s| !s.attended).count() as f64 / steps.len() as f64)
}

/// Mean region esim over post-warmup steps.
pub fn awareness(trace: &AttentionTrace) -> Result<f64> {
    let steps = trace.post_warmup()?;
    Ok(steps.iter().map(|s| s.actual_esim4).sum::<f64>() / steps.len() as f64)
}

pub fn link_bits(trace: &AttentionTrace) -> u64 {
    trace.steps.iter().map(TraceStep::link_bits).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkEnergyModel {
    pub bits_per_event: u64,
    pub energy_per_bit: f64,
}

impl LinkEnergyModel {
    /// Rejects energies outside the declared range.
    pub fn new(energy_per_bit: f64) -> Result<Self> {
        let (lo, hi) = ENERGY_PER_BIT_RANGE;
        if !(lo..=hi).contains(&energy_per_bit) {
            return Err(Error::OutOfRange(format!("{energy_per_bit} J/bit outside [{lo}, {hi}]")));
        }
        Ok(Self::with_override(energy_per_bit))
    }

    pub fn with_override(energy_per_bit: f64) -> Self {
        Self {
            bits_per_event: BITS_PER_EVENT,
            energy_per_bit,
        }
    }

    /// Link bit rate of a sensor emitting events at `event_fraction` of
    /// `pixels_per_second`.
    pub fn stream_bits_per_second(&self, pixels_per_second: f64, event_fraction: f64) -> f64 {
        pixels_per_second * event_fraction * self.bits_per_event as f64
    }

    pub fn energy(&self, bits: u64) -> f64 {
        bits as f64 * self.energy_per_bit
    }
}

impl Default for LinkEnergyModel {
    fn default() -> Self {
        Self::with_override(ENERGY_PER_BIT_RANGE.0)
    }
}

/// Link energy in joules.
pub fn link_energy(trace: &AttentionTrace, model: &LinkEnergyModel) -> f64 {
    let events: u64 = trace.steps.iter().filter(|s| s.attended).map(|s| s.input_event_count).sum();
    model.energy(events * model.bits_per_event)
}

/// Runs one closed loop over `sensor`, which is also the ground truth.
pub fn run_closed_loop<F: Real>(
    sensor: &FrameSequence,
    predictor: &PredictorModel<F>,
    evaluator: Option<&EvaluatorModel<F>>,
    policy: GatePolicy,
    warmup: usize,
) -> Result<AttentionTrace> {
    closed_loop(sensor, predictor, evaluator, policy, warmup, None)
}

/// `fixed` replaces the policy's own post-warmup schedule.
fn closed_loop<F: Real>(
    sensor: &FrameSequence,
    predictor: &PredictorModel<F>,
    evaluator: Option<&EvaluatorModel<F>>,
    policy: GatePolicy,
    warmup: usize,
    fixed: Option<Vec<bool>>,
) -> Result<AttentionTrace> {
    policy.validate()?;
    let frames = sensor.frames();
    if warmup == 0 {
        return Err(Error::Config("warmup must be at least 1".into()));
    }
    if frames.len() < warmup {
        return Err(Error::Config(format!("sequence of {} frames is shorter than warmup {warmup}", frames.len())));
    }
    if matches!(policy, GatePolicy::Predictive { .. }) && evaluator.is_none() {
        return Err(Error::Config("the predictive policy needs an evaluator".into()));
    }
    let post = frames.len() - warmup;
    let schedule: Option<Vec<bool>> = match policy {
        _ if fixed.is_some() => fixed.filter(|f| f.len() == post),
        GatePolicy::Random { rate, seed } => {
            let count = ((rate * post as f64).round() as usize).min(post);
            let mut idx: Vec<usize> = (0..post).collect();
            idx.shuffle(&mut rng::seeded(seed));
            let mut s = vec![false; post];
            for &i in &idx[..count] {
                s[i] = true;
            }
            Some(s)
        }
        GatePolicy::Periodic { period, phase } => Some((0..post).map(|k| k % period == phase % period).collect()),
        GatePolicy::Predictive { .. } => None,
    };

    let mut state = predictor.new_state();
    let mut steps = Vec::with_capacity(frames.len());
    let mut predictions = Vec::with_capacity(post);
    let mut perceived = Vec::with_capacity(frames.len());
    let mut next_pred: Option<EventFrame> = None;
    let mut reference: Option<&EventFrame> = None;
    for (t, sensed) in frames.iter().enumerate() {
        let (attended, est_score, prediction_events) = if t < warmup {
            (true, None, 0)
        } else {
            let pred = next_pred.take().expect("warmup produced a prediction");
            let (attend, est) = match (policy, &schedule) {
                (GatePolicy::Predictive { threshold }, _) => {
                    let ev = evaluator.expect("checked above");
                    let est = ev.estimate_esim(reference.expect("warmup attended"), &pred)?;
                    (threshold >= 1.0 || est < threshold, Some(est))
                }
                (_, Some(s)) => (s[t - warmup], None),
                _ => unreachable!("schedule exists for non-predictive policies"),
            };
            let n = pred.nonzero_count() as u64;
            predictions.push(pred);
            (attend, est, n)
        };
        let current = if attended {
            reference = Some(sensed);
            sensed.clone()
        } else {
            predictions.last().expect("gated steps follow warmup").clone()
        };
        let actual_esim4 = metrics::esim4(&current, sensed)?;
        let p = predictor.predict_next(&mut state, &current)?;
        next_pred = Some(sample_events(&p.probs, SampleMode::Argmax).with_index(t + 1));
        steps.push(TraceStep {
            step: t,
            attended,
            est_score,
            actual_esim4,
            input_event_count: if attended { sensed.nonzero_count() as u64 } else { 0 },
            prediction_event_count: prediction_events,
            spike_count: p.encoder_spikes(),
        });
        perceived.push(current);
    }
    Ok(AttentionTrace {
        policy,
        warmup,
        steps,
        predictions,
        perceived,
    })
}

/// Aggregate of one policy over a set of sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicySummary {
    pub attend_rate: f64,
    /// Mean over sequences of per-sequence awareness.
    pub awareness: f64,
    pub awareness_std: f64,
    pub link_bits: u64,
    pub spikes: u64,
}

fn run_many<F: Real>(
    sequences: &[FrameSequence],
    predictor: &PredictorModel<F>,
    evaluator: Option<&EvaluatorModel<F>>,
    policy: GatePolicy,
    schedules: Option<Vec<Vec<bool>>>,
    warmup: usize,
) -> Result<PolicySummary> {
    if sequences.is_empty() {
        return Err(Error::Config("no sequences to run".into()));
    }
    let (mut attended, mut post, mut bits, mut spikes) = (0usize, 0usize, 0u64, 0u64);
    let mut aw = Vec::with_capacity(sequences.len());
    let mut schedules = schedules.map(Vec::into_iter);
    for seq in sequences {
        let fixed = schedules.as_mut().and_then(Iterator::next);
        let trace = closed_loop(seq, predictor, evaluator, policy, warmup, fixed)?;
        attended += trace.attended_after_warmup();
        post += trace.steps.len() - warmup;
        bits += link_bits(&trace);
        spikes += trace.total_spikes();
        aw.push(awareness(&trace)?);
    }
    let n = aw.len() as f64;
    let mean = aw.iter().sum::<f64>() / n;
    let var = aw.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    Ok(PolicySummary {
        attend_rate: attended as f64 / post as f64,
        awareness: mean,
        awareness_std: var.sqrt(),
        link_bits: bits,
        spikes,
    })
}

/// Runs `policy` on every sequence.
///
/// A random policy draws one schedule for the whole run: exactly
/// `round(rate * M)` of the `M` post-warmup steps across all sequences are
/// attended, so its overall attend rate matches `rate` as closely as the
/// step count allows.
pub fn summarize_policy<F: Real>(
    sequences: &[FrameSequence],
    predictor: &PredictorModel<F>,
    evaluator: Option<&EvaluatorModel<F>>,
    policy: GatePolicy,
    warmup: usize,
) -> Result<PolicySummary> {
    let schedules = match policy {
        GatePolicy::Random { rate, seed } => {
            policy.validate()?;
            let posts: Vec<usize> = sequences.iter().map(|s| s.len().saturating_sub(warmup)).collect();
            let total: usize = posts.iter().sum();
            let count = ((rate * total as f64).round() as usize).min(total);
            let mut idx: Vec<usize> = (0..total).collect();
            idx.shuffle(&mut rng::seeded(seed));
            let mut flat = vec![false; total];
            for &i in &idx[..count] {
                flat[i] = true;
            }
            let mut rest = &flat[..];
            let mut split = Vec::with_capacity(posts.len());
            for &p in &posts {
                let (head, tail) = rest.split_at(p);
                split.push(head.to_vec());
                rest = tail;
            }
            Some(split)
        }
        _ => None,
    };
    run_many(sequences, predictor, evaluator, policy, schedules, warmup)
}

/// Bisects the predictive threshold until the attend rate over `sequences`
/// is as close as it gets to `target`. Returns the threshold and its summary.
pub fn calibrate_threshold<F: Real>(
    sequences: &[FrameSequence],
    predictor: &PredictorModel<F>,
    evaluator: &EvaluatorModel<F>,
    target: f64,
    warmup: usize,
    iterations: usize,
) -> Result<(f64, PolicySummary)> {
    let run = |theta: f64| summarize_policy(sequences, predictor, Some(evaluator), GatePolicy::Predictive { threshold: theta }, warmup);
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best: Option<(f64, PolicySummary)> = None;
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        let s = run(mid)?;
        if best.map_or(true, |(_, b)| (s.attend_rate - target).abs() < (b.attend_rate - target).abs()) {
            best = Some((mid, s));
        }
        if s.attend_rate < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    match best {
        Some(b) => Ok(b),
        None => Ok((0.5, run(0.5)?)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub policy: &'static str,
    /// Threshold, rate or period, depending on the policy.
    pub parameter: f64,
    pub seed: u64,
    pub summary: PolicySummary,
}

pub const COMPARISON_HEADER: &str = "policy,parameter,seed,attend_rate,awareness,awareness_std,link_bits,spike_count";

impl ComparisonRow {
    pub fn csv_line(&self) -> String {
        let s = &self.summary;
        format!(
            "{},{:.6},{},{:.6},{:.6},{:.6},{},{}",
            self.policy, self.parameter, self.seed, s.attend_rate, s.awareness, s.awareness_std, s.link_bits, s.spikes
        )
    }
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// For each threshold, measures the predictive attend rate and runs the
/// random and periodic policies at that rate once per seed.
pub fn compare_policies<F: Real>(
    sequences: &[FrameSequence],
    predictor: &PredictorModel<F>,
    evaluator: &EvaluatorModel<F>,
    thresholds: &[f64],
    seeds: &[u64],
    warmup: usize,
) -> Result<Vec<ComparisonRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for &theta in thresholds {
        let predictive = summarize_policy(sequences, predictor, Some(evaluator), GatePolicy::Predictive { threshold: theta }, warmup)?;
        let rate = predictive.attend_rate;
        let periodic = GatePolicy::periodic_for_rate(rate);
        let periodic_summary = summarize_policy(sequences, predictor, None, periodic, warmup)?;
        let period = match periodic {
            GatePolicy::Periodic { period, .. } => period as f64,
            _ => unreachable!(),
        };
        for &seed in seeds {
            rows.push(ComparisonRow {
                policy: "predictive",
                parameter: theta,
                seed,
                summary: predictive,
            });
            let random = summarize_policy(sequences, predictor, None, GatePolicy::Random { rate, seed }, warmup)?;
            rows.push(ComparisonRow {
                policy: "random",
                parameter: rate,
                seed,
                summary: random,
            });
            rows.push(ComparisonRow {
                policy: "periodic",
                parameter: period,
                seed,
                summary: periodic_summary,
            });
        }
    }
    Ok(rows)
}
