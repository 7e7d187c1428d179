//! Spiking quality estimator.
//!
//! Given the most recent sensed frame and a predicted frame, estimates the
//! region-esim score the prediction would get against the (unseen) truth.
//! The 4-plane input is presented for a fixed number of steps to a spiking
//! conv stack; the last layer's mean firing rate feeds a linear readout and a
//! logistic output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{EventFrame, FrameSequence, Geometry};
use crate::metrics;
use crate::predictor::{sample_events, PredictorModel, SampleMode};
use crate::rng;
use crate::snn::{
    lif_backward_step, lif_forward, Checkpoint, ConvLayer, ConvSpec, FeatureMap, LayerGrads, LayerKind, LifLayerState,
    LifParams, LifRecord, Real, SpikeFn, Trainable,
};

pub const EVALUATOR_KIND: &str = "evaluator";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorSpec {
    pub width: usize,
    pub height: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Presentation steps per estimate.
    pub steps: usize,
    pub tau: f64,
    pub v_th: f64,
    pub alpha: f64,
    pub spike_gain: f64,
}

impl Default for EvaluatorSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            channels: vec![8, 16, 32],
            kernel: 3,
            steps: 10,
            tau: 0.5,
            v_th: 1.0,
            alpha: 2.0,
            spike_gain: 2.0,
        }
    }
}

impl EvaluatorSpec {
    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.width, self.height)
    }

    pub fn lif(&self) -> LifParams {
        LifParams {
            tau: self.tau,
            v_th: self.v_th,
            alpha: self.alpha,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(format!("evaluator spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.lif().validate()?;
        let depth = self.channels.len();
        if depth == 0 || self.channels.contains(&0) || self.steps == 0 {
            return Err(Error::Config("evaluator needs layers, channels and steps".into()));
        }
        let scale = 1usize << depth;
        if self.width == 0 || self.height == 0 || self.width % scale != 0 || self.height % scale != 0 {
            return Err(Error::Config(format!(
                "{}x{} frames must be divisible by {scale}",
                self.width, self.height
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("kernel size must be odd".into()));
        }
        Ok(())
    }
}

/// Reference and prediction as four binary planes (+ref, -ref, +pred, -pred).
pub fn encode_pair<F: Real>(reference: &EventFrame, prediction: &EventFrame) -> Result<FeatureMap<F>> {
    reference.geometry().ensure_same(&prediction.geometry())?;
    let g = reference.geometry();
    let plane = g.area();
    let mut map = FeatureMap::zeros(4, g.height, g.width);
    for (k, frame) in [reference, prediction].into_iter().enumerate() {
        for (i, &c) in frame.cells().iter().enumerate() {
            match c {
                1 => map.data[2 * k * plane + i] = F::one(),
                -1 => map.data[(2 * k + 1) * plane + i] = F::one(),
                _ => {}
            }
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorModel<F> {
    spec: EvaluatorSpec,
    lif: LifParams,
    stack: Vec<ConvLayer<F>>,
    readout: ConvLayer<F>,
    spike_fn: SpikeFn,
}

struct Pass<F> {
    input: FeatureMap<F>,
    /// `spikes[t][l]` is layer `l`'s output at step `t`.
    spikes: Vec<Vec<FeatureMap<F>>>,
    lif: Vec<Vec<LifRecord<F>>>,
    rate: FeatureMap<F>,
    estimate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub reference: EventFrame,
    pub prediction: EventFrame,
    pub target: f64,
    pub horizon: usize,
}

impl<F: Real> EvaluatorModel<F> {
    pub fn new(spec: EvaluatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::seeded(seed);
        let k = spec.kernel;
        let stack = spec
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let cin = if i == 0 { 4 } else { spec.channels[i - 1] };
                let s = ConvSpec::conv(LayerKind::SpikingConv, cin, c, k, 2, k / 2);
                ConvLayer::kaiming_uniform(format!("feat{i}"), s, spec.spike_gain, &mut r)
            })
            .collect();
        let last = *spec.channels.last().expect("validated");
        let readout = ConvLayer::zeros("readout", ConvSpec::conv(LayerKind::AnalogConv, last, 1, 1, 1, 0).with_bias(true));
        let lif = spec.lif();
        Ok(Self {
            spec,
            lif,
            stack,
            readout,
            spike_fn: SpikeFn::Heaviside,
        })
    }

    /// Swaps the spike nonlinearity; `Relaxed` makes the whole pass smooth
    /// for gradient checks.
    pub fn with_spike_fn(mut self, spike_fn: SpikeFn) -> Self {
        self.spike_fn = spike_fn;
        self
    }

    pub fn spec(&self) -> &EvaluatorSpec {
        &self.spec
    }

    pub fn geometry(&self) -> Geometry {
        self.spec.geometry()
    }

    pub fn cast<G: Real>(&self) -> EvaluatorModel<G> {
        EvaluatorModel {
            spec: self.spec.clone(),
            lif: self.lif,
            stack: self.stack.iter().map(ConvLayer::cast).collect(),
            readout: self.readout.cast(),
            spike_fn: self.spike_fn,
        }
    }

    fn layers(&self) -> impl Iterator<Item = &ConvLayer<F>> {
        self.stack.iter().chain(std::iter::once(&self.readout))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer<F>> {
        self.stack.iter_mut().chain(std::iter::once(&mut self.readout))
    }

    /// Estimated region-esim of `prediction`, in [0, 1]. Never sees the
    /// frame being predicted.
    pub fn estimate_esim(&self, reference: &EventFrame, prediction: &EventFrame) -> Result<f64> {
        self.geometry().ensure_same(&reference.geometry())?;
        Ok(self.run(reference, prediction)?.estimate)
    }

    fn run(&self, reference: &EventFrame, prediction: &EventFrame) -> Result<Pass<F>> {
        let input = encode_pair(reference, prediction)?;
        self.geometry().ensure_same(&reference.geometry())?;
        let first = self.stack[0].forward(&input)?;
        let mut states: Vec<LifLayerState<F>> = Vec::with_capacity(self.stack.len());
        let mut spikes = Vec::with_capacity(self.spec.steps);
        let mut lif = Vec::with_capacity(self.spec.steps);
        let last = self.stack.len() - 1;
        let mut rate = vec![F::zero(); self.stack[last].spec.out_channels];
        for _ in 0..self.spec.steps {
            let mut step_spikes: Vec<FeatureMap<F>> = Vec::with_capacity(self.stack.len());
            let mut step_lif = Vec::with_capacity(self.stack.len());
            for (l, layer) in self.stack.iter().enumerate() {
                let current = if l == 0 { first.clone() } else { layer.forward(&step_spikes[l - 1])? };
                if states.len() <= l {
                    states.push(LifLayerState::new(current.data.len()));
                }
                let rec = lif_forward(&mut states[l], &current.data, &self.lif, self.spike_fn, None)?;
                step_spikes.push(FeatureMap::from_vec(current.channels, current.height, current.width, rec.y.clone()));
                step_lif.push(rec);
            }
            let out = &step_spikes[last];
            for (c, r) in rate.iter_mut().enumerate() {
                let plane = out.plane();
                *r += out.data[c * plane..(c + 1) * plane].iter().copied().sum::<F>();
            }
            spikes.push(step_spikes);
            lif.push(step_lif);
        }
        let out = &spikes[0][last];
        let norm = F::lit((self.spec.steps * out.plane()) as f64);
        let rate = FeatureMap::from_vec(rate.len(), 1, 1, rate.into_iter().map(|r| r / norm).collect());
        let z = self.readout.forward(&rate)?.data[0].as_f64();
        Ok(Pass {
            input,
            spikes,
            lif,
            rate,
            estimate: sigmoid(z),
        })
    }

    /// Squared error against `target` and its gradient.
    pub fn loss_and_grad_for(&self, reference: &EventFrame, prediction: &EventFrame, target: f64) -> Result<(f64, Vec<Vec<F>>)> {
        let pass = self.run(reference, prediction)?;
        let s = pass.estimate;
        let loss = (s - target) * (s - target);
        let dz = 2.0 * (s - target) * s * (1.0 - s);

        let mut grads: Vec<LayerGrads<F>> = self.layers().map(ConvLayer::zero_grads).collect();
        let depth = self.stack.len();
        let g_z = FeatureMap::from_vec(1, 1, 1, vec![F::lit(dz)]);
        let g_rate = self
            .readout
            .backward(&pass.rate, &g_z, &mut grads[depth], true)?
            .expect("input gradient requested");

        let last = &pass.spikes[0][depth - 1];
        let scale = F::one() / F::lit((self.spec.steps * last.plane()) as f64);
        let plane = last.plane();
        let g_last: Vec<F> = (0..last.data.len()).map(|i| g_rate.data[i / plane] * scale).collect();

        let mut carry: Vec<Vec<F>> = pass.lif[0].iter().map(|r| vec![F::zero(); r.u.len()]).collect();
        let mut g_first = vec![F::zero(); carry[0].len()];
        for t in (0..self.spec.steps).rev() {
            let mut g_y = g_last.clone();
            for l in (0..depth).rev() {
                let g_current = lif_backward_step(&pass.lif[t][l], &g_y, &mut carry[l], &self.lif);
                if l == 0 {
                    for (a, g) in g_first.iter_mut().zip(&g_current) {
                        *a += *g;
                    }
                    break;
                }
                let shape = &pass.spikes[t][l];
                let g_current = FeatureMap::from_vec(shape.channels, shape.height, shape.width, g_current);
                g_y = self.stack[l]
                    .backward(&pass.spikes[t][l - 1], &g_current, &mut grads[l], true)?
                    .expect("input gradient requested")
                    .data;
            }
        }
        // The first layer sees the same input every step, so its per-step
        // current gradients can be summed before one backward pass.
        let first = &pass.spikes[0][0];
        let g_first = FeatureMap::from_vec(first.channels, first.height, first.width, g_first);
        self.stack[0].backward(&pass.input, &g_first, &mut grads[0], false)?;
        Ok((loss, grads.into_iter().flat_map(|g| [g.weight, g.bias]).collect()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: EVALUATOR_KIND.into(),
            geometry: self.geometry(),
            lif: self.lif,
            meta: vec![
                (
                    "channels".into(),
                    self.spec.channels.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
                ),
                ("kernel".into(), self.spec.kernel.to_string()),
                ("steps".into(), self.spec.steps.to_string()),
                ("spike_gain".into(), self.spec.spike_gain.to_string()),
            ],
            layers: self.layers().map(ConvLayer::cast).collect(),
        }
    }
}

impl EvaluatorModel<f32> {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != EVALUATOR_KIND {
            return Err(Error::Checkpoint(format!("expected an evaluator, found `{}`", ckpt.kind)));
        }
        let meta = |k: &str| ckpt.meta(k).ok_or_else(|| Error::Checkpoint(format!("missing meta `{k}`")));
        let parse = |k: &str| -> Result<usize> { meta(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad meta `{k}`"))) };
        let channels = meta("channels")?
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Checkpoint("bad channels".into())))
            .collect::<Result<Vec<usize>>>()?;
        let spec = EvaluatorSpec {
            width: ckpt.geometry.width,
            height: ckpt.geometry.height,
            channels,
            kernel: parse("kernel")?,
            steps: parse("steps")?,
            tau: ckpt.lif.tau,
            v_th: ckpt.lif.v_th,
            alpha: ckpt.lif.alpha,
            spike_gain: meta("spike_gain")?.parse().unwrap_or(1.0),
        };
        let mut model = Self::new(spec, 0)?;
        for layer in model.layers_mut() {
            let stored = ckpt.layer(&layer.name)?;
            if stored.spec != layer.spec {
                return Err(Error::Checkpoint(format!("layer `{}` has a different shape", layer.name)));
            }
            *layer = stored.clone();
        }
        Ok(model)
    }
}

impl<F: Real> Trainable<F> for EvaluatorModel<F> {
    type Sample = EvalSample;

    fn param_names(&self) -> Vec<String> {
        self.layers()
            .flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)])
            .collect()
    }

    fn params(&self) -> Vec<&[F]> {
        self.layers().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [F]> {
        self.layers_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    fn loss_and_grad(&self, sample: &EvalSample) -> Result<(f64, Vec<Vec<F>>)> {
        self.loss_and_grad_for(&sample.reference, &sample.prediction, sample.target)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusConfig {
    /// Sensed frames fed before the first anchor.
    pub warmup: usize,
    pub max_horizon: usize,
    /// Distance between consecutive anchors.
    pub anchor_stride: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            warmup: 3,
            max_horizon: 10,
            anchor_stride: 1,
        }
    }
}

/// Self-fed rollouts of a frozen predictor, scored against the truth.
///
/// Each anchor is the last sensed frame before a rollout; every anchor
/// contributes one sample per horizon `1..=max_horizon`, so horizons are
/// evenly represented.
pub fn build_corpus<F: Real>(predictor: &PredictorModel<F>, sequences: &[FrameSequence], cfg: CorpusConfig) -> Result<Vec<EvalSample>> {
    if cfg.warmup == 0 || cfg.max_horizon == 0 || cfg.anchor_stride == 0 {
        return Err(Error::Config("corpus warmup, horizon and stride must be positive".into()));
    }
    let mut out = Vec::new();
    for seq in sequences {
        let frames = seq.frames();
        let mut state = predictor.new_state();
        for a in 0..frames.len() {
            if a + cfg.max_horizon >= frames.len() {
                break;
            }
            let first = predictor.predict_next(&mut state, &frames[a])?;
            if a + 1 < cfg.warmup || (a + 1 - cfg.warmup) % cfg.anchor_stride != 0 {
                continue;
            }
            let mut branch = state.clone();
            let mut pred = sample_events(&first.probs, SampleMode::Argmax);
            for h in 1..=cfg.max_horizon {
                if h > 1 {
                    let p = predictor.predict_next(&mut branch, &pred)?;
                    pred = sample_events(&p.probs, SampleMode::Argmax);
                }
                out.push(EvalSample {
                    reference: frames[a].clone(),
                    target: metrics::esim4(&pred, &frames[a + h])?,
                    prediction: pred.clone(),
                    horizon: h,
                });
            }
        }
    }
    Ok(out)
}

/// Fractional ranks (ties share their mean rank), 1-based.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dimension(a.len(), b.len()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedRatio("correlation of a constant series".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dimension(a.len(), b.len()));
    }
    pearson(&ranks(a), &ranks(b))
}

/// Held-out quality of an evaluator on a corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvaluatorReport {
    /// NaN when the estimates (or targets) are constant.
    pub spearman: f64,
    pub mae: f64,
    /// MAE of always answering the mean target.
    pub mean_baseline_mae: f64,
}

pub fn evaluate<F: Real>(model: &EvaluatorModel<F>, corpus: &[EvalSample]) -> Result<EvaluatorReport> {
    let estimates = corpus
        .iter()
        .map(|s| model.estimate_esim(&s.reference, &s.prediction))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<f64> = corpus.iter().map(|s| s.target).collect();
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    Ok(EvaluatorReport {
        spearman: match spearman(&estimates, &targets) {
            Err(Error::UndefinedRatio(_)) => f64::NAN,
            r => r?,
        },
        mae: estimates.iter().zip(&targets).map(|(e, t)| (e - t).abs()).sum::<f64>() / n,
        mean_baseline_mae: targets.iter().map(|t| (t - mean).abs()).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::{bptt_train, OptimizerConfig, TrainConfig};
    use rand::Rng as _;

    fn small_spec() -> EvaluatorSpec {
        EvaluatorSpec {
            width: 16,
            height: 16,
            channels: vec![4, 8],
            ..EvaluatorSpec::default()
        }
    }

    fn frame(seed: u64, g: Geometry, density: u32) -> EventFrame {
        let mut r = rng::seeded(seed);
        let cells = (0..g.area())
            .map(|_| match r.gen_range(0..density) {
                0 => 1,
                1 => -1,
                _ => 0,
            })
            .collect();
        EventFrame::from_cells(g, cells).unwrap()
    }

    #[test]
    fn estimates_lie_in_unit_interval() {
        let mut m = EvaluatorModel::<f32>::new(small_spec(), 1).unwrap();
        for (i, w) in m.readout.weight.iter_mut().enumerate() {
            *w = if i % 2 == 0 { 50.0 } else { -50.0 };
        }
        for k in 0..10 {
            let g = m.geometry();
            let e = m.estimate_esim(&frame(k, g, 3), &frame(k + 100, g, 3)).unwrap();
            assert!((0.0..=1.0).contains(&e));
        }
    }

    #[test]
    fn untrained_readout_answers_one_half() {
        let m = EvaluatorModel::<f32>::new(small_spec(), 1).unwrap();
        let g = m.geometry();
        assert_eq!(m.estimate_esim(&frame(1, g, 3), &frame(2, g, 3)).unwrap(), 0.5);
    }

    #[test]
    fn constant_estimates_have_no_rank_correlation() {
        let m = EvaluatorModel::<f32>::new(small_spec(), 1).unwrap();
        let g = m.geometry();
        let corpus: Vec<EvalSample> = (0..6)
            .map(|k| EvalSample {
                reference: frame(k, g, 3),
                prediction: frame(k + 9, g, 3),
                target: k as f64 / 10.0,
                horizon: 1,
            })
            .collect();
        let r = evaluate(&m, &corpus).unwrap();
        assert!(r.spearman.is_nan());
        assert!((r.mae - 0.25).abs() < 1e-12);
    }

    #[test]
    fn estimates_are_deterministic() {
        let mut m = EvaluatorModel::<f32>::new(small_spec(), 1).unwrap();
        m.readout.weight.iter_mut().for_each(|w| *w = 3.0);
        let g = m.geometry();
        let (a, b) = (frame(1, g, 3), frame(2, g, 3));
        assert_eq!(m.estimate_esim(&a, &b).unwrap(), m.estimate_esim(&a, &b).unwrap());
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let m = EvaluatorModel::<f32>::new(small_spec(), 1).unwrap();
        let a = EventFrame::zeros(Geometry::new(16, 16));
        let b = EventFrame::zeros(Geometry::new(8, 8));
        assert!(matches!(m.estimate_esim(&a, &b), Err(Error::Dimension { .. })));
        assert!(matches!(m.estimate_esim(&b, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn constant_targets_are_learned() {
        let mut m = EvaluatorModel::<f32>::new(small_spec(), 2).unwrap();
        let g = m.geometry();
        let samples: Vec<EvalSample> = (0..16)
            .map(|k| EvalSample {
                reference: frame(k, g, 4),
                prediction: frame(k + 50, g, 4),
                target: 0.7,
                horizon: 1,
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 150,
            batch_size: 8,
            optimizer: OptimizerConfig::adam(1e-2),
            seed: 1,
            clip_norm: None,
        };
        bptt_train(&mut m, &samples, &cfg, |_, _, _| {}).unwrap();
        for s in &samples {
            let e = m.estimate_esim(&s.reference, &s.prediction).unwrap();
            assert!((e - 0.7).abs() < 0.05, "{e}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_the_readout() {
        let mut m = EvaluatorModel::<f64>::new(small_spec(), 4).unwrap();
        m.readout.weight.iter_mut().enumerate().for_each(|(i, w)| *w = 0.3 * i as f64 - 1.0);
        let g = m.geometry();
        let (a, b) = (frame(7, g, 3), frame(8, g, 3));
        let (_, grads) = m.loss_and_grad_for(&a, &b, 0.3).unwrap();
        let names = m.param_names();
        let h = 1e-6;
        for name in ["readout.weight", "readout.bias"] {
            let p = names.iter().position(|n| n == name).unwrap();
            for i in 0..m.params()[p].len() {
                let mut plus = m.clone();
                plus.params_mut()[p][i] += h;
                let mut minus = m.clone();
                minus.params_mut()[p][i] -= h;
                let num = (plus.loss_and_grad_for(&a, &b, 0.3).unwrap().0 - minus.loss_and_grad_for(&a, &b, 0.3).unwrap().0) / (2.0 * h);
                assert!((num - grads[p][i]).abs() <= 1e-6 * num.abs().max(1e-3), "{name}[{i}] {num} vs {}", grads[p][i]);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_with_negligible_leak() {
        // A vanishing leak takes the reset gate out of the dynamics, so the
        // relaxed pass is smooth in every weight.
        let spec = EvaluatorSpec { tau: 1e-9, ..small_spec() };
        let mut m = EvaluatorModel::<f64>::new(spec, 5).unwrap().with_spike_fn(SpikeFn::Relaxed);
        m.readout.weight.iter_mut().enumerate().for_each(|(i, w)| *w = 0.5 * i as f64 - 1.5);
        let g = m.geometry();
        let (a, b) = (frame(9, g, 3), frame(10, g, 3));
        let (_, grads) = m.loss_and_grad_for(&a, &b, 0.9).unwrap();
        let h = 1e-6;
        let mut r = rng::seeded(3);
        for p in [0, 2] {
            for _ in 0..5 {
                let i = r.gen_range(0..m.params()[p].len());
                let mut plus = m.clone();
                plus.params_mut()[p][i] += h;
                let mut minus = m.clone();
                minus.params_mut()[p][i] -= h;
                let num = (plus.loss_and_grad_for(&a, &b, 0.9).unwrap().0 - minus.loss_and_grad_for(&a, &b, 0.9).unwrap().0) / (2.0 * h);
                let an = grads[p][i];
                assert!((num - an).abs() <= 1e-3 * num.abs().max(an.abs()).max(1e-6), "param {p}[{i}] {num:e} vs {an:e}");
            }
        }
    }

    #[test]
    fn ranks_handle_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 100.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = EvaluatorModel::<f32>::new(small_spec(), 3).unwrap();
        let back = EvaluatorModel::from_checkpoint(&Checkpoint::decode(&m.to_checkpoint().encode().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
