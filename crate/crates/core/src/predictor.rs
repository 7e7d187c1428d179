//! Hybrid next-frame predictor.
//!
//! A stack of spiking strided convolutions encodes each incoming frame; the
//! LIF membrane potentials carry temporal context from frame to frame. Analog
//! residual blocks transform the bottleneck, and analog transposed
//! convolutions decode back to full resolution. Each decoder layer adds a
//! 1x1 projection of the encoder map at the same resolution (the input
//! planes for the last layer). A per-pixel softmax gives the probabilities of
//! no-event / positive / negative.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{EventFrame, FrameSequence, Geometry};
use crate::metrics;
use crate::rng;
use crate::snn::{
    lif_backward_step, lif_forward, Checkpoint, ConvLayer, ConvSpec, FeatureMap, LayerGrads, LayerKind,
    LifLayerState, LifParams, LifRecord, Real, SpikeFn, Trainable,
};

pub const PREDICTOR_KIND: &str = "predictor";
const PROB_FLOOR: f64 = 1e-12;

/// Layer-stack description; readable from a small TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSpec {
    pub width: usize,
    pub height: usize,
    pub encoder_channels: Vec<usize>,
    pub residual_blocks: usize,
    pub kernel: usize,
    pub tau: f64,
    pub v_th: f64,
    pub alpha: f64,
    /// Init gain for the spiking encoder layers.
    pub spike_gain: f64,
    /// Adds a 1x1 projection of the raw input planes to the output logits.
    /// Off by default: the direct path copies input noise into the output.
    pub input_skip: bool,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            encoder_channels: vec![16, 32, 64],
            residual_blocks: 2,
            kernel: 3,
            tau: 0.5,
            v_th: 1.0,
            alpha: 2.0,
            spike_gain: 1.0,
            input_skip: false,
        }
    }
}

impl PredictorSpec {
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
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(format!("model spec: {e}")))?;
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
        let depth = self.encoder_channels.len();
        if depth == 0 || self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder needs at least one non-empty layer".into()));
        }
        let scale = 1usize << depth;
        if self.width == 0 || self.height == 0 || self.width % scale != 0 || self.height % scale != 0 {
            return Err(Error::Config(format!(
                "{}x{} frames must be divisible by {scale} for a {depth}-layer encoder",
                self.width, self.height
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("kernel size must be odd".into()));
        }
        Ok(())
    }

    /// Channels of encoder level `l`: level 0 is the two input planes.
    fn level_channels(&self, l: usize) -> usize {
        if l == 0 {
            2
        } else {
            self.encoder_channels[l - 1]
        }
    }
}

/// Per-pixel probabilities of (no-event, positive, negative).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbFrame {
    geometry: Geometry,
    probs: Vec<[f64; 3]>,
}

impl ProbFrame {
    /// Rows must be non-negative and sum to one within 1e-6.
    pub fn new(geometry: Geometry, probs: Vec<[f64; 3]>) -> Result<Self> {
        if probs.len() != geometry.area() {
            return Err(Error::dimension(geometry.area(), probs.len()));
        }
        for p in &probs {
            if p.iter().any(|&v| !(v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidValue(format!("{p:?} is not a distribution")));
            }
        }
        Ok(Self { geometry, probs })
    }

    pub fn uniform(geometry: Geometry) -> Self {
        Self {
            geometry,
            probs: vec![[1.0 / 3.0; 3]; geometry.area()],
        }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.probs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Argmax,
    Sample { seed: u64 },
}

/// Turns class probabilities into a ternary frame. Argmax ties resolve to
/// no-event.
pub fn sample_events(prob: &ProbFrame, mode: SampleMode) -> EventFrame {
    let cells = match mode {
        SampleMode::Argmax => prob.probs.iter().map(|p| argmax_class(p)).collect(),
        SampleMode::Sample { seed } => {
            let mut r = rng::seeded(seed);
            prob.probs
                .iter()
                .map(|p| {
                    let u: f64 = r.gen();
                    if u < p[0] {
                        0
                    } else if u < p[0] + p[1] {
                        1
                    } else {
                        -1
                    }
                })
                .collect()
        }
    };
    EventFrame::from_cells(prob.geometry, cells).expect("classes map to ternary cells")
}

fn argmax_class(p: &[f64; 3]) -> i8 {
    if p[0] >= p[1] && p[0] >= p[2] {
        0
    } else if p[1] > p[2] {
        1
    } else if p[2] > p[1] {
        -1
    } else {
        0
    }
}

fn class_of(cell: i8) -> usize {
    match cell {
        1 => 1,
        -1 => 2,
        _ => 0,
    }
}

/// Mean per-pixel cross entropy against the one-hot target classes.
pub fn ce_loss(prob: &ProbFrame, target: &EventFrame) -> Result<f64> {
    prob.geometry.ensure_same(&target.geometry())?;
    let sum: f64 = prob
        .probs
        .iter()
        .zip(target.cells())
        .map(|(p, &c)| -p[class_of(c)].max(PROB_FLOOR).ln())
        .sum();
    Ok(sum / prob.probs.len() as f64)
}

/// Predicts that nothing moves.
pub fn persistence_baseline(frame: &EventFrame) -> EventFrame {
    frame.clone()
}

/// Ternary frame as two binary planes (positive, negative).
pub fn encode_frame<F: Real>(frame: &EventFrame) -> FeatureMap<F> {
    let g = frame.geometry();
    let mut map = FeatureMap::zeros(2, g.height, g.width);
    let plane = g.area();
    for (i, &c) in frame.cells().iter().enumerate() {
        match c {
            1 => map.data[i] = F::one(),
            -1 => map.data[plane + i] = F::one(),
            _ => {}
        }
    }
    map
}

/// Encoder membrane state carried between calls.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState<F> {
    layers: Vec<LifLayerState<F>>,
}

impl<F: Real> PredictorState<F> {
    pub fn potentials(&self, layer: usize) -> &[F] {
        &self.layers[layer].u
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: ProbFrame,
    /// Spikes emitted by each encoder layer during this call.
    pub spikes: Vec<u64>,
}

impl Prediction {
    pub fn encoder_spikes(&self) -> u64 {
        self.spikes.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel<F> {
    spec: PredictorSpec,
    lif: LifParams,
    encoder: Vec<ConvLayer<F>>,
    residual: Vec<ConvLayer<F>>,
    decoder: Vec<ConvLayer<F>>,
    skips: Vec<ConvLayer<F>>,
}

/// Forward-pass options used by gradient checks.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a, F> {
    pub spike_fn: SpikeFn,
    /// Reset masks per step per encoder layer, replacing `1 - y[t-1]`.
    pub frozen_gates: Option<&'a [Vec<Vec<F>>]>,
}

struct StepRecord<F> {
    /// Encoder levels: input planes followed by every spike map.
    levels: Vec<FeatureMap<F>>,
    lif: Vec<LifRecord<F>>,
    res_in: Vec<FeatureMap<F>>,
    res_pre: Vec<FeatureMap<F>>,
    dec_in: Vec<FeatureMap<F>>,
    dec_pre: Vec<FeatureMap<F>>,
    probs: Vec<[f64; 3]>,
}

impl<F: Real> PredictorModel<F> {
    /// Fresh model with fan-in scaled uniform weights. The output layer (last
    /// decoder and its skip) starts at zero, so an untrained model predicts
    /// the uniform distribution everywhere.
    pub fn new(spec: PredictorSpec, seed: u64) -> Result<Self> {
        Self::build(spec, seed, true)
    }

    /// Like [`PredictorModel::new`] but with a random output layer too.
    pub fn new_fully_random(spec: PredictorSpec, seed: u64) -> Result<Self> {
        Self::build(spec, seed, false)
    }

    fn build(spec: PredictorSpec, seed: u64, zero_output: bool) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::seeded(seed);
        let depth = spec.encoder_channels.len();
        let k = spec.kernel;
        let pad = k / 2;
        let encoder = (0..depth)
            .map(|i| {
                let s = ConvSpec::conv(LayerKind::SpikingConv, spec.level_channels(i), spec.level_channels(i + 1), k, 2, pad);
                ConvLayer::kaiming_uniform(format!("enc{i}"), s, spec.spike_gain, &mut r)
            })
            .collect();
        let bottleneck = spec.level_channels(depth);
        let residual = (0..spec.residual_blocks)
            .map(|b| {
                let s = ConvSpec::conv(LayerKind::AnalogConv, bottleneck, bottleneck, k, 1, pad).with_bias(true);
                ConvLayer::kaiming_uniform(format!("res{b}"), s, 0.5, &mut r)
            })
            .collect();
        let mut decoder = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        for j in 0..depth {
            let cin = if j == 0 { bottleneck } else { spec.level_channels(depth - j) };
            let cout = if j + 1 == depth { 3 } else { spec.level_channels(depth - 1 - j) };
            let level = depth - 1 - j;
            let dspec = ConvSpec::deconv(cin, cout, k, 2, pad);
            let sspec = ConvSpec::conv(LayerKind::AnalogConv, spec.level_channels(level), cout, 1, 1, 0);
            let last = j + 1 == depth;
            let with_skip = !last || spec.input_skip;
            if last && zero_output {
                decoder.push(ConvLayer::zeros(format!("dec{j}"), dspec));
                if with_skip {
                    skips.push(ConvLayer::zeros(format!("skip{j}"), sspec));
                }
            } else {
                decoder.push(ConvLayer::kaiming_uniform(format!("dec{j}"), dspec, 1.0, &mut r));
                if with_skip {
                    skips.push(ConvLayer::kaiming_uniform(format!("skip{j}"), sspec, 1.0, &mut r));
                }
            }
        }
        let lif = spec.lif();
        Ok(Self {
            spec,
            lif,
            encoder,
            residual,
            decoder,
            skips,
        })
    }

    pub fn spec(&self) -> &PredictorSpec {
        &self.spec
    }

    pub fn geometry(&self) -> Geometry {
        self.spec.geometry()
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    fn layers(&self) -> impl Iterator<Item = &ConvLayer<F>> {
        self.encoder.iter().chain(&self.residual).chain(&self.decoder).chain(&self.skips)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer<F>> {
        self.encoder
            .iter_mut()
            .chain(&mut self.residual)
            .chain(&mut self.decoder)
            .chain(&mut self.skips)
    }

    pub fn new_state(&self) -> PredictorState<F> {
        let (mut h, mut w) = (self.spec.height, self.spec.width);
        let layers = self
            .encoder
            .iter()
            .map(|l| {
                h /= 2;
                w /= 2;
                LifLayerState::new(l.spec.out_channels * h * w)
            })
            .collect();
        PredictorState { layers }
    }

    pub fn cast<G: Real>(&self) -> PredictorModel<G> {
        PredictorModel {
            spec: self.spec.clone(),
            lif: self.lif,
            encoder: self.encoder.iter().map(ConvLayer::cast).collect(),
            residual: self.residual.iter().map(ConvLayer::cast).collect(),
            decoder: self.decoder.iter().map(ConvLayer::cast).collect(),
            skips: self.skips.iter().map(ConvLayer::cast).collect(),
        }
    }

    /// One forward step: consumes `frame`, predicts the next one.
    pub fn predict_next(&self, state: &mut PredictorState<F>, frame: &EventFrame) -> Result<Prediction> {
        self.geometry().ensure_same(&frame.geometry())?;
        let rec = self.step_forward(state, encode_frame(frame), SpikeFn::Heaviside, None)?;
        let spikes = rec.levels[1..]
            .iter()
            .map(|m| m.data.iter().filter(|&&v| v > F::zero()).count() as u64)
            .collect();
        Ok(Prediction {
            probs: ProbFrame {
                geometry: self.geometry(),
                probs: rec.probs,
            },
            spikes,
        })
    }

    fn step_forward(
        &self,
        state: &mut PredictorState<F>,
        input: FeatureMap<F>,
        spike_fn: SpikeFn,
        gates: Option<&[Vec<F>]>,
    ) -> Result<StepRecord<F>> {
        let depth = self.depth();
        let mut levels = Vec::with_capacity(depth + 1);
        let mut lif = Vec::with_capacity(depth);
        levels.push(input);
        for (i, layer) in self.encoder.iter().enumerate() {
            let current = layer.forward(&levels[i])?;
            let gate = gates.map(|g| g[i].as_slice());
            let record = lif_forward(&mut state.layers[i], &current.data, &self.lif, spike_fn, gate)?;
            let spikes = FeatureMap::from_vec(current.channels, current.height, current.width, record.y.clone());
            lif.push(record);
            levels.push(spikes);
        }

        let mut r = levels[depth].clone();
        let mut res_in = Vec::with_capacity(self.residual.len());
        let mut res_pre = Vec::with_capacity(self.residual.len());
        for block in &self.residual {
            let pre = block.forward(&r)?;
            let mut next = r.clone();
            next.add_assign(&pre.relu());
            res_in.push(std::mem::replace(&mut r, next));
            res_pre.push(pre);
        }

        let mut a = r;
        let mut dec_in = Vec::with_capacity(depth);
        let mut dec_pre = Vec::with_capacity(depth);
        for j in 0..depth {
            let mut pre = self.decoder[j].forward(&a)?;
            if let Some(skip) = self.skips.get(j) {
                pre.add_assign(&skip.forward(&levels[depth - 1 - j])?);
            }
            let next = if j + 1 == depth { pre.clone() } else { pre.relu() };
            dec_in.push(std::mem::replace(&mut a, next));
            dec_pre.push(pre);
        }

        let logits = &dec_pre[depth - 1];
        let plane = logits.plane();
        let probs = (0..plane)
            .map(|i| {
                let z = [
                    logits.data[i].as_f64(),
                    logits.data[plane + i].as_f64(),
                    logits.data[2 * plane + i].as_f64(),
                ];
                softmax3(z)
            })
            .collect();
        Ok(StepRecord {
            levels,
            lif,
            res_in,
            res_pre,
            dec_in,
            dec_pre,
            probs,
        })
    }

    /// Mean cross entropy over a window (inputs `frames[..n-1]`, targets
    /// `frames[1..]`) from a rested state, with its BPTT gradient.
    pub fn sequence_loss_and_grad(&self, frames: &[EventFrame], opts: ForwardOptions<'_, F>) -> Result<(f64, Vec<Vec<F>>, Vec<Vec<Vec<F>>>)> {
        if frames.len() < 2 {
            return Err(Error::InvalidValue("a training window needs at least two frames".into()));
        }
        let steps = frames.len() - 1;
        let mut state = self.new_state();
        let mut records = Vec::with_capacity(steps);
        let mut gates_used = Vec::with_capacity(steps);
        for t in 0..steps {
            self.geometry().ensure_same(&frames[t].geometry())?;
            let gates = opts.frozen_gates.map(|g| g[t].as_slice());
            let rec = self.step_forward(&mut state, encode_frame(&frames[t]), opts.spike_fn, gates)?;
            gates_used.push(rec.lif.iter().map(|l| l.gate.clone()).collect());
            records.push(rec);
        }

        let depth = self.depth();
        let mut grads: Vec<LayerGrads<F>> = self.layers().map(ConvLayer::zero_grads).collect();
        let (enc0, res0, dec0) = (0, depth, depth + self.residual.len());
        let skip0 = dec0 + depth;
        let mut carry: Vec<Vec<F>> = state.layers.iter().map(|s| vec![F::zero(); s.len()]).collect();
        let mut loss = 0.0;
        let step_scale = 1.0 / steps as f64;
        for t in (0..steps).rev() {
            let rec = &records[t];
            let target = &frames[t + 1];
            self.geometry().ensure_same(&target.geometry())?;
            let plane = rec.probs.len();

            let mut g = FeatureMap::zeros(3, self.spec.height, self.spec.width);
            let mut step_loss = 0.0;
            for (i, (p, &c)) in rec.probs.iter().zip(target.cells()).enumerate() {
                let cls = class_of(c);
                step_loss -= p[cls].max(PROB_FLOOR).ln();
                for k in 0..3 {
                    let onehot = if k == cls { 1.0 } else { 0.0 };
                    g.data[k * plane + i] = F::lit((p[k] - onehot) * step_scale / plane as f64);
                }
            }
            loss += step_loss / plane as f64 * step_scale;

            // Gradients w.r.t. encoder levels, filled from the decoder skips.
            let mut g_levels: Vec<Option<FeatureMap<F>>> = vec![None; depth + 1];
            let mut g_a = g;
            for j in (0..depth).rev() {
                let g_pre = if j + 1 == depth {
                    g_a
                } else {
                    relu_mask(&g_a, &rec.dec_pre[j])
                };
                let level = depth - 1 - j;
                if let Some(skip) = self.skips.get(j) {
                    let g_skip = skip.backward(&rec.levels[level], &g_pre, &mut grads[skip0 + j], level > 0)?;
                    accumulate(&mut g_levels[level], g_skip);
                }
                g_a = self.decoder[j]
                    .backward(&rec.dec_in[j], &g_pre, &mut grads[dec0 + j], true)?
                    .expect("input gradient requested");
            }
            let mut g_r = g_a;
            for (b, block) in self.residual.iter().enumerate().rev() {
                let g_pre = relu_mask(&g_r, &rec.res_pre[b]);
                let g_in = block
                    .backward(&rec.res_in[b], &g_pre, &mut grads[res0 + b], true)?
                    .expect("input gradient requested");
                g_r.add_assign(&g_in);
            }
            accumulate(&mut g_levels[depth], Some(g_r));

            for i in (0..depth).rev() {
                let g_y = g_levels[i + 1]
                    .take()
                    .unwrap_or_else(|| FeatureMap::zeros(rec.levels[i + 1].channels, rec.levels[i + 1].height, rec.levels[i + 1].width));
                let g_current = lif_backward_step(&rec.lif[i], &g_y.data, &mut carry[i], &self.lif);
                let g_current = FeatureMap::from_vec(g_y.channels, g_y.height, g_y.width, g_current);
                let g_in = self.encoder[i].backward(&rec.levels[i], &g_current, &mut grads[enc0 + i], i > 0)?;
                accumulate(&mut g_levels[i], g_in);
            }
        }
        let flat = grads.into_iter().flat_map(|g| [g.weight, g.bias]).collect();
        Ok((loss, flat, gates_used))
    }

    /// Mean cross entropy of a window from a rested state, forward only.
    pub fn window_loss(&self, frames: &[EventFrame]) -> Result<f64> {
        if frames.len() < 2 {
            return Err(Error::InvalidValue("a window needs at least two frames".into()));
        }
        let mut state = self.new_state();
        let mut total = 0.0;
        for pair in frames.windows(2) {
            let p = self.predict_next(&mut state, &pair[0])?;
            total += ce_loss(&p.probs, &pair[1])?;
        }
        Ok(total / (frames.len() - 1) as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let s = &self.spec;
        Checkpoint {
            kind: PREDICTOR_KIND.into(),
            geometry: self.geometry(),
            lif: self.lif,
            meta: vec![
                (
                    "encoder_channels".into(),
                    s.encoder_channels.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
                ),
                ("residual_blocks".into(), s.residual_blocks.to_string()),
                ("kernel".into(), s.kernel.to_string()),
                ("spike_gain".into(), s.spike_gain.to_string()),
                ("input_skip".into(), s.input_skip.to_string()),
            ],
            layers: self.layers().map(ConvLayer::cast).collect(),
        }
    }
}

impl PredictorModel<f32> {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != PREDICTOR_KIND {
            return Err(Error::Checkpoint(format!("expected a predictor, found `{}`", ckpt.kind)));
        }
        let meta = |k: &str| ckpt.meta(k).ok_or_else(|| Error::Checkpoint(format!("missing meta `{k}`")));
        let parse = |k: &str| -> Result<usize> {
            meta(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad meta `{k}`")))
        };
        let encoder_channels = meta("encoder_channels")?
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Checkpoint("bad encoder_channels".into())))
            .collect::<Result<Vec<usize>>>()?;
        let spec = PredictorSpec {
            width: ckpt.geometry.width,
            height: ckpt.geometry.height,
            encoder_channels,
            residual_blocks: parse("residual_blocks")?,
            kernel: parse("kernel")?,
            tau: ckpt.lif.tau,
            v_th: ckpt.lif.v_th,
            alpha: ckpt.lif.alpha,
            spike_gain: meta("spike_gain")?.parse().unwrap_or(1.0),
            input_skip: meta("input_skip")?
                .parse()
                .map_err(|_| Error::Checkpoint("bad meta `input_skip`".into()))?,
        };
        let mut model = Self::new(spec, 0)?;
        model.lif = ckpt.lif;
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

fn softmax3(z: [f64; 3]) -> [f64; 3] {
    let m = z[0].max(z[1]).max(z[2]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp(), (z[2] - m).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

fn relu_mask<F: Real>(g: &FeatureMap<F>, pre: &FeatureMap<F>) -> FeatureMap<F> {
    let data = g
        .data
        .iter()
        .zip(&pre.data)
        .map(|(&g, &p)| if p > F::zero() { g } else { F::zero() })
        .collect();
    FeatureMap::from_vec(g.channels, g.height, g.width, data)
}

fn accumulate<F: Real>(slot: &mut Option<FeatureMap<F>>, g: Option<FeatureMap<F>>) {
    if let Some(g) = g {
        match slot {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        }
    }
}

impl<F: Real> Trainable<F> for PredictorModel<F> {
    /// A window of consecutive frames.
    type Sample = Vec<EventFrame>;

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

    fn loss_and_grad(&self, sample: &Self::Sample) -> Result<(f64, Vec<Vec<F>>)> {
        self.sequence_loss_and_grad(sample, ForwardOptions::default())
            .map(|(loss, grads, _)| (loss, grads))
    }
}

/// Overlapping windows of `len` frames taken every `stride` frames.
pub fn training_windows(sequences: &[FrameSequence], len: usize, stride: usize) -> Vec<Vec<EventFrame>> {
    let mut out = Vec::new();
    for seq in sequences {
        let frames = seq.frames();
        let mut start = 0;
        while start + len <= frames.len() {
            out.push(frames[start..start + len].to_vec());
            start += stride.max(1);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feedback {
    /// Each step consumes the true next frame.
    Sensed,
    /// Each step consumes its own argmax prediction.
    SelfFed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Argmax predictions of frames `warmup .. warmup + horizon`.
    pub predictions: Vec<EventFrame>,
    /// Encoder spikes per call, seed frames included.
    pub spikes: Vec<u64>,
}

/// Feeds the first `warmup` frames, then predicts `horizon` frames ahead.
///
/// In self-fed mode only `frames[..warmup]` is ever read.
pub fn rollout<F: Real>(
    model: &PredictorModel<F>,
    frames: &[EventFrame],
    warmup: usize,
    horizon: usize,
    feedback: Feedback,
) -> Result<Rollout> {
    if warmup == 0 || horizon == 0 {
        return Err(Error::InvalidValue("warmup and horizon must be at least 1".into()));
    }
    let needed = match feedback {
        Feedback::Sensed => warmup + horizon - 1,
        Feedback::SelfFed => warmup,
    };
    if frames.len() < needed {
        return Err(Error::Config(format!("rollout needs {needed} frames, got {}", frames.len())));
    }
    let mut state = model.new_state();
    let mut spikes = Vec::new();
    let mut last = None;
    for f in &frames[..warmup] {
        let p = model.predict_next(&mut state, f)?;
        spikes.push(p.encoder_spikes());
        last = Some(p);
    }
    let mut predictions = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let pred = sample_events(&last.take().expect("a prediction exists").probs, SampleMode::Argmax)
            .with_index(warmup + k);
        if k + 1 < horizon {
            let input = match feedback {
                Feedback::Sensed => &frames[warmup + k],
                Feedback::SelfFed => &pred,
            };
            let p = model.predict_next(&mut state, input)?;
            spikes.push(p.encoder_spikes());
            last = Some(p);
        }
        predictions.push(pred);
    }
    Ok(Rollout { predictions, spikes })
}

/// Per-step one-step-ahead scores on a sensed stream.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OneStepScores {
    pub model: Vec<f64>,
    pub persistence: Vec<f64>,
}

/// Scores one-step predictions of `seq` with region esim (4x4 window),
/// skipping predictions made before `warmup` frames were seen.
pub fn one_step_scores<F: Real>(model: &PredictorModel<F>, seq: &FrameSequence, warmup: usize) -> Result<OneStepScores> {
    let mut state = model.new_state();
    let frames = seq.frames();
    let mut out = OneStepScores::default();
    for t in 0..frames.len().saturating_sub(1) {
        let p = model.predict_next(&mut state, &frames[t])?;
        if t + 1 >= warmup {
            let pred = sample_events(&p.probs, SampleMode::Argmax);
            out.model.push(metrics::esim4(&pred, &frames[t + 1])?);
            out.persistence.push(metrics::esim4(&persistence_baseline(&frames[t]), &frames[t + 1])?);
        }
    }
    Ok(out)
}

/// Cells farther than `radius` (Chebyshev) from every nonzero cell of the
/// given truth frames.
pub fn far_from_events(truth: &[&EventFrame], radius: usize) -> Result<Vec<bool>> {
    let g = match truth.first() {
        Some(f) => f.geometry(),
        None => return Err(Error::InvalidValue("need at least one truth frame".into())),
    };
    let mut far = vec![true; g.area()];
    for f in truth {
        g.ensure_same(&f.geometry())?;
        for y in 0..g.height {
            for x in 0..g.width {
                if f.get(x, y) == 0 {
                    continue;
                }
                for yy in y.saturating_sub(radius)..=(y + radius).min(g.height - 1) {
                    for xx in x.saturating_sub(radius)..=(x + radius).min(g.width - 1) {
                        far[yy * g.width + xx] = false;
                    }
                }
            }
        }
    }
    Ok(far)
}

fn count_where(frame: &EventFrame, mask: &[bool]) -> u64 {
    frame.cells().iter().zip(mask).filter(|(&c, &m)| c != 0 && m).count() as u64
}

/// Distance beyond which an event counts as spurious.
pub const SPURIOUS_RADIUS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisePoint {
    pub level: f64,
    /// Mean region esim of predictions from noisy input against clean truth.
    pub esim4: f64,
    /// `esim4` over the same score for clean input. NaN if that score is 0.
    pub relative_esim: f64,
    /// Spurious events in the noisy inputs.
    pub input_spurious: u64,
    /// Spurious events in the argmax predictions.
    pub output_spurious: u64,
}

impl NoisePoint {
    /// Fraction of the input's spurious events that survive into the output.
    pub fn spurious_ratio(&self) -> f64 {
        if self.input_spurious == 0 {
            0.0
        } else {
            self.output_spurious as f64 / self.input_spurious as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseResponse {
    pub clean_esim4: f64,
    pub points: Vec<NoisePoint>,
}

struct NoiseTally {
    esim: f64,
    scored: usize,
    input_spurious: u64,
    output_spurious: u64,
}

fn noisy_pass<F: Real>(model: &PredictorModel<F>, clean: &FrameSequence, input: &FrameSequence, warmup: usize) -> Result<NoiseTally> {
    let mut state = model.new_state();
    let (c, n) = (clean.frames(), input.frames());
    let mut tally = NoiseTally {
        esim: 0.0,
        scored: 0,
        input_spurious: 0,
        output_spurious: 0,
    };
    for t in 0..c.len().saturating_sub(1) {
        let p = model.predict_next(&mut state, &n[t])?;
        if t + 1 < warmup {
            continue;
        }
        let pred = sample_events(&p.probs, SampleMode::Argmax);
        tally.esim += metrics::esim4(&pred, &c[t + 1])?;
        tally.scored += 1;
        let far = far_from_events(&[&c[t], &c[t + 1]], SPURIOUS_RADIUS)?;
        tally.input_spurious += count_where(&n[t], &far);
        tally.output_spurious += count_where(&pred, &far);
    }
    Ok(tally)
}

/// Feeds noisy copies of `sequences` (one nested noise draw per sequence)
/// and scores one-step predictions against the clean frames.
pub fn noise_response<F: Real>(
    model: &PredictorModel<F>,
    sequences: &[FrameSequence],
    levels: &[f64],
    seed: u64,
    warmup: usize,
) -> Result<NoiseResponse> {
    let mut clean_sum = 0.0;
    let mut clean_n = 0;
    for seq in sequences {
        let t = noisy_pass(model, seq, seq, warmup)?;
        clean_sum += t.esim;
        clean_n += t.scored;
    }
    if clean_n == 0 {
        return Err(Error::Config("no predictions to score; sequences are shorter than warmup".into()));
    }
    let clean_esim4 = clean_sum / clean_n as f64;
    let points = levels
        .iter()
        .map(|&level| {
            let (mut sum, mut n, mut input_spurious, mut output_spurious) = (0.0, 0, 0, 0);
            for (i, seq) in sequences.iter().enumerate() {
                let noisy = crate::events::inject_noise_sequence(seq, level, rng::derive_seed(seed, i as u64))?;
                let t = noisy_pass(model, seq, &noisy, warmup)?;
                sum += t.esim;
                n += t.scored;
                input_spurious += t.input_spurious;
                output_spurious += t.output_spurious;
            }
            let esim4 = sum / n as f64;
            Ok(NoisePoint {
                level,
                esim4,
                relative_esim: match metrics::relative_esim(esim4, clean_esim4) {
                    Err(Error::UndefinedRatio(_)) => f64::NAN,
                    r => r?,
                },
                input_spurious,
                output_spurious,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NoiseResponse { clean_esim4, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> PredictorSpec {
        PredictorSpec {
            width: 8,
            height: 8,
            encoder_channels: vec![4, 6],
            residual_blocks: 1,
            ..PredictorSpec::default()
        }
    }

    fn frame(seed: u64, g: Geometry) -> EventFrame {
        let mut r = rng::seeded(seed);
        let cells = (0..g.area())
            .map(|_| match r.gen_range(0..6) {
                0 => 1,
                1 => -1,
                _ => 0,
            })
            .collect();
        EventFrame::from_cells(g, cells).unwrap()
    }

    #[test]
    fn untrained_model_is_uniform() {
        let m = PredictorModel::<f32>::new(PredictorSpec::default(), 1).unwrap();
        let mut s = m.new_state();
        let p = m.predict_next(&mut s, &frame(2, m.geometry())).unwrap();
        for px in p.probs.pixels() {
            for &v in px {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        assert_eq!(sample_events(&p.probs, SampleMode::Argmax), EventFrame::zeros(m.geometry()));
    }

    #[test]
    fn outputs_are_distributions() {
        let m = PredictorModel::<f32>::new_fully_random(tiny_spec(), 3).unwrap();
        let mut s = m.new_state();
        for k in 0..4 {
            let p = m.predict_next(&mut s, &frame(10 + k, m.geometry())).unwrap();
            for px in p.probs.pixels() {
                assert!(px.iter().all(|&v| v >= 0.0));
                assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn wrong_geometry_is_rejected() {
        let m = PredictorModel::<f32>::new(tiny_spec(), 1).unwrap();
        let mut s = m.new_state();
        let err = m.predict_next(&mut s, &EventFrame::zeros(Geometry::new(16, 8))).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn zero_input_produces_no_spikes() {
        let m = PredictorModel::<f32>::new_fully_random(tiny_spec(), 4).unwrap();
        let mut s = m.new_state();
        for _ in 0..5 {
            let p = m.predict_next(&mut s, &EventFrame::zeros(m.geometry())).unwrap();
            assert_eq!(p.encoder_spikes(), 0);
        }
    }

    #[test]
    fn argmax_sampling_cases() {
        let g = Geometry::new(2, 1);
        let p = ProbFrame::new(g, vec![[0.1, 0.8, 0.1], [1.0 / 3.0; 3]]).unwrap();
        let f = sample_events(&p, SampleMode::Argmax);
        assert_eq!(f.cells(), &[1, 0]);
        let q = ProbFrame::new(g, vec![[0.2, 0.1, 0.7], [0.1, 0.45, 0.45]]).unwrap();
        assert_eq!(sample_events(&q, SampleMode::Argmax).cells(), &[-1, 0]);
        assert!(ProbFrame::new(g, vec![[0.5, 0.5, 0.5], [1.0, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn categorical_sampling_matches_probabilities() {
        let g = Geometry::new(1000, 100);
        let p = ProbFrame::new(g, vec![[0.2, 0.5, 0.3]; g.area()]).unwrap();
        let f = sample_events(&p, SampleMode::Sample { seed: 17 });
        let n = g.area() as f64;
        let count = |v: i8| f.cells().iter().filter(|&&c| c == v).count() as f64 / n;
        assert!((count(0) - 0.2).abs() < 0.01);
        assert!((count(1) - 0.5).abs() < 0.01);
        assert!((count(-1) - 0.3).abs() < 0.01);
        assert_eq!(f, sample_events(&p, SampleMode::Sample { seed: 17 }));
    }

    #[test]
    fn cross_entropy_cases() {
        let g = Geometry::new(3, 1);
        let target = EventFrame::from_cells(g, vec![0, 1, -1]).unwrap();
        let perfect = ProbFrame::new(g, vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(ce_loss(&perfect, &target).unwrap(), 0.0);
        let uniform = ProbFrame::uniform(g);
        assert!((ce_loss(&uniform, &target).unwrap() - 3f64.ln()).abs() < 1e-12);
        // zero probability on the true class is clamped, not infinite
        let wrong = ProbFrame::new(g, vec![[0.0, 1.0, 0.0]; 3]).unwrap();
        assert!((ce_loss(&wrong, &target).unwrap() - 2.0 * 1e12f64.ln() / 3.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_ignores_pixel_order() {
        let g = Geometry::new(4, 1);
        let probs = vec![[0.7, 0.2, 0.1], [0.1, 0.3, 0.6], [0.5, 0.25, 0.25], [0.2, 0.2, 0.6]];
        let cells = vec![0, -1, 1, 0];
        let a = ce_loss(&ProbFrame::new(g, probs.clone()).unwrap(), &EventFrame::from_cells(g, cells.clone()).unwrap()).unwrap();
        let perm = [2, 0, 3, 1];
        let pp = perm.iter().map(|&i| probs[i]).collect();
        let pc = perm.iter().map(|&i| cells[i]).collect();
        let b = ce_loss(&ProbFrame::new(g, pp).unwrap(), &EventFrame::from_cells(g, pc).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn persistence_returns_its_input() {
        let f = frame(5, Geometry::new(8, 8));
        assert_eq!(persistence_baseline(&f), f);
        assert_eq!(metrics::esim4(&persistence_baseline(&f), &f).unwrap(), 1.0);
    }

    #[test]
    fn rollout_modes_agree_on_the_first_prediction() {
        let m = PredictorModel::<f32>::new_fully_random(tiny_spec(), 8).unwrap();
        let frames: Vec<EventFrame> = (0..6).map(|k| frame(40 + k, m.geometry())).collect();
        let a = rollout(&m, &frames, 3, 1, Feedback::Sensed).unwrap();
        let b = rollout(&m, &frames, 3, 1, Feedback::SelfFed).unwrap();
        assert_eq!(a.predictions, b.predictions);
        assert!(rollout(&m, &frames, 0, 1, Feedback::Sensed).is_err());
    }

    #[test]
    fn self_fed_rollout_reads_only_seed_frames() {
        let m = PredictorModel::<f32>::new_fully_random(tiny_spec(), 8).unwrap();
        let frames: Vec<EventFrame> = (0..3).map(|k| frame(40 + k, m.geometry())).collect();
        let r = rollout(&m, &frames, 3, 10, Feedback::SelfFed).unwrap();
        assert_eq!(r.predictions.len(), 10);
        assert!(rollout(&m, &frames, 3, 10, Feedback::Sensed).is_err());
    }

    #[test]
    fn spec_file_parsing() {
        let spec = PredictorSpec::from_toml_str("width = 32\nheight = 32\nencoder_channels = [8, 16]\n").unwrap();
        assert_eq!(spec.encoder_channels, vec![8, 16]);
        assert_eq!(spec.residual_blocks, 2);
        assert!(PredictorSpec::from_toml_str("width = 30\nheight = 32\n").is_err());
        assert!(PredictorSpec::from_toml_str("depth = 3\n").is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let m = PredictorModel::<f32>::new_fully_random(tiny_spec(), 9).unwrap();
        let back = PredictorModel::from_checkpoint(&Checkpoint::decode(&m.to_checkpoint().encode().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn forward_loss_matches_training_loss() {
        let m = PredictorModel::<f64>::new_fully_random(tiny_spec(), 12).unwrap();
        let frames: Vec<EventFrame> = (0..5).map(|k| frame(70 + k, m.geometry())).collect();
        let (train, _) = m.loss_and_grad(&frames).unwrap();
        assert!((m.window_loss(&frames).unwrap() - train).abs() < 1e-12);
        assert!(train > 0.0);
    }

    #[test]
    fn far_mask_uses_chebyshev_distance() {
        let g = Geometry::new(7, 7);
        let mut f = EventFrame::zeros(g);
        f.set(3, 3, 1);
        let far = far_from_events(&[&f], 2).unwrap();
        assert!(!far[3 * 7 + 1] && !far[5 * 7 + 5] && !far[1 * 7 + 1]);
        assert!(far[3 * 7 + 0] && far[6 * 7 + 6] && far[0]);
        assert_eq!(far.iter().filter(|&&v| !v).count(), 25);
    }

    #[test]
    fn silent_model_passes_no_spurious_events() {
        // An untrained model predicts nothing, so it passes no spurious events.
        let m = PredictorModel::<f32>::new(tiny_spec(), 1).unwrap();
        let g = m.geometry();
        let mut f = EventFrame::zeros(g);
        f.set(1, 1, 1);
        let seq = FrameSequence::new(g, 1, vec![f.clone(), f.clone(), f.clone(), f]).unwrap();
        let r = noise_response(&m, &[seq], &[1.0], 3, 1).unwrap();
        assert_eq!(r.points[0].output_spurious, 0);
        assert_eq!(r.points[0].spurious_ratio(), 0.0);
    }

    #[test]
    fn skip_pairs_share_spatial_shapes() {
        let m = PredictorModel::<f32>::new(PredictorSpec::default(), 0).unwrap();
        let mut s = m.new_state();
        let rec = m
            .step_forward(&mut s, encode_frame(&frame(1, m.geometry())), SpikeFn::Heaviside, None)
            .unwrap();
        let depth = m.depth();
        for j in 0..depth {
            let level = &rec.levels[depth - 1 - j];
            let out = &rec.dec_pre[j];
            assert_eq!((level.height, level.width), (out.height, out.width));
        }
        assert_eq!(rec.dec_pre[depth - 1].shape(), (3, 64, 64));
    }

    #[test]
    fn input_skip_adds_one_projection() {
        let plain = PredictorModel::<f32>::new(tiny_spec(), 0).unwrap();
        let spec = PredictorSpec { input_skip: true, ..tiny_spec() };
        let skipped = PredictorModel::<f32>::new(spec, 0).unwrap();
        assert_eq!(plain.skips.len(), plain.depth() - 1);
        assert_eq!(skipped.skips.len(), skipped.depth());
        let back = PredictorModel::from_checkpoint(&skipped.to_checkpoint()).unwrap();
        assert!(back.spec().input_skip);
        assert_eq!(back.params().len(), skipped.params().len());
    }
}
