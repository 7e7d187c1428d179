//! Subcommand bodies. Each returns the files it produced.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use predattn::attention::{
    awareness, calibrate_threshold, compare_policies, comparison_csv, gating_rate, link_bits, link_energy,
    run_closed_loop, GatePolicy, LinkEnergyModel,
};
use predattn::evaluator::{build_corpus, evaluate, CorpusConfig, EvaluatorModel, EvaluatorSpec};
use predattn::events::{bin_events, frame_to_pgm, read_aer};
use predattn::metrics::{esim, mss, region_esim};
use predattn::predictor::{
    noise_response, one_step_scores, training_windows, PredictorModel, PredictorSpec,
};
use predattn::rng::derive_seed;
use predattn::snn::{bptt_train, read_checkpoint, OptimizerConfig, TrainConfig};
use predattn::synth::shifted_ball;
use predattn::{EventFrame, FrameSequence};

use crate::config::{ExperimentConfig, PolicyKind, Scenario};
use crate::dataset::{load_dataset, read_manifest, read_sequence, write_dataset, LoadedDataset};
use crate::output::{fmt_f, write_atomic, write_checkpoint_atomic, Staging};

// Independent seed streams derived from the experiment seed.
const STREAM_PREDICTOR_INIT: u64 = 1;
const STREAM_PREDICTOR_SHUFFLE: u64 = 2;
const STREAM_EVALUATOR_INIT: u64 = 3;
const STREAM_EVALUATOR_SHUFFLE: u64 = 4;
const STREAM_NOISE: u64 = 5;
const STREAM_POLICY: u64 = 6;

pub fn gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let rows = write_dataset(&cfg.dataset, &cfg.dataset_dir)?;
    eprintln!("wrote {} sequences to {}", rows.len(), cfg.dataset_dir.display());
    Ok(vec![cfg.dataset_dir.join(crate::dataset::MANIFEST)])
}

fn load_predictor(cfg: &ExperimentConfig) -> Result<PredictorModel<f32>> {
    let path = cfg.predictor_checkpoint();
    if !path.exists() {
        bail!("predictor checkpoint {} is missing; run `train --target predictor` first", path.display());
    }
    Ok(PredictorModel::from_checkpoint(&read_checkpoint(&path)?)?)
}

fn load_evaluator(cfg: &ExperimentConfig) -> Result<EvaluatorModel<f32>> {
    let path = cfg.evaluator_checkpoint();
    if !path.exists() {
        bail!("evaluator checkpoint {} is missing; run `train --target evaluator` first", path.display());
    }
    Ok(EvaluatorModel::from_checkpoint(&read_checkpoint(&path)?)?)
}

fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{e},{}", fmt_f(*l));
    }
    out
}

fn key_value_csv(rows: &[(&str, f64)]) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        let _ = writeln!(out, "{k},{}", fmt_f(*v));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictorValidation {
    pub loss: f64,
    pub esim4: f64,
    pub persistence_esim4: f64,
}

/// Held-out loss over full test sequences plus one-step region esim of the
/// model and of the persistence baseline.
pub fn validate_predictor(model: &PredictorModel<f32>, test: &[FrameSequence], warmup: usize) -> Result<PredictorValidation> {
    let mut loss = 0.0;
    let (mut model_sum, mut base_sum, mut n) = (0.0, 0.0, 0usize);
    for seq in test {
        loss += model.window_loss(seq.frames())?;
        let s = one_step_scores(model, seq, warmup)?;
        model_sum += s.model.iter().sum::<f64>();
        base_sum += s.persistence.iter().sum::<f64>();
        n += s.model.len();
    }
    if n == 0 {
        bail!("test sequences are too short to score");
    }
    Ok(PredictorValidation {
        loss: loss / test.len() as f64,
        esim4: model_sum / n as f64,
        persistence_esim4: base_sum / n as f64,
    })
}

pub fn train_predictor(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let data = load_dataset(&cfg.dataset_dir)?;
    let geometry = data.train[0].geometry();
    let spec = match &cfg.predictor.spec {
        Some(p) => PredictorSpec::load(p)?,
        None => PredictorSpec {
            width: geometry.width,
            height: geometry.height,
            ..PredictorSpec::default()
        },
    };
    let mut model = PredictorModel::<f32>::new(spec, derive_seed(cfg.seed, STREAM_PREDICTOR_INIT))?;
    let p = &cfg.predictor;
    let windows = training_windows(&data.train, p.window, p.stride);
    eprintln!("training predictor on {} windows of {} frames", windows.len(), p.window);
    let tc = TrainConfig {
        epochs: p.epochs,
        batch_size: p.batch_size,
        optimizer: OptimizerConfig::adam(p.lr),
        seed: derive_seed(cfg.seed, STREAM_PREDICTOR_SHUFFLE),
        clip_norm: p.clip_norm,
    };
    let curve = bptt_train(&mut model, &windows, &tc, |e, l, _| eprintln!("epoch {e:>4}  loss {l:.6}"))
        .context("predictor training aborted")?;
    let v = validate_predictor(&model, &data.test, cfg.attention.warmup)?;
    eprintln!(
        "held-out loss {:.6}, esim4 {:.4} (persistence {:.4})",
        v.loss, v.esim4, v.persistence_esim4
    );

    let ckpt = cfg.predictor_checkpoint();
    write_checkpoint_atomic(&ckpt, &model.to_checkpoint())?;
    let loss_path = cfg.output_dir.join("predictor_loss.csv");
    write_atomic(&loss_path, loss_csv(&curve.epochs).as_bytes())?;
    let val_path = cfg.output_dir.join("predictor_validation.csv");
    let rows = [("loss", v.loss), ("esim4", v.esim4), ("persistence_esim4", v.persistence_esim4)];
    write_atomic(&val_path, key_value_csv(&rows).as_bytes())?;
    Ok(vec![ckpt, loss_path, val_path])
}

fn corpus_config(cfg: &ExperimentConfig) -> CorpusConfig {
    CorpusConfig {
        warmup: cfg.evaluator.warmup,
        max_horizon: cfg.evaluator.max_horizon,
        anchor_stride: cfg.evaluator.anchor_stride,
    }
}

fn capped(seqs: &[FrameSequence], cap: Option<usize>) -> &[FrameSequence] {
    &seqs[..cap.unwrap_or(seqs.len()).min(seqs.len())]
}

pub fn train_evaluator(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let predictor = load_predictor(cfg)?;
    let data = load_dataset(&cfg.dataset_dir)?;
    let e = &cfg.evaluator;
    let train = build_corpus(&predictor, capped(&data.train, e.corpus_sequences), corpus_config(cfg))?;
    let test = build_corpus(&predictor, capped(&data.test, e.corpus_sequences), corpus_config(cfg))?;
    if train.is_empty() || test.is_empty() {
        bail!("sequences are too short for horizon {}", e.max_horizon);
    }
    let spec = match &e.spec {
        Some(p) => EvaluatorSpec::load(p)?,
        None => EvaluatorSpec {
            width: predictor.geometry().width,
            height: predictor.geometry().height,
            ..EvaluatorSpec::default()
        },
    };
    let mut model = EvaluatorModel::<f32>::new(spec, derive_seed(cfg.seed, STREAM_EVALUATOR_INIT))?;
    eprintln!("training evaluator on {} rollout samples", train.len());
    let tc = TrainConfig {
        epochs: e.epochs,
        batch_size: e.batch_size,
        optimizer: OptimizerConfig::adam(e.lr),
        seed: derive_seed(cfg.seed, STREAM_EVALUATOR_SHUFFLE),
        clip_norm: None,
    };
    let curve = bptt_train(&mut model, &train, &tc, |ep, l, _| eprintln!("epoch {ep:>4}  loss {l:.6}"))
        .context("evaluator training aborted")?;
    let report = evaluate(&model, &test)?;
    eprintln!(
        "held-out spearman {:.4}, mae {:.4} (mean predictor {:.4})",
        report.spearman, report.mae, report.mean_baseline_mae
    );

    let ckpt = cfg.evaluator_checkpoint();
    write_checkpoint_atomic(&ckpt, &model.to_checkpoint())?;
    let loss_path = cfg.output_dir.join("evaluator_loss.csv");
    write_atomic(&loss_path, loss_csv(&curve.epochs).as_bytes())?;
    let val_path = cfg.output_dir.join("evaluator_validation.csv");
    let rows = [
        ("spearman", report.spearman),
        ("mae", report.mae),
        ("mean_baseline_mae", report.mean_baseline_mae),
        ("samples", test.len() as f64),
    ];
    write_atomic(&val_path, key_value_csv(&rows).as_bytes())?;
    Ok(vec![ckpt, loss_path, val_path])
}

/// Scores of one frame pair: mss, esim, then region esim per window.
pub fn pair_scores(a: &EventFrame, b: &EventFrame, windows: &[usize], th: f64) -> Result<Vec<f64>> {
    let mut row = vec![mss(a, b)?.value, esim(a, b)?.value];
    for &n in windows {
        row.push(region_esim(a, b, n, th)?.value);
    }
    Ok(row)
}

fn score_header(first: &str, windows: &[usize]) -> String {
    let mut h = format!("{first},mss,esim");
    for n in windows {
        let _ = write!(h, ",esim{n}");
    }
    h.push('\n');
    h
}

fn score_line(label: &str, scores: &[f64]) -> String {
    let mut line = label.to_string();
    for s in scores {
        line.push(',');
        line.push_str(&fmt_f(*s));
    }
    line.push('\n');
    line
}

/// Shifted-ball table: one row per offset, scores averaged over the noise
/// draws.
pub fn shifted_ball_table(cfg: &ExperimentConfig) -> Result<Vec<(f64, Vec<f64>)>> {
    let m = &cfg.metrics;
    let sb = shifted_ball(&m.shifted_ball)?;
    sb.cases
        .iter()
        .map(|case| {
            let mut mean = vec![0.0; 2 + m.windows.len()];
            for noisy in &case.noisy {
                for (acc, s) in mean.iter_mut().zip(pair_scores(&sb.reference, noisy, &m.windows, m.threshold)?) {
                    *acc += s;
                }
            }
            mean.iter_mut().for_each(|v| *v /= case.noisy.len() as f64);
            Ok((case.offset, mean))
        })
        .collect()
}

fn read_recording(path: &Path, dt_us: u64) -> Result<FrameSequence> {
    let (geometry, events) = read_aer(path)?;
    let t0 = events.first().map_or(0, |e| e.t);
    Ok(bin_events(&events, t0, dt_us, geometry, None)?)
}

pub fn metrics(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let m = &cfg.metrics;
    let (name, csv) = match m.scenario {
        Scenario::ShiftedBall => {
            let mut csv = score_header("offset", &m.windows);
            for (offset, scores) in shifted_ball_table(cfg)? {
                csv.push_str(&score_line(&fmt_f(offset), &scores));
            }
            ("metrics_shifted_ball.csv", csv)
        }
        Scenario::Pair => {
            let (a, b) = (m.frames_a.as_ref().expect("validated"), m.frames_b.as_ref().expect("validated"));
            let (sa, sb) = (read_recording(a, m.dt_us)?, read_recording(b, m.dt_us)?);
            if sa.len() != sb.len() {
                bail!("recordings have {} and {} frames", sa.len(), sb.len());
            }
            let mut csv = score_header("frame", &m.windows);
            for (i, (fa, fb)) in sa.frames().iter().zip(sb.frames()).enumerate() {
                csv.push_str(&score_line(&i.to_string(), &pair_scores(fa, fb, &m.windows, m.threshold)?));
            }
            ("metrics_pair.csv", csv)
        }
        Scenario::Noise => {
            let predictor = load_predictor(cfg)?;
            let data = load_dataset(&cfg.dataset_dir)?;
            let seqs = capped(&data.test, Some(m.noise_sequences));
            let r = noise_response(&predictor, seqs, &m.noise_levels, derive_seed(cfg.seed, STREAM_NOISE), m.warmup)?;
            let mut csv = String::from("noise_level,esim4,relative_esim,input_spurious,output_spurious,spurious_ratio\n");
            let _ = writeln!(csv, "{},{},{},0,0,{}", fmt_f(0.0), fmt_f(r.clean_esim4), fmt_f(1.0), fmt_f(0.0));
            for p in &r.points {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{}",
                    fmt_f(p.level),
                    fmt_f(p.esim4),
                    fmt_f(p.relative_esim),
                    p.input_spurious,
                    p.output_spurious,
                    fmt_f(p.spurious_ratio())
                );
            }
            ("metrics_noise.csv", csv)
        }
    };
    let path = cfg.output_dir.join(name);
    write_atomic(&path, csv.as_bytes())?;
    Ok(vec![path])
}

fn configured_policy(cfg: &ExperimentConfig, sequence: usize) -> GatePolicy {
    let a = &cfg.attention;
    match a.policy {
        PolicyKind::Predictive => GatePolicy::Predictive { threshold: a.threshold },
        PolicyKind::Random => GatePolicy::Random {
            rate: a.rate,
            seed: derive_seed(derive_seed(cfg.seed, STREAM_POLICY), sequence as u64),
        },
        PolicyKind::Periodic => GatePolicy::Periodic {
            period: a.period,
            phase: a.phase,
        },
    }
}

fn test_sequences(data: &LoadedDataset, n: usize) -> Result<&[FrameSequence]> {
    if n == 0 {
        bail!("attention.sequences must be at least 1");
    }
    Ok(capped(&data.test, Some(n)))
}

pub fn run_attention(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let a = &cfg.attention;
    let predictor = load_predictor(cfg)?;
    let evaluator = match a.policy {
        PolicyKind::Predictive => Some(load_evaluator(cfg)?),
        _ => None,
    };
    let energy = LinkEnergyModel::new(a.energy_per_bit)?;
    let data = load_dataset(&cfg.dataset_dir)?;
    let staging = Staging::new(&cfg.output_dir.join("attention"))?;
    let mut summary = String::from("sequence,gating_rate,awareness,link_bits,link_energy_j,spike_count\n");
    for (i, seq) in test_sequences(&data, a.sequences)?.iter().enumerate() {
        let trace = run_closed_loop(seq, &predictor, evaluator.as_ref(), configured_policy(cfg, i), a.warmup)?;
        staging.write(format!("trace_{i:04}.csv"), trace.to_csv().as_bytes())?;
        let _ = writeln!(
            summary,
            "{i},{},{},{},{:.6e},{}",
            fmt_f(gating_rate(&trace)?),
            fmt_f(awareness(&trace)?),
            link_bits(&trace),
            link_energy(&trace, &energy),
            trace.total_spikes()
        );
        if a.dump_frames {
            for (t, f) in trace.perceived.iter().enumerate() {
                let tag = if trace.steps[t].attended { "sensed" } else { "predicted" };
                staging.write(format!("frames/seq_{i:04}/step_{t:03}_{tag}.pgm"), &frame_to_pgm(f))?;
            }
            for (k, f) in trace.predictions.iter().enumerate() {
                staging.write(format!("frames/seq_{i:04}/step_{:03}_prediction.pgm", k + trace.warmup), &frame_to_pgm(f))?;
            }
        }
    }
    staging.write("summary.csv", summary.as_bytes())?;
    let dir = staging.commit()?;
    Ok(vec![dir.join("summary.csv")])
}

pub fn compare(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let a = &cfg.attention;
    let predictor = load_predictor(cfg)?;
    let evaluator = load_evaluator(cfg)?;
    let data = load_dataset(&cfg.dataset_dir)?;
    let seqs = test_sequences(&data, a.sequences)?;
    let mut out = Vec::new();
    let thresholds = if a.target_rates.is_empty() {
        a.thresholds.clone()
    } else {
        let mut csv = String::from("target_attend_rate,threshold,attend_rate\n");
        let mut found = Vec::new();
        for &target in &a.target_rates {
            let (theta, s) = calibrate_threshold(seqs, &predictor, &evaluator, target, a.warmup, a.calibration_iterations)?;
            let _ = writeln!(csv, "{},{},{}", fmt_f(target), fmt_f(theta), fmt_f(s.attend_rate));
            found.push(theta);
        }
        let path = cfg.output_dir.join("calibration.csv");
        write_atomic(&path, csv.as_bytes())?;
        out.push(path);
        found
    };
    let seeds: Vec<u64> = a.seeds.iter().map(|&s| derive_seed(cfg.seed, s)).collect();
    let mut rows = compare_policies(seqs, &predictor, &evaluator, &thresholds, &seeds, a.warmup)?;
    // Report the configured seed labels rather than the derived streams.
    for r in &mut rows {
        r.seed = a.seeds[seeds.iter().position(|&s| s == r.seed).expect("seed came from the list")];
    }
    let path = cfg.output_dir.join("compare.csv");
    write_atomic(&path, comparison_csv(&rows).as_bytes())?;
    out.push(path);
    Ok(out)
}

/// Where the frames to dump come from.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameSource {
    Sequence(usize),
    Recording(PathBuf),
}

pub fn dump_frames(cfg: &ExperimentConfig, source: &FrameSource) -> Result<Vec<PathBuf>> {
    let (name, seq) = match source {
        FrameSource::Sequence(i) => {
            let rows = read_manifest(&cfg.dataset_dir)?;
            let row = rows
                .iter()
                .find(|r| r.sequence == *i)
                .with_context(|| format!("sequence {i} is not in the dataset"))?;
            (format!("seq_{i:04}"), read_sequence(&cfg.dataset_dir, row)?)
        }
        FrameSource::Recording(path) => {
            let stem = path.file_stem().map_or("recording".into(), |s| s.to_string_lossy().into_owned());
            (stem, read_recording(path, cfg.metrics.dt_us)?)
        }
    };
    let staging = Staging::new(&cfg.output_dir.join("frames").join(&name))?;
    let mut index = String::from("frame,events\n");
    for (k, f) in seq.frames().iter().enumerate() {
        staging.write(format!("frame_{k:04}.pgm"), &frame_to_pgm(f))?;
        let _ = writeln!(index, "{k},{}", f.nonzero_count());
    }
    staging.write("frames.csv", index.as_bytes())?;
    let dir = staging.commit()?;
    Ok(vec![dir.join("frames.csv")])
}
