use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pde_refiner::dataset::{conditioning_for, read_dataset, write_dataset};
use pde_refiner::evalx::{
    correlation_curve, estimate_uncertainty, first_crossing, frequency_error_report, mean_amplitude_spectrum,
    rollout_report, sample_seed, uncertainty_fit, CorrelationTime, UncertaintyOptions,
};
use pde_refiner::ks::{generate_dataset, InitialConditionSpec, Trajectory};
use pde_refiner::refiner::{rollout as run_rollout, GaussianNoise, RolloutOptions};
use pde_refiner::train::{train as train_model, TrainedModel};
use pde_refiner::Error;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{EvaluateConfig, GenerateConfig, RolloutConfig, SpectrumConfig, TrainRun, UncertaintyConfig};
use crate::output::Outputs;

fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let trajs = read_dataset(&mut BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    if trajs.is_empty() {
        bail!("{} holds no trajectories", path.display());
    }
    Ok(trajs)
}

fn read_model(path: &Path) -> Result<TrainedModel> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    TrainedModel::read(&mut BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn to_f64(frame: &[f32]) -> Vec<f64> {
    frame.iter().map(|&v| v as f64).collect()
}

/// First `history` frames, `stride` apart, oldest first, and the number of
/// reference frames that follow them.
fn rollout_start(traj: &Trajectory, stride: usize, history: usize) -> Result<(Vec<Vec<f64>>, usize)> {
    let last = (history - 1) * stride;
    if traj.n_frames() <= last {
        bail!(
            "trajectory of {} frames cannot hold {history} history frames {stride} apart",
            traj.n_frames()
        );
    }
    let initial = (0..history).map(|j| to_f64(traj.frame(j * stride))).collect();
    Ok((initial, (traj.n_frames() - 1 - last) / stride))
}

pub fn generate(c: &GenerateConfig, outputs: &mut Outputs) -> Result<()> {
    let generated = generate_dataset(c.n_traj, &InitialConditionSpec::default(), &c.sampler(), c.seed)?;
    if generated.regenerated > 0 {
        log::warn!("{} diverged trajectories were redrawn", generated.regenerated);
    }
    let mut buf = Vec::new();
    write_dataset(&mut buf, &generated.trajectories)?;
    outputs.add(&c.out, buf);
    log::info!("generated {} trajectories", c.n_traj);
    Ok(())
}

pub fn train(c: &TrainRun, outputs: &mut Outputs) -> Result<()> {
    let trajs = read_trajectories(&c.data)?;
    let model = train_model(&trajs, &c.train, |s| {
        log::info!("epoch {:>4}  loss {:.5e}  lr {:.3e}", s.epoch, s.mean_loss, s.lr);
    })?;
    let mut buf = Vec::new();
    model.write(&mut buf)?;
    outputs.add(&c.out, buf);
    Ok(())
}

pub fn rollout(c: &RolloutConfig, outputs: &mut Outputs) -> Result<()> {
    let model = read_model(&c.checkpoint)?;
    let trajs = read_trajectories(&c.data)?;
    let stride = model.meta.config.stride;
    let history = model.meta.config.history;
    let step = model.one_step()?;
    let results: Vec<Trajectory> = trajs
        .par_iter()
        .enumerate()
        .map(|(i, traj)| -> Result<Trajectory> {
            let (initial, available) = rollout_start(traj, stride, history)?;
            let options = RolloutOptions {
                n_steps: c.steps.unwrap_or(available).max(1),
                samples_per_step: c.samples,
                correction: c.correction,
            };
            let mut noise = GaussianNoise::new(sample_seed(c.seed, i as u64, 0));
            let result = run_rollout(
                &*step,
                &initial,
                traj.length,
                &conditioning_for(traj, stride),
                &options,
                &mut noise,
            )?;
            let mut frames = result.frames;
            if let Some(bad) = frames.iter().position(|f| f.iter().any(|&v| !(v as f32).is_finite())) {
                frames.truncate(bad);
            }
            if let Some(err) = &result.failure {
                log::warn!("trajectory {i}: rollout truncated after {} steps: {err}", frames.len());
            }
            let states: Vec<f32> = initial.iter().chain(&frames).flatten().map(|&v| v as f32).collect();
            Ok(Trajectory::new(
                traj.length,
                traj.nu,
                stride as f64 * traj.dt_record,
                traj.n_points,
                states,
            )?)
        })
        .collect::<Result<_>>()?;
    let mut buf = Vec::new();
    write_dataset(&mut buf, &results)?;
    outputs.add(&c.out, buf);
    Ok(())
}

type Frames = Vec<Vec<f64>>;

/// Predicted frames after the first `skip` and the reference frames at the
/// same times, up to the end of the reference.
fn aligned_frames(
    pred: &Trajectory,
    truth: &Trajectory,
    skip: usize,
    steps: Option<usize>,
) -> Result<(Frames, Frames)> {
    let ratio = pred.dt_record / truth.dt_record;
    let stride = ratio.round();
    if pred.n_points != truth.n_points || stride < 1.0 || (ratio - stride).abs() > 1e-6 * stride {
        return Err(Error::Shape(format!(
            "prediction (N {}, dt {}) does not line up with reference (N {}, dt {})",
            pred.n_points, pred.dt_record, truth.n_points, truth.dt_record
        ))
        .into());
    }
    let stride = stride as usize;
    let mut horizon = (skip..).take_while(|f| f * stride < truth.n_frames()).count();
    if let Some(s) = steps {
        horizon = horizon.min(s);
    }
    if horizon == 0 {
        bail!("reference has no frames after the first {skip} prediction frames");
    }
    let truths: Vec<Vec<f64>> = (skip..skip + horizon)
        .map(|f| to_f64(truth.frame(f * stride)))
        .collect();
    let preds: Vec<Vec<f64>> = (skip..(skip + horizon).min(pred.n_frames()))
        .map(|f| to_f64(pred.frame(f)))
        .collect();
    Ok((preds, truths))
}

fn paired(pred_path: &Path, truth_path: &Path) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    let preds = read_trajectories(pred_path)?;
    let truths = read_trajectories(truth_path)?;
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predicted trajectories for {} references",
            preds.len(),
            truths.len()
        ))
        .into());
    }
    Ok((preds, truths))
}

fn time_cells(t: &CorrelationTime) -> [String; 2] {
    [t.seconds.to_string(), t.censored.to_string()]
}

#[derive(Serialize)]
struct EvaluateSummary {
    n_trajectories: usize,
    dt_step: f64,
    high_corr_time_08: CorrelationTime,
    high_corr_time_09: CorrelationTime,
    excluded: Vec<usize>,
}

pub fn evaluate(c: &EvaluateConfig, outputs: &mut Outputs) -> Result<()> {
    let (preds, truths) = paired(&c.pred, &c.truth)?;
    let mut pred_frames = Vec::with_capacity(preds.len());
    let mut truth_frames = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(&truths) {
        let (pf, tf) = aligned_frames(p, t, c.skip, None)?;
        pred_frames.push(pf);
        truth_frames.push(tf);
    }
    let dt_step = preds.iter().map(|p| p.dt_record).sum::<f64>() / preds.len() as f64;
    let report = rollout_report(&pred_frames, &truth_frames, dt_step)?;
    let mut times = report.per_trajectory.iter();
    let mut rows = Vec::with_capacity(preds.len());
    for i in 0..preds.len() {
        let mut row = vec![i.to_string()];
        if report.excluded.contains(&i) {
            row.extend(["".into(), "".into(), "".into(), "".into(), "excluded".into()]);
        } else {
            let (t08, t09) = times.next().expect("one entry per included trajectory");
            row.extend(time_cells(t08));
            row.extend(time_cells(t09));
            row.push("ok".into());
        }
        rows.push(row);
    }
    outputs.add_csv(
        c.out.join("report.csv"),
        &[
            "trajectory",
            "high_corr_time_08",
            "censored_08",
            "high_corr_time_09",
            "censored_09",
            "status",
        ],
        &rows,
    )?;
    let curve_rows: Vec<Vec<String>> = report
        .correlation
        .iter()
        .zip(&report.mse)
        .enumerate()
        .map(|(i, (corr, mse))| {
            vec![
                (i + 1).to_string(),
                ((i + 1) as f64 * dt_step).to_string(),
                corr.to_string(),
                mse.to_string(),
            ]
        })
        .collect();
    outputs.add_csv(
        c.out.join("curves.csv"),
        &["step", "time", "correlation", "mse"],
        &curve_rows,
    )?;
    log::info!(
        "high-correlation time: {:.2} s at 0.8, {:.2} s at 0.9",
        report.high_corr_time_08.seconds,
        report.high_corr_time_09.seconds
    );
    outputs.add_json(
        c.out.join("summary.json"),
        &EvaluateSummary {
            n_trajectories: preds.len(),
            dt_step,
            high_corr_time_08: report.high_corr_time_08,
            high_corr_time_09: report.high_corr_time_09,
            excluded: report.excluded,
        },
    )
}

pub fn spectrum(c: &SpectrumConfig, outputs: &mut Outputs) -> Result<()> {
    match (&c.data, &c.pred, &c.truth) {
        (Some(data), None, None) => {
            let trajs = read_trajectories(data)?;
            let frames: Vec<Vec<f64>> = trajs
                .iter()
                .flat_map(|t| (0..t.n_frames()).map(move |f| to_f64(t.frame(f))))
                .collect();
            let amplitude = mean_amplitude_spectrum(&frames)?;
            let rows: Vec<Vec<String>> = amplitude
                .iter()
                .enumerate()
                .map(|(m, a)| vec![m.to_string(), a.to_string()])
                .collect();
            outputs.add_csv(&c.out, &["wavenumber", "amplitude"], &rows)
        }
        (None, Some(pred), Some(truth)) => {
            let (preds, truths) = paired(pred, truth)?;
            let mut pred_frames = Vec::new();
            let mut truth_frames = Vec::new();
            for (p, t) in preds.iter().zip(&truths) {
                let (pf, mut tf) = aligned_frames(p, t, c.skip, c.steps)?;
                tf.truncate(pf.len());
                pred_frames.extend(pf);
                truth_frames.extend(tf);
            }
            if pred_frames.is_empty() {
                bail!("no predicted frames to compare");
            }
            let a_truth = mean_amplitude_spectrum(&truth_frames)?;
            let a_pred = mean_amplitude_spectrum(&pred_frames)?;
            let a_err = frequency_error_report(&pred_frames, &truth_frames)?;
            let rows: Vec<Vec<String>> = (0..a_truth.len())
                .map(|m| {
                    vec![
                        m.to_string(),
                        a_truth[m].to_string(),
                        a_pred[m].to_string(),
                        a_err[m].to_string(),
                    ]
                })
                .collect();
            outputs.add_csv(
                &c.out,
                &["wavenumber", "amplitude_truth", "amplitude_pred", "amplitude_error"],
                &rows,
            )
        }
        _ => bail!("pass either --data, or --pred together with --truth"),
    }
}

#[derive(Serialize)]
struct UncertaintySummary {
    n_trajectories: usize,
    excluded: Vec<usize>,
    pearson: Option<f64>,
    r_squared: Option<f64>,
}

pub fn uncertainty(c: &UncertaintyConfig, outputs: &mut Outputs) -> Result<()> {
    let model = read_model(&c.checkpoint)?;
    let trajs = read_trajectories(&c.data)?;
    let stride = model.meta.config.stride;
    let history = model.meta.config.history;
    let step = model.one_step()?;
    let results: Vec<Option<(CorrelationTime, CorrelationTime)>> = trajs
        .par_iter()
        .enumerate()
        .map(|(i, traj)| -> Result<_> {
            let (initial, available) = rollout_start(traj, stride, history)?;
            let n_steps = c.steps.unwrap_or(available).min(available);
            if n_steps == 0 {
                bail!("trajectory {i} has no reference frames to compare against");
            }
            let cond = conditioning_for(traj, stride);
            let dt_step = stride as f64 * traj.dt_record;
            let options = UncertaintyOptions {
                n_samples: c.samples,
                threshold: c.threshold,
                n_steps,
            };
            let estimated = estimate_uncertainty(&*step, &initial, &cond, &options, dt_step, c.seed, i as u64)?;
            let mut noise = GaussianNoise::new(sample_seed(c.seed, i as u64, c.samples as u64));
            let rollout_options = RolloutOptions {
                n_steps,
                ..RolloutOptions::default()
            };
            let predicted = run_rollout(&*step, &initial, traj.length, &cond, &rollout_options, &mut noise)?;
            let first = (history - 1) * stride;
            let truth: Vec<Vec<f64>> = (1..=n_steps).map(|k| to_f64(traj.frame(first + k * stride))).collect();
            match correlation_curve(&predicted.frames, &truth) {
                Ok(curve) => Ok(Some((estimated, first_crossing(&curve, c.threshold, dt_step)))),
                Err(Error::UndefinedCorrelation(msg)) => {
                    log::warn!("trajectory {i} excluded: {msg}");
                    Ok(None)
                }
                Err(other) => Err(other.into()),
            }
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut estimated = Vec::new();
    let mut actual = Vec::new();
    let mut excluded = Vec::new();
    for (i, r) in results.iter().enumerate() {
        match r {
            Some((e, a)) => {
                let mut row = vec![i.to_string()];
                row.extend(time_cells(e));
                row.extend(time_cells(a));
                rows.push(row);
                estimated.push(e.seconds);
                actual.push(a.seconds);
            }
            None => excluded.push(i),
        }
    }
    outputs.add_csv(
        c.out.join("uncertainty.csv"),
        &[
            "trajectory",
            "estimated_time",
            "estimated_censored",
            "actual_time",
            "actual_censored",
        ],
        &rows,
    )?;
    let fit = match uncertainty_fit(&estimated, &actual) {
        Ok(fit) => Some(fit),
        Err(err) => {
            log::warn!("no fit between estimated and actual times: {err}");
            None
        }
    };
    if let Some(f) = fit {
        log::info!(
            "estimated vs actual time: pearson {:.3}, R^2 {:.3}",
            f.pearson,
            f.r_squared
        );
    }
    outputs.add_json(
        c.out.join("summary.json"),
        &UncertaintySummary {
            n_trajectories: estimated.len(),
            excluded,
            pearson: fit.map(|f| f.pearson),
            r_squared: fit.map(|f| f.r_squared),
        },
    )
}
