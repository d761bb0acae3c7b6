//! Held-out scenario evaluation: ensemble scores against a climatology
//! baseline, forced-trend tracking and agreement between direct samples at a
//! coarse timescale and aggregated finest-timescale samples.

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{forced_fields, ScenarioDataset, TARGET_NAMES};
use crate::error::{invalid, Result};
use crate::grid::{downsample, global_means, FieldGrid, ResampleFactors};
use crate::metrics::{climatology_ensemble, correlation, evaluate_fields};
use crate::path::DeltaPath;
use crate::rng::substream;
use crate::sampling::{LatentCache, SampleStats, Sampler, VelocityField};
use crate::schedule::PyramidSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub timescale: String,
    pub ensemble: usize,
    pub steps_total: usize,
    pub seed: u64,
    /// Also generate the finest timescale for the consistency check.
    pub consistency: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            timescale: "yearly".into(),
            ensemble: 5,
            steps_total: 30,
            seed: 0,
            consistency: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub variable: String,
    pub crps: f64,
    pub rmse: f64,
    pub bias: f64,
    pub climatology_crps: f64,
    /// Correlation of the ensemble-mean global-mean series with the forced
    /// global mean.
    pub trend_correlation: f64,
    /// RMS over frames of the ensemble-mean global-mean difference between
    /// direct samples and aggregated finest-timescale samples.
    pub consistency_rms: Option<f64>,
    /// Std of the global mean of internal variability at this timescale.
    pub internal_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub timescale: String,
    pub ensemble: usize,
    pub frames: usize,
    pub model_evals: u64,
    pub channels: Vec<ChannelReport>,
}

/// Series of `x` aggregated by `r_t` frames.
fn to_timescale(x: &FieldGrid, r_t: usize) -> Result<FieldGrid> {
    downsample(x, ResampleFactors::new(1, 1, r_t)?)
}

fn ensemble_global_mean(ens: &[FieldGrid]) -> Result<Vec<f64>> {
    let mut acc = global_means(&ens[0])?;
    for m in &ens[1..] {
        for (a, v) in acc.iter_mut().zip(global_means(m)?) {
            *a += v;
        }
    }
    let n = ens.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Evaluate `field` on the held-out scenario `eval`. `train_targets` are the
/// finest-timescale target series of the training members; their frames at
/// the evaluation timescale form the climatology pool.
pub fn evaluate(
    field: &dyn VelocityField,
    schedule: &PyramidSchedule,
    train_targets: &[FieldGrid],
    eval: &ScenarioDataset,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if config.ensemble == 0 {
        return Err(invalid("ensemble size must be at least 1"));
    }
    let k_total = schedule.num_stages();
    let stage = schedule.stage_for_label(&config.timescale)?;
    let r_t = schedule.cumulative(stage).r_t;
    let forcings = eval.forcings(0)?;
    let channels = TARGET_NAMES.len();
    let coarse_frames = schedule.stage(schedule.coarsest()).frames;
    let sampler = Sampler::new(field, schedule, &forcings, channels, coarse_frames, config.steps_total)?;
    let mut stats = SampleStats::default();

    let path = DeltaPath::for_target_stage(k_total, stage)?;
    let mut direct = Vec::with_capacity(config.ensemble);
    for m in 0..config.ensemble {
        let cache = LatentCache::new(1024);
        direct.push(sampler.sample_long_sequence(config.seed, m, &path, Some(&cache), &mut stats)?);
        info!("member {m}: {} frames at {}", direct[m].time(), config.timescale);
    }
    let frames = direct[0].time();

    let mut scores = vec![(0.0, 0.0, 0.0); channels];
    for t in 0..eval.members.len() {
        let truth = to_timescale(&eval.targets(t)?, r_t)?;
        for (acc, s) in scores.iter_mut().zip(evaluate_fields(&direct, &truth)?) {
            acc.0 += s.crps / eval.members.len() as f64;
            acc.1 += s.rmse / eval.members.len() as f64;
            acc.2 += s.bias / eval.members.len() as f64;
        }
    }

    let pool = train_targets.iter().map(|x| to_timescale(x, r_t)).collect::<Result<Vec<_>>>()?;
    let mut rng = substream(config.seed, &["climatology"]);
    let clim = climatology_ensemble(&pool, config.ensemble, frames, &mut rng)?;
    let mut clim_crps = vec![0.0; channels];
    for t in 0..eval.members.len() {
        let truth = to_timescale(&eval.targets(t)?, r_t)?;
        for (acc, s) in clim_crps.iter_mut().zip(evaluate_fields(&clim, &truth)?) {
            *acc += s.crps / eval.members.len() as f64;
        }
    }

    let forced = forced_fields(&eval.spec)?.select_channels(0..channels)?;
    let forced_gm = global_means(&to_timescale(&forced, r_t)?)?;
    let direct_gm = ensemble_global_mean(&direct)?;

    let consistency_gm = if config.consistency && stage != 0 {
        let finest = DeltaPath::for_target_stage(k_total, 0)?;
        let mut agg = Vec::with_capacity(config.ensemble);
        for m in 0..config.ensemble {
            let cache = LatentCache::new(1024);
            let x = sampler.sample_long_sequence(config.seed, m, &finest, Some(&cache), &mut stats)?;
            agg.push(to_timescale(&x, r_t)?);
        }
        Some(ensemble_global_mean(&agg)?)
    } else {
        None
    };

    let mut out = Vec::with_capacity(channels);
    for c in 0..channels {
        let range = c * frames..(c + 1) * frames;
        let consistency_rms = consistency_gm.as_ref().map(|g| {
            let ss: f64 = g[range.clone()].iter().zip(&direct_gm[range.clone()]).map(|(a, b)| (a - b).powi(2)).sum();
            (ss / frames as f64).sqrt()
        });
        out.push(ChannelReport {
            variable: TARGET_NAMES[c].into(),
            crps: scores[c].0,
            rmse: scores[c].1,
            bias: scores[c].2,
            climatology_crps: clim_crps[c],
            trend_correlation: correlation(&direct_gm[range.clone()], &forced_gm[range])?,
            consistency_rms,
            internal_sigma: eval.moments.global_mean_noise_std_monthly[c] / (r_t as f64).sqrt(),
        });
    }
    Ok(EvalReport {
        scenario: eval.spec.id.clone(),
        timescale: config.timescale.clone(),
        ensemble: config.ensemble,
        frames,
        model_evals: stats.model_evals,
        channels: out,
    })
}
