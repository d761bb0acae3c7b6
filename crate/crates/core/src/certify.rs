//! Monte Carlo certification of the jump correction and of temporal
//! funneling, plus an exact oracle velocity field for a fixed data sample.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::grid::{downsample, slice_time, upsample, FieldGrid, ResampleFactors};
use crate::model::{ConditioningBundle, VelocityModel};
use crate::path::{endpoint_means, sample_delta_path, stage_geometry, DeltaPath, StageGeometry};
use crate::rng::{fill_normal, substream};
use crate::sampling::{euler_stage, VelocityField};
use crate::schedule::{jump_rollback, PyramidSchedule};
use crate::transition::{apply_jump, plan_jumps, JumpPlan};

/// The exact conditional velocity for a known finest-resolution sample
/// `x1`: along the straight path from the start to the end endpoint it is
/// `e D - s U - (e - s) n`, with the noise recovered from the current state.
pub struct OracleVelocity {
    schedule: PyramidSchedule,
    x1: FieldGrid,
    means: Mutex<HashMap<(usize, usize, usize, usize), (FieldGrid, FieldGrid)>>,
}

impl OracleVelocity {
    pub fn new(schedule: PyramidSchedule, x1: FieldGrid) -> Self {
        Self {
            schedule,
            x1,
            means: Mutex::new(HashMap::new()),
        }
    }

    /// `(Up(Down_parent(x1)), Down(x1))` for the latent shape of `x` under
    /// `cond`. The window length follows from the latent's frame count, so
    /// funneled and unfunneled windows are both supported.
    fn means(&self, x: &FieldGrid, cond: &ConditioningBundle) -> Result<(FieldGrid, FieldGrid)> {
        let k = cond.stage;
        let ts = cond.timescale;
        let s = &self.schedule;
        let r_t = s.cumulative(ts).r_t;
        let len = x.time() * r_t;
        let key = (k, ts, cond.window_offset, len);
        if let Some(m) = self.means.lock().expect("oracle lock").get(&key) {
            return Ok(m.clone());
        }
        let window = self.x1.time_range(cond.window_offset, len)?;
        let latent = ResampleFactors {
            r_t,
            ..s.cumulative(k)
        };
        let down = downsample(&window, latent)?;
        let up = if k + 1 < s.num_stages() {
            // The jump into k refined time exactly when k carries its own
            // timescale.
            let temporal = ts == k;
            let parent = ResampleFactors {
                r_t: if temporal { s.cumulative(k + 1).r_t } else { r_t },
                ..s.cumulative(k + 1)
            };
            let f = s.factors_into(k);
            let jf = if temporal { f } else { f.spatial() };
            upsample(&downsample(&window, parent)?, jf)?
        } else {
            down.zeros_like()
        };
        self.means.lock().expect("oracle lock").insert(key, (up.clone(), down.clone()));
        Ok((up, down))
    }
}

impl VelocityField for OracleVelocity {
    fn velocity(&self, x: &FieldGrid, cond: &ConditioningBundle) -> Result<FieldGrid> {
        let (up, down) = self.means(x, cond)?;
        let (s, e) = cond.segment;
        let tp = (cond.t - s) / (e - s);
        let sigma = 1.0 - cond.t;
        let mut out = x.zeros_like();
        for (((o, &xv), &u), &d) in out.data_mut().iter_mut().zip(x.data()).zip(up.data()).zip(down.data()) {
            let m = tp * e * d + (1.0 - tp) * s * u;
            let n = (xv - m) / sigma;
            *o = e * d - s * u - (e - s) * n;
        }
        Ok(out)
    }
}

/// Moments of the renoised start latent of one jump.
#[derive(Debug, Clone, Serialize)]
pub struct JumpCertificate {
    pub from_stage: usize,
    pub to_stage: usize,
    pub block_size: usize,
    pub start: f64,
    pub rollback_end: f64,
    pub alpha: f64,
    pub draws: usize,
    /// Max deviation of a noise-free jump from `s * Up(Down(x1))`.
    pub mean_exact_error: f64,
    /// Largest standardised deviation of an empirical entry mean.
    pub mean_max_z: f64,
    /// Largest relative deviation of an entry variance from `(1 - s)^2`.
    pub var_max_rel_error: f64,
    /// Allowed variance deviation: 1%, widened only when the draw count
    /// makes a max over all entries exceed 1% by chance.
    pub var_tolerance: f64,
    /// Mean within-block covariance pooled over blocks.
    pub cov_pooled: f64,
    /// Pooled covariance over its estimator standard error.
    pub cov_z: f64,
    /// Largest |mean within-block covariance| over single blocks.
    pub cov_max_abs: f64,
    /// Largest single-block covariance over its standard error.
    pub cov_max_z: f64,
    pub passed: bool,
}

/// Running per-entry and per-block sums of centred draws.
struct MomentAccumulator {
    factors: ResampleFactors,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    q_sum: Vec<f64>,
    q_sumsq: Vec<f64>,
    draws: usize,
}

impl MomentAccumulator {
    fn new(like: &FieldGrid, factors: ResampleFactors) -> Self {
        let blocks = like.len() / factors.block_size();
        Self {
            factors,
            sum: vec![0.0; like.len()],
            sumsq: vec![0.0; like.len()],
            q_sum: vec![0.0; blocks],
            q_sumsq: vec![0.0; blocks],
            draws: 0,
        }
    }

    /// Add one draw `y`, centred by `mean`.
    fn push(&mut self, y: &FieldGrid, mean: &FieldGrid) -> Result<()> {
        let d = y.sub(mean)?;
        for (i, v) in d.data().iter().enumerate() {
            self.sum[i] += v;
            self.sumsq[i] += v * v;
        }
        if self.factors.block_size() > 1 {
            let n = self.factors.block_size() as f64;
            let block_sum = downsample(&d, self.factors)?;
            let sq = d.data().iter().map(|v| v * v).collect::<Vec<_>>();
            let block_sq = downsample(&d.with_data(sq)?, self.factors)?;
            for (b, (s, q)) in block_sum.data().iter().zip(block_sq.data()).enumerate() {
                let (s, q) = (s * n, q * n);
                let avg_offdiag = (s * s - q) / (n * (n - 1.0));
                self.q_sum[b] += avg_offdiag;
                self.q_sumsq[b] += avg_offdiag * avg_offdiag;
            }
        }
        self.draws += 1;
        Ok(())
    }

    fn mean_max_z(&self, var: f64) -> f64 {
        let n = self.draws as f64;
        let se = (var / n).sqrt();
        self.sum.iter().map(|s| (s / n).abs() / se).fold(0.0, f64::max)
    }

    fn variances(&self) -> Vec<f64> {
        let n = self.draws as f64;
        self.sum
            .iter()
            .zip(&self.sumsq)
            .map(|(s, q)| q / n - (s / n).powi(2))
            .collect()
    }

    /// `(max |mean q|, max |mean q| / se)` over blocks.
    fn covariance(&self) -> (f64, f64) {
        let n = self.draws as f64;
        let mut max_abs: f64 = 0.0;
        let mut max_z: f64 = 0.0;
        for (s, q) in self.q_sum.iter().zip(&self.q_sumsq) {
            let m = s / n;
            let sd = (q / n - m * m).max(0.0).sqrt();
            max_abs = max_abs.max(m.abs());
            if sd > 0.0 {
                max_z = max_z.max(m.abs() / (sd / n.sqrt()));
            }
        }
        (max_abs, max_z)
    }

    /// `(mean q, |mean q| / se)` with `q` averaged over blocks per draw.
    /// Blocks are independent, so the per-block variances add.
    fn pooled_covariance(&self) -> (f64, f64) {
        let n = self.draws as f64;
        let b = self.q_sum.len() as f64;
        let mut mean = 0.0;
        let mut var = 0.0;
        for (s, q) in self.q_sum.iter().zip(&self.q_sumsq) {
            let m = s / n;
            mean += m / b;
            var += (q / n - m * m).max(0.0) / (b * b);
        }
        let se = (var / n).sqrt();
        (mean, if se > 0.0 { mean.abs() / se } else { 0.0 })
    }
}

/// Certify the jump into stage `k` on `path` at fixed `x1`. `x1` is a
/// finest-resolution series covering one coarse window; the parent latent
/// is drawn from its end-of-segment law and the child compared with the
/// start law of stage `k`.
pub fn certify_jump(
    schedule: &PyramidSchedule,
    path: &DeltaPath,
    k: usize,
    x1: &FieldGrid,
    funnel: usize,
    draws: usize,
    seed: u64,
) -> Result<JumpCertificate> {
    if k + 1 >= schedule.num_stages() {
        return Err(invalid(format!("stage {k} is not jumped into")));
    }
    let coarse_frames = x1.time() / schedule.cumulative(schedule.coarsest()).r_t;
    let parent = stage_geometry(schedule, path, k + 1, coarse_frames)?;
    let child = stage_geometry(schedule, path, k, coarse_frames)?;
    // Funnel choices above the jump pick frame 0; the jump itself uses `funnel`.
    let above = (k + 1..schedule.num_stages() - 1).filter(|&j| path.is_temporal(j)).count();
    let mut choices = vec![0; above];
    if path.is_temporal(k) {
        choices.push(funnel);
    }
    let plans = plan_jumps(schedule, path, &choices, coarse_frames)?;
    let plan: JumpPlan = plans.into_iter().find(|p| p.to_stage == k).expect("jump exists");

    let x1_parent = x1.time_range(0, parent.window_len)?;
    let (_, d_parent) = endpoint_means(&parent, &x1_parent)?;
    let child_offset = if path.is_temporal(k) {
        funnel * schedule.cumulative(k + 1).r_t
    } else {
        0
    };
    let x1_child = x1.time_range(child_offset, child.window_len)?;
    let (up, _) = endpoint_means(&child, &x1_child)?;
    let s = child.segment_start;
    let target_mean = up.scale(s);
    let e = parent.segment_end;

    let mut quiet = plan.clone();
    quiet.alpha = 0.0;
    let noise_free = apply_jump(&d_parent.scale(e), &quiet, &mut substream(seed, &["unused"]))?;
    let mean_exact_error = noise_free
        .data()
        .iter()
        .zip(target_mean.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut rng = substream(seed, &["certify", &k.to_string()]);
    let mut acc = MomentAccumulator::new(&target_mean, plan.factors);
    let mut noise = d_parent.zeros_like();
    for _ in 0..draws {
        fill_normal(&mut rng, noise.data_mut());
        let x_end = d_parent.lincomb(e, &noise, 1.0 - e)?;
        let y = apply_jump(&x_end, &plan, &mut rng)?;
        acc.push(&y, &target_mean)?;
    }
    let var = (1.0 - s).powi(2);
    let variances = acc.variances();
    let var_max_rel_error = variances.iter().map(|v| (v / var - 1.0).abs()).fold(0.0, f64::max);
    // Relative standard error of a Gaussian variance estimate is sqrt(2/N);
    // allow three of them plus a Bonferroni margin for the entry count.
    let entries = variances.len() as f64;
    let var_tolerance = 0.01f64.max((3.0 + (2.0 * entries.ln()).sqrt()) * (2.0 / draws as f64).sqrt());
    let (cov_max_abs, cov_max_z) = acc.covariance();
    let (cov_pooled, cov_z) = acc.pooled_covariance();
    let mean_max_z = acc.mean_max_z(var);
    let mean_z_allow = 3.0 + (2.0 * entries.ln()).sqrt();
    let passed = mean_exact_error < 1e-6 && var_max_rel_error < var_tolerance && cov_z < 3.0 && mean_max_z < mean_z_allow;
    Ok(JumpCertificate {
        from_stage: k + 1,
        to_stage: k,
        block_size: plan.block_size,
        start: s,
        rollback_end: e,
        alpha: plan.alpha,
        draws,
        mean_exact_error,
        mean_max_z,
        var_max_rel_error,
        var_tolerance,
        cov_pooled,
        cov_z,
        cov_max_abs,
        cov_max_z,
        passed,
    })
}

/// Compare funneled and unfunneled generation of one child window under
/// the oracle velocity.
#[derive(Debug, Clone, Serialize)]
pub struct FunnelCertificate {
    pub to_stage: usize,
    pub funnel: usize,
    pub draws: usize,
    /// Largest two-sample z of entry means.
    pub mean_max_z: f64,
    /// Largest relative difference of entry variances.
    pub var_max_rel_diff: f64,
    /// Relative difference of variances pooled over entries.
    pub var_pooled_rel_diff: f64,
    pub passed: bool,
}

/// Runs the coarsest stage, the jump into `coarsest - 1` with and without
/// funneling, and the finer stage to its end; the unfunneled result is then
/// sliced to the funneled window.
pub fn certify_funnel(
    schedule: &PyramidSchedule,
    x1: &FieldGrid,
    funnel: usize,
    steps_per_stage: usize,
    draws: usize,
    seed: u64,
) -> Result<FunnelCertificate> {
    let k_total = schedule.num_stages();
    if k_total < 2 {
        return Err(invalid("funneling needs at least two stages"));
    }
    let top = k_total - 1;
    let k = top - 1;
    let path = DeltaPath::full(k_total);
    let coarse_frames = x1.time() / schedule.cumulative(top).r_t;
    let oracle = OracleVelocity::new(schedule.clone(), x1.clone());
    let g_top = stage_geometry(schedule, &path, top, coarse_frames)?;
    let g_child = stage_geometry(schedule, &path, k, coarse_frames)?;
    let plan_f = plan_jumps(schedule, &path, &[funnel], coarse_frames)?.remove(0);
    let mut plan_u = plan_f.clone();
    plan_u.funnel = None;

    let zero_forcing = |g: &StageGeometry, frames: usize| -> Result<FieldGrid> {
        let f = downsample(&x1.time_range(0, g.window_len)?, g.latent_factors)?;
        FieldGrid::zeros(1, frames, f.lat_degrees().to_vec(), f.n_lon())
    };
    let top_cond = ConditioningBundle {
        t: g_top.segment_start,
        segment: g_top.segment(),
        stage: top,
        timescale: top,
        window_offset: 0,
        forcings: zero_forcing(&g_top, g_top.frames)?,
    };
    let frame_len = schedule.cumulative(top).r_t;
    let child_frames = g_child.frames;
    let child_cond_f = ConditioningBundle {
        t: g_child.segment_start,
        segment: g_child.segment(),
        stage: k,
        timescale: k,
        window_offset: funnel * frame_len,
        forcings: FieldGrid::zeros(1, child_frames, vec![0.0; 1], 1)?,
    };
    let child_cond_u = ConditioningBundle {
        window_offset: 0,
        ..child_cond_f.clone()
    };
    let keep: Vec<usize> = (funnel * child_frames..(funnel + 1) * child_frames).collect();

    let mut rng_f = substream(seed, &["funnel", "funneled"]);
    let mut rng_u = substream(seed, &["funnel", "unfunneled"]);
    let mut start = FieldGrid::zeros(x1.channels(), g_top.frames, top_cond.forcings.lat_degrees().to_vec(), top_cond.forcings.n_lon())?;
    let mut stats: [(Vec<f64>, Vec<f64>); 2] = Default::default();
    for _ in 0..draws {
        for (which, rng) in [&mut rng_f, &mut rng_u].into_iter().enumerate() {
            fill_normal(rng, start.data_mut());
            let top_end = euler_stage(&oracle, &start, &top_cond, steps_per_stage)?;
            let y = if which == 0 {
                let x = apply_jump(&top_end, &plan_f, rng)?;
                euler_stage(&oracle, &x, &child_cond_f, steps_per_stage)?
            } else {
                let x = apply_jump(&top_end, &plan_u, rng)?;
                let full = euler_stage(&oracle, &x, &child_cond_u, steps_per_stage)?;
                slice_time(&full, &keep)?
            };
            let (sum, sq) = &mut stats[which];
            if sum.is_empty() {
                *sum = vec![0.0; y.len()];
                *sq = vec![0.0; y.len()];
            }
            for (i, v) in y.data().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
    }
    let n = draws as f64;
    let moments = |(s, q): &(Vec<f64>, Vec<f64>)| -> (Vec<f64>, Vec<f64>) {
        let m: Vec<f64> = s.iter().map(|v| v / n).collect();
        let v = q.iter().zip(&m).map(|(q, m)| q / n - m * m).collect();
        (m, v)
    };
    let (mf, vf) = moments(&stats[0]);
    let (mu, vu) = moments(&stats[1]);
    let mut mean_max_z: f64 = 0.0;
    let mut var_max_rel_diff: f64 = 0.0;
    for i in 0..mf.len() {
        let se = ((vf[i] + vu[i]) / n).sqrt();
        if se > 0.0 {
            mean_max_z = mean_max_z.max((mf[i] - mu[i]).abs() / se);
        }
        var_max_rel_diff = var_max_rel_diff.max((vf[i] / vu[i] - 1.0).abs());
    }
    let pooled_f: f64 = vf.iter().sum();
    let pooled_u: f64 = vu.iter().sum();
    let var_pooled_rel_diff = (pooled_f / pooled_u - 1.0).abs();
    // Entry-wise tolerance of three standard errors of a variance ratio,
    // with a Bonferroni allowance for the number of entries compared.
    let entries = mf.len() as f64;
    let z_allow = 3.0 + (2.0 * entries.ln()).sqrt();
    let ratio_se = (4.0 / n).sqrt();
    let passed = mean_max_z < z_allow && var_pooled_rel_diff < 0.01 && var_max_rel_diff < z_allow * ratio_se;
    Ok(FunnelCertificate {
        to_stage: k,
        funnel,
        draws,
        mean_max_z,
        var_max_rel_diff,
        var_pooled_rel_diff,
        passed,
    })
}

/// Certificates for every jump of `schedule` on the full path plus the
/// spatial-only variant of the finest jump, on a small random `x1`.
pub fn certify_schedule(schedule: &PyramidSchedule, draws: usize, seed: u64) -> Result<Vec<JumpCertificate>> {
    let k_total = schedule.num_stages();
    let top = schedule.cumulative(k_total - 1);
    let coarse_len = schedule.stage(k_total - 1).frames * top.r_t;
    let mut x1 = FieldGrid::zeros(1, coarse_len, crate::grid::regular_latitudes(top.r_h), top.r_w)?;
    fill_normal(&mut substream(seed, &["certify-x1"]), x1.data_mut());
    let mut out = Vec::new();
    let full = DeltaPath::full(k_total);
    for k in (0..k_total.saturating_sub(1)).rev() {
        out.push(certify_jump(schedule, &full, k, &x1, 0, draws, seed)?);
    }
    if k_total >= 2 {
        let frozen = DeltaPath::with_temporal_jumps(k_total, 0)?;
        out.push(certify_jump(schedule, &frozen, 0, &x1, 0, draws, seed)?);
    }
    Ok(out)
}

/// Realised frequency of every target stage under training-path sampling.
#[derive(Debug, Clone, Serialize)]
pub struct BalanceCertificate {
    pub draws: usize,
    /// Indexed by target stage.
    pub frequencies: Vec<f64>,
    pub max_deviation: f64,
    pub passed: bool,
}

pub fn certify_delta_balance(num_stages: usize, draws: usize, seed: u64, tolerance: f64) -> Result<BalanceCertificate> {
    if num_stages == 0 || draws == 0 {
        return Err(invalid("balance check needs stages and draws"));
    }
    let mut rng = substream(seed, &["delta-balance"]);
    let mut counts = vec![0usize; num_stages];
    for _ in 0..draws {
        counts[sample_delta_path(num_stages, &mut rng).target_stage()] += 1;
    }
    let frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    let uniform = 1.0 / num_stages as f64;
    let max_deviation = frequencies.iter().map(|f| (f - uniform).abs()).fold(0.0, f64::max);
    Ok(BalanceCertificate {
        draws,
        frequencies,
        max_deviation,
        passed: max_deviation <= tolerance,
    })
}

/// Rollback coefficients for a purely spatial 2x2 jump against the closed
/// forms `scale = (1 + s) / 2` and `alpha = (1 - s) sqrt(3 / 4)`.
#[derive(Debug, Clone, Serialize)]
pub struct SpecialCaseCertificate {
    pub starts: Vec<f64>,
    pub max_scale_error: f64,
    pub max_alpha_error: f64,
    pub passed: bool,
}

pub fn certify_spatial_special_case() -> Result<SpecialCaseCertificate> {
    let starts: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).chain([1.0 / 3.0, 2.0 / 3.0]).collect();
    let mut max_scale_error: f64 = 0.0;
    let mut max_alpha_error: f64 = 0.0;
    for &s in &starts {
        let r = jump_rollback(s, ResampleFactors::new(2, 2, 1)?.block_size())?;
        if s > 0.0 {
            max_scale_error = max_scale_error.max((r.scale - (1.0 + s) / 2.0).abs());
        }
        max_alpha_error = max_alpha_error.max((r.alpha - (1.0 - s) * 0.75f64.sqrt()).abs());
    }
    Ok(SpecialCaseCertificate {
        starts,
        max_scale_error,
        max_alpha_error,
        passed: max_scale_error <= 4.0 * f64::EPSILON && max_alpha_error <= 4.0 * f64::EPSILON,
    })
}

/// Analytic against central-difference gradient of `<cot, f(x)>` for one
/// parameter.
#[derive(Debug, Clone, Serialize)]
pub struct GradientCheck {
    pub index: usize,
    pub segment: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl GradientCheck {
    /// Relative agreement within `tol`; pairs that are both below `floor`
    /// in magnitude count as agreeing.
    pub fn agrees(&self, tol: f64, floor: f64) -> bool {
        self.rel_error <= tol || (self.analytic.abs() < floor && self.numeric.abs() < floor)
    }
}

/// `per_segment` distinct random coordinates from every parameter segment.
pub fn gradient_coordinates(model: &VelocityModel, per_segment: usize, seed: u64) -> Vec<usize> {
    let mut rng = substream(seed, &["gradient-coordinates"]);
    let mut out = Vec::new();
    for seg in model.segments() {
        let k = per_segment.min(seg.len);
        out.extend(rand::seq::index::sample(&mut rng, seg.len, k).into_iter().map(|i| seg.offset + i));
    }
    out
}

pub fn finite_difference_check(
    model: &VelocityModel,
    x: &FieldGrid,
    cond: &ConditioningBundle,
    cot: &FieldGrid,
    coords: &[usize],
    h: f64,
) -> Result<Vec<GradientCheck>> {
    let grad = model.backward(x, cond, cot)?;
    let mut probe = model.clone();
    let objective = |m: &VelocityModel| -> Result<f64> {
        let y = m.forward(x, cond)?;
        Ok(y.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum())
    };
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let p0 = probe.params()[i];
        probe.params_mut()[i] = p0 + h;
        let up = objective(&probe)?;
        probe.params_mut()[i] = p0 - h;
        let down = objective(&probe)?;
        probe.params_mut()[i] = p0;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grad[i];
        let scale = analytic.abs().max(numeric.abs());
        let segment = model
            .segments()
            .iter()
            .find(|s| (s.offset..s.offset + s.len).contains(&i))
            .map(|s| s.name.clone())
            .unwrap_or_default();
        out.push(GradientCheck {
            index: i,
            segment,
            analytic,
            numeric,
            rel_error: if scale > 0.0 { (analytic - numeric).abs() / scale } else { 0.0 },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::regular_latitudes;
    use crate::path::sample_endpoints;

    fn x1_for(schedule: &PyramidSchedule, channels: usize, seed: u64) -> FieldGrid {
        let top = schedule.cumulative(schedule.coarsest());
        let len = schedule.stage(schedule.coarsest()).frames * top.r_t;
        let mut x = FieldGrid::zeros(channels, len, regular_latitudes(top.r_h), top.r_w).unwrap();
        fill_normal(&mut substream(seed, &["x1"]), x.data_mut());
        x
    }

    #[test]
    fn oracle_transports_start_to_end() {
        // From the start endpoint, one Euler step of the oracle lands on the
        // end endpoint built from the same noise.
        let s = PyramidSchedule::default_climate();
        let path = DeltaPath::full(3);
        let x1 = x1_for(&s, 2, 1);
        let g = stage_geometry(&s, &path, 1, 8).unwrap();
        let w = x1.time_range(0, g.window_len).unwrap();
        let ends = sample_endpoints(&g, &w, &mut substream(2, &[])).unwrap();
        let oracle = OracleVelocity::new(s.clone(), x1.clone());
        let cond = ConditioningBundle {
            t: g.segment_start,
            segment: g.segment(),
            stage: 1,
            timescale: 1,
            window_offset: 0,
            forcings: FieldGrid::zeros(1, g.frames, ends.end.lat_degrees().to_vec(), ends.end.n_lon()).unwrap(),
        };
        for steps in [1, 4] {
            let out = euler_stage(&oracle, &ends.start, &cond, steps).unwrap();
            for (a, b) in out.data().iter().zip(ends.end.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn small_certificates_pass() {
        let s = PyramidSchedule::default_climate();
        let certs = certify_schedule(&s, 20_000, 3).unwrap();
        assert_eq!(certs.iter().map(|c| c.block_size).collect::<Vec<_>>(), vec![40, 48, 4]);
        for c in &certs {
            assert!(c.mean_exact_error < 1e-12, "{c:?}");
            assert!(c.var_max_rel_error < 0.05, "{c:?}");
            assert!(c.cov_z < 3.0 && c.passed, "{c:?}");
        }
    }

    #[test]
    fn wrong_noise_weight_is_detected() {
        let s = PyramidSchedule::default_climate();
        let path = DeltaPath::full(3);
        let x1 = x1_for(&s, 1, 4);
        let good = certify_jump(&s, &path, 0, &x1, 0, 20_000, 5).unwrap();
        assert!(good.var_max_rel_error < 0.05);
        // An i.i.d. corrective noise leaves the within-block covariance of
        // the replicated coarse noise in place.
        let g0 = stage_geometry(&s, &path, 0, 8).unwrap();
        let plan = plan_jumps(&s, &path, &[0, 0], 8).unwrap().remove(1);
        let g1 = stage_geometry(&s, &path, 1, 8).unwrap();
        let (_, d1) = endpoint_means(&g1, &x1.time_range(0, 120).unwrap()).unwrap();
        let e = g1.segment_end;
        let mut rng = substream(6, &[]);
        let mut noise = d1.zeros_like();
        let (mean, _) = endpoint_means(&g0, &x1.time_range(0, 12).unwrap()).unwrap();
        let mean = mean.scale(g0.segment_start);
        let mut acc = MomentAccumulator::new(&mean, plan.factors);
        for _ in 0..5_000 {
            fill_normal(&mut rng, noise.data_mut());
            let x_end = d1.lincomb(e, &noise, 1.0 - e).unwrap();
            let up = upsample(&slice_time(&x_end, &[0]).unwrap(), plan.factors).unwrap();
            let mut iid = up.zeros_like();
            fill_normal(&mut rng, iid.data_mut());
            let y = up.lincomb(plan.scale, &iid, plan.alpha).unwrap();
            acc.push(&y, &mean).unwrap();
        }
        // Positive covariance of scale^2 (1 - e)^2 in every block.
        let expected = (plan.scale * (1.0 - e)).powi(2);
        let avg = acc.q_sum.iter().sum::<f64>() / (acc.q_sum.len() * acc.draws) as f64;
        assert!((avg / expected - 1.0).abs() < 0.2, "{avg} vs {expected}");
        assert!(acc.covariance().1 > 10.0);
    }

    #[test]
    fn balance_and_special_case() {
        let b = certify_delta_balance(3, 30_000, 1, 0.02).unwrap();
        assert!(b.passed, "{b:?}");
        let c = certify_spatial_special_case().unwrap();
        assert!(c.passed, "{c:?}");
    }

    #[test]
    fn funnel_small_run_agrees() {
        let s = PyramidSchedule::default_climate();
        let x1 = x1_for(&s, 1, 7);
        let c = certify_funnel(&s, &x1, 3, 2, 5_000, 8).unwrap();
        assert!(c.mean_max_z < 6.0, "{c:?}");
        assert!(c.var_pooled_rel_diff < 0.05, "{c:?}");
    }
}
