//! Jump points between stages: rescaling, block-correlated renoising and
//! temporal funneling.

use rand::Rng;

use crate::error::{invalid, shape, Result};
use crate::grid::{slice_time, upsample, FieldGrid, ResampleFactors};
use crate::path::{jump_factors, stage_geometry, DeltaPath};
use crate::rng::normal;
use crate::schedule::{jump_rollback, PyramidSchedule};

/// Everything needed to move a latent from stage `from_stage` into the
/// next finer stage `to_stage`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpPlan {
    pub from_stage: usize,
    pub to_stage: usize,
    /// δ-adjusted upsampling factors.
    pub factors: ResampleFactors,
    pub block_size: usize,
    /// Start of the finer stage's segment.
    pub start: f64,
    /// Rolled-back end at which the coarser stage stops.
    pub rollback_end: f64,
    pub alpha: f64,
    pub scale: f64,
    /// Frames of the coarser latent kept before upsampling.
    pub funnel: Option<Vec<usize>>,
}

impl JumpPlan {
    pub fn is_temporal(&self) -> bool {
        self.factors.r_t > 1
    }
}

/// Zero-sum equicorrelated noise: within every replication block of
/// `factors` the entries have unit variance and pairwise correlation
/// `-1/(n-1)`; blocks and channels are independent.
pub fn sample_block_noise<R: Rng + ?Sized>(
    like: &FieldGrid,
    factors: ResampleFactors,
    rng: &mut R,
) -> Result<FieldGrid> {
    let n = factors.block_size();
    if n < 2 {
        return Err(invalid("block noise needs blocks of at least two entries"));
    }
    let (c, t, h, w) = like.shape();
    let ResampleFactors { r_h, r_w, r_t } = factors;
    if t % r_t != 0 || h % r_h != 0 || w % r_w != 0 {
        return Err(shape(format!(
            "field ({t}, {h}, {w}) does not tile into blocks ({r_t}, {r_h}, {r_w})"
        )));
    }
    let scale = (n as f64 / (n - 1) as f64).sqrt();
    let mut out = like.zeros_like();
    let mut z = vec![0.0; n];
    for ci in 0..c {
        for bt in 0..t / r_t {
            for bi in 0..h / r_h {
                for bj in 0..w / r_w {
                    for v in z.iter_mut() {
                        *v = normal(rng);
                    }
                    let mean = z.iter().sum::<f64>() / n as f64;
                    let mut idx = 0;
                    for dt in 0..r_t {
                        for di in 0..r_h {
                            for dj in 0..r_w {
                                let v = (z[idx] - mean) * scale;
                                out.set(ci, bt * r_t + dt, bi * r_h + di, bj * r_w + dj, v);
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Optional funnel slice, then `scale * Up(x) + alpha * n'`.
pub fn apply_jump<R: Rng + ?Sized>(x: &FieldGrid, plan: &JumpPlan, rng: &mut R) -> Result<FieldGrid> {
    let sliced;
    let x = match &plan.funnel {
        Some(idx) => {
            sliced = slice_time(x, idx)?;
            &sliced
        }
        None => x,
    };
    let up = upsample(x, plan.factors)?;
    if plan.block_size == 1 {
        return Ok(up);
    }
    let noise = sample_block_noise(&up, plan.factors, rng)?;
    up.lincomb(plan.scale, &noise, plan.alpha)
}

/// Jump plans from the coarsest jump to the finest. `funnel_choice[i]` is the
/// parent frame kept at the i-th temporal jump (missing entries default to
/// frame 0); spatial-only jumps never funnel.
pub fn plan_jumps(
    schedule: &PyramidSchedule,
    path: &DeltaPath,
    funnel_choice: &[usize],
    coarse_frames: usize,
) -> Result<Vec<JumpPlan>> {
    let k_total = schedule.num_stages();
    let mut plans = Vec::with_capacity(k_total.saturating_sub(1));
    let mut temporal_seen = 0;
    for k in (0..k_total.saturating_sub(1)).rev() {
        let factors = jump_factors(schedule, path, k);
        let n = factors.block_size();
        let rb = jump_rollback(schedule.start(k), n)?;
        let funnel = if path.is_temporal(k) {
            let from = stage_geometry(schedule, path, k + 1, coarse_frames)?;
            let idx = funnel_choice.get(temporal_seen).copied().unwrap_or(0);
            temporal_seen += 1;
            if idx >= from.frames {
                return Err(invalid(format!(
                    "funnel index {idx} outside the {} frames of stage {}",
                    from.frames,
                    k + 1
                )));
            }
            Some(vec![idx])
        } else {
            None
        };
        plans.push(JumpPlan {
            from_stage: k + 1,
            to_stage: k,
            factors,
            block_size: n,
            start: schedule.start(k),
            rollback_end: rb.end,
            alpha: rb.alpha,
            scale: rb.scale,
            funnel,
        });
    }
    if funnel_choice.len() > temporal_seen {
        return Err(invalid(format!(
            "{} funnel choices for {temporal_seen} temporal jumps",
            funnel_choice.len()
        )));
    }
    Ok(plans)
}
