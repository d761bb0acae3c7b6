//! Coupled conditional probability paths for every stage of the pyramid.
//!
//! A [`DeltaPath`] picks, for every jump, whether the finer stage refines
//! time as well as space. Temporal jumps come first (coarse to fine); once a
//! jump is spatial-only every finer jump is too, so a path is fully described
//! by its number of temporal jumps and ends at the timescale of stage
//! `K - 1 - m`.
//!
//! All latents are expressed relative to the finest-resolution data: stage
//! `k` sees `Down(x1; r_h, r_w, r_t)` with the cumulative spatial factors of
//! stage `k` and the cumulative temporal factor of the stage whose timescale
//! it currently carries.

use rand::Rng;

use crate::error::{invalid, shape, Result};
use crate::grid::{downsample, upsample, FieldGrid, ResampleFactors};
use crate::model::ConditioningBundle;
use crate::rng::fill_normal;
use crate::schedule::{jump_rollback, PyramidSchedule};

/// Per-jump choice between spatiotemporal (`true`) and spatial-only
/// refinement. Entry `k` describes the jump from stage `k + 1` into `k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DeltaPath {
    temporal: Vec<bool>,
}

impl DeltaPath {
    pub fn new(temporal: Vec<bool>) -> Result<Self> {
        // Reading coarse to fine, a temporal jump may not follow a spatial one.
        for k in 0..temporal.len().saturating_sub(1) {
            if temporal[k] && !temporal[k + 1] {
                return Err(invalid(format!(
                    "jump into stage {k} refines time after a spatial-only jump"
                )));
            }
        }
        Ok(Self { temporal })
    }

    /// The standard spatiotemporal pyramid: every jump refines time.
    pub fn full(num_stages: usize) -> Self {
        Self {
            temporal: vec![true; num_stages.saturating_sub(1)],
        }
    }

    /// Path whose first `m` jumps (from the coarsest stage) are temporal.
    pub fn with_temporal_jumps(num_stages: usize, m: usize) -> Result<Self> {
        let jumps = num_stages.saturating_sub(1);
        if m > jumps {
            return Err(invalid(format!("{m} temporal jumps but only {jumps} jumps")));
        }
        Ok(Self {
            temporal: (0..jumps).map(|k| k + m >= jumps).collect(),
        })
    }

    /// Path that ends at the native timescale of stage `target`.
    pub fn for_target_stage(num_stages: usize, target: usize) -> Result<Self> {
        if target >= num_stages {
            return Err(invalid(format!("target stage {target} outside 0..{num_stages}")));
        }
        Self::with_temporal_jumps(num_stages, num_stages - 1 - target)
    }

    pub fn num_stages(&self) -> usize {
        self.temporal.len() + 1
    }

    pub fn is_temporal(&self, k: usize) -> bool {
        self.temporal[k]
    }

    pub fn flags(&self) -> &[bool] {
        &self.temporal
    }

    pub fn temporal_jumps(&self) -> usize {
        self.temporal.iter().filter(|&&d| d).count()
    }

    /// Stage whose native timescale the finished sample carries.
    pub fn target_stage(&self) -> usize {
        self.num_stages() - 1 - self.temporal_jumps()
    }

    /// Stage whose native timescale stage `k` carries on this path.
    pub fn timescale_stage(&self, k: usize) -> usize {
        k.max(self.target_stage())
    }
}

/// Draw a path uniformly among the `K` valid ones by sequential Bernoulli
/// draws from the coarsest jump down.
pub fn sample_delta_path<R: Rng + ?Sized>(num_stages: usize, rng: &mut R) -> DeltaPath {
    let jumps = num_stages.saturating_sub(1);
    let mut temporal = vec![false; jumps];
    for k in (0..jumps).rev() {
        // k + 1 temporal jumps remain possible out of k + 2 outcomes.
        let p = (k + 1) as f64 / (k + 2) as f64;
        if rng.random::<f64>() < p {
            temporal[k] = true;
        } else {
            break;
        }
    }
    DeltaPath { temporal }
}

/// Shapes, factors and flow-time segment of one stage on one path.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGeometry {
    pub stage: usize,
    /// Stage whose native timescale this stage carries.
    pub timescale_stage: usize,
    /// Pooling factors from the finest data to this stage's latent.
    pub latent_factors: ResampleFactors,
    /// Pooling factors from the finest data to the parent latent, if any.
    pub parent_factors: Option<ResampleFactors>,
    /// Factors of the jump from the parent into this stage.
    pub jump_factors: Option<ResampleFactors>,
    /// Length of the covered window in finest-timescale frames.
    pub window_len: usize,
    pub frames: usize,
    pub segment_start: f64,
    /// Segment end; rolled back to match the following jump.
    pub segment_end: f64,
}

impl StageGeometry {
    pub fn segment(&self) -> (f64, f64) {
        (self.segment_start, self.segment_end)
    }

    /// Latent spatial dimensions for a finest grid of `n_lat x n_lon`.
    pub fn latent_dims(&self, n_lat: usize, n_lon: usize) -> (usize, usize) {
        (n_lat / self.latent_factors.r_h, n_lon / self.latent_factors.r_w)
    }
}

/// δ-adjusted factors of the jump from stage `k + 1` into stage `k`.
pub fn jump_factors(schedule: &PyramidSchedule, path: &DeltaPath, k: usize) -> ResampleFactors {
    let f = schedule.factors_into(k);
    if path.is_temporal(k) {
        f
    } else {
        f.spatial()
    }
}

fn latent_factors(schedule: &PyramidSchedule, path: &DeltaPath, k: usize) -> ResampleFactors {
    let spatial = schedule.cumulative(k);
    let temporal = schedule.cumulative(path.timescale_stage(k)).r_t;
    ResampleFactors {
        r_t: temporal,
        ..spatial
    }
}

/// End of stage `k`'s segment on `path`: the rolled-back end that matches the
/// jump into stage `k - 1`, or 1 for the finest stage.
pub fn segment_end(schedule: &PyramidSchedule, path: &DeltaPath, k: usize) -> Result<f64> {
    if k == 0 {
        return Ok(schedule.nominal_end(0));
    }
    let n = jump_factors(schedule, path, k - 1).block_size();
    Ok(jump_rollback(schedule.start(k - 1), n)?.end)
}

/// Geometry of stage `k` when the coarsest stage holds `coarse_frames`
/// frames and every temporal jump funnels into a single parent frame.
pub fn stage_geometry(
    schedule: &PyramidSchedule,
    path: &DeltaPath,
    k: usize,
    coarse_frames: usize,
) -> Result<StageGeometry> {
    let k_total = schedule.num_stages();
    if path.num_stages() != k_total {
        return Err(invalid(format!(
            "path has {} stages, schedule has {k_total}",
            path.num_stages()
        )));
    }
    if k >= k_total {
        return Err(invalid(format!("stage {k} outside 0..{k_total}")));
    }
    if coarse_frames == 0 {
        return Err(invalid("coarsest stage needs at least one frame"));
    }
    let coarsest = k_total - 1;
    let mut window_len = coarse_frames * schedule.cumulative(coarsest).r_t;
    for j in (k..coarsest).rev() {
        if path.is_temporal(j) {
            window_len = schedule.cumulative(j + 1).r_t;
        }
    }
    let latent = latent_factors(schedule, path, k);
    let (parent_factors, jump) = if k < coarsest {
        (
            Some(latent_factors(schedule, path, k + 1)),
            Some(jump_factors(schedule, path, k)),
        )
    } else {
        (None, None)
    };
    Ok(StageGeometry {
        stage: k,
        timescale_stage: path.timescale_stage(k),
        latent_factors: latent,
        parent_factors,
        jump_factors: jump,
        window_len,
        frames: window_len / latent.r_t,
        segment_start: schedule.start(k),
        segment_end: segment_end(schedule, path, k)?,
    })
}

/// A coupled pair of path endpoints sharing one noise draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Endpoints {
    pub start: FieldGrid,
    pub end: FieldGrid,
}

/// Deterministic part of the endpoints: `(Up(Down_{k+1}(x1)), Down_k(x1))`.
pub fn endpoint_means(geom: &StageGeometry, x1: &FieldGrid) -> Result<(FieldGrid, FieldGrid)> {
    if x1.time() != geom.window_len {
        return Err(shape(format!(
            "stage {} window spans {} frames, got {}",
            geom.stage,
            geom.window_len,
            x1.time()
        )));
    }
    let down = downsample(x1, geom.latent_factors)?;
    let up = match (geom.parent_factors, geom.jump_factors) {
        (Some(pf), Some(jf)) => upsample(&downsample(x1, pf)?, jf)?,
        _ => down.zeros_like(),
    };
    Ok((up, down))
}

/// Endpoints of stage `geom.stage` for the finest-resolution window `x1`:
/// `end = e * Down_k(x1) + (1 - e) n` and
/// `start = s * Up_k(Down_{k+1}(x1)) + (1 - s) n` with one shared `n`.
pub fn sample_endpoints<R: Rng + ?Sized>(
    geom: &StageGeometry,
    x1: &FieldGrid,
    rng: &mut R,
) -> Result<Endpoints> {
    let (up, down) = endpoint_means(geom, x1)?;
    let mut noise = down.zeros_like();
    fill_normal(rng, noise.data_mut());
    let (s, e) = geom.segment();
    Ok(Endpoints {
        end: down.lincomb(e, &noise, 1.0 - e)?,
        start: up.lincomb(s, &noise, 1.0 - s)?,
    })
}

/// Linear interpolant at flow time `t` inside `segment`.
pub fn interpolate(
    x_start: &FieldGrid,
    x_end: &FieldGrid,
    segment: (f64, f64),
    t: f64,
) -> Result<FieldGrid> {
    let (s, e) = segment;
    if !(e > s) {
        return Err(invalid(format!("empty segment [{s}, {e}]")));
    }
    if !(s..=e).contains(&t) {
        return Err(invalid(format!("t = {t} outside segment [{s}, {e}]")));
    }
    let tp = (t - s) / (e - s);
    x_end.lincomb(tp, x_start, 1.0 - tp)
}

/// One flow-matching training tuple.
#[derive(Debug, Clone)]
pub struct PathSample {
    pub stage: usize,
    pub t: f64,
    pub delta_path: DeltaPath,
    /// Offset of the covered window in finest-timescale frames.
    pub window_offset: usize,
    pub x_start: FieldGrid,
    pub x_end: FieldGrid,
    pub x_t: FieldGrid,
    /// `x_end - x_start`.
    pub target: FieldGrid,
    pub cond: ConditioningBundle,
}

/// Draw a stage, flow time, path and aligned window, then build the coupled
/// endpoints, interpolant and target velocity. `x1` and `forcings` are full
/// finest-resolution series for one member.
pub fn make_training_sample<R: Rng + ?Sized>(
    x1: &FieldGrid,
    forcings: &FieldGrid,
    schedule: &PyramidSchedule,
    multi_timescale: bool,
    rng: &mut R,
) -> Result<PathSample> {
    if x1.time() != forcings.time() || x1.n_lat() != forcings.n_lat() || x1.n_lon() != forcings.n_lon() {
        return Err(shape("targets and forcings are not aligned"));
    }
    let k_total = schedule.num_stages();
    let k = rng.random_range(0..k_total);
    let path = if multi_timescale {
        sample_delta_path(k_total, rng)
    } else {
        DeltaPath::full(k_total)
    };
    let coarse_frames = schedule.stage(k_total - 1).frames;
    let geom = stage_geometry(schedule, &path, k, coarse_frames)?;
    if x1.time() % geom.window_len != 0 {
        return Err(shape(format!(
            "series of {} frames does not tile into windows of {}",
            x1.time(),
            geom.window_len
        )));
    }
    let windows = x1.time() / geom.window_len;
    let offset = rng.random_range(0..windows) * geom.window_len;
    let (s, e) = geom.segment();
    let t = s + (e - s) * rng.random::<f64>();

    let x1_window = x1.time_range(offset, geom.window_len)?;
    let ends = sample_endpoints(&geom, &x1_window, rng)?;
    let x_t = interpolate(&ends.start, &ends.end, (s, e), t)?;
    let target = ends.end.sub(&ends.start)?;
    let forcing_window = forcings.time_range(offset, geom.window_len)?;
    let cond = ConditioningBundle {
        t,
        segment: (s, e),
        stage: k,
        timescale: geom.timescale_stage,
        window_offset: offset,
        forcings: downsample(&forcing_window, geom.latent_factors)?,
    };
    Ok(PathSample {
        stage: k,
        t,
        delta_path: path,
        window_offset: offset,
        x_start: ends.start,
        x_end: ends.end,
        x_t,
        target,
        cond,
    })
}
