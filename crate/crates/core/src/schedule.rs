//! Stage structure of the pyramid: timescales, resampling factors, flow-time
//! segments and the rolled-back segment ends used at jump points.
//!
//! Stages are indexed `0` (finest) to `K-1` (coarsest). Generation runs from
//! the coarsest stage at flow time 0 towards the finest stage at flow time 1.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::ResampleFactors;

/// One stage of the pyramid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub timescale_label: String,
    /// Factors between this stage and the next coarser one; `None` for the
    /// coarsest stage.
    pub factors_to_coarser: Option<ResampleFactors>,
    /// Frames in one window of this stage.
    pub frames: usize,
}

/// Stage description as written in run configs: the coarsest stage leaves
/// its factors at the default of 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub timescale_label: String,
    #[serde(default = "one")]
    pub r_h: usize,
    #[serde(default = "one")]
    pub r_w: usize,
    #[serde(default = "one")]
    pub r_t: usize,
    pub frames: usize,
}

fn one() -> usize {
    1
}

/// Coefficients of the rescale-renoise correction at one jump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rollback {
    /// Rolled-back end of the coarser stage's segment.
    pub end: f64,
    /// Weight of the corrective noise.
    pub alpha: f64,
    /// Multiplier on the upsampled coarse latent, `s / end`.
    pub scale: f64,
}

/// Rolled-back coarse end and noise weight for a jump that enters the finer
/// stage at flow time `start` with block size `n`, using the minimal
/// admissible block correlation `-1/(n-1)`.
pub fn jump_rollback(start: f64, n: usize) -> Result<Rollback> {
    if !(0.0..1.0).contains(&start) {
        return Err(invalid(format!("jump start {start} outside [0, 1)")));
    }
    if n == 0 {
        return Err(invalid("block size must be >= 1"));
    }
    if n == 1 {
        return Ok(Rollback {
            end: start,
            alpha: 0.0,
            scale: 1.0,
        });
    }
    let root_n = (n as f64).sqrt();
    let end = start * root_n / ((1.0 - start) + start * root_n);
    let alpha = (1.0 - start) * ((n as f64 - 1.0) / n as f64).sqrt();
    let scale = ((1.0 - start) + start * root_n) / root_n;
    Ok(Rollback { end, alpha, scale })
}

/// General closed form for a corrective noise with block correlation `gamma`
/// in `[-1/(n-1), 0)`. Returns `(end, alpha)`.
pub fn rollback_for_gamma(start: f64, gamma: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&start) {
        return Err(invalid(format!("jump start {start} outside [0, 1)")));
    }
    if !(gamma < 0.0) {
        return Err(invalid(format!("block correlation {gamma} must be negative")));
    }
    let a = (1.0 - gamma).sqrt();
    let b = (-gamma).sqrt();
    let end = start * a / ((1.0 - start) * b + start * a);
    let alpha = (1.0 - start) / a;
    Ok((end, alpha))
}

/// Smallest block correlation that keeps an `n x n` equicorrelation matrix
/// positive semidefinite.
pub fn gamma_min(n: usize) -> Result<f64> {
    if n < 2 {
        return Err(invalid(format!(
            "block size {n} has no corrective noise (need n >= 2)"
        )));
    }
    Ok(-1.0 / (n as f64 - 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidSchedule {
    stages: Vec<StageSpec>,
    starts: Vec<f64>,
    ends: Vec<f64>,
    rollback_ends: Vec<Option<f64>>,
    cumulative: Vec<ResampleFactors>,
}

impl PyramidSchedule {
    /// Build a schedule with a uniform partition of `[0, 1]` into one
    /// segment per stage.
    pub fn build(stages: Vec<StageSpec>) -> Result<Self> {
        let k_total = stages.len();
        if k_total == 0 {
            return Err(invalid("a schedule needs at least one stage"));
        }
        for (k, st) in stages.iter().enumerate() {
            if st.frames == 0 {
                return Err(invalid(format!("stage {k} has zero frames")));
            }
            match (&st.factors_to_coarser, k + 1 == k_total) {
                (Some(_), true) => {
                    return Err(invalid("the coarsest stage cannot have factors to a coarser stage"))
                }
                (None, false) => {
                    return Err(invalid(format!("stage {k} is missing its factors")))
                }
                _ => {}
            }
        }
        // A temporal jump funnels into one parent frame, so the finer window
        // holds exactly r_t frames; a spatial-only jump keeps the frame count.
        for k in 0..k_total.saturating_sub(1) {
            let f = stages[k].factors_to_coarser.expect("checked above");
            let expected = if f.r_t > 1 { f.r_t } else { stages[k + 1].frames };
            if stages[k].frames != expected {
                return Err(invalid(format!(
                    "stage {k} ({}) has {} frames per window, expected {expected}",
                    stages[k].timescale_label, stages[k].frames
                )));
            }
        }

        let kf = k_total as f64;
        let mut starts: Vec<f64> = (0..k_total).map(|k| (kf - 1.0 - k as f64) / kf).collect();
        let mut ends: Vec<f64> = (0..k_total).map(|k| (kf - k as f64) / kf).collect();
        starts[k_total - 1] = 0.0;
        ends[0] = 1.0;

        let mut cumulative = vec![ResampleFactors::IDENTITY; k_total];
        for k in 1..k_total {
            let f = stages[k - 1].factors_to_coarser.expect("checked above");
            cumulative[k] = cumulative[k - 1].compose(&f);
        }

        let mut rollback_ends = vec![None; k_total];
        for k in 1..k_total {
            let n = stages[k - 1].factors_to_coarser.expect("checked above").block_size();
            rollback_ends[k] = Some(jump_rollback(starts[k - 1], n)?.end);
        }

        Ok(Self {
            stages,
            starts,
            ends,
            rollback_ends,
            cumulative,
        })
    }

    pub fn from_entries(entries: &[StageEntry]) -> Result<Self> {
        let k_total = entries.len();
        let stages = entries
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let factors = if k + 1 == k_total {
                    if (e.r_h, e.r_w, e.r_t) != (1, 1, 1) {
                        return Err(invalid("the coarsest stage takes no resampling factors"));
                    }
                    None
                } else {
                    Some(ResampleFactors::new(e.r_h, e.r_w, e.r_t)?)
                };
                Ok(StageSpec {
                    timescale_label: e.timescale_label.clone(),
                    factors_to_coarser: factors,
                    frames: e.frames,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::build(stages)
    }

    /// Monthly, yearly and decadal stages with 2x2 spatial pooling per stage,
    /// x12 from yearly to monthly and x10 from decadal to yearly. The decadal
    /// window spans eight decades.
    pub fn default_entries() -> Vec<StageEntry> {
        vec![
            StageEntry {
                timescale_label: "monthly".into(),
                r_h: 2,
                r_w: 2,
                r_t: 12,
                frames: 12,
            },
            StageEntry {
                timescale_label: "yearly".into(),
                r_h: 2,
                r_w: 2,
                r_t: 10,
                frames: 10,
            },
            StageEntry {
                timescale_label: "decadal".into(),
                r_h: 1,
                r_w: 1,
                r_t: 1,
                frames: 8,
            },
        ]
    }

    pub fn default_climate() -> Self {
        Self::from_entries(&Self::default_entries()).expect("default schedule is valid")
    }

    pub fn entries(&self) -> Vec<StageEntry> {
        self.stages
            .iter()
            .map(|s| {
                let f = s.factors_to_coarser.unwrap_or(ResampleFactors::IDENTITY);
                StageEntry {
                    timescale_label: s.timescale_label.clone(),
                    r_h: f.r_h,
                    r_w: f.r_w,
                    r_t: f.r_t,
                    frames: s.frames,
                }
            })
            .collect()
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn coarsest(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn stage(&self, k: usize) -> &StageSpec {
        &self.stages[k]
    }

    pub fn stages(&self) -> &[StageSpec] {
        &self.stages
    }

    /// Nominal segment start `s_k`.
    pub fn start(&self, k: usize) -> f64 {
        self.starts[k]
    }

    /// Nominal segment end `e_k`.
    pub fn nominal_end(&self, k: usize) -> f64 {
        self.ends[k]
    }

    /// Rolled-back end of stage `k` when the following jump refines both
    /// space and time; `None` for the finest stage.
    pub fn rollback_end(&self, k: usize) -> Option<f64> {
        self.rollback_ends[k]
    }

    /// Cumulative factors from the finest stage to stage `k`.
    pub fn cumulative(&self, k: usize) -> ResampleFactors {
        self.cumulative[k]
    }

    /// Factors of the jump from stage `k + 1` into stage `k`.
    pub fn factors_into(&self, k: usize) -> ResampleFactors {
        self.stages[k]
            .factors_to_coarser
            .expect("only finer stages are jumped into")
    }

    /// Index of the stage whose native timescale is labelled `label`.
    pub fn stage_for_label(&self, label: &str) -> Result<usize> {
        self.stages
            .iter()
            .position(|s| s.timescale_label == label)
            .ok_or_else(|| invalid(format!("unknown timescale '{label}'")))
    }
}
