//! Inference: per-stage Euler integration, jumps with funneling, direct
//! sampling at coarse timescales and cached long-sequence generation.
//!
//! Every latent is a pure function of `(seed, member, δ-path, window path)`,
//! where the window path is the coarse-window index followed by the funnel
//! choice of every temporal jump taken so far. That makes cached and cold
//! generation of the same window bit-identical.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, shape, Result, SpfError};
use crate::grid::{downsample, FieldGrid};
use crate::model::{ConditioningBundle, VelocityModel};
use crate::path::{stage_geometry, DeltaPath, StageGeometry};
use crate::rng::{fill_normal, substream, SpfRng};
use crate::schedule::PyramidSchedule;
use crate::transition::{apply_jump, plan_jumps, JumpPlan};

/// A velocity field `v(x_t | cond)`, expressed per unit of rescaled segment
/// time.
pub trait VelocityField: Sync {
    fn velocity(&self, x: &FieldGrid, cond: &ConditioningBundle) -> Result<FieldGrid>;

    /// Identifies the field's parameters for cache lineage checks.
    fn fingerprint(&self) -> [u8; 32] {
        [0; 32]
    }
}

impl VelocityField for VelocityModel {
    fn velocity(&self, x: &FieldGrid, cond: &ConditioningBundle) -> Result<FieldGrid> {
        self.forward(x, cond)
    }

    fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self.config()).unwrap_or_default());
        for p in self.params() {
            h.update(p.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Model-evaluation bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleStats {
    pub model_evals: u64,
    /// Euler-stage runs per stage index.
    pub stage_runs: Vec<u64>,
    pub cache_hits: u64,
    pub cache_mismatches: u64,
}

impl SampleStats {
    fn record_stage(&mut self, k: usize, steps: usize) {
        if self.stage_runs.len() <= k {
            self.stage_runs.resize(k + 1, 0);
        }
        self.stage_runs[k] += 1;
        self.model_evals += steps as u64;
    }
}

/// Integrate `x` over the segment of `base` with `n_steps` uniform Euler
/// steps in rescaled time `t' in [0, 1]`; the field sees absolute flow time.
pub fn euler_stage(
    field: &dyn VelocityField,
    x: &FieldGrid,
    base: &ConditioningBundle,
    n_steps: usize,
) -> Result<FieldGrid> {
    if n_steps == 0 {
        return Err(invalid("Euler integration needs at least one step"));
    }
    let (s, e) = base.segment;
    let dt = 1.0 / n_steps as f64;
    let mut x = x.clone();
    let mut cond = base.clone();
    for i in 0..n_steps {
        cond.t = s + (i as f64 * dt) * (e - s);
        let v = field.velocity(&x, &cond)?;
        x.axpy(dt, &v)?;
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(SpfError::NonFinite {
                context: format!("stage {} Euler step {i}", base.stage),
            });
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub seed: u64,
    pub member: usize,
    pub stage: usize,
    pub delta: Vec<bool>,
    pub window_path: Vec<usize>,
}

struct CacheEntry {
    lineage: [u8; 32],
    latent: FieldGrid,
    last_used: u64,
}

struct CacheState {
    entries: HashMap<CacheKey, CacheEntry>,
    tick: u64,
}

pub enum Lookup {
    Hit(FieldGrid),
    Miss,
    /// An entry exists but was produced under a different lineage.
    Mismatch,
}

/// Stage-end latents keyed by stage and window path, evicted least recently
/// used once `capacity` entries are held.
pub struct LatentCache {
    capacity: usize,
    state: Mutex<CacheState>,
}

impl LatentCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            state: Mutex::new(CacheState {
                entries: HashMap::new(),
                tick: 0,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("cache lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey, lineage: &[u8; 32]) -> Lookup {
        let mut st = self.state.lock().expect("cache lock");
        st.tick += 1;
        let tick = st.tick;
        match st.entries.get_mut(key) {
            Some(e) if &e.lineage == lineage => {
                e.last_used = tick;
                Lookup::Hit(e.latent.clone())
            }
            Some(_) => Lookup::Mismatch,
            None => Lookup::Miss,
        }
    }

    pub fn insert(&self, key: CacheKey, lineage: [u8; 32], latent: FieldGrid) {
        let mut st = self.state.lock().expect("cache lock");
        st.tick += 1;
        let tick = st.tick;
        if !st.entries.contains_key(&key) && st.entries.len() >= self.capacity {
            if let Some(old) = st.entries.iter().min_by_key(|(_, e)| e.last_used).map(|(k, _)| k.clone()) {
                st.entries.remove(&old);
            }
        }
        st.entries.insert(
            key,
            CacheEntry {
                lineage,
                latent,
                last_used: tick,
            },
        );
    }

    /// Overwrite the lineage of every entry; used to exercise mismatch
    /// handling.
    pub fn poison(&self) {
        let mut st = self.state.lock().expect("cache lock");
        for e in st.entries.values_mut() {
            e.lineage = [0xff; 32];
        }
    }
}

/// A request for one window per ensemble member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    /// Stage whose native timescale the output carries.
    pub target_stage: usize,
    /// Coarse window within the forcing series.
    pub coarse_window: usize,
    /// Funnel choice at every temporal jump, coarse to fine.
    pub period: Vec<usize>,
    pub ensemble: usize,
    pub steps_total: usize,
    pub seed: u64,
}

/// Shared state for sampling one forcing series with one field.
pub struct Sampler<'a> {
    field: &'a dyn VelocityField,
    schedule: &'a PyramidSchedule,
    forcings: &'a FieldGrid,
    channels: usize,
    coarse_frames: usize,
    coarse_len: usize,
    steps_per_stage: usize,
    lineage: [u8; 32],
}

impl<'a> Sampler<'a> {
    /// `forcings` is the full finest-timescale forcing series; it must tile
    /// into coarse windows of `coarse_frames` coarsest frames. Latents carry
    /// `channels` channels.
    pub fn new(
        field: &'a dyn VelocityField,
        schedule: &'a PyramidSchedule,
        forcings: &'a FieldGrid,
        channels: usize,
        coarse_frames: usize,
        steps_total: usize,
    ) -> Result<Self> {
        let k_total = schedule.num_stages();
        if steps_total == 0 || steps_total % k_total != 0 {
            return Err(invalid(format!(
                "{steps_total} steps do not split evenly over {k_total} stages"
            )));
        }
        if coarse_frames == 0 {
            return Err(invalid("coarse window needs at least one frame"));
        }
        let coarse_len = coarse_frames * schedule.cumulative(k_total - 1).r_t;
        if forcings.time() == 0 || forcings.time() % coarse_len != 0 {
            return Err(shape(format!(
                "forcing series of {} frames does not tile into coarse windows of {coarse_len}",
                forcings.time()
            )));
        }
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&schedule.entries())?);
        h.update((coarse_frames as u64).to_le_bytes());
        h.update((steps_total as u64).to_le_bytes());
        h.update(field.fingerprint());
        h.update(forcings.shape().0.to_le_bytes());
        for v in forcings.data() {
            h.update(v.to_le_bytes());
        }
        Ok(Self {
            field,
            schedule,
            forcings,
            channels,
            coarse_frames,
            coarse_len,
            steps_per_stage: steps_total / k_total,
            lineage: h.finalize().into(),
        })
    }

    pub fn steps_per_stage(&self) -> usize {
        self.steps_per_stage
    }

    pub fn coarse_windows(&self) -> usize {
        self.forcings.time() / self.coarse_len
    }

    pub fn geometry(&self, path: &DeltaPath, k: usize) -> Result<StageGeometry> {
        stage_geometry(self.schedule, path, k, self.coarse_frames)
    }

    /// Offset, in finest frames, of the window selected by `window_path`.
    fn window_offset(&self, path: &DeltaPath, window_path: &[usize]) -> usize {
        let mut offset = window_path[0] * self.coarse_len;
        let mut funnels = window_path[1..].iter();
        for k in (0..self.schedule.num_stages() - 1).rev() {
            if path.is_temporal(k) {
                match funnels.next() {
                    Some(i) => offset += i * self.schedule.cumulative(k + 1).r_t,
                    None => break,
                }
            }
        }
        offset
    }

    fn base_cond(&self, geom: &StageGeometry, offset: usize) -> Result<ConditioningBundle> {
        let f = self.forcings.time_range(offset, geom.window_len)?;
        Ok(ConditioningBundle {
            t: geom.segment_start,
            segment: geom.segment(),
            stage: geom.stage,
            timescale: geom.timescale_stage,
            window_offset: offset,
            forcings: downsample(&f, geom.latent_factors)?,
        })
    }

    fn lineage_rng(&self, seed: u64, member: usize, path: &DeltaPath, k: usize, window_path: &[usize], what: &str) -> SpfRng {
        let flags: String = path.flags().iter().map(|&d| if d { '1' } else { '0' }).collect();
        let wp: Vec<String> = window_path.iter().map(|i| i.to_string()).collect();
        substream(
            seed,
            &["sample", &member.to_string(), what, &k.to_string(), &flags, &wp.join("/")],
        )
    }

    /// Latent at the end of stage `k` for the window `window_path`
    /// (coarse-window index plus one funnel choice per temporal jump above
    /// `k`).
    #[allow(clippy::too_many_arguments)]
    pub fn stage_end(
        &self,
        seed: u64,
        member: usize,
        path: &DeltaPath,
        plans: &[JumpPlan],
        k: usize,
        window_path: &[usize],
        cache: Option<&LatentCache>,
        stats: &mut SampleStats,
    ) -> Result<FieldGrid> {
        let key = CacheKey {
            seed,
            member,
            stage: k,
            delta: path.flags().to_vec(),
            window_path: window_path.to_vec(),
        };
        if let Some(c) = cache {
            match c.get(&key, &self.lineage) {
                Lookup::Hit(x) => {
                    stats.cache_hits += 1;
                    return Ok(x);
                }
                Lookup::Mismatch => {
                    stats.cache_mismatches += 1;
                    warn!("latent cache lineage mismatch at stage {k} window {window_path:?}; recomputing");
                }
                Lookup::Miss => {}
            }
        }

        let geom = self.geometry(path, k)?;
        let offset = self.window_offset(path, window_path);
        let base = self.base_cond(&geom, offset)?;
        let coarsest = self.schedule.num_stages() - 1;
        let start = if k == coarsest {
            let f = &base.forcings;
            let mut x = FieldGrid::zeros(self.channels, f.time(), f.lat_degrees().to_vec(), f.n_lon())?;
            let mut rng = self.lineage_rng(seed, member, path, k, window_path, "init");
            fill_normal(&mut rng, x.data_mut());
            x
        } else {
            let plan = &plans[coarsest - 1 - k];
            debug_assert_eq!(plan.to_stage, k);
            let (parent_path, plan) = if path.is_temporal(k) {
                let (last, parent) = window_path
                    .split_last()
                    .ok_or_else(|| invalid("temporal jump without a funnel choice"))?;
                let mut p = plan.clone();
                p.funnel = Some(vec![*last]);
                (parent, p)
            } else {
                (window_path, plan.clone())
            };
            let parent = self.stage_end(seed, member, path, plans, k + 1, parent_path, cache, stats)?;
            let mut rng = self.lineage_rng(seed, member, path, k, window_path, "jump");
            apply_jump(&parent, &plan, &mut rng)?
        };
        let end = euler_stage(self.field, &start, &base, self.steps_per_stage)?;
        stats.record_stage(k, self.steps_per_stage);
        if let Some(c) = cache {
            c.insert(key, self.lineage, end.clone());
        }
        Ok(end)
    }

    /// Clean sample of one window at the timescale of `path`'s target stage.
    pub fn sample_window(
        &self,
        seed: u64,
        member: usize,
        path: &DeltaPath,
        window_path: &[usize],
        cache: Option<&LatentCache>,
        stats: &mut SampleStats,
    ) -> Result<FieldGrid> {
        let funnels = &window_path[1..];
        if window_path.is_empty() || window_path[0] >= self.coarse_windows() {
            return Err(invalid(format!(
                "window path {window_path:?} does not select one of {} coarse windows",
                self.coarse_windows()
            )));
        }
        if funnels.len() != path.temporal_jumps() {
            return Err(invalid(format!(
                "{} funnel choices for {} temporal jumps",
                funnels.len(),
                path.temporal_jumps()
            )));
        }
        let plans = plan_jumps(self.schedule, path, funnels, self.coarse_frames)?;
        self.stage_end(seed, member, path, &plans, 0, window_path, cache, stats)
    }

    /// Every window path of `path`, in time order.
    pub fn window_paths(&self, path: &DeltaPath) -> Result<Vec<Vec<usize>>> {
        let mut radices = Vec::new();
        for k in (0..self.schedule.num_stages() - 1).rev() {
            if path.is_temporal(k) {
                radices.push(self.geometry(path, k + 1)?.frames);
            }
        }
        let mut out: Vec<Vec<usize>> = (0..self.coarse_windows()).map(|w| vec![w]).collect();
        for r in radices {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..r).map(move |i| {
                        let mut q = p.clone();
                        q.push(i);
                        q
                    })
                })
                .collect();
        }
        Ok(out)
    }

    /// The whole forcing span at the timescale of `path`'s target stage,
    /// window by window. With a cache, coarse latents are computed once and
    /// every finer window resumes from them.
    pub fn sample_long_sequence(
        &self,
        seed: u64,
        member: usize,
        path: &DeltaPath,
        cache: Option<&LatentCache>,
        stats: &mut SampleStats,
    ) -> Result<FieldGrid> {
        let windows = self
            .window_paths(path)?
            .iter()
            .map(|wp| self.sample_window(seed, member, path, wp, cache, stats))
            .collect::<Result<Vec<_>>>()?;
        FieldGrid::concat_time(&windows)
    }
}

/// Draw `request.ensemble` members of one window. Members use independent
/// noise lineages and share the conditioning.
pub fn sample(
    field: &dyn VelocityField,
    schedule: &PyramidSchedule,
    forcings: &FieldGrid,
    channels: usize,
    request: &SampleRequest,
) -> Result<(Vec<FieldGrid>, SampleStats)> {
    if request.ensemble == 0 {
        return Err(invalid("ensemble size must be at least 1"));
    }
    let coarse_frames = schedule.stage(schedule.coarsest()).frames;
    let sampler = Sampler::new(field, schedule, forcings, channels, coarse_frames, request.steps_total)?;
    let path = DeltaPath::for_target_stage(schedule.num_stages(), request.target_stage)?;
    let mut window_path = vec![request.coarse_window];
    window_path.extend_from_slice(&request.period);
    let mut stats = SampleStats::default();
    let members = (0..request.ensemble)
        .map(|m| sampler.sample_window(request.seed, m, &path, &window_path, None, &mut stats))
        .collect::<Result<Vec<_>>>()?;
    Ok((members, stats))
}

/// Model evaluations of generating the whole span at `target_stage`, with
/// and without caching, counted from the stage plan alone.
pub fn planned_evals(
    schedule: &PyramidSchedule,
    target_stage: usize,
    coarse_windows: usize,
    coarse_frames: usize,
    steps_total: usize,
) -> Result<(u64, u64)> {
    let k_total = schedule.num_stages();
    let path = DeltaPath::for_target_stage(k_total, target_stage)?;
    let per_stage = (steps_total / k_total) as u64;
    // Number of distinct window paths reaching each stage.
    let mut windows_at = vec![coarse_windows as u64; k_total];
    for k in (0..k_total - 1).rev() {
        windows_at[k] = windows_at[k + 1];
        if path.is_temporal(k) {
            windows_at[k] *= stage_geometry(schedule, &path, k + 1, coarse_frames)?.frames as u64;
        }
    }
    let cached = windows_at.iter().map(|w| w * per_stage).sum();
    let uncached = windows_at[0] * per_stage * k_total as u64;
    Ok((cached, uncached))
}

/// One record of the runtime comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub timescale: String,
    pub span: usize,
    pub cached: bool,
    pub model_evals: u64,
    pub planned_evals: u64,
    pub wall_ms: u64,
}

/// Generate the full span at every timescale, with and without the latent
/// cache, and report evaluation counts and wall time.
pub fn bench(
    field: &dyn VelocityField,
    schedule: &PyramidSchedule,
    forcings: &FieldGrid,
    channels: usize,
    steps_total: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    let coarse_frames = schedule.stage(schedule.coarsest()).frames;
    let sampler = Sampler::new(field, schedule, forcings, channels, coarse_frames, steps_total)?;
    let mut out = Vec::new();
    for target in (0..schedule.num_stages()).rev() {
        let path = DeltaPath::for_target_stage(schedule.num_stages(), target)?;
        let (p_cached, p_uncached) = planned_evals(schedule, target, sampler.coarse_windows(), coarse_frames, steps_total)?;
        for cached in [true, false] {
            let cache = LatentCache::new(4096);
            let mut stats = SampleStats::default();
            let start = Instant::now();
            let x = sampler.sample_long_sequence(seed, 0, &path, cached.then_some(&cache), &mut stats)?;
            out.push(BenchRecord {
                timescale: schedule.stage(target).timescale_label.clone(),
                span: x.time(),
                cached,
                model_evals: stats.model_evals,
                planned_evals: if cached { p_cached } else { p_uncached },
                wall_ms: start.elapsed().as_millis() as u64,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::regular_latitudes;

    /// Cheap deterministic field that depends on the state, time, stage,
    /// window and forcings.
    struct Toy;

    impl VelocityField for Toy {
        fn velocity(&self, x: &FieldGrid, cond: &ConditioningBundle) -> Result<FieldGrid> {
            let f = cond.forcings.mean();
            let shift = 0.1 * (cond.stage + 1) as f64 + 1e-4 * cond.window_offset as f64 + 0.01 * f + cond.t;
            Ok(x.with_data(x.data().iter().map(|v| -0.5 * v + shift).collect())?)
        }
    }

    struct Constant(f64);

    impl VelocityField for Constant {
        fn velocity(&self, x: &FieldGrid, _: &ConditioningBundle) -> Result<FieldGrid> {
            Ok(x.with_data(vec![self.0; x.len()])?)
        }
    }

    struct TimeRecorder(Mutex<Vec<f64>>);

    impl VelocityField for TimeRecorder {
        fn velocity(&self, x: &FieldGrid, cond: &ConditioningBundle) -> Result<FieldGrid> {
            self.0.lock().unwrap().push(cond.t);
            Ok(x.zeros_like())
        }
    }

    fn forcings(months: usize) -> FieldGrid {
        let mut f = FieldGrid::zeros(2, months, regular_latitudes(4), 4).unwrap();
        for (i, v) in f.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        f
    }

    fn cond(frames: usize, segment: (f64, f64)) -> ConditioningBundle {
        ConditioningBundle {
            t: segment.0,
            segment,
            stage: 0,
            timescale: 0,
            window_offset: 0,
            forcings: FieldGrid::zeros(2, frames, regular_latitudes(2), 2).unwrap(),
        }
    }

    #[test]
    fn constant_field_moves_by_velocity() {
        let mut x = FieldGrid::zeros(2, 3, regular_latitudes(2), 2).unwrap();
        fill_normal(&mut substream(1, &[]), x.data_mut());
        for n in [1, 7] {
            let y = euler_stage(&Constant(0.25), &x, &cond(3, (0.2, 0.6)), n).unwrap();
            for (a, b) in y.data().iter().zip(x.data()) {
                assert!((a - b - 0.25).abs() < 1e-12);
            }
        }
        assert!(euler_stage(&Constant(0.0), &x, &cond(3, (0.0, 1.0)), 0).is_err());
    }

    #[test]
    fn euler_passes_absolute_time() {
        let rec = TimeRecorder(Mutex::new(Vec::new()));
        let x = FieldGrid::zeros(1, 1, regular_latitudes(1), 1).unwrap();
        euler_stage(&rec, &x, &cond(1, (0.2, 0.6)), 4).unwrap();
        let ts = rec.0.into_inner().unwrap();
        let want = [0.2, 0.3, 0.4, 0.5];
        for (a, b) in ts.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn steps_split_evenly_over_stages() {
        let s = PyramidSchedule::default_climate();
        let f = forcings(960);
        assert_eq!(Sampler::new(&Toy, &s, &f, 2, 8, 90).unwrap().steps_per_stage(), 30);
        assert!(Sampler::new(&Toy, &s, &f, 2, 8, 91).is_err());
        assert!(Sampler::new(&Toy, &s, &forcings(900), 2, 8, 90).is_err());
    }

    #[test]
    fn direct_sampling_has_native_frame_counts() {
        let s = PyramidSchedule::default_climate();
        let f = forcings(960);
        // Space is always refined to the finest grid; only time stops early.
        for (target, period, frames) in [(2, vec![], 8), (1, vec![3], 10), (0, vec![3, 4], 12)] {
            let req = SampleRequest {
                target_stage: target,
                coarse_window: 0,
                period,
                ensemble: 2,
                steps_total: 6,
                seed: 9,
            };
            let (ens, stats) = sample(&Toy, &s, &f, 2, &req).unwrap();
            assert_eq!(ens.len(), 2);
            assert_eq!(ens[0].shape(), (2, frames, 4, 4));
            assert_ne!(ens[0], ens[1]);
            assert_eq!(stats.model_evals, 2 * 3 * 2);
            let (again, _) = sample(&Toy, &s, &f, 2, &req).unwrap();
            assert_eq!(again, ens);
        }
    }

    #[test]
    fn bad_window_paths_are_rejected() {
        let s = PyramidSchedule::default_climate();
        let f = forcings(960);
        let sampler = Sampler::new(&Toy, &s, &f, 2, 8, 3).unwrap();
        let path = DeltaPath::full(3);
        let mut st = SampleStats::default();
        assert!(sampler.sample_window(0, 0, &path, &[1, 0, 0], None, &mut st).is_err());
        assert!(sampler.sample_window(0, 0, &path, &[0, 0], None, &mut st).is_err());
        assert!(sampler.sample_window(0, 0, &path, &[0, 8, 0], None, &mut st).is_err());
        assert!(sampler.sample_window(0, 0, &path, &[0, 0, 10], None, &mut st).is_err());
    }

    #[test]
    fn cached_long_sequence_matches_cold() {
        let s = PyramidSchedule::default_climate();
        let f = forcings(960);
        let sampler = Sampler::new(&Toy, &s, &f, 2, 8, 6).unwrap();
        let path = DeltaPath::full(3);
        assert_eq!(sampler.window_paths(&path).unwrap().len(), 80);
        let cache = LatentCache::new(1024);
        let mut warm = SampleStats::default();
        let a = sampler.sample_long_sequence(4, 0, &path, Some(&cache), &mut warm).unwrap();
        let mut cold = SampleStats::default();
        let b = sampler.sample_long_sequence(4, 0, &path, None, &mut cold).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.time(), 960);
        assert_eq!(warm.stage_runs, vec![80, 8, 1]);
        assert_eq!(cold.stage_runs, vec![80, 80, 80]);
        let (p_cached, p_cold) = planned_evals(&s, 0, 1, 8, 6).unwrap();
        assert_eq!((warm.model_evals, cold.model_evals), (p_cached, p_cold));
        assert_eq!(planned_evals(&s, 0, 1, 8, 90).unwrap(), (2670, 7200));

        // A lineage mismatch recomputes instead of reusing the entry.
        cache.poison();
        let mut again = SampleStats::default();
        let c = sampler.sample_window(4, 0, &path, &[0, 2, 5], Some(&cache), &mut again).unwrap();
        assert_eq!(again.cache_mismatches, 3);
        assert_eq!(again.cache_hits, 0);
        assert_eq!(c.data(), b.time_range(25 * 12, 12).unwrap().data());
    }

    #[test]
    fn cache_evicts_least_recently_used() {
        let cache = LatentCache::new(2);
        let g = FieldGrid::zeros(1, 1, regular_latitudes(1), 1).unwrap();
        let key = |i| CacheKey {
            seed: 0,
            member: 0,
            stage: 0,
            delta: vec![],
            window_path: vec![i],
        };
        cache.insert(key(0), [1; 32], g.clone());
        cache.insert(key(1), [1; 32], g.clone());
        assert!(matches!(cache.get(&key(0), &[1; 32]), Lookup::Hit(_)));
        cache.insert(key(2), [1; 32], g);
        assert_eq!(cache.len(), 2);
        assert!(matches!(cache.get(&key(1), &[1; 32]), Lookup::Miss));
        assert!(matches!(cache.get(&key(0), &[2; 32]), Lookup::Mismatch));
    }
}
