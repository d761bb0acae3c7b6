//! Field containers and the exact block resampling operators.
//!
//! Downsampling is block mean pooling and upsampling is nearest-neighbour
//! replication. The jump-point renoising relies on this pairing: an
//! upsampled i.i.d. field has all-ones covariance inside every replication
//! block, and mean pooling undoes the replication exactly.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result, SpfError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Channel,
    Time,
    Lat,
    Lon,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Axis::Channel => "channel",
            Axis::Time => "time",
            Axis::Lat => "lat",
            Axis::Lon => "lon",
        };
        f.write_str(name)
    }
}

/// Integer resampling factors along latitude (`r_h`), longitude (`r_w`)
/// and time (`r_t`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResampleFactors {
    pub r_h: usize,
    pub r_w: usize,
    pub r_t: usize,
}

impl ResampleFactors {
    pub const IDENTITY: ResampleFactors = ResampleFactors { r_h: 1, r_w: 1, r_t: 1 };

    pub fn new(r_h: usize, r_w: usize, r_t: usize) -> Result<Self> {
        if r_h == 0 || r_w == 0 || r_t == 0 {
            return Err(invalid(format!(
                "resample factors must be >= 1, got ({r_h}, {r_w}, {r_t})"
            )));
        }
        Ok(Self { r_h, r_w, r_t })
    }

    /// Number of fine cells replicated from one coarse cell.
    pub fn block_size(&self) -> usize {
        self.r_h * self.r_w * self.r_t
    }

    pub fn spatial(&self) -> Self {
        Self { r_t: 1, ..*self }
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self {
            r_h: self.r_h * other.r_h,
            r_w: self.r_w * other.r_w,
            r_t: self.r_t * other.r_t,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.block_size() == 1
    }
}

/// Real-valued fields indexed `(channel, time, lat, lon)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    channels: usize,
    time: usize,
    n_lat: usize,
    n_lon: usize,
    lat_degrees: Vec<f64>,
    data: Vec<f64>,
}

/// Cell-centred latitudes of a regular global grid, south to north.
pub fn regular_latitudes(n_lat: usize) -> Vec<f64> {
    let step = 180.0 / n_lat as f64;
    (0..n_lat).map(|i| -90.0 + (i as f64 + 0.5) * step).collect()
}

impl FieldGrid {
    pub fn new(
        channels: usize,
        time: usize,
        lat_degrees: Vec<f64>,
        n_lon: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let grid = Self::unchecked(channels, time, lat_degrees, n_lon, data)?;
        grid.check_finite("FieldGrid::new")?;
        Ok(grid)
    }

    fn unchecked(
        channels: usize,
        time: usize,
        lat_degrees: Vec<f64>,
        n_lon: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let n_lat = lat_degrees.len();
        if channels == 0 || time == 0 || n_lat == 0 || n_lon == 0 {
            return Err(shape(format!(
                "all dimensions must be >= 1, got ({channels}, {time}, {n_lat}, {n_lon})"
            )));
        }
        if data.len() != channels * time * n_lat * n_lon {
            return Err(shape(format!(
                "data length {} does not match ({channels}, {time}, {n_lat}, {n_lon})",
                data.len()
            )));
        }
        if lat_degrees.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("latitudes must be strictly increasing"));
        }
        Ok(Self {
            channels,
            time,
            n_lat,
            n_lon,
            lat_degrees,
            data,
        })
    }

    pub fn zeros(channels: usize, time: usize, lat_degrees: Vec<f64>, n_lon: usize) -> Result<Self> {
        let len = channels * time * lat_degrees.len() * n_lon;
        Self::unchecked(channels, time, lat_degrees, n_lon, vec![0.0; len])
    }

    /// A zero grid with the same shape and latitudes as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            data: vec![0.0; self.data.len()],
            lat_degrees: self.lat_degrees.clone(),
            ..*self
        }
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::unchecked(self.channels, self.time, self.lat_degrees.clone(), self.n_lon, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn time(&self) -> usize {
        self.time
    }
    pub fn n_lat(&self) -> usize {
        self.n_lat
    }
    pub fn n_lon(&self) -> usize {
        self.n_lon
    }
    pub fn lat_degrees(&self) -> &[f64] {
        &self.lat_degrees
    }
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.channels, self.time, self.n_lat, self.n_lon)
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    pub fn plane_len(&self) -> usize {
        self.n_lat * self.n_lon
    }

    #[inline]
    pub fn index(&self, c: usize, t: usize, i: usize, j: usize) -> usize {
        ((c * self.time + t) * self.n_lat + i) * self.n_lon + j
    }

    pub fn get(&self, c: usize, t: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(c, t, i, j)]
    }

    pub fn set(&mut self, c: usize, t: usize, i: usize, j: usize, v: f64) {
        let idx = self.index(c, t, i, j);
        self.data[idx] = v;
    }

    /// The `(lat, lon)` plane of channel `c` at frame `t`.
    pub fn plane(&self, c: usize, t: usize) -> &[f64] {
        let start = (c * self.time + t) * self.plane_len();
        &self.data[start..start + self.plane_len()]
    }

    pub fn plane_mut(&mut self, c: usize, t: usize) -> &mut [f64] {
        let len = self.plane_len();
        let start = (c * self.time + t) * len;
        &mut self.data[start..start + len]
    }

    pub fn same_shape(&self, other: &FieldGrid) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &FieldGrid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(pos) => Err(SpfError::NonFinite {
                context: format!("{context} (flat index {pos})"),
            }),
        }
    }

    /// `a * self + b * other`, elementwise.
    pub fn lincomb(&self, a: f64, other: &FieldGrid, b: f64) -> Result<FieldGrid> {
        self.ensure_same_shape(other, "lincomb")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        self.with_data(data)
    }

    pub fn sub(&self, other: &FieldGrid) -> Result<FieldGrid> {
        self.lincomb(1.0, other, -1.0)
    }

    pub fn scale(&self, a: f64) -> FieldGrid {
        FieldGrid {
            data: self.data.iter().map(|x| a * x).collect(),
            lat_degrees: self.lat_degrees.clone(),
            ..*self
        }
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &FieldGrid) -> Result<()> {
        self.ensure_same_shape(other, "axpy")?;
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Channels `range` of this grid.
    pub fn select_channels(&self, range: std::ops::Range<usize>) -> Result<FieldGrid> {
        if range.start >= range.end || range.end > self.channels {
            return Err(invalid(format!(
                "channel range {range:?} outside 0..{}",
                self.channels
            )));
        }
        let per = self.time * self.plane_len();
        let data = self.data[range.start * per..range.end * per].to_vec();
        Self::unchecked(range.len(), self.time, self.lat_degrees.clone(), self.n_lon, data)
    }

    /// Stack grids along the channel axis.
    pub fn concat_channels(parts: &[&FieldGrid]) -> Result<FieldGrid> {
        let first = parts.first().ok_or_else(|| invalid("nothing to concatenate"))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if (p.time, p.n_lat, p.n_lon) != (first.time, first.n_lat, first.n_lon) {
                return Err(shape("concat_channels: time/lat/lon differ"));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Self::unchecked(channels, first.time, first.lat_degrees.clone(), first.n_lon, data)
    }

    /// Concatenate grids along the time axis, in order.
    pub fn concat_time(parts: &[FieldGrid]) -> Result<FieldGrid> {
        let first = parts.first().ok_or_else(|| invalid("nothing to concatenate"))?;
        let time: usize = parts.iter().map(|p| p.time).sum();
        for p in parts {
            if (p.channels, p.n_lat, p.n_lon) != (first.channels, first.n_lat, first.n_lon) {
                return Err(shape("concat_time: channel/lat/lon differ"));
            }
        }
        let plane = first.plane_len();
        let mut data = Vec::with_capacity(first.channels * time * plane);
        for c in 0..first.channels {
            for p in parts {
                let per = p.time * plane;
                data.extend_from_slice(&p.data[c * per..(c + 1) * per]);
            }
        }
        Self::unchecked(first.channels, time, first.lat_degrees.clone(), first.n_lon, data)
    }

    /// Contiguous time range `[start, start + len)`.
    pub fn time_range(&self, start: usize, len: usize) -> Result<FieldGrid> {
        let indices: Vec<usize> = (start..start + len).collect();
        slice_time(self, &indices)
    }
}

fn check_divisible(axis: Axis, len: usize, factor: usize) -> Result<()> {
    if len % factor != 0 {
        Err(SpfError::NotDivisible { axis, len, factor })
    } else {
        Ok(())
    }
}

/// Block mean pooling by `f`. Channels are untouched.
pub fn downsample(x: &FieldGrid, f: ResampleFactors) -> Result<FieldGrid> {
    check_divisible(Axis::Time, x.time, f.r_t)?;
    check_divisible(Axis::Lat, x.n_lat, f.r_h)?;
    check_divisible(Axis::Lon, x.n_lon, f.r_w)?;
    if f.is_identity() {
        return Ok(x.clone());
    }
    let (t_out, w_out) = (x.time / f.r_t, x.n_lon / f.r_w);
    let lat: Vec<f64> = x
        .lat_degrees
        .chunks(f.r_h)
        .map(|c| c.iter().sum::<f64>() / f.r_h as f64)
        .collect();
    let mut out = FieldGrid::zeros(x.channels, t_out, lat, w_out)?;
    let inv = 1.0 / f.block_size() as f64;
    for c in 0..x.channels {
        for t in 0..x.time {
            let to = t / f.r_t;
            for i in 0..x.n_lat {
                let io = i / f.r_h;
                let src = &x.data[x.index(c, t, i, 0)..x.index(c, t, i, 0) + x.n_lon];
                let base = out.index(c, to, io, 0);
                let dst = &mut out.data[base..base + w_out];
                for (jo, chunk) in src.chunks_exact(f.r_w).enumerate() {
                    dst[jo] += chunk.iter().sum::<f64>();
                }
            }
        }
    }
    for v in out.data.iter_mut() {
        *v *= inv;
    }
    Ok(out)
}

fn refine_latitudes(lat: &[f64], r: usize) -> Vec<f64> {
    if r == 1 {
        return lat.to_vec();
    }
    let n = lat.len();
    let edges: Vec<f64> = if n == 1 {
        vec![-90.0, 90.0]
    } else {
        let mut e = Vec::with_capacity(n + 1);
        e.push(lat[0] - 0.5 * (lat[1] - lat[0]));
        for w in lat.windows(2) {
            e.push(0.5 * (w[0] + w[1]));
        }
        e.push(lat[n - 1] + 0.5 * (lat[n - 1] - lat[n - 2]));
        e
    };
    let mut out = Vec::with_capacity(n * r);
    for i in 0..n {
        let (lo, hi) = (edges[i], edges[i + 1]);
        for s in 0..r {
            out.push(lo + (s as f64 + 0.5) * (hi - lo) / r as f64);
        }
    }
    out
}

/// Nearest-neighbour replication of every cell into an `r_t x r_h x r_w` block.
pub fn upsample(x: &FieldGrid, f: ResampleFactors) -> Result<FieldGrid> {
    if f.is_identity() {
        return Ok(x.clone());
    }
    let (t_out, h_out, w_out) = (x.time * f.r_t, x.n_lat * f.r_h, x.n_lon * f.r_w);
    let lat = refine_latitudes(&x.lat_degrees, f.r_h);
    let mut out = FieldGrid::zeros(x.channels, t_out, lat, w_out)?;
    for c in 0..x.channels {
        for t in 0..t_out {
            for i in 0..h_out {
                let src_base = x.index(c, t / f.r_t, i / f.r_h, 0);
                let src = &x.data[src_base..src_base + x.n_lon];
                let base = out.index(c, t, i, 0);
                let dst = &mut out.data[base..base + w_out];
                for (chunk, &v) in dst.chunks_exact_mut(f.r_w).zip(src) {
                    chunk.fill(v);
                }
            }
        }
    }
    Ok(out)
}

/// Select frames `indices` (strictly increasing) of every channel.
pub fn slice_time(x: &FieldGrid, indices: &[usize]) -> Result<FieldGrid> {
    if indices.is_empty() {
        return Err(invalid("time slice must select at least one frame"));
    }
    if indices.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("time indices must be strictly increasing"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= x.time) {
        return Err(invalid(format!("time index {bad} outside 0..{}", x.time)));
    }
    let plane = x.plane_len();
    let mut data = Vec::with_capacity(x.channels * indices.len() * plane);
    for c in 0..x.channels {
        for &t in indices {
            data.extend_from_slice(x.plane(c, t));
        }
    }
    FieldGrid::unchecked(x.channels, indices.len(), x.lat_degrees.clone(), x.n_lon, data)
}

/// Cosine-latitude area weights normalised to unit mean.
pub fn area_weights(lat_degrees: &[f64]) -> Result<Vec<f64>> {
    if lat_degrees.is_empty() {
        return Err(invalid("no latitudes"));
    }
    if let Some(bad) = lat_degrees.iter().find(|l| !(l.abs() <= 90.0)) {
        return Err(invalid(format!("latitude {bad} outside [-90, 90]")));
    }
    let raw: Vec<f64> = lat_degrees
        .iter()
        .map(|l| {
            let c = l.to_radians().cos();
            // cos(90 deg) is not exactly zero in floating point.
            if c < 1e-12 {
                0.0
            } else {
                c
            }
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    if !(mean > 0.0) {
        return Err(invalid("area weights vanish at every latitude"));
    }
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

/// Area-weighted spatial mean of every `(channel, frame)` plane, laid out
/// `[channel][time]`.
pub fn global_means(x: &FieldGrid) -> Result<Vec<f64>> {
    let w = area_weights(x.lat_degrees())?;
    let mut out = Vec::with_capacity(x.channels * x.time);
    let denom = x.plane_len() as f64;
    for c in 0..x.channels {
        for t in 0..x.time {
            let s: f64 = x
                .plane(c, t)
                .chunks_exact(x.n_lon)
                .zip(&w)
                .map(|(row, wi)| wi * row.iter().sum::<f64>())
                .sum();
            out.push(s / denom);
        }
    }
    Ok(out)
}
