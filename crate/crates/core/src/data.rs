//! Synthetic forcing-to-field scenarios and the on-disk container format.
//!
//! Targets are a temperature-like and a precipitation-like anomaly driven by
//! a global greenhouse-style forcing, a regional aerosol forcing and a
//! seasonal cycle, plus spatially correlated Gaussian internal variability
//! that is independent across months and members. All moments are known in
//! closed form and recorded in the manifest.
//!
//! A container is a directory holding `manifest.json` and one little-endian
//! f32 blob per (scenario, member), laid out `[time][channel][lat][lon]`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SpfError};
use crate::grid::{area_weights, regular_latitudes, FieldGrid};
use crate::rng::{fill_normal, substream};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "spf-container";

pub const TARGET_NAMES: [&str; 2] = ["tas", "pr"];
pub const FORCING_NAMES: [&str; 2] = ["ghg", "aer_season"];
/// Relative internal-variability scale of each target channel.
const NOISE_SCALE: [f64; 2] = [1.0, 0.7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AerosolPulse {
    /// Centre in years from the start of the run.
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: String,
    pub years: usize,
    pub members: usize,
    pub n_lat: usize,
    pub n_lon: usize,
    /// Global forcing at the end of the run.
    pub trend_amplitude: f64,
    /// Share of the quadratic term in the forcing ramp, in `[0, 1]`.
    pub trend_curvature: f64,
    pub seasonal_amplitude: f64,
    pub aerosol_pulses: Vec<AerosolPulse>,
    /// Per-cell standard deviation of monthly internal variability.
    pub noise_std: f64,
    /// Gaussian correlation length in grid cells.
    pub correlation_length: f64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['/', '\\']) {
            return Err(invalid(format!("bad scenario id '{}'", self.id)));
        }
        if self.n_lat % 4 != 0 || self.n_lon % 4 != 0 || self.n_lat == 0 || self.n_lon == 0 {
            return Err(invalid(format!(
                "grid {}x{} must be a positive multiple of 4 in both directions",
                self.n_lat, self.n_lon
            )));
        }
        if self.years == 0 || self.years % 10 != 0 {
            return Err(invalid(format!("years = {} must be a positive multiple of 10", self.years)));
        }
        if self.members == 0 {
            return Err(invalid("at least one member"));
        }
        if !(0.0..=1.0).contains(&self.trend_curvature) {
            return Err(invalid("trend curvature outside [0, 1]"));
        }
        if !(self.noise_std >= 0.0) || !(self.correlation_length > 0.0) {
            return Err(invalid("noise std must be >= 0 and correlation length > 0"));
        }
        if self.aerosol_pulses.iter().any(|p| !(p.width > 0.0)) {
            return Err(invalid("aerosol pulse widths must be positive"));
        }
        Ok(())
    }

    pub fn months(&self) -> usize {
        self.years * 12
    }

    /// Global forcing after `month` months.
    pub fn ghg(&self, month: f64) -> f64 {
        let u = month / self.months() as f64;
        self.trend_amplitude * ((1.0 - self.trend_curvature) * u + self.trend_curvature * u * u)
    }

    /// Amplitude of the regional aerosol forcing after `month` months.
    pub fn aerosol(&self, month: f64) -> f64 {
        let y = month / 12.0;
        self.aerosol_pulses
            .iter()
            .map(|p| p.amplitude * (-0.5 * ((y - p.center) / p.width).powi(2)).exp())
            .sum()
    }
}

/// A training and held-out scenario set on the given grid.
pub fn default_scenarios(n_lat: usize, n_lon: usize, years: usize, train_members: usize, eval_members: usize) -> Vec<(ScenarioSpec, Split)> {
    let base = |id: &str, members, amp, curv, pulses: Vec<(f64, f64, f64)>| ScenarioSpec {
        id: id.into(),
        years,
        members,
        n_lat,
        n_lon,
        trend_amplitude: amp,
        trend_curvature: curv,
        seasonal_amplitude: 2.0,
        aerosol_pulses: pulses
            .into_iter()
            .map(|(c, w, a)| AerosolPulse {
                center: c * years as f64 / 80.0,
                width: w * years as f64 / 80.0,
                amplitude: a,
            })
            .collect(),
        noise_std: 0.6,
        correlation_length: 2.5,
    };
    vec![
        (base("hist-low", train_members, 1.0, 0.3, vec![(15.0, 6.0, 1.0), (45.0, 8.0, 0.6)]), Split::Train),
        (base("ssp-high", train_members, 4.0, 0.5, vec![(20.0, 10.0, 0.5)]), Split::Train),
        (base("ssp-low", train_members, 1.5, 0.0, vec![(30.0, 10.0, 0.8)]), Split::Train),
        (base("ssp-mid", eval_members, 2.5, 0.3, vec![(25.0, 8.0, 0.7)]), Split::Eval),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Target,
    Forcing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub role: Role,
}

/// Closed-form moments of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticMoments {
    /// Per-cell std of monthly internal variability, per target channel.
    pub noise_std: Vec<f64>,
    /// Std of the area-weighted global mean of monthly noise.
    pub global_mean_noise_std_monthly: Vec<f64>,
    /// Std of the area-weighted global mean of yearly-mean noise.
    pub global_mean_noise_std_yearly: Vec<f64>,
    /// Forced area-weighted global mean per year, `[channel][year]`.
    pub forced_global_mean_yearly: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ScenarioDataset {
    pub spec: ScenarioSpec,
    pub split: Split,
    /// One field per member: target channels followed by forcing channels.
    pub members: Vec<FieldGrid>,
    pub moments: AnalyticMoments,
}

impl ScenarioDataset {
    pub fn targets(&self, member: usize) -> Result<FieldGrid> {
        self.members[member].select_channels(0..TARGET_NAMES.len())
    }

    pub fn forcings(&self, member: usize) -> Result<FieldGrid> {
        let c = TARGET_NAMES.len();
        self.members[member].select_channels(c..c + FORCING_NAMES.len())
    }
}

fn lon_degrees(n_lon: usize, j: usize) -> f64 {
    (j as f64 + 0.5) * 360.0 / n_lon as f64
}

fn aerosol_pattern(lat: f64, lon: f64) -> f64 {
    let dlon = ((lon - 100.0 + 540.0) % 360.0) - 180.0;
    (-((lat - 35.0) / 18.0).powi(2)).exp() * (-(dlon / 45.0).powi(2)).exp()
}

fn seasonal(month: usize, lat: f64) -> f64 {
    (2.0 * PI * ((month % 12) as f64 + 0.5) / 12.0).cos() * lat.to_radians().sin()
}

fn temp_pattern(lat: f64) -> f64 {
    1.0 + 0.8 * lat.to_radians().sin().powi(2)
}

fn precip_pattern(lat: f64) -> f64 {
    0.3 + 0.5 * lat.to_radians().cos().powi(2)
}

/// Deterministic part of the scenario: targets and forcings stacked, before
/// internal variability.
pub fn forced_fields(spec: &ScenarioSpec) -> Result<FieldGrid> {
    spec.validate()?;
    let lats = regular_latitudes(spec.n_lat);
    let c_t = TARGET_NAMES.len();
    let mut out = FieldGrid::zeros(c_t + FORCING_NAMES.len(), spec.months(), lats.clone(), spec.n_lon)?;
    for t in 0..spec.months() {
        let mid = t as f64 + 0.5;
        let g = spec.ghg(mid);
        let a = spec.aerosol(mid);
        for (i, &lat) in lats.iter().enumerate() {
            let s = spec.seasonal_amplitude * seasonal(t, lat);
            for j in 0..spec.n_lon {
                let p = aerosol_pattern(lat, lon_degrees(spec.n_lon, j));
                out.set(0, t, i, j, g * temp_pattern(lat) - 1.2 * a * p + s);
                out.set(1, t, i, j, g * precip_pattern(lat) + 0.5 * a * p - 0.5 * s);
                out.set(c_t, t, i, j, g);
                out.set(c_t + 1, t, i, j, a * p + seasonal(t, lat));
            }
        }
    }
    Ok(out)
}

/// Row-normalised smoothing matrix: zero-padded along latitude, periodic
/// along longitude. Rows have unit Euclidean norm so white input keeps unit
/// variance per cell.
fn smoothing_matrix(n: usize, length: f64, periodic: bool) -> Vec<f64> {
    let radius = (3.0 * length).ceil() as isize;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for d in -radius..=radius {
            let j = i as isize + d;
            let j = if periodic {
                j.rem_euclid(n as isize)
            } else if j < 0 || j >= n as isize {
                continue;
            } else {
                j
            } as usize;
            k[i * n + j] += (-(d as f64).powi(2) / (2.0 * length * length)).exp();
        }
        let norm = k[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut k[i * n..(i + 1) * n] {
            *v /= norm;
        }
    }
    k
}

fn gram_total(k: &[f64], n: usize, w: &[f64]) -> f64 {
    // w^T K K^T w
    let mut acc = 0.0;
    for a in 0..n {
        let s: f64 = (0..n).map(|i| w[i] * k[i * n + a]).sum();
        acc += s * s;
    }
    acc
}

pub fn analytic_moments(spec: &ScenarioSpec) -> Result<AnalyticMoments> {
    let forced = forced_fields(spec)?;
    let lats = forced.lat_degrees().to_vec();
    let w = area_weights(&lats)?;
    let kl = smoothing_matrix(spec.n_lat, spec.correlation_length, false);
    let kw = smoothing_matrix(spec.n_lon, spec.correlation_length, true);
    let cells = (spec.n_lat * spec.n_lon) as f64;
    let unit = (gram_total(&kl, spec.n_lat, &w) * gram_total(&kw, spec.n_lon, &vec![1.0; spec.n_lon])).sqrt() / cells;
    let noise_std: Vec<f64> = NOISE_SCALE.iter().map(|s| s * spec.noise_std).collect();
    let monthly: Vec<f64> = noise_std.iter().map(|s| s * unit).collect();
    let yearly: Vec<f64> = monthly.iter().map(|s| s / 12f64.sqrt()).collect();
    let gm = crate::grid::global_means(&forced)?;
    let months = spec.months();
    let forced_yearly = (0..TARGET_NAMES.len())
        .map(|c| {
            (0..spec.years)
                .map(|y| gm[c * months + y * 12..c * months + (y + 1) * 12].iter().sum::<f64>() / 12.0)
                .collect()
        })
        .collect();
    Ok(AnalyticMoments {
        noise_std,
        global_mean_noise_std_monthly: monthly,
        global_mean_noise_std_yearly: yearly,
        forced_global_mean_yearly: forced_yearly,
    })
}

fn correlated_noise(spec: &ScenarioSpec, kl: &[f64], kw: &[f64], out: &mut FieldGrid, member: usize, seed: u64) {
    let (h, w) = (spec.n_lat, spec.n_lon);
    let mut white = vec![0.0; h * w];
    let mut tmp = vec![0.0; h * w];
    for c in 0..TARGET_NAMES.len() {
        let std = NOISE_SCALE[c] * spec.noise_std;
        let mut rng = substream(seed, &["noise", &spec.id, &member.to_string(), TARGET_NAMES[c]]);
        for t in 0..spec.months() {
            fill_normal(&mut rng, &mut white);
            // tmp = white * Kw^T
            for i in 0..h {
                for j in 0..w {
                    tmp[i * w + j] = (0..w).map(|b| white[i * w + b] * kw[j * w + b]).sum();
                }
            }
            let plane = out.plane_mut(c, t);
            for i in 0..h {
                for j in 0..w {
                    let v: f64 = (0..h).map(|a| kl[i * h + a] * tmp[a * w + j]).sum();
                    plane[i * w + j] += std * v;
                }
            }
        }
    }
}

/// Generate all members of one scenario. The forced component is shared by
/// every member; internal variability comes from a per-member stream.
/// Values are rounded to f32 so the in-memory dataset equals its stored form.
pub fn generate(spec: &ScenarioSpec, split: Split, seed: u64) -> Result<ScenarioDataset> {
    let forced = forced_fields(spec)?;
    let kl = smoothing_matrix(spec.n_lat, spec.correlation_length, false);
    let kw = smoothing_matrix(spec.n_lon, spec.correlation_length, true);
    let mut members = Vec::with_capacity(spec.members);
    for m in 0..spec.members {
        let mut field = forced.clone();
        if spec.noise_std > 0.0 {
            correlated_noise(spec, &kl, &kw, &mut field, m, seed);
        }
        for v in field.data_mut() {
            *v = *v as f32 as f64;
        }
        members.push(field);
    }
    Ok(ScenarioDataset {
        spec: spec.clone(),
        split,
        members,
        moments: analytic_moments(spec)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerDims {
    pub time: usize,
    pub n_lat: usize,
    pub n_lon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub id: String,
    pub split: Split,
    pub members: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ScenarioSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moments: Option<AnalyticMoments>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Timescale label of the frames.
    pub timescale: String,
    pub dims: ContainerDims,
    pub variables: Vec<Variable>,
    pub latitudes: Vec<f64>,
    pub scenarios: Vec<ScenarioEntry>,
    pub provenance: BTreeMap<String, String>,
}

impl Manifest {
    pub fn channels(&self) -> usize {
        self.variables.len()
    }

    pub fn target_channels(&self) -> Vec<usize> {
        self.variables
            .iter()
            .enumerate()
            .filter(|(_, v)| v.role == Role::Target)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn scenario(&self, id: &str) -> Result<&ScenarioEntry> {
        self.scenarios
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| invalid(format!("unknown scenario '{id}'")))
    }

    fn canonicalize(&mut self) {
        self.scenarios.sort_by(|a, b| a.id.cmp(&b.id));
        for s in &mut self.scenarios {
            s.members.sort_unstable();
            s.members.dedup();
        }
    }
}

/// Manifest plus one field (all variables stacked as channels) per
/// (scenario, member).
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub manifest: Manifest,
    pub fields: BTreeMap<(String, usize), FieldGrid>,
}

pub fn blob_name(scenario: &str, member: usize) -> String {
    format!("{scenario}.m{member:03}.f32")
}

pub fn dataset_variables() -> Vec<Variable> {
    TARGET_NAMES
        .iter()
        .map(|n| Variable {
            name: n.to_string(),
            role: Role::Target,
        })
        .chain(FORCING_NAMES.iter().map(|n| Variable {
            name: n.to_string(),
            role: Role::Forcing,
        }))
        .collect()
}

impl Container {
    /// Build a container from generated scenarios that share a grid.
    pub fn from_datasets(sets: &[ScenarioDataset], provenance: BTreeMap<String, String>) -> Result<Self> {
        let first = sets.first().ok_or_else(|| invalid("no scenarios"))?;
        let mut fields = BTreeMap::new();
        let mut scenarios = Vec::new();
        for s in sets {
            if (s.spec.n_lat, s.spec.n_lon, s.spec.months())
                != (first.spec.n_lat, first.spec.n_lon, first.spec.months())
            {
                return Err(invalid("scenarios in one container must share grid and length"));
            }
            for (m, f) in s.members.iter().enumerate() {
                fields.insert((s.spec.id.clone(), m), f.clone());
            }
            scenarios.push(ScenarioEntry {
                id: s.spec.id.clone(),
                split: s.split,
                members: (0..s.members.len()).collect(),
                spec: Some(s.spec.clone()),
                moments: Some(s.moments.clone()),
            });
        }
        let mut manifest = Manifest {
            format: FORMAT.into(),
            version: 1,
            timescale: "monthly".into(),
            dims: ContainerDims {
                time: first.spec.months(),
                n_lat: first.spec.n_lat,
                n_lon: first.spec.n_lon,
            },
            variables: dataset_variables(),
            latitudes: first.members[0].lat_degrees().to_vec(),
            scenarios,
            provenance,
        };
        manifest.canonicalize();
        Ok(Self { manifest, fields })
    }

    /// Container of sampled fields: only target variables.
    pub fn from_samples(
        scenario: &str,
        timescale: &str,
        members: Vec<FieldGrid>,
        provenance: BTreeMap<String, String>,
    ) -> Result<Self> {
        let first = members.first().ok_or_else(|| invalid("no members"))?;
        let (c, t, h, w) = first.shape();
        if c != TARGET_NAMES.len() {
            return Err(invalid(format!("samples have {c} channels, expected {}", TARGET_NAMES.len())));
        }
        let mut fields = BTreeMap::new();
        for (m, f) in members.iter().enumerate() {
            first.ensure_same_shape(f, "sample member")?;
            fields.insert((scenario.to_string(), m), f.clone());
        }
        Ok(Self {
            manifest: Manifest {
                format: FORMAT.into(),
                version: 1,
                timescale: timescale.into(),
                dims: ContainerDims {
                    time: t,
                    n_lat: h,
                    n_lon: w,
                },
                variables: dataset_variables().into_iter().filter(|v| v.role == Role::Target).collect(),
                latitudes: first.lat_degrees().to_vec(),
                scenarios: vec![ScenarioEntry {
                    id: scenario.into(),
                    split: Split::Eval,
                    members: (0..members.len()).collect(),
                    spec: None,
                    moments: None,
                }],
                provenance,
            },
            fields,
        })
    }

    /// Rebuild a generated scenario; needs the spec and moments recorded by
    /// `from_datasets`.
    pub fn dataset(&self, scenario: &str) -> Result<ScenarioDataset> {
        let entry = self.manifest.scenario(scenario)?;
        let (spec, moments) = match (&entry.spec, &entry.moments) {
            (Some(s), Some(m)) => (s.clone(), m.clone()),
            _ => return Err(invalid(format!("scenario '{scenario}' carries no generator record"))),
        };
        let members = entry
            .members
            .iter()
            .map(|&m| self.field(scenario, m).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(ScenarioDataset {
            spec,
            split: entry.split,
            members,
            moments,
        })
    }

    pub fn field(&self, scenario: &str, member: usize) -> Result<&FieldGrid> {
        self.fields
            .get(&(scenario.to_string(), member))
            .ok_or_else(|| invalid(format!("no member {member} of scenario '{scenario}'")))
    }

    pub fn targets(&self, scenario: &str, member: usize) -> Result<FieldGrid> {
        let f = self.field(scenario, member)?;
        let idx = self.manifest.target_channels();
        select(f, &idx)
    }

    pub fn forcings(&self, scenario: &str, member: usize) -> Result<FieldGrid> {
        let f = self.field(scenario, member)?;
        let idx: Vec<usize> = self
            .manifest
            .variables
            .iter()
            .enumerate()
            .filter(|(_, v)| v.role == Role::Forcing)
            .map(|(i, _)| i)
            .collect();
        select(f, &idx)
    }
}

fn select(f: &FieldGrid, idx: &[usize]) -> Result<FieldGrid> {
    let parts: Vec<FieldGrid> = idx.iter().map(|&i| f.select_channels(i..i + 1)).collect::<Result<_>>()?;
    let refs: Vec<&FieldGrid> = parts.iter().collect();
    FieldGrid::concat_channels(&refs)
}

fn format_err(path: &Path, reason: impl Into<String>) -> SpfError {
    SpfError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write_container(container: &Container, dir: &Path) -> Result<()> {
    let mut manifest = container.manifest.clone();
    manifest.canonicalize();
    let dims = &manifest.dims;
    fs::create_dir_all(dir)?;
    for s in &manifest.scenarios {
        for &m in &s.members {
            let f = container
                .fields
                .get(&(s.id.clone(), m))
                .ok_or_else(|| invalid(format!("manifest lists {}/{m} but no field is present", s.id)))?;
            if f.shape() != (manifest.variables.len(), dims.time, dims.n_lat, dims.n_lon) {
                return Err(invalid(format!("field {}/{m} has shape {:?}", s.id, f.shape())));
            }
            let (c, t, h, w) = f.shape();
            let mut bytes = Vec::with_capacity(c * t * h * w * 4);
            for ti in 0..t {
                for ci in 0..c {
                    for v in f.plane(ci, ti) {
                        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                }
            }
            fs::write(dir.join(blob_name(&s.id, m)), bytes)?;
        }
    }
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn read_container(dir: &Path) -> Result<Container> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&mpath)?)?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(format_err(&mpath, format!("unsupported format {} v{}", manifest.format, manifest.version)));
    }
    let d = &manifest.dims;
    if manifest.latitudes.len() != d.n_lat {
        return Err(format_err(&mpath, format!("{} latitudes for {} rows", manifest.latitudes.len(), d.n_lat)));
    }
    if manifest.variables.is_empty() {
        return Err(format_err(&mpath, "no variables"));
    }
    let c = manifest.variables.len();
    let plane = d.n_lat * d.n_lon;
    let mut fields = BTreeMap::new();
    for s in &manifest.scenarios {
        for &m in &s.members {
            let path: PathBuf = dir.join(blob_name(&s.id, m));
            let bytes = fs::read(&path)?;
            let expected = (c * d.time * plane * 4) as u64;
            if bytes.len() as u64 != expected {
                return Err(SpfError::BlobLength {
                    path,
                    expected,
                    actual: bytes.len() as u64,
                });
            }
            let mut data = vec![0.0; c * d.time * plane];
            for (k, chunk) in bytes.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
                let q = k % plane;
                let ci = (k / plane) % c;
                let ti = k / (plane * c);
                data[(ci * d.time + ti) * plane + q] = v;
            }
            let f = FieldGrid::new(c, d.time, manifest.latitudes.clone(), d.n_lon, data)
                .map_err(|e| format_err(&path, e.to_string()))?;
            fields.insert((s.id.clone(), m), f);
        }
    }
    Ok(Container { manifest, fields })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{downsample, global_means, ResampleFactors};

    fn small_spec(id: &str, members: usize) -> ScenarioSpec {
        let mut s = default_scenarios(8, 8, 10, members, members)
            .into_iter()
            .find(|(s, _)| s.id == "ssp-high")
            .unwrap()
            .0;
        s.id = id.into();
        s
    }

    #[test]
    fn invalid_specs_rejected() {
        let good = small_spec("a", 1);
        assert!(good.validate().is_ok());
        for f in [
            |s: &mut ScenarioSpec| s.n_lat = 6,
            |s: &mut ScenarioSpec| s.years = 15,
            |s: &mut ScenarioSpec| s.members = 0,
            |s: &mut ScenarioSpec| s.id = "a/b".into(),
            |s: &mut ScenarioSpec| s.correlation_length = 0.0,
        ] {
            let mut s = good.clone();
            f(&mut s);
            assert!(s.validate().is_err());
        }
    }

    #[test]
    fn unforced_noise_free_is_pure_seasonal_cycle() {
        let mut s = small_spec("quiet", 1);
        s.noise_std = 0.0;
        s.trend_amplitude = 0.0;
        s.aerosol_pulses.clear();
        let d = generate(&s, Split::Train, 1).unwrap();
        let t = d.targets(0).unwrap();
        let yearly = downsample(&t, ResampleFactors::new(1, 1, 12).unwrap()).unwrap();
        assert!(yearly.data().iter().all(|v| v.abs() < 1e-6));
        // The seasonal cycle itself is present.
        assert!(t.data().iter().any(|v| v.abs() > 0.5));
    }

    #[test]
    fn members_share_forced_part_only() {
        let s = small_spec("pair", 2);
        let d = generate(&s, Split::Train, 3).unwrap();
        assert_eq!(d.forcings(0).unwrap(), d.forcings(1).unwrap());
        assert_ne!(d.targets(0).unwrap(), d.targets(1).unwrap());
        let again = generate(&s, Split::Train, 3).unwrap();
        assert_eq!(again.members, d.members);
    }

    #[test]
    fn smoothing_keeps_unit_variance() {
        for periodic in [false, true] {
            let k = smoothing_matrix(10, 2.0, periodic);
            for i in 0..10 {
                let n: f64 = k[i * 10..(i + 1) * 10].iter().map(|v| v * v).sum();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decadal_means_track_forced_trend() {
        let s = small_spec("trend", 1);
        let d = generate(&s, Split::Train, 5).unwrap();
        let gm = global_means(&d.targets(0).unwrap()).unwrap();
        let months = s.months();
        for c in 0..2 {
            let emp: f64 = gm[c * months..(c + 1) * months].iter().sum::<f64>() / months as f64;
            let ana: f64 = d.moments.forced_global_mean_yearly[c].iter().sum::<f64>() / s.years as f64;
            let sd = d.moments.global_mean_noise_std_monthly[c] / (months as f64).sqrt();
            assert!((emp - ana).abs() < 3.0 * sd + 1e-6, "channel {c}: {emp} vs {ana} (sd {sd})");
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let sets = vec![generate(&small_spec("a", 2), Split::Train, 1).unwrap()];
        let c = Container::from_datasets(&sets, BTreeMap::new()).unwrap();
        write_container(&c, dir.path()).unwrap();
        let back = read_container(dir.path()).unwrap();
        assert_eq!(back, c);
        let dir2 = tempfile::tempdir().unwrap();
        write_container(&back, dir2.path()).unwrap();
        for f in [MANIFEST_FILE.to_string(), blob_name("a", 0), blob_name("a", 1)] {
            assert_eq!(fs::read(dir.path().join(&f)).unwrap(), fs::read(dir2.path().join(&f)).unwrap());
        }
    }

    #[test]
    fn truncated_blob_reports_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let sets = vec![generate(&small_spec("a", 1), Split::Train, 1).unwrap()];
        write_container(&Container::from_datasets(&sets, BTreeMap::new()).unwrap(), dir.path()).unwrap();
        let blob = dir.path().join(blob_name("a", 0));
        let len = fs::metadata(&blob).unwrap().len();
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 10]).unwrap();
        match read_container(dir.path()) {
            Err(SpfError::BlobLength { expected, actual, .. }) => {
                assert_eq!(expected, len);
                assert_eq!(actual, len - 10);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_member_order_is_canonical() {
        let sets = vec![
            generate(&small_spec("b", 3), Split::Train, 1).unwrap(),
            generate(&small_spec("a", 1), Split::Train, 1).unwrap(),
        ];
        let c = Container::from_datasets(&sets, BTreeMap::new()).unwrap();
        let mut shuffled = c.clone();
        shuffled.manifest.scenarios.reverse();
        shuffled.manifest.scenarios[0].members = vec![2, 0, 1];
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_container(&c, d1.path()).unwrap();
        write_container(&shuffled, d2.path()).unwrap();
        assert_eq!(
            fs::read(d1.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(d2.path().join(MANIFEST_FILE)).unwrap()
        );
    }
}
