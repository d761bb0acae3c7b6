//! Area-weighted ensemble scores: bias, RMSE and the unbiased (fair) CRPS.
//!
//! The slice functions take `E` members and one target, each an `I x J`
//! row-major plane, plus one weight per latitude normalised to unit mean.

use rand::Rng;
use serde::Serialize;

use crate::error::{invalid, shape, Result};
use crate::grid::{area_weights, FieldGrid};

fn check_slice(members: &[&[f64]], target: &[f64], weights: &[f64]) -> Result<usize> {
    if members.is_empty() {
        return Err(invalid("ensemble has no members"));
    }
    if weights.is_empty() || target.len() % weights.len() != 0 {
        return Err(shape(format!(
            "{} target values do not form rows for {} latitudes",
            target.len(),
            weights.len()
        )));
    }
    if let Some(m) = members.iter().find(|m| m.len() != target.len()) {
        return Err(shape(format!("member has {} values, target {}", m.len(), target.len())));
    }
    Ok(target.len() / weights.len())
}

fn member_mean(members: &[&[f64]], idx: usize) -> f64 {
    members.iter().map(|m| m[idx]).sum::<f64>() / members.len() as f64
}

pub fn bias(members: &[&[f64]], target: &[f64], weights: &[f64]) -> Result<f64> {
    let n_lon = check_slice(members, target, weights)?;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        for j in 0..n_lon {
            let idx = i * n_lon + j;
            acc += w * (member_mean(members, idx) - target[idx]);
        }
    }
    Ok(acc / target.len() as f64)
}

pub fn rmse(members: &[&[f64]], target: &[f64], weights: &[f64]) -> Result<f64> {
    let n_lon = check_slice(members, target, weights)?;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        for j in 0..n_lon {
            let idx = i * n_lon + j;
            let d = member_mean(members, idx) - target[idx];
            acc += w * d * d;
        }
    }
    Ok((acc / target.len() as f64).sqrt())
}

/// Fair CRPS. With a single member the spread term is dropped and the score
/// is the area-weighted mean absolute error.
pub fn crps(members: &[&[f64]], target: &[f64], weights: &[f64]) -> Result<f64> {
    let n_lon = check_slice(members, target, weights)?;
    let e = members.len();
    let spread_norm = if e > 1 { 1.0 / (2.0 * (e * (e - 1)) as f64) } else { 0.0 };
    let mut vals: Vec<f64> = vec![0.0; e];
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        for j in 0..n_lon {
            let idx = i * n_lon + j;
            let y = target[idx];
            for (v, m) in vals.iter_mut().zip(members) {
                *v = m[idx];
            }
            let skill = vals.iter().map(|x| (x - y).abs()).sum::<f64>() / e as f64;
            let mut spread = 0.0;
            if e > 1 {
                // Sum over ordered pairs via the sorted-rank identity.
                vals.sort_by(|a, b| a.total_cmp(b));
                for (r, x) in vals.iter().enumerate() {
                    spread += x * (2.0 * r as f64 - (e - 1) as f64);
                }
                spread *= 2.0;
            }
            acc += w * (skill - spread_norm * spread);
        }
    }
    Ok(acc / target.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub crps: f64,
    pub rmse: f64,
    pub bias: f64,
}

/// Per-channel scores of an ensemble of fields against a target, computed
/// on every frame and averaged uniformly over frames.
pub fn evaluate_fields(members: &[FieldGrid], target: &FieldGrid) -> Result<Vec<Scores>> {
    if members.is_empty() {
        return Err(invalid("ensemble has no members"));
    }
    for m in members {
        target.ensure_same_shape(m, "ensemble member")?;
    }
    let weights = area_weights(target.lat_degrees())?;
    let (c_total, t_total, _, _) = target.shape();
    let mut out = Vec::with_capacity(c_total);
    for c in 0..c_total {
        let mut s = Scores {
            crps: 0.0,
            rmse: 0.0,
            bias: 0.0,
        };
        for t in 0..t_total {
            let planes: Vec<&[f64]> = members.iter().map(|m| m.plane(c, t)).collect();
            let y = target.plane(c, t);
            s.crps += crps(&planes, y, &weights)?;
            s.rmse += rmse(&planes, y, &weights)?;
            s.bias += bias(&planes, y, &weights)?;
        }
        let inv = 1.0 / t_total as f64;
        out.push(Scores {
            crps: s.crps * inv,
            rmse: s.rmse * inv,
            bias: s.bias * inv,
        });
    }
    Ok(out)
}

/// Forcing-blind reference ensemble: every frame of every member is a
/// randomly drawn frame of the training pool.
pub fn climatology_ensemble<R: Rng + ?Sized>(
    pool: &[FieldGrid],
    members: usize,
    frames: usize,
    rng: &mut R,
) -> Result<Vec<FieldGrid>> {
    let first = pool.first().ok_or_else(|| invalid("empty climatology pool"))?;
    let (c, _, h, w) = first.shape();
    if pool.iter().any(|p| (p.channels(), p.n_lat(), p.n_lon()) != (c, h, w)) {
        return Err(shape("climatology pool fields differ in shape"));
    }
    let total: usize = pool.iter().map(|p| p.time()).sum();
    if total == 0 {
        return Err(invalid("climatology pool has no frames"));
    }
    let mut out = Vec::with_capacity(members);
    for _ in 0..members {
        let mut m = FieldGrid::zeros(c, frames, first.lat_degrees().to_vec(), w)?;
        for t in 0..frames {
            let mut k = rng.random_range(0..total);
            let src = pool
                .iter()
                .find(|p| {
                    if k < p.time() {
                        true
                    } else {
                        k -= p.time();
                        false
                    }
                })
                .expect("index within pool");
            for ch in 0..c {
                m.plane_mut(ch, t).copy_from_slice(src.plane(ch, k));
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// Pearson correlation of two equal-length series.
pub fn correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(shape("correlation needs two equal series of length >= 2"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(invalid("correlation of a constant series"));
    }
    Ok(sab / (saa * sbb).sqrt())
}
