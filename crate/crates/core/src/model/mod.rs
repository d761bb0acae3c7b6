//! Conditional velocity network with exact reverse-mode gradients.
//!
//! A residual convolutional network over (lat, lon), applied to every frame
//! at once. Each block mixes frames with a depthwise temporal convolution and
//! is modulated per frame by an affine transform computed from the flow-time,
//! spatial-scale and timescale embeddings plus pooled forcing means. Forcing
//! maps and `sin(lat)` are concatenated to the latent as input channels.

pub mod checkpoint;
pub mod embed;
pub mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::grid::FieldGrid;
use crate::rng::{normal, substream};
use embed::{sinusoid, FLOW_TIME_SCALE};
use layers::*;

/// Everything the velocity field is conditioned on besides the latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    /// Absolute flow time.
    pub t: f64,
    /// Flow-time segment `[s_k, end]` of the current stage.
    pub segment: (f64, f64),
    pub stage: usize,
    /// Stage whose native timescale the latent carries.
    pub timescale: usize,
    /// Offset of the window in finest-timescale frames.
    pub window_offset: usize,
    /// Forcing channels pooled to the latent's shape.
    pub forcings: FieldGrid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub target_channels: usize,
    pub forcing_channels: usize,
    pub width: usize,
    pub depth: usize,
    /// Width of every sinusoidal code and embedding MLP.
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            target_channels: 2,
            forcing_channels: 2,
            width: 20,
            depth: 2,
            embed_dim: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_channels == 0 || self.width == 0 {
            return Err(invalid("model needs at least one target channel and a positive width"));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(invalid(format!("embedding dimension must be even, got {}", self.embed_dim)));
        }
        Ok(())
    }

    fn input_channels(&self) -> usize {
        self.target_channels + self.forcing_channels + 1
    }

    fn cond_dim(&self) -> usize {
        3 * self.embed_dim + self.forcing_channels
    }
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
    inp: usize,
    out: usize,
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    l1: Lin,
    l2: Lin,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    ci: usize,
    co: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv: Conv,
    tconv: usize,
    tmean: usize,
    film: Lin,
    mix: Conv,
}

#[derive(Debug, Clone)]
struct Layout {
    flow: Mlp,
    scale: Mlp,
    timescale: Mlp,
    stem: Conv,
    blocks: Vec<Block>,
    head: Conv,
}

struct LayoutBuilder {
    segments: Vec<Segment>,
    next: usize,
}

impl LayoutBuilder {
    fn alloc(&mut self, name: String, shape: Vec<usize>) -> usize {
        let len = shape.iter().product();
        let offset = self.next;
        self.segments.push(Segment {
            name,
            offset,
            len,
            shape,
        });
        self.next += len;
        offset
    }

    fn lin(&mut self, name: &str, inp: usize, out: usize) -> Lin {
        Lin {
            w: self.alloc(format!("{name}.weight"), vec![out, inp]),
            b: self.alloc(format!("{name}.bias"), vec![out]),
            inp,
            out,
        }
    }

    fn mlp(&mut self, name: &str, inp: usize, out: usize) -> Mlp {
        Mlp {
            l1: self.lin(&format!("{name}.0"), inp, out),
            l2: self.lin(&format!("{name}.1"), out, out),
        }
    }

    fn conv(&mut self, name: &str, ci: usize, co: usize, taps: usize) -> Conv {
        let shape = if taps == 1 { vec![co, ci] } else { vec![co, ci, 3, 3] };
        Conv {
            w: self.alloc(format!("{name}.weight"), shape),
            b: self.alloc(format!("{name}.bias"), vec![co]),
            ci,
            co,
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<Segment>, usize) {
    let mut b = LayoutBuilder {
        segments: Vec::new(),
        next: 0,
    };
    let e = cfg.embed_dim;
    let w = cfg.width;
    let flow = b.mlp("flow_embed", 2 * e, e);
    let scale = b.mlp("scale_embed", e, e);
    let timescale = b.mlp("timescale_embed", e, e);
    let stem = b.conv("stem", cfg.input_channels(), w, 9);
    let blocks = (0..cfg.depth)
        .map(|i| Block {
            conv: b.conv(&format!("block{i}.conv"), w, w, 9),
            tconv: b.alloc(format!("block{i}.time_mix.weight"), vec![w, 3]),
            tmean: b.alloc(format!("block{i}.window_mix.weight"), vec![w, w]),
            film: b.lin(&format!("block{i}.film"), cfg.cond_dim(), 2 * w),
            mix: b.conv(&format!("block{i}.mix"), w, w, 1),
        })
        .collect();
    let head = b.conv("head", w, cfg.target_channels, 9);
    let total = b.next;
    (
        Layout {
            flow,
            scale,
            timescale,
            stem,
            blocks,
            head,
        },
        b.segments,
        total,
    )
}

#[derive(Debug, Clone)]
pub struct VelocityModel {
    config: ModelConfig,
    params: Vec<f64>,
    segments: Vec<Segment>,
    layout: Layout,
}

struct MlpTape {
    x: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

struct BlockTape {
    a: Vec<f64>,
    cols: Vec<f64>,
    conv_out: Vec<f64>,
    means: Vec<f64>,
    mixed: Vec<f64>,
    film: Vec<f64>,
    modulated: Vec<f64>,
    act: Vec<f64>,
}

/// Intermediate values of one forward pass, consumed by the backward pass.
pub struct Tape {
    dims: Dims,
    cond_raw: Vec<f64>,
    cond_act: Vec<f64>,
    mlps: [MlpTape; 3],
    stem_cols: Vec<f64>,
    blocks: Vec<BlockTape>,
    h_final: Vec<f64>,
    head_cols: Vec<f64>,
}

impl VelocityModel {
    /// Random hidden layers and a zero output layer, so the initial velocity
    /// is exactly zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, segments, total) = build_layout(&config);
        let mut model = Self {
            params: vec![0.0; total],
            config,
            segments,
            layout,
        };
        let mut rng = substream(model.config.seed, &["model-init"]);
        model.init_hidden(&mut rng);
        Ok(model)
    }

    /// Like [`VelocityModel::new`] but with a random output layer too; used
    /// wherever a non-trivial function is needed.
    pub fn new_randomized(config: ModelConfig) -> Result<Self> {
        let mut model = Self::new(config)?;
        let mut rng = substream(model.config.seed, &["model-init", "head"]);
        let h = model.layout.head;
        model.fill_normal(h.w, h.co * h.ci * 9, (1.0 / (h.ci * 9) as f64).sqrt(), &mut rng);
        model.fill_normal(h.b, h.co, 0.1, &mut rng);
        Ok(model)
    }

    /// Rebuild from a configuration and a full parameter vector.
    pub fn from_parts(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (layout, segments, total) = build_layout(&config);
        if params.len() != total {
            return Err(shape(format!(
                "configuration needs {total} parameters, got {}",
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(crate::error::SpfError::NonFinite {
                context: format!("parameter {i}"),
            });
        }
        Ok(Self {
            config,
            params,
            segments,
            layout,
        })
    }

    fn fill_normal<R: Rng + ?Sized>(&mut self, offset: usize, len: usize, std: f64, rng: &mut R) {
        for v in &mut self.params[offset..offset + len] {
            *v = std * normal(rng);
        }
    }

    fn init_hidden<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let l = self.layout.clone();
        for mlp in [l.flow, l.scale, l.timescale] {
            for lin in [mlp.l1, mlp.l2] {
                self.fill_normal(lin.w, lin.inp * lin.out, (1.0 / lin.inp as f64).sqrt(), rng);
            }
        }
        let s = l.stem;
        self.fill_normal(s.w, s.co * s.ci * 9, (2.0 / (s.ci * 9) as f64).sqrt(), rng);
        for b in &l.blocks {
            let c = b.conv;
            self.fill_normal(c.w, c.co * c.ci * 9, (2.0 / (c.ci * 9) as f64).sqrt(), rng);
            for ch in 0..c.co {
                self.params[b.tconv + ch * 3 + 1] = 1.0;
            }
            self.fill_normal(b.tmean, c.co * c.co, 0.1 * (1.0 / c.co as f64).sqrt(), rng);
            let f = b.film;
            self.fill_normal(f.w, f.inp * f.out, 0.1 * (1.0 / f.inp as f64).sqrt(), rng);
            let m = b.mix;
            self.fill_normal(m.w, m.co * m.ci, (1.0 / m.ci as f64).sqrt(), rng);
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    fn p(&self, offset: usize, len: usize) -> &[f64] {
        &self.params[offset..offset + len]
    }

    fn check_inputs(&self, x: &FieldGrid, cond: &ConditioningBundle) -> Result<Dims> {
        let (c, t, h, w) = x.shape();
        if c != self.config.target_channels {
            return Err(shape(format!(
                "latent has {c} channels, model expects {}",
                self.config.target_channels
            )));
        }
        let f = &cond.forcings;
        if f.channels() != self.config.forcing_channels || (f.time(), f.n_lat(), f.n_lon()) != (t, h, w) {
            return Err(shape(format!(
                "forcings {:?} do not match latent {:?}",
                f.shape(),
                x.shape()
            )));
        }
        Ok(Dims { t, h, w })
    }

    fn mlp_forward(&self, m: &Mlp, x: Vec<f64>) -> (Vec<f64>, MlpTape) {
        let p = self;
        let pre = linear_forward(&x, 1, m.l1.inp, m.l1.out, p.p(m.l1.w, m.l1.inp * m.l1.out), p.p(m.l1.b, m.l1.out));
        let act = silu_vec(&pre);
        let out = linear_forward(&act, 1, m.l2.inp, m.l2.out, p.p(m.l2.w, m.l2.inp * m.l2.out), p.p(m.l2.b, m.l2.out));
        (out, MlpTape { x, pre, act })
    }

    fn mlp_backward(&self, m: &Mlp, tape: &MlpTape, dy: &[f64], grad: &mut [f64]) {
        let (l1, l2) = (m.l1, m.l2);
        let dact = {
            let (dw, db) = split_lin(grad, l2);
            linear_backward(&tape.act, 1, l2.inp, l2.out, self.p(l2.w, l2.inp * l2.out), dy, dw, db)
        };
        let mut dpre = vec![0.0; dact.len()];
        silu_backward(&tape.pre, &dact, &mut dpre);
        let (dw, db) = split_lin(grad, l1);
        linear_backward(&tape.x, 1, l1.inp, l1.out, self.p(l1.w, l1.inp * l1.out), &dpre, dw, db);
    }

    /// Embedding of flow time, spatial scale and timescale, concatenated.
    fn embeddings(&self, cond: &ConditioningBundle) -> Result<(Vec<f64>, [MlpTape; 3])> {
        let e = self.config.embed_dim;
        let mut flow_in = sinusoid(cond.t * FLOW_TIME_SCALE, e)?;
        flow_in.extend(sinusoid(cond.segment.1 * FLOW_TIME_SCALE, e)?);
        let (fe, ft) = self.mlp_forward(&self.layout.flow, flow_in);
        let (se, st) = self.mlp_forward(&self.layout.scale, sinusoid(cond.stage as f64, e)?);
        let (te, tt) = self.mlp_forward(&self.layout.timescale, sinusoid(cond.timescale as f64, e)?);
        let mut out = fe;
        out.extend(se);
        out.extend(te);
        Ok((out, [ft, st, tt]))
    }

    /// The scale and timescale embedding vectors on their own.
    pub fn embed_scale_and_timescale(&self, stage: usize, timescale: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let e = self.config.embed_dim;
        let (se, _) = self.mlp_forward(&self.layout.scale, sinusoid(stage as f64, e)?);
        let (te, _) = self.mlp_forward(&self.layout.timescale, sinusoid(timescale as f64, e)?);
        Ok((se, te))
    }

    pub fn forward(&self, x: &FieldGrid, cond: &ConditioningBundle) -> Result<FieldGrid> {
        Ok(self.forward_tape(x, cond)?.0)
    }

    pub fn forward_tape(&self, x: &FieldGrid, cond: &ConditioningBundle) -> Result<(FieldGrid, Tape)> {
        let d = self.check_inputs(x, cond)?;
        let n = d.cols();
        let cfg = &self.config;
        let w = cfg.width;

        let (emb, mlps) = self.embeddings(cond)?;
        let dc = cfg.cond_dim();
        let mut cond_raw = Vec::with_capacity(d.t * dc);
        for t in 0..d.t {
            cond_raw.extend_from_slice(&emb);
            for f in 0..cfg.forcing_channels {
                let plane = cond.forcings.plane(f, t);
                cond_raw.push(plane.iter().sum::<f64>() / plane.len() as f64);
            }
        }
        let cond_act = silu_vec(&cond_raw);

        let mut input = Vec::with_capacity(cfg.input_channels() * n);
        input.extend_from_slice(x.data());
        input.extend_from_slice(cond.forcings.data());
        for _ in 0..d.t {
            for lat in x.lat_degrees() {
                let v = lat.to_radians().sin();
                input.extend(std::iter::repeat(v).take(d.w));
            }
        }

        let s = self.layout.stem;
        let (mut h, stem_cols) = conv3_forward(&input, s.ci, s.co, d, self.p(s.w, s.co * s.ci * 9), self.p(s.b, s.co));

        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for b in &self.layout.blocks {
            let a = h;
            let s1 = silu_vec(&a);
            let c = b.conv;
            let (conv_out, cols) = conv3_forward(&s1, c.ci, c.co, d, self.p(c.w, c.co * c.ci * 9), self.p(c.b, c.co));
            let mut mixed = tconv_forward(&conv_out, w, d, self.p(b.tconv, w * 3));
            let (wide, means) = window_mean_forward(&conv_out, w, d, self.p(b.tmean, w * w));
            for (u, v) in mixed.iter_mut().zip(&wide) {
                *u += v;
            }
            let f = b.film;
            let film = linear_forward(&cond_act, d.t, f.inp, f.out, self.p(f.w, f.inp * f.out), self.p(f.b, f.out));
            let mut modulated = mixed.clone();
            for ch in 0..w {
                for t in 0..d.t {
                    let g = 1.0 + film[t * 2 * w + ch];
                    let beta = film[t * 2 * w + w + ch];
                    let off = (ch * d.t + t) * d.plane();
                    for v in &mut modulated[off..off + d.plane()] {
                        *v = *v * g + beta;
                    }
                }
            }
            let act = silu_vec(&modulated);
            let m = b.mix;
            let delta = conv1_forward(&act, m.ci, m.co, n, self.p(m.w, m.co * m.ci), self.p(m.b, m.co));
            h = a.iter().zip(&delta).map(|(u, v)| u + v).collect();
            blocks.push(BlockTape {
                a,
                cols,
                conv_out,
                means,
                mixed,
                film,
                modulated,
                act,
            });
        }

        let hd = self.layout.head;
        let sh = silu_vec(&h);
        let (out, head_cols) = conv3_forward(&sh, hd.ci, hd.co, d, self.p(hd.w, hd.co * hd.ci * 9), self.p(hd.b, hd.co));
        let out = x.with_data(out)?;
        Ok((
            out,
            Tape {
                dims: d,
                cond_raw,
                cond_act,
                mlps,
                stem_cols,
                blocks,
                h_final: h,
                head_cols,
            },
        ))
    }

    /// Gradient of `<forward(x, cond), cotangent>` with respect to the
    /// parameters.
    pub fn backward(&self, x: &FieldGrid, cond: &ConditioningBundle, cotangent: &FieldGrid) -> Result<Vec<f64>> {
        let (_, tape) = self.forward_tape(x, cond)?;
        let mut grad = vec![0.0; self.params.len()];
        self.backward_tape(&tape, cotangent, &mut grad)?;
        Ok(grad)
    }

    /// Accumulate the parameter gradient of `<output, cotangent>` into `grad`.
    pub fn backward_tape(&self, tape: &Tape, cotangent: &FieldGrid, grad: &mut [f64]) -> Result<()> {
        let d = tape.dims;
        let n = d.cols();
        let w = self.config.width;
        if cotangent.shape() != (self.config.target_channels, d.t, d.h, d.w) {
            return Err(shape(format!("cotangent {:?} does not match output", cotangent.shape())));
        }
        if grad.len() != self.params.len() {
            return Err(shape("gradient buffer has the wrong length"));
        }

        let hd = self.layout.head;
        let dsh = {
            let (dw, db) = split_conv(grad, hd, 9);
            conv3_backward(&tape.head_cols, hd.ci, hd.co, d, self.p(hd.w, hd.co * hd.ci * 9), cotangent.data(), dw, db, true)
                .expect("requested input gradient")
        };
        let mut dh = vec![0.0; w * n];
        silu_backward(&tape.h_final, &dsh, &mut dh);

        let mut dcond_act = vec![0.0; tape.cond_act.len()];
        for (b, bt) in self.layout.blocks.iter().zip(&tape.blocks).rev() {
            let m = b.mix;
            let dact = {
                let (dw, db) = split_conv(grad, m, 1);
                conv1_backward(&bt.act, m.ci, m.co, n, self.p(m.w, m.co * m.ci), &dh, dw, db)
            };
            let mut dmod = vec![0.0; w * n];
            silu_backward(&bt.modulated, &dact, &mut dmod);

            let mut dfilm = vec![0.0; d.t * 2 * w];
            let mut dmixed = dmod.clone();
            for ch in 0..w {
                for t in 0..d.t {
                    let g = 1.0 + bt.film[t * 2 * w + ch];
                    let off = (ch * d.t + t) * d.plane();
                    let mut dg = 0.0;
                    let mut dbeta = 0.0;
                    for q in off..off + d.plane() {
                        dg += dmod[q] * bt.mixed[q];
                        dbeta += dmod[q];
                        dmixed[q] = dmod[q] * g;
                    }
                    dfilm[t * 2 * w + ch] = dg;
                    dfilm[t * 2 * w + w + ch] = dbeta;
                }
            }
            let f = b.film;
            let dca = {
                let (dw, db) = split_lin(grad, f);
                linear_backward(&tape.cond_act, d.t, f.inp, f.out, self.p(f.w, f.inp * f.out), &dfilm, dw, db)
            };
            for (acc, v) in dcond_act.iter_mut().zip(&dca) {
                *acc += v;
            }

            let mut dconv = tconv_backward(&bt.conv_out, w, d, self.p(b.tconv, w * 3), &dmixed, &mut grad[b.tconv..b.tconv + w * 3]);
            let dwide = window_mean_backward(&bt.means, w, d, self.p(b.tmean, w * w), &dmixed, &mut grad[b.tmean..b.tmean + w * w]);
            for (u, v) in dconv.iter_mut().zip(&dwide) {
                *u += v;
            }
            let c = b.conv;
            let ds1 = {
                let (dw, db) = split_conv(grad, c, 9);
                conv3_backward(&bt.cols, c.ci, c.co, d, self.p(c.w, c.co * c.ci * 9), &dconv, dw, db, true)
                    .expect("requested input gradient")
            };
            silu_backward(&bt.a, &ds1, &mut dh);
        }

        let s = self.layout.stem;
        {
            let (dw, db) = split_conv(grad, s, 9);
            conv3_backward(&tape.stem_cols, s.ci, s.co, d, self.p(s.w, s.co * s.ci * 9), &dh, dw, db, false);
        }

        let mut dcond_raw = vec![0.0; dcond_act.len()];
        silu_backward(&tape.cond_raw, &dcond_act, &mut dcond_raw);
        let e = self.config.embed_dim;
        let dc = self.config.cond_dim();
        let mut demb = vec![0.0; 3 * e];
        for t in 0..d.t {
            for (acc, v) in demb.iter_mut().zip(&dcond_raw[t * dc..t * dc + 3 * e]) {
                *acc += v;
            }
        }
        let mlps = [self.layout.flow, self.layout.scale, self.layout.timescale];
        for (i, (m, mt)) in mlps.iter().zip(&tape.mlps).enumerate() {
            self.mlp_backward(m, mt, &demb[i * e..(i + 1) * e], grad);
        }
        Ok(())
    }
}

fn split_lin(grad: &mut [f64], l: Lin) -> (&mut [f64], &mut [f64]) {
    two_ranges(grad, l.w, l.inp * l.out, l.b, l.out)
}

fn split_conv(grad: &mut [f64], c: Conv, taps: usize) -> (&mut [f64], &mut [f64]) {
    two_ranges(grad, c.w, c.co * c.ci * taps, c.b, c.co)
}

/// Two disjoint mutable ranges where the second follows the first.
fn two_ranges(buf: &mut [f64], a: usize, alen: usize, b: usize, blen: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + alen <= b);
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + alen], &mut hi[..blen])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::regular_latitudes;
    use crate::rng::fill_normal;

    fn inputs(t: usize, h: usize, w: usize, seed: u64) -> (FieldGrid, ConditioningBundle) {
        let mut rng = substream(seed, &["inputs"]);
        let mut x = FieldGrid::zeros(2, t, regular_latitudes(h), w).unwrap();
        fill_normal(&mut rng, x.data_mut());
        let mut f = FieldGrid::zeros(2, t, regular_latitudes(h), w).unwrap();
        fill_normal(&mut rng, f.data_mut());
        let cond = ConditioningBundle {
            t: 0.4,
            segment: (1.0 / 3.0, 0.75),
            stage: 1,
            timescale: 1,
            window_offset: 0,
            forcings: f,
        };
        (x, cond)
    }

    fn small() -> ModelConfig {
        ModelConfig {
            width: 6,
            depth: 2,
            embed_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn fresh_model_outputs_zero() {
        let m = VelocityModel::new(small()).unwrap();
        let (x, c) = inputs(3, 4, 6, 1);
        let y = m.forward(&x, &c).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let zero = VelocityModel::from_parts(small(), vec![0.0; m.num_params()]).unwrap();
        assert!(zero.forward(&x, &c).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_stage_shapes() {
        let m = VelocityModel::new_randomized(ModelConfig::default()).unwrap();
        for (t, h, w) in [(1, 6, 9), (8, 6, 9), (10, 12, 18), (12, 24, 36)] {
            let (x, c) = inputs(t, h, w, 2);
            let y = m.forward(&x, &c).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert_eq!(y, m.forward(&x, &c).unwrap());
        }
    }

    #[test]
    fn parameter_budget() {
        let m = VelocityModel::new(ModelConfig::default()).unwrap();
        assert!(m.num_params() > 10_000 && m.num_params() < 1_000_000);
        let covered: usize = m.segments().iter().map(|s| s.len).sum();
        assert_eq!(covered, m.num_params());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = VelocityModel::new(small()).unwrap();
        let (x, mut c) = inputs(3, 4, 6, 3);
        c.forcings = c.forcings.time_range(0, 2).unwrap();
        assert!(m.forward(&x, &c).is_err());
        let bad = FieldGrid::zeros(3, 3, regular_latitudes(4), 6).unwrap();
        let (_, c) = inputs(3, 4, 6, 3);
        assert!(m.forward(&bad, &c).is_err());
    }

    #[test]
    fn forcings_reach_the_output() {
        let m = VelocityModel::new_randomized(small()).unwrap();
        let (x, c) = inputs(3, 4, 6, 4);
        let mut c2 = c.clone();
        for v in c2.forcings.data_mut() {
            *v += 0.5;
        }
        let a = m.forward(&x, &c).unwrap();
        let b = m.forward(&x, &c2).unwrap();
        let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn gradient_is_linear_in_cotangent() {
        let m = VelocityModel::new_randomized(small()).unwrap();
        let (x, c) = inputs(2, 4, 4, 5);
        let mut g1 = x.zeros_like();
        fill_normal(&mut substream(1, &["g1"]), g1.data_mut());
        let mut g2 = x.zeros_like();
        fill_normal(&mut substream(1, &["g2"]), g2.data_mut());
        let a = m.backward(&x, &c, &g1).unwrap();
        let b = m.backward(&x, &c, &g2).unwrap();
        let s = m.backward(&x, &c, &g1.lincomb(2.0, &g2, -3.0).unwrap()).unwrap();
        for i in 0..a.len() {
            assert!((s[i] - (2.0 * a[i] - 3.0 * b[i])).abs() < 1e-9 * (1.0 + s[i].abs()));
        }
    }

    #[test]
    fn zeroed_segment_has_zero_gradient_when_dead() {
        // Zero mix weights and biases stop gradient to the block conv.
        let mut m = VelocityModel::new_randomized(small()).unwrap();
        let seg = m.segment("block1.mix.weight").unwrap().clone();
        for v in &mut m.params_mut()[seg.offset..seg.offset + seg.len] {
            *v = 0.0;
        }
        let (x, c) = inputs(2, 4, 4, 6);
        let mut g = x.zeros_like();
        fill_normal(&mut substream(2, &["g"]), g.data_mut());
        let grad = m.backward(&x, &c, &g).unwrap();
        for name in ["block1.conv.weight", "block1.time_mix.weight", "block1.film.weight"] {
            let s = m.segment(name).unwrap();
            assert!(grad[s.offset..s.offset + s.len].iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn scale_and_timescale_embeddings_differ() {
        let m = VelocityModel::new(ModelConfig::default()).unwrap();
        let (s0, t0) = m.embed_scale_and_timescale(0, 0).unwrap();
        let (s1, t1) = m.embed_scale_and_timescale(0, 1).unwrap();
        assert_eq!(s0, s1);
        assert_ne!(t0, t1);
        assert_eq!(m.embed_scale_and_timescale(0, 1).unwrap().1, t1);
    }
}
