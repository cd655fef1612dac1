//! Small time-conditioned U-Net that predicts the injected noise.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::nn::{self, Act, Adam, Conv, Linear, ParamStore};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::{self, tag};
use crate::schedule::{make_ddpm_schedule, NoiseSchedule};

const MAGIC: &[u8; 4] = b"DMW1";
const FORMAT_VERSION: u32 = 1;

/// Affine map between data space and model space: `z = (x - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataScaling {
    pub offset: f64,
    pub scale: f64,
}

impl DataScaling {
    pub const IDENTITY: DataScaling = DataScaling {
        offset: 0.0,
        scale: 1.0,
    };
    /// Maps `[0, 1]` onto `[-1, 1]`.
    pub const SYMMETRIC: DataScaling = DataScaling {
        offset: 0.5,
        scale: 0.5,
    };

    pub fn to_model(&self, x: f64) -> f64 {
        (x - self.offset) / self.scale
    }

    pub fn to_data(&self, z: f64) -> f64 {
        z * self.scale + self.offset
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Channel width per resolution level, finest first.
    pub channels: Vec<usize>,
    pub time_dim: usize,
    pub hidden_dim: usize,
}

impl Architecture {
    pub fn from_base(base: usize) -> Self {
        Architecture {
            channels: vec![base, base * 3 / 2, base * 2, base * 3],
            time_dim: 32,
            hidden_dim: 64,
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Grid sides must be divisible by this.
    pub fn stride(&self) -> usize {
        1 << (self.levels() - 1)
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::param("channels", "need at least one positive width"));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::param("time_dim", "must be even and >= 2"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::param("hidden_dim", "must be positive"));
        }
        Ok(())
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::from_base(16)
    }
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    temb: Linear,
    skip: Option<Conv>,
}

struct BlockCache {
    x: Act,
    a0: Act,
    h1: Act,
    a1: Act,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, hidden: usize, init: &mut impl FnMut(usize) -> f32) -> Self {
        let conv1 = Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, init, 1.0);
        let temb = Linear::new(store, &format!("{name}.temb"), hidden, cout, init, 1.0);
        let conv2 = Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, init, 0.1);
        let skip = (cin != cout).then(|| Conv::new(store, &format!("{name}.skip"), cin, cout, 1, init, 1.0));
        ResBlock {
            conv1,
            conv2,
            temb,
            skip,
        }
    }

    fn forward(&self, p: &[f32], x: Act, th: &[f32]) -> (Act, BlockCache) {
        let a0 = nn::silu(&x);
        let mut h1 = self.conv1.forward(p, &a0);
        let tb = self.temb.forward(p, th, x.n);
        let hw = h1.h * h1.w;
        for c in 0..h1.c {
            for b in 0..h1.n {
                let bias = tb[b * h1.c + c];
                let start = (c * h1.n + b) * hw;
                h1.data[start..start + hw].iter_mut().for_each(|v| *v += bias);
            }
        }
        let a1 = nn::silu(&h1);
        let mut out = self.conv2.forward(p, &a1);
        match &self.skip {
            Some(s) => out.add_assign(&s.forward(p, &x)),
            None => out.add_assign(&x),
        }
        (out, BlockCache { x, a0, h1, a1 })
    }

    fn backward(&self, p: &[f32], g: &mut [f32], cache: &BlockCache, dout: &Act, th: &[f32], dth: &mut [f32]) -> Act {
        let da1 = self.conv2.backward(p, g, &cache.a1, dout);
        let dh1 = nn::silu_backward(&cache.h1, &da1);
        let hw = dh1.h * dh1.w;
        let mut dtb = vec![0f32; dh1.n * dh1.c];
        for c in 0..dh1.c {
            for b in 0..dh1.n {
                let start = (c * dh1.n + b) * hw;
                dtb[b * dh1.c + c] = dh1.data[start..start + hw].iter().sum();
            }
        }
        let d = self.temb.backward(p, g, th, &dtb, dh1.n);
        dth.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        let da0 = self.conv1.backward(p, g, &cache.a0, &dh1);
        let mut dx = nn::silu_backward(&cache.x, &da0);
        match &self.skip {
            Some(s) => dx.add_assign(&s.backward(p, g, &cache.x, dout)),
            None => dx.add_assign(dout),
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct Net {
    arch: Architecture,
    temb: Linear,
    conv_in: Conv,
    enc: Vec<ResBlock>,
    dec: Vec<ResBlock>,
    conv_out: Conv,
}

struct Tape {
    emb: Vec<f32>,
    pre: Vec<f32>,
    th: Vec<f32>,
    x: Act,
    enc: Vec<BlockCache>,
    enc_dims: Vec<(usize, usize)>,
    dec: Vec<BlockCache>,
    up_channels: Vec<usize>,
    last: Act,
    last_act: Act,
}

impl Net {
    fn build(arch: &Architecture, store: &mut ParamStore, init: &mut impl FnMut(usize) -> f32) -> Self {
        let ch = &arch.channels;
        let temb = Linear::new(store, "time.linear", arch.time_dim, arch.hidden_dim, init, 1.0);
        let conv_in = Conv::new(store, "conv_in", 1, ch[0], 3, init, 1.0);
        let mut enc = Vec::new();
        for (i, &c) in ch.iter().enumerate() {
            let cin = if i == 0 { ch[0] } else { ch[i - 1] };
            enc.push(ResBlock::new(store, &format!("enc{i}"), cin, c, arch.hidden_dim, init));
        }
        let mut dec = Vec::new();
        for i in (0..ch.len() - 1).rev() {
            dec.push(ResBlock::new(store, &format!("dec{i}"), ch[i + 1] + ch[i], ch[i], arch.hidden_dim, init));
        }
        let conv_out = Conv::new(store, "conv_out", ch[0], 1, 3, init, 0.0);
        Net {
            arch: arch.clone(),
            temb,
            conv_in,
            enc,
            dec,
            conv_out,
        }
    }

    fn forward(&self, p: &[f32], x: Act, steps: &[f32]) -> (Act, Tape) {
        let n = x.n;
        let emb = nn::timestep_embedding(steps, self.arch.time_dim);
        let pre = self.temb.forward(p, &emb, n);
        let th = nn::silu_vec(&pre);

        let mut cur = self.conv_in.forward(p, &x);
        let mut skips: Vec<Act> = Vec::new();
        let mut enc_cache = Vec::new();
        let mut enc_dims = Vec::new();
        for (i, block) in self.enc.iter().enumerate() {
            let input = if i == 0 { cur } else { nn::avg_pool2(&cur) };
            enc_dims.push((input.h, input.w));
            let (out, cache) = block.forward(p, input, &th);
            enc_cache.push(cache);
            skips.push(out.clone());
            cur = out;
        }
        let mut dec_cache = Vec::new();
        let mut up_channels = Vec::new();
        let levels = self.enc.len();
        for (j, block) in self.dec.iter().enumerate() {
            let level = levels - 2 - j;
            let up = nn::upsample2(&cur);
            up_channels.push(up.c);
            let cat = Act::concat(&up, &skips[level]);
            let (out, cache) = block.forward(p, cat, &th);
            dec_cache.push(cache);
            cur = out;
        }
        let last_act = nn::silu(&cur);
        let out = self.conv_out.forward(p, &last_act);
        (
            out,
            Tape {
                emb,
                pre,
                th,
                x,
                enc: enc_cache,
                enc_dims,
                dec: dec_cache,
                up_channels,
                last: cur,
                last_act,
            },
        )
    }

    fn backward(&self, p: &[f32], g: &mut [f32], tape: &Tape, dout: &Act) {
        let n = dout.n;
        let mut dth = vec![0f32; tape.th.len()];
        let da = self.conv_out.backward(p, g, &tape.last_act, dout);
        let mut dcur = nn::silu_backward(&tape.last, &da);

        let levels = self.enc.len();
        let mut dskip: Vec<Option<Act>> = vec![None; levels];
        for j in (0..self.dec.len()).rev() {
            let level = levels - 2 - j;
            let dcat = self.dec[j].backward(p, g, &tape.dec[j], &dcur, &tape.th, &mut dth);
            let (dup, ds) = dcat.split(tape.up_channels[j]);
            accumulate(&mut dskip[level], ds);
            dcur = nn::upsample2_backward(&dup);
        }
        accumulate(&mut dskip[levels - 1], dcur);

        let mut dh0 = None;
        for i in (0..levels).rev() {
            let dout_i = dskip[i].take().expect("every encoder output receives a gradient");
            let din = self.enc[i].backward(p, g, &tape.enc[i], &dout_i, &tape.th, &mut dth);
            if i > 0 {
                let (h, w) = tape.enc_dims[i - 1];
                accumulate(&mut dskip[i - 1], nn::avg_pool2_backward(&din, h, w));
            } else {
                dh0 = Some(din);
            }
        }
        let dh0 = dh0.expect("at least one level");
        self.conv_in.backward(p, g, &tape.x, &dh0);
        let dpre = nn::silu_vec_backward(&tape.pre, &dth);
        self.temb.backward(p, g, &tape.emb, &dpre, n);
    }
}

fn accumulate(slot: &mut Option<Act>, grad: Act) {
    match slot {
        Some(a) => a.add_assign(&grad),
        None => *slot = Some(grad),
    }
}

/// Trained noise-prediction network plus the schedule it was trained on.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub n_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub scaling: DataScaling,
    params: ParamStore,
    net: Net,
}

impl DenoiserModel {
    pub fn new(arch: &Architecture, schedule: &NoiseSchedule, scaling: DataScaling, seed: u64) -> Result<Self> {
        arch.validate()?;
        schedule.require_ddpm("denoiser training")?;
        let mut r = rng::stream(seed, &[tag::INIT]);
        let mut store = ParamStore::default();
        let mut init = |fan_in: usize| (rng::normal(&mut r) * (2.0 / fan_in as f64).sqrt()) as f32;
        let net = Net::build(arch, &mut store, &mut init);
        Ok(DenoiserModel {
            n_steps: schedule.n_steps,
            beta_min: schedule.beta[1],
            beta_max: schedule.beta[schedule.n_steps],
            scaling,
            params: store,
            net,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.net.arch
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params.values
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params.values
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_ddpm_schedule(self.n_steps, self.beta_min, self.beta_max)
    }

    fn step_input(&self, t: f64) -> f32 {
        (t * 1000.0 / self.n_steps as f64) as f32
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let s = self.net.arch.stride();
        if h % s != 0 || w % s != 0 || h < s || w < s {
            return Err(Error::param("grid", format!("{w}x{h} must be a multiple of {s}")));
        }
        Ok(())
    }

    /// Predicts noise for a batch of model-space grids of identical shape at steps `ts`.
    pub fn predict_batch(&self, xs: &[&Grid], ts: &[f64]) -> Result<Vec<Grid>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        if xs.len() != ts.len() {
            return Err(Error::dims(xs.len(), ts.len()));
        }
        let (w, h) = xs[0].dims();
        self.check_dims(h, w)?;
        let mut x = Act::zeros(1, xs.len(), h, w);
        for (i, g) in xs.iter().enumerate() {
            xs[0].check_same(g)?;
            for (d, s) in x.data[i * h * w..(i + 1) * h * w].iter_mut().zip(&g.values) {
                *d = *s as f32;
            }
        }
        let steps: Vec<f32> = ts.iter().map(|&t| self.step_input(t)).collect();
        let (out, _) = self.net.forward(&self.params.values, x, &steps);
        Ok((0..xs.len())
            .map(|i| Grid {
                width: w,
                height: h,
                values: out.data[i * h * w..(i + 1) * h * w].iter().map(|&v| v as f64).collect(),
            })
            .collect())
    }

    pub fn predict(&self, x: &Grid, t: f64) -> Result<Grid> {
        Ok(self.predict_batch(&[x], &[t])?.remove(0))
    }

    /// Mean-squared noise-prediction loss of one batch; accumulates parameter gradients into `grads`.
    pub fn loss_and_grad(&self, x_t: &[f32], eps: &[f32], steps: &[f64], h: usize, w: usize, grads: &mut [f32]) -> f64 {
        let n = steps.len();
        let mut x = Act::zeros(1, n, h, w);
        x.data.copy_from_slice(x_t);
        let st: Vec<f32> = steps.iter().map(|&t| self.step_input(t)).collect();
        let (out, tape) = self.net.forward(&self.params.values, x, &st);
        let count = out.data.len() as f32;
        let mut loss = 0f64;
        let mut dout = out.like();
        for ((d, o), e) in dout.data.iter_mut().zip(&out.data).zip(eps) {
            let r = o - e;
            loss += (r as f64) * (r as f64);
            *d = 2.0 * r / count;
        }
        self.net.backward(&self.params.values, grads, &tape, &dout);
        loss / count as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        let arch = &self.net.arch;
        put_u32(&mut out, arch.channels.len() as u32);
        for &c in &arch.channels {
            put_u32(&mut out, c as u32);
        }
        put_u32(&mut out, arch.time_dim as u32);
        put_u32(&mut out, arch.hidden_dim as u32);
        put_u32(&mut out, self.n_steps as u32);
        for v in [self.beta_min, self.beta_max, self.scaling.offset, self.scaling.scale] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut out, self.params.specs.len() as u32);
        for spec in &self.params.specs {
            put_u32(&mut out, spec.name.len() as u32);
            out.extend_from_slice(spec.name.as_bytes());
            put_u32(&mut out, spec.shape.len() as u32);
            for &d in &spec.shape {
                put_u32(&mut out, d as u32);
            }
        }
        for v in &self.params.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let levels = r.u32()? as usize;
        if levels == 0 || levels > 16 {
            return Err(fmt_err("implausible level count"));
        }
        let channels = (0..levels).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let arch = Architecture {
            channels,
            time_dim: r.u32()? as usize,
            hidden_dim: r.u32()? as usize,
        };
        arch.validate().map_err(|e| fmt_err(e.to_string()))?;
        let n_steps = r.u32()? as usize;
        let beta_min = r.f64()?;
        let beta_max = r.f64()?;
        let scaling = DataScaling {
            offset: r.f64()?,
            scale: r.f64()?,
        };
        let mut store = ParamStore::default();
        let net = Net::build(&arch, &mut store, &mut |_| 0.0);
        let n_tensors = r.u32()? as usize;
        if n_tensors != store.specs.len() {
            return Err(fmt_err(format!("expected {} tensors, found {n_tensors}", store.specs.len())));
        }
        for spec in &store.specs {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| fmt_err("tensor name is not utf-8"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            if name != spec.name || shape != spec.shape {
                return Err(fmt_err(format!("tensor {name} {shape:?} does not match {} {:?}", spec.name, spec.shape)));
            }
        }
        for v in store.values.iter_mut() {
            *v = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        }
        if r.pos != bytes.len() {
            return Err(fmt_err("trailing bytes"));
        }
        let _ = make_ddpm_schedule(n_steps, beta_min, beta_max).map_err(|e| fmt_err(e.to_string()))?;
        Ok(DenoiserModel {
            n_steps,
            beta_min,
            beta_max,
            scaling,
            params: store,
            net,
        })
    }
}

fn fmt_err(reason: impl Into<String>) -> Error {
    Error::Format {
        path: std::path::PathBuf::from("<model>"),
        reason: reason.into(),
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(fmt_err("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub base_channels: usize,
    pub augment: bool,
    /// Decay of the weight moving average returned as the trained model; 0 disables it.
    pub ema_decay: f64,
    /// Final learning rate as a fraction of the initial one, reached by cosine decay.
    pub final_lr_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 16,
            learning_rate: 2e-3,
            base_channels: 16,
            augment: true,
            ema_decay: 0.995,
            final_lr_ratio: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::param("ema_decay", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return Err(Error::param("final_lr_ratio", "must lie in [0, 1]"));
        }
        if self.base_channels < 2 {
            return Err(Error::param("base_channels", "must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Applies one of the eight symmetries of the square to a `side x side` block.
fn dihedral(src: &[f32], side: usize, k: u8) -> Vec<f32> {
    let mut out = vec![0f32; src.len()];
    for y in 0..side {
        for x in 0..side {
            let (mut sy, mut sx) = (y, x);
            if k & 4 != 0 {
                std::mem::swap(&mut sy, &mut sx);
            }
            if k & 1 != 0 {
                sx = side - 1 - sx;
            }
            if k & 2 != 0 {
                sy = side - 1 - sy;
            }
            out[y * side + x] = src[sy * side + sx];
        }
    }
    out
}

/// Trains a denoiser on data-space maps with the noise-prediction objective.
pub fn train_denoiser(
    maps: &[Grid],
    schedule: &NoiseSchedule,
    arch: &Architecture,
    config: &TrainConfig,
    scaling: DataScaling,
    seed: u64,
) -> Result<(DenoiserModel, Vec<LossRecord>)> {
    train_denoiser_with(maps, schedule, arch, config, scaling, seed, |_| {})
}

/// As [`train_denoiser`], invoking `progress` after every optimizer step.
pub fn train_denoiser_with(
    maps: &[Grid],
    schedule: &NoiseSchedule,
    arch: &Architecture,
    config: &TrainConfig,
    scaling: DataScaling,
    seed: u64,
    mut progress: impl FnMut(&LossRecord),
) -> Result<(DenoiserModel, Vec<LossRecord>)> {
    config.validate()?;
    let first = maps.first().ok_or(Error::EmptyRegion)?;
    for m in maps {
        first.check_same(m)?;
    }
    let mut model = DenoiserModel::new(arch, schedule, scaling, seed)?;
    let (w, h) = first.dims();
    model.check_dims(h, w)?;
    let square = w == h;
    let data: Vec<Vec<f32>> = maps
        .iter()
        .map(|m| m.values.iter().map(|&v| scaling.to_model(v) as f32).collect())
        .collect();

    let mut r = rng::stream(seed, &[tag::TRAIN]);
    let mut adam = Adam::new(model.param_count(), config.learning_rate as f32);
    let mut grads = vec![0f32; model.param_count()];
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..maps.len()).collect();
    let plane = w * h;
    let mut step = 0usize;
    let total = config.epochs * maps.len().div_ceil(config.batch_size);
    let mut ema = model.params.values.clone();
    for epoch in 0..config.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(config.batch_size) {
            let n = chunk.len();
            let mut x_t = vec![0f32; n * plane];
            let mut eps = vec![0f32; n * plane];
            let mut steps = vec![0f64; n];
            for (b, &idx) in chunk.iter().enumerate() {
                let k: u8 = match (config.augment, square) {
                    (false, _) => 0,
                    (true, true) => r.random_range(0..8),
                    (true, false) => r.random_range(0..4),
                };
                let z0 = if k == 0 {
                    data[idx].clone()
                } else if square {
                    dihedral(&data[idx], w, k)
                } else {
                    flip(&data[idx], w, h, k)
                };
                let t = r.random_range(1..=schedule.n_steps);
                steps[b] = t as f64;
                let (c, d) = (schedule.c[t] as f32, schedule.d[t] as f32);
                for i in 0..plane {
                    let e = rng::normal(&mut r) as f32;
                    eps[b * plane + i] = e;
                    x_t[b * plane + i] = c * z0[i] + d * e;
                }
            }
            grads.iter_mut().for_each(|g| *g = 0.0);
            let loss = model.loss_and_grad(&x_t, &eps, &steps, h, w, &mut grads);
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { step, loss });
            }
            let progress_frac = step as f64 / total.max(1) as f64;
            let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress_frac).cos());
            adam.lr = (config.learning_rate * (config.final_lr_ratio + (1.0 - config.final_lr_ratio) * cosine)) as f32;
            adam.update(&mut model.params.values, &grads);
            let decay = config.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64)) as f32;
            for (e, p) in ema.iter_mut().zip(&model.params.values) {
                *e = decay * *e + (1.0 - decay) * p;
            }
            let rec = LossRecord { step, epoch, loss };
            progress(&rec);
            history.push(rec);
            step += 1;
        }
    }
    if config.ema_decay > 0.0 {
        model.params.values = ema;
    }
    Ok((model, history))
}

fn flip(src: &[f32], w: usize, h: usize, k: u8) -> Vec<f32> {
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let sx = if k & 1 != 0 { w - 1 - x } else { x };
            let sy = if k & 2 != 0 { h - 1 - y } else { y };
            out[y * w + x] = src[sy * w + sx];
        }
    }
    out
}

/// Trailing moving average used to summarize noisy loss curves.
pub fn moving_average(history: &[LossRecord], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(history.len());
    let mut sum = 0.0;
    for i in 0..history.len() {
        sum += history[i].loss;
        if i >= window {
            sum -= history[i - window].loss;
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut s = String::from("step,epoch,loss\n");
    for r in history {
        s.push_str(&format!("{},{},{}\n", r.step, r.epoch, r.loss));
    }
    crate::io::write_bytes(path, s.as_bytes())
}
