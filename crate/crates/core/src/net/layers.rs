//! Small building blocks on top of `candle_nn` plus deterministic initialisation.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{conv2d, linear, Conv2d, Conv2dConfig, Linear, VarBuilder, VarMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub(crate) fn conv(in_c: usize, out_c: usize, k: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig { padding: k / 2, stride, ..Default::default() };
    Ok(conv2d(in_c, out_c, k, cfg, vb)?)
}

/// Gated recurrent unit cell with separate input and hidden projections.
#[derive(Debug, Clone)]
pub struct GruCell {
    ih: Linear,
    hh: Linear,
    hidden: usize,
}

impl GruCell {
    pub fn new(input: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(GruCell { ih: linear(input, 3 * hidden, vb.pp("ih"))?, hh: linear(hidden, 3 * hidden, vb.pp("hh"))?, hidden })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    /// `x` is `[N, input]`, `h` is `[N, hidden]`.
    pub fn forward(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let gi = self.ih.forward(x)?;
        let gh = self.hh.forward(h)?;
        let n = self.hidden;
        let r = candle_nn::ops::sigmoid(&(gi.narrow(1, 0, n)? + gh.narrow(1, 0, n)?)?)?;
        let z = candle_nn::ops::sigmoid(&(gi.narrow(1, n, n)? + gh.narrow(1, n, n)?)?)?;
        let c = (gi.narrow(1, 2 * n, n)? + r.mul(&gh.narrow(1, 2 * n, n)?)?)?.tanh()?;
        let keep = z.neg()?.affine(1.0, 1.0)?;
        Ok((keep.mul(&c)? + z.mul(h)?)?)
    }
}

/// Convolutional LSTM over `[N, C, h, w]` feature maps.
#[derive(Debug, Clone)]
pub struct ConvLstm {
    gates: Conv2d,
    channels: usize,
}

#[derive(Debug, Clone)]
pub struct ConvLstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl ConvLstmState {
    pub fn detach(&self) -> Self {
        ConvLstmState { h: self.h.detach(), c: self.c.detach() }
    }
}

impl ConvLstm {
    pub fn new(input: usize, channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(ConvLstm { gates: conv(input + channels, 4 * channels, 3, 1, vb.pp("gates"))?, channels })
    }

    pub fn zero_state(&self, like: &Tensor) -> Result<ConvLstmState> {
        let (n, _, h, w) = like.dims4()?;
        let z = Tensor::zeros((n, self.channels, h, w), like.dtype(), like.device())?;
        Ok(ConvLstmState { h: z.clone(), c: z })
    }

    pub fn forward(&self, x: &Tensor, state: &ConvLstmState) -> Result<ConvLstmState> {
        let g = self.gates.forward(&Tensor::cat(&[x, &state.h], 1)?)?;
        let n = self.channels;
        let i = candle_nn::ops::sigmoid(&g.narrow(1, 0, n)?)?;
        let f = candle_nn::ops::sigmoid(&g.narrow(1, n, n)?)?;
        let o = candle_nn::ops::sigmoid(&g.narrow(1, 2 * n, n)?)?;
        let u = g.narrow(1, 3 * n, n)?.tanh()?;
        let c = (f.mul(&state.c)? + i.mul(&u)?)?;
        let h = o.mul(&c.tanh()?)?;
        Ok(ConvLstmState { h, c })
    }
}

/// Stride-2 conv stack followed by a linear projection to a code vector.
#[derive(Debug, Clone)]
pub struct GlimpseEncoder {
    convs: Vec<Conv2d>,
    proj: Linear,
}

impl GlimpseEncoder {
    /// Halves `side` with each stage until it reaches 2.
    pub fn new(in_c: usize, side: usize, channels: usize, code: usize, vb: VarBuilder) -> Result<Self> {
        let mut convs = Vec::new();
        let (mut c, mut s) = (in_c, side);
        while s > 2 {
            convs.push(conv(c, channels, 3, 2, vb.pp(format!("conv{}", convs.len())))?);
            c = channels;
            s /= 2;
        }
        let proj = linear(c * s * s, code, vb.pp("proj"))?;
        Ok(GlimpseEncoder { convs, proj })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h)?.relu()?;
        }
        Ok(self.proj.forward(&h.flatten_from(1)?)?.relu()?)
    }
}

/// Linear map to a `base × base` map followed by nearest-upsample + conv stages.
#[derive(Debug, Clone)]
pub struct UpDecoder {
    proj: Linear,
    convs: Vec<Conv2d>,
    head: Conv2d,
    channels: usize,
    base: (usize, usize),
}

impl UpDecoder {
    pub fn new(
        input: usize,
        base: (usize, usize),
        stages: usize,
        channels: usize,
        out_c: usize,
        vb: VarBuilder,
    ) -> Result<Self> {
        let proj = linear(input, channels * base.0 * base.1, vb.pp("proj"))?;
        let convs = (0..stages)
            .map(|i| conv(channels, channels, 3, 1, vb.pp(format!("conv{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let head = conv(channels, out_c, 1, 1, vb.pp("head"))?;
        Ok(UpDecoder { proj, convs, head, channels, base })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let n = z.dim(0)?;
        let mut h = self.proj.forward(z)?.relu()?.reshape((n, self.channels, self.base.0, self.base.1))?;
        for c in &self.convs {
            let (_, _, hh, ww) = h.dims4()?;
            h = c.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?.relu()?;
        }
        Ok(self.head.forward(&h)?)
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let d = hasher.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Re-initialises every variable from a stream keyed by `(seed, name)`:
/// He-normal for conv kernels, LeCun-normal for dense weights, zero biases.
pub fn init_weights(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = &data[name];
        let dims = var.dims().to_vec();
        let n: usize = dims.iter().product();
        let values: Vec<f64> = if dims.len() >= 2 {
            let fan_in: usize = dims[1..].iter().product();
            let gain = if dims.len() == 4 { 2.0 } else { 1.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        } else {
            vec![0.0; n]
        };
        let t = Tensor::from_vec(values, dims.as_slice(), var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

/// Sets a 1-d bias variable to a constant.
pub(crate) fn fill_var(varmap: &VarMap, name: &str, value: f64) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    if let Some(var) = data.get(name) {
        let t = (var.ones_like()? * value)?;
        var.set(&t)?;
    }
    Ok(())
}

pub(crate) fn split_last(x: &Tensor, at: usize) -> Result<(Tensor, Tensor)> {
    let n = x.dim(D::Minus1)?;
    Ok((x.narrow(D::Minus1, 0, at)?, x.narrow(D::Minus1, at, n - at)?))
}

pub(crate) fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?.first().copied().unwrap_or(0.0))
}

pub(crate) fn to_vec_f64(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}
