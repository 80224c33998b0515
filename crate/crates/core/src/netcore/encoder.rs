use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    col2im, conv_backward, conv_forward, conv_out_size, im2col, instance_norm_backward,
    instance_norm_forward, KERNEL,
};
use super::{matmul, matmul_tn, Real};
use crate::error::{Error, Result};

pub const N_BLOCKS: usize = 6;
pub const IN_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub in_size: usize,
    pub out_size: usize,
}

impl BlockShape {
    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * KERNEL * KERNEL
    }

    fn col_rows(&self) -> usize {
        self.in_channels * KERNEL * KERNEL
    }
}

/// Layer geometry shared by both encoders.
///
/// Block `b` has `min(base * 2^b, cap)` channels. A block downsamples
/// (stride 2) while its input is at least 4 pixels wide and keeps stride 1
/// afterwards, so every instance norm sees at least a 2x2 map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub grid: usize,
    pub latent_dim: usize,
    pub blocks: Vec<BlockShape>,
}

impl EncoderArch {
    pub fn new(
        grid: usize,
        channels_base: usize,
        channels_cap: usize,
        latent_dim: usize,
    ) -> Result<Self> {
        if grid < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid {grid} too small for the encoder"
            )));
        }
        if channels_base == 0 || channels_cap < channels_base {
            return Err(Error::InvalidArgument(format!(
                "bad channel widths base={channels_base} cap={channels_cap}"
            )));
        }
        if latent_dim == 0 || latent_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "latent dimension {latent_dim} must be even and positive"
            )));
        }
        let mut blocks = Vec::with_capacity(N_BLOCKS);
        let (mut cin, mut size) = (IN_CHANNELS, grid);
        for b in 0..N_BLOCKS {
            let cout = channels_base.saturating_mul(1 << b).min(channels_cap);
            let stride = if size >= 4 { 2 } else { 1 };
            let out = conv_out_size(size, stride);
            blocks.push(BlockShape {
                in_channels: cin,
                out_channels: cout,
                stride,
                in_size: size,
                out_size: out,
            });
            cin = cout;
            size = out;
        }
        Ok(Self {
            grid,
            latent_dim,
            blocks,
        })
    }

    pub fn feature_len(&self) -> usize {
        let last = self.blocks.last().expect("six blocks");
        last.out_channels * last.out_size * last.out_size
    }

    pub fn input_len(&self) -> usize {
        IN_CHANNELS * self.grid * self.grid
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.kernel_len() + 3 * b.out_channels)
            .sum::<usize>()
            + self.latent_dim * (self.feature_len() + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    /// `out x in x 3 x 3`, row-major.
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
    pub norm_scale: Vec<T>,
    pub norm_shift: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub blocks: Vec<BlockParams<T>>,
    /// `latent_dim x feature_len`, row-major.
    pub dense_weight: Vec<T>,
    pub dense_bias: Vec<T>,
}

impl<T: Real> EncoderParams<T> {
    pub fn zeros(arch: &EncoderArch) -> Self {
        let blocks = arch
            .blocks
            .iter()
            .map(|b| BlockParams {
                kernel: vec![T::zero(); b.kernel_len()],
                bias: vec![T::zero(); b.out_channels],
                norm_scale: vec![T::zero(); b.out_channels],
                norm_shift: vec![T::zero(); b.out_channels],
            })
            .collect();
        Self {
            blocks,
            dense_weight: vec![T::zero(); arch.latent_dim * arch.feature_len()],
            dense_bias: vec![T::zero(); arch.latent_dim],
        }
    }

    /// Kernels and dense weights uniform in `+-sqrt(1/fan_in)`; biases and
    /// norm shifts zero; norm scales `norm_scale_init`.
    pub fn init<R: Rng>(arch: &EncoderArch, norm_scale_init: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        for (shape, block) in arch.blocks.iter().zip(&mut p.blocks) {
            let bound = (1.0 / (shape.in_channels * KERNEL * KERNEL) as f64).sqrt();
            block
                .kernel
                .iter_mut()
                .for_each(|w| *w = T::of(rng.gen_range(-bound..bound)));
            block
                .norm_scale
                .iter_mut()
                .for_each(|g| *g = T::of(norm_scale_init));
        }
        let bound = (1.0 / arch.feature_len() as f64).sqrt();
        p.dense_weight
            .iter_mut()
            .for_each(|w| *w = T::of(rng.gen_range(-bound..bound)));
        p
    }

    pub fn groups(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::with_capacity(4 * self.blocks.len() + 2);
        for (b, block) in self.blocks.iter().enumerate() {
            out.push((format!("block{b}.kernel"), block.kernel.as_slice()));
            out.push((format!("block{b}.bias"), block.bias.as_slice()));
            out.push((format!("block{b}.norm_scale"), block.norm_scale.as_slice()));
            out.push((format!("block{b}.norm_shift"), block.norm_shift.as_slice()));
        }
        out.push(("dense.weight".into(), self.dense_weight.as_slice()));
        out.push(("dense.bias".into(), self.dense_bias.as_slice()));
        out
    }

    pub fn groups_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::with_capacity(4 * self.blocks.len() + 2);
        for block in &mut self.blocks {
            out.push(&mut block.kernel);
            out.push(&mut block.bias);
            out.push(&mut block.norm_scale);
            out.push(&mut block.norm_shift);
        }
        out.push(&mut self.dense_weight);
        out.push(&mut self.dense_bias);
        out
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|&x| U::of(x.as_f64())).collect::<Vec<U>>();
        EncoderParams {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    kernel: c(&b.kernel),
                    bias: c(&b.bias),
                    norm_scale: c(&b.norm_scale),
                    norm_shift: c(&b.norm_shift),
                })
                .collect(),
            dense_weight: c(&self.dense_weight),
            dense_bias: c(&self.dense_bias),
        }
    }

    pub fn check_shape(&self, arch: &EncoderArch) -> Result<()> {
        let zeros = Self::zeros(arch);
        for ((name, want), (_, got)) in zeros.groups().iter().zip(self.groups()) {
            if want.len() != got.len() {
                return Err(Error::InvalidArgument(format!(
                    "encoder group {name}: expected {} values, got {}",
                    want.len(),
                    got.len()
                )));
            }
        }
        if zeros.blocks.len() != self.blocks.len() {
            return Err(Error::size(
                "encoder blocks",
                zeros.blocks.len(),
                self.blocks.len(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct BlockCache<T> {
    cols: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// post-ReLU output
    pub(crate) act: Vec<T>,
}

/// Intermediate values of one batched forward pass, kept for backward.
#[derive(Debug, Clone, Default)]
pub struct EncoderCache<T> {
    batch: usize,
    pub(crate) blocks: Vec<BlockCache<T>>,
    features: Vec<T>,
    latent: Vec<T>,
}

impl<T: Real> EncoderCache<T> {
    /// `batch x latent_dim`, row-major.
    pub fn latent(&self) -> &[T] {
        &self.latent
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Which ReLU units are active, over all blocks.
    pub(crate) fn active_pattern(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| b.act.iter().map(|&v| v > T::zero()))
            .collect()
    }
}

/// Batched forward pass. `inputs` holds `batch` channel-planar maps
/// (`3 x grid x grid` each), concatenated.
pub(crate) fn forward<T: Real>(
    arch: &EncoderArch,
    params: &EncoderParams<T>,
    inputs: &[T],
    batch: usize,
    cache: &mut EncoderCache<T>,
) {
    let pin = arch.grid * arch.grid;
    assert_eq!(inputs.len(), batch * arch.input_len());
    cache.batch = batch;
    cache
        .blocks
        .resize_with(arch.blocks.len(), BlockCache::default);

    // per-sample planar -> channel-major batch layout
    let mut x = vec![T::zero(); inputs.len()];
    for b in 0..batch {
        for c in 0..IN_CHANNELS {
            let src = &inputs[(b * IN_CHANNELS + c) * pin..][..pin];
            x[c * batch * pin + b * pin..][..pin].copy_from_slice(src);
        }
    }

    let mut y = Vec::new();
    for (bi, (shape, p)) in arch.blocks.iter().zip(&params.blocks).enumerate() {
        let (done, rest) = cache.blocks.split_at_mut(bi);
        let input: &[T] = if bi == 0 { &x } else { &done[bi - 1].act };
        let pout = shape.out_size * shape.out_size;
        let width = batch * pout;
        let bc = &mut rest[0];
        im2col(
            input,
            shape.in_channels,
            batch,
            shape.in_size,
            shape.stride,
            &mut bc.cols,
        );
        conv_forward(
            &p.kernel,
            &p.bias,
            &bc.cols,
            shape.out_channels,
            shape.col_rows(),
            width,
            &mut y,
        );

        instance_norm_forward(
            &y,
            shape.out_channels,
            batch,
            pout,
            &mut bc.xhat,
            &mut bc.inv_std,
        );
        bc.act.clear();
        bc.act.resize(y.len(), T::zero());
        for c in 0..shape.out_channels {
            let (g, s) = (p.norm_scale[c], p.norm_shift[c]);
            let range = c * width..(c + 1) * width;
            for (a, &xh) in bc.act[range.clone()].iter_mut().zip(&bc.xhat[range]) {
                let z = g * xh + s;
                *a = if z > T::zero() { z } else { T::zero() };
            }
        }
    }

    // flatten: feature (c, p) of sample b
    let last = arch.blocks.last().expect("six blocks");
    let pout = last.out_size * last.out_size;
    let flen = arch.feature_len();
    let act = &cache.blocks[arch.blocks.len() - 1].act;
    cache.features.clear();
    cache.features.resize(batch * flen, T::zero());
    for c in 0..last.out_channels {
        for b in 0..batch {
            let src = &act[c * batch * pout + b * pout..][..pout];
            cache.features[b * flen + c * pout..][..pout].copy_from_slice(src);
        }
    }

    let k = arch.latent_dim;
    cache.latent.clear();
    cache.latent.resize(batch * k, T::zero());
    for row in cache.latent.chunks_exact_mut(k) {
        row.copy_from_slice(&params.dense_bias);
    }
    // latent[b x k] += features[b x f] * W^T, with W stored k x f
    T::gemm(
        batch,
        flen,
        k,
        T::one(),
        &cache.features,
        flen as isize,
        1,
        &params.dense_weight,
        1,
        flen as isize,
        T::one(),
        &mut cache.latent,
        k as isize,
        1,
    );
}

/// Accumulates parameter gradients into `grads` given `dlatent`
/// (`batch x latent_dim`).
pub(crate) fn backward<T: Real>(
    arch: &EncoderArch,
    params: &EncoderParams<T>,
    cache: &EncoderCache<T>,
    dlatent: &[T],
    grads: &mut EncoderParams<T>,
) {
    let batch = cache.batch;
    let k = arch.latent_dim;
    let flen = arch.feature_len();

    for row in dlatent.chunks_exact(k) {
        for (g, &d) in grads.dense_bias.iter_mut().zip(row) {
            *g += d;
        }
    }
    // dW[k x f] += dlatent^T[k x b] * features[b x f]
    matmul_tn(
        dlatent,
        &cache.features,
        &mut grads.dense_weight,
        k,
        batch,
        flen,
        true,
    );
    let mut dfeat = vec![T::zero(); batch * flen];
    matmul(
        dlatent,
        &params.dense_weight,
        &mut dfeat,
        batch,
        k,
        flen,
        false,
    );

    let last = arch.blocks.last().expect("six blocks");
    let pout = last.out_size * last.out_size;
    let mut dact = vec![T::zero(); last.out_channels * batch * pout];
    for c in 0..last.out_channels {
        for b in 0..batch {
            dact[c * batch * pout + b * pout..][..pout]
                .copy_from_slice(&dfeat[b * flen + c * pout..][..pout]);
        }
    }

    let mut dcols = Vec::new();
    for bi in (0..arch.blocks.len()).rev() {
        let shape = &arch.blocks[bi];
        let p = &params.blocks[bi];
        let g = &mut grads.blocks[bi];
        let bc = &cache.blocks[bi];
        let pout = shape.out_size * shape.out_size;
        let width = batch * pout;

        // ReLU, affine
        for c in 0..shape.out_channels {
            let range = c * width..(c + 1) * width;
            let (mut ds, mut dsh) = (T::zero(), T::zero());
            for ((d, &a), &xh) in dact[range.clone()]
                .iter_mut()
                .zip(&bc.act[range.clone()])
                .zip(&bc.xhat[range])
            {
                if a <= T::zero() {
                    *d = T::zero();
                }
                ds += *d * xh;
                dsh += *d;
                *d *= p.norm_scale[c];
            }
            g.norm_scale[c] += ds;
            g.norm_shift[c] += dsh;
        }
        instance_norm_backward(&bc.xhat, &bc.inv_std, pout, &mut dact);

        let need_input_grad = bi > 0;
        conv_backward(
            &p.kernel,
            &bc.cols,
            &dact,
            shape.out_channels,
            shape.col_rows(),
            width,
            &mut g.kernel,
            &mut g.bias,
            need_input_grad.then_some(&mut dcols),
        );
        if need_input_grad {
            let mut dx = vec![T::zero(); shape.in_channels * batch * shape.in_size * shape.in_size];
            col2im(
                &dcols,
                shape.in_channels,
                batch,
                shape.in_size,
                shape.stride,
                &mut dx,
            );
            dact = dx;
        }
    }
}
