//! Convolutional realization of a block-term factored kernel.
//!
//! Feature maps are `(width, height, channels)` tensors and kernels are
//! `(kernel width, kernel height, input channels, output channels)`. The
//! convolution is the cross-correlation used by CNN frameworks:
//!
//! `V(x, y, c) = sum_{a, b, m} U(x*s1 + a - p1, y*s2 + b - p2, m) * K(a, b, m, c)`
//!
//! with zero padding outside the input. With stride 1 and padding equal to
//! the kernel half-widths the kernel centre lines up with the output pixel.
//!
//! A kernel decomposed as `sum_r G_r x_3 A3_r x_4 A4_r` (modes 3 and 4
//! factorized, spatial modes kept) is evaluated as a pointwise conv with the
//! stacked `A3_r^T`, a grouped spatial conv with one group per term, and a
//! pointwise conv with the side-by-side `A4_r`.

use crate::decomp::{btd_als, AlsConfig, BlockTermDecomp, TuckerTerm};
use crate::error::{Error, Result};
use crate::tensor::{Activation, DenseTensor, FactorMatrix};

/// Axis of the channel dimension in a feature map.
const CHANNEL_MODE: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    tensor: DenseTensor,
    stride: (usize, usize),
    padding: (usize, usize),
}

fn check_odd_spatial(shape: &[usize]) -> Result<()> {
    if shape[0].is_multiple_of(2) || shape[1].is_multiple_of(2) {
        return Err(Error::argument(format!(
            "kernel spatial size {}x{} must be odd",
            shape[0], shape[1]
        )));
    }
    Ok(())
}

impl ConvKernel {
    /// A stride-1 kernel with "same" zero padding.
    pub fn new(tensor: DenseTensor) -> Result<Self> {
        if tensor.ndim() != 4 {
            return Err(Error::argument(format!(
                "convolution kernel must be 4-D, got shape {:?}",
                tensor.shape()
            )));
        }
        check_odd_spatial(tensor.shape())?;
        let padding = ((tensor.shape()[0] - 1) / 2, (tensor.shape()[1] - 1) / 2);
        Ok(Self {
            tensor,
            stride: (1, 1),
            padding,
        })
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Result<Self> {
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::argument("stride must be positive"));
        }
        self.stride = stride;
        Ok(self)
    }

    pub fn with_padding(mut self, padding: (usize, usize)) -> Self {
        self.padding = padding;
        self
    }

    pub fn tensor(&self) -> &DenseTensor {
        &self.tensor
    }

    pub fn stride(&self) -> (usize, usize) {
        self.stride
    }

    pub fn padding(&self) -> (usize, usize) {
        self.padding
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.tensor.shape()[0], self.tensor.shape()[1])
    }

    pub fn in_channels(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.tensor.shape()[3]
    }
}

fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if input + 2 * pad < kernel {
        return Err(Error::argument(format!(
            "input extent {input} with padding {pad} is smaller than kernel extent {kernel}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

fn check_feature_map(input: &DenseTensor) -> Result<(usize, usize, usize)> {
    match *input.shape() {
        [w, h, c] => Ok((w, h, c)),
        _ => Err(Error::argument(format!(
            "feature map must be (width, height, channels), got shape {:?}",
            input.shape()
        ))),
    }
}

/// Dense 2-D convolution of a `(w, h, d3)` map with a `(d1, d2, d3, d4)` kernel.
pub fn direct_conv2d(input: &DenseTensor, kernel: &ConvKernel) -> Result<DenseTensor> {
    let (w, h, cin) = check_feature_map(input)?;
    if cin != kernel.in_channels() {
        return Err(Error::argument(format!(
            "input has {cin} channels, kernel expects {}",
            kernel.in_channels()
        )));
    }
    let (kw, kh) = kernel.kernel_size();
    let cout = kernel.out_channels();
    let (sw, sh) = kernel.stride;
    let (pw, ph) = kernel.padding;
    let ow = output_extent(w, kw, sw, pw)?;
    let oh = output_extent(h, kh, sh, ph)?;
    let u = input.data();
    let k = kernel.tensor.data();
    let mut out = vec![0.0; ow * oh * cout];
    for x in 0..ow {
        for y in 0..oh {
            let acc = &mut out[(x * oh + y) * cout..(x * oh + y + 1) * cout];
            for a in 0..kw {
                let Some(i) = (x * sw + a).checked_sub(pw).filter(|&i| i < w) else {
                    continue;
                };
                for b in 0..kh {
                    let Some(j) = (y * sh + b).checked_sub(ph).filter(|&j| j < h) else {
                        continue;
                    };
                    for m in 0..cin {
                        let v = u[(i * h + j) * cin + m];
                        let row = &k
                            [((a * kh + b) * cin + m) * cout..((a * kh + b) * cin + m + 1) * cout];
                        for (o, &kv) in acc.iter_mut().zip(row) {
                            *o += v * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(DenseTensor::from_parts(vec![ow, oh, cout], out))
}

fn check_group_cores(cores: &[DenseTensor]) -> Result<(usize, usize, usize, usize)> {
    let first = cores
        .first()
        .ok_or_else(|| Error::argument("grouped convolution needs at least one group"))?;
    if first.ndim() != 4 {
        return Err(Error::argument(format!(
            "group kernel must be 4-D, got shape {:?}",
            first.shape()
        )));
    }
    if let Some(r) = cores.iter().position(|c| c.shape() != first.shape()) {
        return Err(Error::argument(format!(
            "group {r} kernel has shape {:?}, expected {:?}",
            cores[r].shape(),
            first.shape()
        )));
    }
    let s = first.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

/// Grouped convolution: the input channels are split into `cores.len()`
/// contiguous groups and group `r` is convolved with `cores[r]` only.
/// Output channels are the per-group outputs concatenated in order.
///
/// Every output element accumulates in the same (kernel row, kernel column,
/// input channel) order as [`direct_conv2d`], so the result is bitwise equal
/// to [`grouped_conv2d_reference`].
pub fn grouped_conv2d(
    input: &DenseTensor,
    cores: &[DenseTensor],
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<DenseTensor> {
    let (w, h, cin) = check_feature_map(input)?;
    let (kw, kh, gin, gout) = check_group_cores(cores)?;
    let groups = cores.len();
    if cin != groups * gin {
        return Err(Error::argument(format!(
            "input has {cin} channels, {groups} groups of {gin} expected"
        )));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::argument("stride must be positive"));
    }
    let (sw, sh) = stride;
    let (pw, ph) = padding;
    let ow = output_extent(w, kw, sw, pw)?;
    let oh = output_extent(h, kh, sh, ph)?;
    let cout = groups * gout;
    let u = input.data();
    let mut out = vec![0.0; ow * oh * cout];
    for x in 0..ow {
        for y in 0..oh {
            let pixel = &mut out[(x * oh + y) * cout..(x * oh + y + 1) * cout];
            for (g, core) in cores.iter().enumerate() {
                let k = core.data();
                let acc = &mut pixel[g * gout..(g + 1) * gout];
                for a in 0..kw {
                    let Some(i) = (x * sw + a).checked_sub(pw).filter(|&i| i < w) else {
                        continue;
                    };
                    for b in 0..kh {
                        let Some(j) = (y * sh + b).checked_sub(ph).filter(|&j| j < h) else {
                            continue;
                        };
                        let base = (i * h + j) * cin + g * gin;
                        for m in 0..gin {
                            let v = u[base + m];
                            let row = &k[((a * kh + b) * gin + m) * gout
                                ..((a * kh + b) * gin + m + 1) * gout];
                            for (o, &kv) in acc.iter_mut().zip(row) {
                                *o += v * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(DenseTensor::from_parts(vec![ow, oh, cout], out))
}

/// Grouped convolution as independent dense convolutions on channel slices.
pub fn grouped_conv2d_reference(
    input: &DenseTensor,
    cores: &[DenseTensor],
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<DenseTensor> {
    let (_, _, cin) = check_feature_map(input)?;
    let (_, _, gin, _) = check_group_cores(cores)?;
    if cin != cores.len() * gin {
        return Err(Error::argument(format!(
            "input has {cin} channels, {} groups of {gin} expected",
            cores.len()
        )));
    }
    let outputs = cores
        .iter()
        .enumerate()
        .map(|(g, core)| {
            let slice = input.slice_mode(CHANNEL_MODE, g * gin, gin)?;
            let kernel = ConvKernel {
                tensor: core.clone(),
                stride,
                padding,
            };
            direct_conv2d(&slice, &kernel)
        })
        .collect::<Result<Vec<_>>>()?;
    DenseTensor::concat_mode(&outputs, CHANNEL_MODE)
}

/// 1x1 convolution: `out(x, y, o) = sum_i weights(o, i) * input(x, y, i)`.
pub fn pointwise_conv(input: &DenseTensor, weights: &FactorMatrix) -> Result<DenseTensor> {
    check_feature_map(input)?;
    input.mode_n_product(weights, CHANNEL_MODE)
}

/// Adds `bias[c]` to every pixel of channel `c`.
pub fn add_channel_bias(map: &DenseTensor, bias: &[f64]) -> Result<DenseTensor> {
    let (_, _, c) = check_feature_map(map)?;
    if bias.len() != c {
        return Err(Error::argument(format!(
            "bias has {} entries for {c} channels",
            bias.len()
        )));
    }
    let data = map
        .data()
        .chunks_exact(c)
        .flat_map(|px| px.iter().zip(bias).map(|(v, b)| v + b))
        .collect();
    DenseTensor::new(map.shape().to_vec(), data)
}

/// Folds a per-output-channel affine map `scale * conv(u) + shift` into the
/// kernel. Returns the scaled kernel and the bias to add after convolving.
pub fn fuse_affine(
    kernel: &ConvKernel,
    scale: &[f64],
    shift: &[f64],
) -> Result<(ConvKernel, Vec<f64>)> {
    let cout = kernel.out_channels();
    if scale.len() != cout || shift.len() != cout {
        return Err(Error::argument(format!(
            "affine parameters have lengths {}/{}, kernel has {cout} output channels",
            scale.len(),
            shift.len()
        )));
    }
    let data: Vec<f64> = kernel
        .tensor
        .data()
        .chunks_exact(cout)
        .flat_map(|row| row.iter().zip(scale).map(|(k, s)| k * s))
        .collect();
    let fused = ConvKernel {
        tensor: DenseTensor::new(kernel.tensor.shape().to_vec(), data)?,
        ..kernel.clone()
    };
    Ok((fused, shift.to_vec()))
}

/// Pointwise -> grouped spatial -> pointwise realization of a factored kernel.
#[derive(Debug, Clone)]
pub struct FactoredConvUnit {
    a3: Vec<FactorMatrix>,
    cores: Vec<DenseTensor>,
    a4: Vec<FactorMatrix>,
    /// Applied after the first pointwise stage.
    pub act1: Activation,
    /// Applied after the grouped spatial stage.
    pub act2: Activation,
}

impl FactoredConvUnit {
    /// `a3[r]` is `d3 x d3*`, `cores[r]` is `(d1, d2, d3*, d4*)`, `a4[r]` is `d4 x d4*`.
    pub fn new(
        a3: Vec<FactorMatrix>,
        cores: Vec<DenseTensor>,
        a4: Vec<FactorMatrix>,
    ) -> Result<Self> {
        let (d1, d2, r3, r4) = check_group_cores(&cores)?;
        check_odd_spatial(&[d1, d2])?;
        if a3.len() != cores.len() || a4.len() != cores.len() {
            return Err(Error::argument(format!(
                "term counts differ: {} first-stage factors, {} cores, {} last-stage factors",
                a3.len(),
                cores.len(),
                a4.len()
            )));
        }
        let (d3, d4) = (a3[0].rows(), a4[0].rows());
        for (r, (f3, f4)) in a3.iter().zip(&a4).enumerate() {
            if f3.rows() != d3 || f3.cols() != r3 {
                return Err(Error::argument(format!(
                    "first-stage factor {r} is {}x{}, expected {d3}x{r3}",
                    f3.rows(),
                    f3.cols()
                )));
            }
            if f4.rows() != d4 || f4.cols() != r4 {
                return Err(Error::argument(format!(
                    "last-stage factor {r} is {}x{}, expected {d4}x{r4}",
                    f4.rows(),
                    f4.cols()
                )));
            }
        }
        Ok(Self {
            a3,
            cores,
            a4,
            act1: Activation::Identity,
            act2: Activation::Identity,
        })
    }

    pub fn with_activations(mut self, act1: Activation, act2: Activation) -> Self {
        self.act1 = act1;
        self.act2 = act2;
        self
    }

    /// Accepts a decomposition of a 4-D kernel with only modes 2 and 3 (0-based) factorized.
    pub fn from_decomposition(d: &BlockTermDecomp) -> Result<Self> {
        let sig = d.rank_signature();
        if sig.len() != 4
            || sig[0].is_some()
            || sig[1].is_some()
            || sig[2].is_none()
            || sig[3].is_none()
        {
            return Err(Error::argument(format!(
                "expected a 4-D decomposition factorizing only the channel modes, got signature {sig:?}"
            )));
        }
        let mut a3 = Vec::new();
        let mut cores = Vec::new();
        let mut a4 = Vec::new();
        for t in d.terms() {
            a3.push(t.factor(2).expect("checked").clone());
            a4.push(t.factor(3).expect("checked").clone());
            cores.push(t.core().clone());
        }
        Self::new(a3, cores, a4)
    }

    pub fn to_decomposition(&self) -> BlockTermDecomp {
        let terms = self
            .cores
            .iter()
            .zip(&self.a3)
            .zip(&self.a4)
            .map(|((g, f3), f4)| {
                TuckerTerm::new(
                    g.clone(),
                    vec![None, None, Some(f3.clone()), Some(f4.clone())],
                )
                .expect("validated at construction")
            })
            .collect();
        let (d1, d2) = self.kernel_size();
        BlockTermDecomp::new(terms, vec![d1, d2, self.in_channels(), self.out_channels()])
            .expect("validated at construction")
    }

    /// The dense kernel `sum_r G_r x_3 A3_r x_4 A4_r`, stride 1, same padding.
    pub fn compose(&self) -> ConvKernel {
        ConvKernel::new(self.to_decomposition().reconstruct()).expect("odd spatial size")
    }

    pub fn num_terms(&self) -> usize {
        self.cores.len()
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.cores[0].shape()[0], self.cores[0].shape()[1])
    }

    pub fn in_channels(&self) -> usize {
        self.a3[0].rows()
    }

    pub fn out_channels(&self) -> usize {
        self.a4[0].rows()
    }

    /// `(d3*, d4*)`.
    pub fn ranks(&self) -> (usize, usize) {
        (self.a3[0].cols(), self.a4[0].cols())
    }

    pub fn a3(&self) -> &[FactorMatrix] {
        &self.a3
    }

    pub fn cores(&self) -> &[DenseTensor] {
        &self.cores
    }

    pub fn a4(&self) -> &[FactorMatrix] {
        &self.a4
    }

    /// Weights of the first pointwise conv: the `A3_r^T` stacked, `(R d3*) x d3`.
    pub fn first_pointwise(&self) -> FactorMatrix {
        let blocks: Vec<FactorMatrix> = self.a3.iter().map(FactorMatrix::transpose).collect();
        FactorMatrix::vstack(&blocks).expect("uniform widths")
    }

    /// Weights of the last pointwise conv: the `A4_r` side by side, `d4 x (R d4*)`.
    pub fn last_pointwise(&self) -> FactorMatrix {
        FactorMatrix::hstack(&self.a4).expect("uniform heights")
    }

    /// Runs the first two stages, returning the `(w, h, R d4*)` grouped output.
    pub(crate) fn shared_stages(&self, input: &DenseTensor) -> Result<DenseTensor> {
        front_stages(input, &self.a3, &self.cores, &self.act1, &self.act2)
    }

    pub fn num_params(&self) -> usize {
        self.to_decomposition().stored_len()
    }
}

/// First pointwise stage (stacked `A3_r^T`) and `act1`, then the grouped
/// spatial stage with "same" padding and `act2`.
pub(crate) fn front_stages(
    input: &DenseTensor,
    a3: &[FactorMatrix],
    cores: &[DenseTensor],
    act1: &Activation,
    act2: &Activation,
) -> Result<DenseTensor> {
    let (_, _, c) = check_feature_map(input)?;
    if c != a3[0].rows() {
        return Err(Error::argument(format!(
            "input has {c} channels, unit expects {}",
            a3[0].rows()
        )));
    }
    let (d1, d2) = (cores[0].shape()[0], cores[0].shape()[1]);
    let blocks: Vec<FactorMatrix> = a3.iter().map(FactorMatrix::transpose).collect();
    let first = FactorMatrix::vstack(&blocks)?;
    let t1 = pointwise_conv(input, &first)?.activate(act1)?;
    grouped_conv2d(&t1, cores, (1, 1), ((d1 - 1) / 2, (d2 - 1) / 2))?.activate(act2)
}

/// Evaluates a factored unit on a `(w, h, d3)` map: first pointwise stage and
/// `act1`, grouped spatial stage and `act2`, last pointwise stage. No
/// activation follows the last stage.
pub fn factored_forward(input: &DenseTensor, unit: &FactoredConvUnit) -> Result<DenseTensor> {
    let t2 = unit.shared_stages(input)?;
    pointwise_conv(&t2, &unit.last_pointwise())
}

/// Fits a rank-`(., ., d3*, d4*)` block term decomposition with `terms`
/// terms to the kernel and packages it as a factored unit with identity
/// activations. Returns the unit and its relative reconstruction error.
pub fn compress_kernel(
    kernel: &ConvKernel,
    terms: usize,
    rank_in: usize,
    rank_out: usize,
    cfg: &AlsConfig,
) -> Result<(FactoredConvUnit, f64)> {
    if rank_in == 0 || rank_in > kernel.in_channels() {
        return Err(Error::argument(format!(
            "input rank {rank_in} must be in 1..={}",
            kernel.in_channels()
        )));
    }
    if rank_out == 0 || rank_out > kernel.out_channels() {
        return Err(Error::argument(format!(
            "output rank {rank_out} must be in 1..={}",
            kernel.out_channels()
        )));
    }
    let fit = btd_als(
        kernel.tensor(),
        terms,
        &[None, None, Some(rank_in), Some(rank_out)],
        cfg,
    )?;
    let unit = FactoredConvUnit::from_decomposition(&fit.decomposition)?;
    Ok((unit, fit.final_error()))
}
