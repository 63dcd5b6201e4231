//! Region scorer: a stack of `conv3×3 → ReLU → maxpool2×2` blocks, global
//! average pooling and a single affine output unit producing the logit `h`.
//!
//! Parameters live in one flat vector. Layer order is conv blocks first
//! (weights `[c_out, c_in·9]` then biases `[c_out]`), then the affine weights
//! `[c_last]` and bias. Gradients use the same layout.

use std::fs;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::milloss::log_sigmoid;
use crate::seeds;

pub const DEFAULT_CHANNELS: [usize; 4] = [3, 8, 16, 32];
pub const DEFAULT_INPUT_SIZE: usize = 64;

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WMILCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Input size and channel progression of the conv stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_size: usize,
    /// `channels[0]` is the input depth; one conv block per following entry.
    pub channels: Vec<usize>,
}

impl Architecture {
    pub fn new(input_size: usize) -> Result<Self> {
        Architecture::with_channels(input_size, DEFAULT_CHANNELS.to_vec())
    }

    pub fn with_channels(input_size: usize, channels: Vec<usize>) -> Result<Self> {
        let arch = Architecture { input_size, channels };
        arch.validate()?;
        Ok(arch)
    }

    fn validate(&self) -> Result<()> {
        let blocks = self.channels.len().saturating_sub(1);
        if blocks == 0 || blocks > 8 {
            return Err(Error::Shape(format!("{blocks} conv blocks (need 1..=8)")));
        }
        if self.channels[0] != 3 {
            return Err(Error::Shape(format!("input depth must be 3, got {}", self.channels[0])));
        }
        if self.channels.iter().any(|&c| c == 0 || c > 1024) {
            return Err(Error::Shape(format!("bad channel list {:?}", self.channels)));
        }
        let stride = 1usize << blocks;
        if self.input_size == 0 || self.input_size > 4096 || !self.input_size.is_multiple_of(stride) {
            return Err(Error::Shape(format!(
                "input size {} must be a positive multiple of {stride} up to 4096",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    /// Offsets of each block's weights and biases, then the affine head.
    fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut convs = Vec::with_capacity(self.blocks());
        for pair in self.channels.windows(2) {
            let (c_in, c_out) = (pair[0], pair[1]);
            let weights = offset;
            offset += c_out * c_in * TAPS;
            let bias = offset;
            offset += c_out;
            convs.push(ConvSlot {
                c_in,
                c_out,
                weights,
                bias,
            });
        }
        let head_weights = offset;
        offset += self.feature_dim();
        let head_bias = offset;
        offset += 1;
        Layout {
            convs,
            head_weights,
            head_bias,
            total: offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    c_in: usize,
    c_out: usize,
    weights: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<ConvSlot>,
    head_weights: usize,
    head_bias: usize,
    total: usize,
}

/// Trainable weights of the scorer plus the seed they were initialised from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    seed: u64,
    values: Vec<f64>,
    fingerprint: u64,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.param_count();
        ModelParams::from_values(arch, 0, vec![0.0; n]).expect("sized by layout")
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let layout = arch.layout();
        let mut values = vec![0.0; layout.total];
        let mut rng = seeds::rng(seed);
        for slot in &layout.convs {
            let fan_in = slot.c_in * TAPS;
            let fan_out = slot.c_out * TAPS;
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut values[slot.weights..slot.bias] {
                *v = rng.random_range(-s..s);
            }
        }
        let s = (6.0 / (arch.feature_dim() + 1) as f64).sqrt();
        for v in &mut values[layout.head_weights..layout.head_bias] {
            *v = rng.random_range(-s..s);
        }
        ModelParams::from_values(arch, seed, values).expect("finite init")
    }

    pub fn from_values(arch: Architecture, seed: u64, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for an architecture needing {}",
                values.len(),
                arch.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameter".into()));
        }
        let fingerprint = fingerprint(&values);
        Ok(ModelParams {
            arch,
            seed,
            values,
            fingerprint,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mutates the parameter vector in place.
    ///
    /// Fails (leaving the old values) if the update produces a non-finite entry.
    pub fn update(&mut self, f: impl FnOnce(&mut [f64])) -> Result<()> {
        let mut next = self.values.clone();
        f(&mut next);
        if let Some(i) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i} after update")));
        }
        self.fingerprint = fingerprint(&next);
        self.values = next;
        Ok(())
    }

    /// Bias of the output unit; shifting it moves every logit by the same amount.
    pub fn head_bias(&self) -> f64 {
        self.values[self.arch.layout().head_bias]
    }
}

fn fingerprint(values: &[f64]) -> u64 {
    values.iter().fold(0xcbf2_9ce4_8422_2325_u64, |h, v| {
        (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Gradient of a scalar with respect to every parameter, in parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients(Vec<f64>);

impl ParamGradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        ParamGradients(vec![0.0; params.len()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn add_assign(&mut self, other: &ParamGradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.0 {
            *a *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Logit and Bernoulli probabilities of one region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceOutput {
    pub h: f64,
    pub p_pos: f64,
    pub p_neg: f64,
}

impl InstanceOutput {
    /// `p+ = e^h / (e^h + 1)`, `p- = 1 / (e^h + 1)`, evaluated without overflow.
    pub fn from_logit(h: f64) -> Self {
        let (p_pos, p_neg) = if h >= 0.0 {
            let p_neg = log_sigmoid(-h).exp();
            (1.0 - p_neg, p_neg)
        } else {
            let p_pos = log_sigmoid(h).exp();
            (p_pos, 1.0 - p_pos)
        };
        InstanceOutput { h, p_pos, p_neg }
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    side: usize,
    /// im2col matrix `[c_in·9, side²]` of the block input.
    cols: Vec<f64>,
    /// Pre-activation `[c_out, side²]`.
    pre: Vec<f64>,
    /// Flat index into `pre` chosen by each pooling window.
    argmax: Vec<u32>,
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ActivationCache {
    fingerprint: u64,
    arch: Architecture,
    blocks: Vec<BlockCache>,
    features: Vec<f64>,
    pooled_side: usize,
}

impl ActivationCache {
    /// Smallest distance of any ReLU input from zero and of any pooling
    /// winner from its runner-up (among positive activations).
    ///
    /// Finite-difference checks only make sense when this margin exceeds the
    /// perturbation's effect on activations.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for b in &self.blocks {
            for &z in &b.pre {
                margin = margin.min(z.abs());
            }
            let side = b.side;
            let c_out = b.pre.len() / (side * side);
            let half = side / 2;
            for c in 0..c_out {
                for py in 0..half {
                    for px in 0..half {
                        let mut vals = [0.0; 4];
                        for (k, v) in vals.iter_mut().enumerate() {
                            let (dy, dx) = (k / 2, k % 2);
                            *v = b.pre[c * side * side + (2 * py + dy) * side + 2 * px + dx].max(0.0);
                        }
                        vals.sort_by(|a, b| b.total_cmp(a));
                        if vals[0] > 0.0 {
                            margin = margin.min(vals[0] - vals[1]);
                        }
                    }
                }
            }
        }
        margin
    }
}

fn check_input(arch: &Architecture, region: &Image) -> Result<()> {
    if region.width() != arch.input_size || region.height() != arch.input_size || region.channels() != arch.channels[0]
    {
        return Err(Error::Shape(format!(
            "model expects {0}x{0}x{1} input, got {2}x{3}x{4}",
            arch.input_size,
            arch.channels[0],
            region.width(),
            region.height(),
            region.channels()
        )));
    }
    Ok(())
}

/// Interleaved HWC pixels to planar CHW.
fn to_planar(region: &Image) -> Vec<f64> {
    let (w, h, c) = (region.width(), region.height(), region.channels());
    let mut out = vec![0.0; w * h * c];
    for (i, px) in region.pixels().chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            out[ch * w * h + i] = v;
        }
    }
    out
}

fn im2col(input: &[f64], c_in: usize, side: usize, cols: &mut [f64]) {
    let hw = side * side;
    for ci in 0..c_in {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[(ci * TAPS + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..side {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * side..(y + 1) * side];
                    if sy < 0 || sy >= side as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * side..(sy as usize + 1) * side];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..side - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..side - 1].copy_from_slice(&src[1..]);
                            dst[side - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c_in: usize, side: usize, out: &mut [f64]) {
    let hw = side * side;
    out.fill(0.0);
    for ci in 0..c_in {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[(ci * TAPS + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..side {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    let src = &row[y * side..(y + 1) * side];
                    let dst = &mut plane[sy as usize * side..(sy as usize + 1) * side];
                    match kx {
                        0 => dst[..side - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..side - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

fn mat<'a>(data: &'a [f64], rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix shape")
}

fn mat_mut<'a>(data: &'a mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix shape")
}

/// Scores one region: returns `h`, its probabilities, and the activations
/// needed by [`backward`].
pub fn forward(params: &ModelParams, region: &Image) -> Result<(InstanceOutput, ActivationCache)> {
    let arch = &params.arch;
    check_input(arch, region)?;
    let layout = arch.layout();
    let w = &params.values;

    let mut input = to_planar(region);
    let mut side = arch.input_size;
    let mut blocks = Vec::with_capacity(layout.convs.len());
    for slot in &layout.convs {
        let hw = side * side;
        let k = slot.c_in * TAPS;
        let mut cols = vec![0.0; k * hw];
        im2col(&input, slot.c_in, side, &mut cols);

        let mut pre = vec![0.0; slot.c_out * hw];
        for (c, row) in pre.chunks_exact_mut(hw).enumerate() {
            row.fill(w[slot.bias + c]);
        }
        general_mat_mul(
            1.0,
            &mat(&w[slot.weights..slot.bias], slot.c_out, k),
            &mat(&cols, k, hw),
            1.0,
            &mut mat_mut(&mut pre, slot.c_out, hw),
        );

        // ReLU fused into the 2×2 max pool: max(relu(z)) = relu(max(z)).
        let half = side / 2;
        let mut pooled = vec![0.0; slot.c_out * half * half];
        let mut argmax = vec![0u32; slot.c_out * half * half];
        for c in 0..slot.c_out {
            let plane = c * hw;
            for py in 0..half {
                for px in 0..half {
                    let base = plane + 2 * py * side + 2 * px;
                    let mut best = base;
                    for cand in [base + 1, base + side, base + side + 1] {
                        if pre[cand] > pre[best] {
                            best = cand;
                        }
                    }
                    let o = c * half * half + py * half + px;
                    pooled[o] = pre[best].max(0.0);
                    argmax[o] = best as u32;
                }
            }
        }
        blocks.push(BlockCache {
            side,
            cols,
            pre,
            argmax,
        });
        input = pooled;
        side = half;
    }

    let area = (side * side) as f64;
    let features: Vec<f64> = input
        .chunks_exact(side * side)
        .map(|plane| plane.iter().sum::<f64>() / area)
        .collect();
    let h = features
        .iter()
        .zip(&w[layout.head_weights..layout.head_bias])
        .map(|(f, a)| f * a)
        .sum::<f64>()
        + w[layout.head_bias];
    if !h.is_finite() {
        return Err(Error::NonFinite("region logit".into()));
    }
    Ok((
        InstanceOutput::from_logit(h),
        ActivationCache {
            fingerprint: params.fingerprint,
            arch: arch.clone(),
            blocks,
            features,
            pooled_side: side,
        },
    ))
}

/// Forward pass without keeping activations.
pub fn score(params: &ModelParams, region: &Image) -> Result<InstanceOutput> {
    forward(params, region).map(|(out, _)| out)
}

/// Gradient of `dl_dh · h` with respect to every parameter.
pub fn backward(params: &ModelParams, cache: &ActivationCache, dl_dh: f64) -> Result<ParamGradients> {
    let mut grads = ParamGradients::zeros_like(params);
    backward_into(params, cache, dl_dh, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but accumulates into `grads`.
pub fn backward_into(
    params: &ModelParams,
    cache: &ActivationCache,
    dl_dh: f64,
    grads: &mut ParamGradients,
) -> Result<()> {
    if cache.fingerprint != params.fingerprint || cache.arch != params.arch {
        return Err(Error::StaleCache(
            "activations were produced by different parameters".into(),
        ));
    }
    if grads.0.len() != params.len() {
        return Err(Error::Shape("gradient buffer does not match parameters".into()));
    }
    if dl_dh == 0.0 {
        return Ok(());
    }
    let layout = params.arch.layout();
    let w = &params.values;
    let g = &mut grads.0;

    g[layout.head_bias] += dl_dh;
    for (gi, f) in g[layout.head_weights..layout.head_bias].iter_mut().zip(&cache.features) {
        *gi += dl_dh * f;
    }

    // Gradient w.r.t. the last pooled map, spread evenly by the average pool.
    let side = cache.pooled_side;
    let area = (side * side) as f64;
    let mut d_pooled: Vec<f64> = w[layout.head_weights..layout.head_bias]
        .iter()
        .flat_map(|&a| std::iter::repeat_n(dl_dh * a / area, side * side))
        .collect();

    for (bi, (slot, block)) in layout.convs.iter().zip(&cache.blocks).enumerate().rev() {
        let hw = block.side * block.side;
        let k = slot.c_in * TAPS;
        let mut d_pre = vec![0.0; slot.c_out * hw];
        for (o, &idx) in block.argmax.iter().enumerate() {
            let idx = idx as usize;
            if block.pre[idx] > 0.0 {
                d_pre[idx] += d_pooled[o];
            }
        }
        for (c, row) in d_pre.chunks_exact(hw).enumerate() {
            g[slot.bias + c] += row.iter().sum::<f64>();
        }
        general_mat_mul(
            1.0,
            &mat(&d_pre, slot.c_out, hw),
            &mat(&block.cols, k, hw).t(),
            1.0,
            &mut mat_mut(&mut g[slot.weights..slot.bias], slot.c_out, k),
        );
        if bi == 0 {
            break;
        }
        let mut d_cols = vec![0.0; k * hw];
        general_mat_mul(
            1.0,
            &mat(&w[slot.weights..slot.bias], slot.c_out, k).t(),
            &mat(&d_pre, slot.c_out, hw),
            0.0,
            &mut mat_mut(&mut d_cols, k, hw),
        );
        let mut d_input = vec![0.0; slot.c_in * hw];
        col2im(&d_cols, slot.c_in, block.side, &mut d_input);
        d_pooled = d_input;
    }
    Ok(())
}

/// Serializes parameters: magic, version, architecture, seed, then the values
/// as little-endian `f64` in layout order.
pub fn encode_params(params: &ModelParams) -> Vec<u8> {
    let arch = &params.arch;
    let mut out = Vec::with_capacity(40 + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arch.input_size as u32).to_le_bytes());
    out.extend_from_slice(&(arch.channels.len() as u32).to_le_bytes());
    for &c in &arch.channels {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    out.extend_from_slice(&params.seed.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Little-endian cursor over checkpoint bytes.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        ByteReader { bytes, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint(format!("truncated {}", self.what)));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len()
    }
}

/// Parses bytes produced by [`encode_params`]; trailing data is an error.
pub fn decode_params(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = ByteReader::new(bytes, "model checkpoint");
    let params = read_params(&mut r)?;
    if r.remaining() != 0 {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
    }
    Ok(params)
}

pub(crate) fn read_params(r: &mut ByteReader<'_>) -> Result<ModelParams> {
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let input_size = r.u32()? as usize;
    let n_channels = r.u32()? as usize;
    if n_channels > 16 {
        return Err(Error::Checkpoint(format!("{n_channels} channel entries")));
    }
    let channels = (0..n_channels)
        .map(|_| r.u32().map(|c| c as usize))
        .collect::<Result<Vec<_>>>()?;
    let arch = Architecture::with_channels(input_size, channels)
        .map_err(|e| Error::Checkpoint(format!("architecture: {e}")))?;
    let seed = r.u64()?;
    let n = r.u64()?;
    if n != arch.param_count() as u64 {
        return Err(Error::Checkpoint(format!(
            "{n} parameters stored, architecture needs {}",
            arch.param_count()
        )));
    }
    let raw = r.take(8 * n as usize)?;
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ModelParams::from_values(arch, seed, values).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_params(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Image;
    use rand::Rng;

    fn random_image(size: usize, seed: u64) -> Image {
        let mut rng = seeds::rng(seed);
        let px = (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        Image::new(size, size, 3, px).unwrap()
    }

    fn random_params(arch: Architecture, seed: u64) -> ModelParams {
        let mut rng = seeds::rng(seed ^ 0xabcdef);
        let n = arch.param_count();
        let values = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        ModelParams::from_values(arch, seed, values).unwrap()
    }

    #[test]
    fn default_param_count() {
        let arch = Architecture::new(64).unwrap();
        assert_eq!(arch.param_count(), 224 + 1168 + 4640 + 33);
    }

    #[test]
    fn architecture_validation() {
        assert!(Architecture::new(60).is_err());
        assert!(Architecture::new(0).is_err());
        assert!(Architecture::with_channels(16, vec![1, 4]).is_err());
        assert!(Architecture::with_channels(16, vec![3]).is_err());
        assert!(Architecture::new(224).is_ok());
    }

    #[test]
    fn zero_network_outputs_half() {
        let params = ModelParams::zeros(Architecture::new(16).unwrap());
        let out = score(&params, &random_image(16, 1)).unwrap();
        assert_eq!(out.h, 0.0);
        assert_eq!(out.p_pos, 0.5);
    }

    #[test]
    fn sigmoid_values() {
        let o = InstanceOutput::from_logit(1.0);
        let e = std::f64::consts::E;
        assert!((o.p_pos - e / (e + 1.0)).abs() < 1e-15);
        assert!((o.p_pos - 0.731_058_578_630_004_9).abs() < 1e-15);
        for h in [-40.0, -3.2, 0.0, 0.7, 25.0, 800.0] {
            let a = InstanceOutput::from_logit(h);
            let b = InstanceOutput::from_logit(-h);
            assert_eq!(a.p_pos, b.p_neg);
            assert!((a.p_pos + a.p_neg - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let params = ModelParams::zeros(Architecture::new(16).unwrap());
        assert!(matches!(score(&params, &random_image(8, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_is_linear_and_zero_at_zero() {
        let params = random_params(Architecture::new(16).unwrap(), 3);
        let (_, cache) = forward(&params, &random_image(16, 4)).unwrap();
        let g0 = backward(&params, &cache, 0.0).unwrap();
        assert!(g0.as_slice().iter().all(|&v| v == 0.0));
        let g1 = backward(&params, &cache, 0.75).unwrap();
        let g2 = backward(&params, &cache, 1.5).unwrap();
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((2.0 * a - b).abs() <= 1e-14 * b.abs().max(1.0));
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let mut params = random_params(Architecture::new(16).unwrap(), 5);
        let (_, cache) = forward(&params, &random_image(16, 6)).unwrap();
        params.update(|v| v[0] += 1e-3).unwrap();
        assert!(matches!(backward(&params, &cache, 1.0), Err(Error::StaleCache(_))));
    }

    #[test]
    fn finite_difference_of_logit() {
        let arch = Architecture::with_channels(8, vec![3, 4, 6, 8]).unwrap();
        let mut seed = 10;
        let (params, img, cache) = loop {
            let params = random_params(arch.clone(), seed);
            let img = random_image(8, seed + 100);
            let (_, cache) = forward(&params, &img).unwrap();
            if cache.kink_margin() > 1e-3 {
                break (params, img, cache);
            }
            seed += 1;
        };
        let analytic = backward(&params, &cache, 1.0).unwrap();
        let step = 1e-5;
        let mut worst = 0.0_f64;
        for i in 0..params.len() {
            let mut p = params.clone();
            p.update(|v| v[i] += step).unwrap();
            let up = score(&p, &img).unwrap().h;
            let mut p = params.clone();
            p.update(|v| v[i] -= step).unwrap();
            let down = score(&p, &img).unwrap().h;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.as_slice()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        assert!(worst < 1e-5, "max relative error {worst}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let params = ModelParams::init(Architecture::new(32).unwrap(), 77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_params(&params, &path).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(encode_params(&back), encode_params(&params));
        assert_eq!(back.seed(), 77);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let bytes = encode_params(&ModelParams::init(Architecture::new(16).unwrap(), 1));
        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(decode_params(&bad_version).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode_params(&bad_magic).is_err());
        assert!(decode_params(&bytes[..bytes.len() - 1]).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode_params(&trailing).is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode_params(&nan).is_err());
    }

    #[test]
    fn glorot_init_bounds() {
        let arch = Architecture::new(16).unwrap();
        let params = ModelParams::init(arch.clone(), 9);
        let layout = arch.layout();
        let first = layout.convs[0];
        let s = (6.0f64 / (27 + 72) as f64).sqrt();
        assert!(params.values()[first.weights..first.bias].iter().all(|v| v.abs() <= s));
        assert!(params.values()[first.bias..first.bias + first.c_out]
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(params, ModelParams::init(arch, 9));
    }
}
