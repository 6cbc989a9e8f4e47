//! Audio encoder: filter-bank standardization, a four-block strided 2-D
//! conv stack (stride 2 in time per block, 16 total), and a linear
//! projection of the flattened channel/mel axes to the model width.

use rand_chacha::ChaCha8Rng;

use super::nn::{add_positional, Linear};
use crate::audiofeat::FilterBankFeatures;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Channel-major activation grid `[ch, t, m]`.
#[derive(Debug, Clone)]
pub struct Grid {
    pub ch: usize,
    pub t: usize,
    pub m: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(ch: usize, t: usize, m: usize) -> Self {
        Grid {
            ch,
            t,
            m,
            data: vec![0.0; ch * t * m],
        }
    }

    #[inline]
    fn idx(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.t + i) * self.m + j
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.idx(c, i, j)]
    }
}

/// 3x3 convolution with replicate padding and configurable stride.
/// Replicate padding keeps constant inputs constant across output rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[out_ch, in_ch, 3, 3]`
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride_t: usize,
    pub stride_m: usize,
}

impl Conv2d {
    pub fn new(out_ch: usize, in_ch: usize, stride_t: usize, stride_m: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_ch * 9;
        let fan_out = out_ch * 9;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Conv2d {
            kernel: Tensor::uniform(&[out_ch, in_ch, 3, 3], limit, rng),
            bias: Tensor::zeros(&[out_ch]),
            stride_t,
            stride_m,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.kernel, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.kernel, &mut self.bias]
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        vec![format!("{prefix}.kernel"), format!("{prefix}.bias")]
    }

    pub fn out_dims(&self, t: usize, m: usize) -> (usize, usize) {
        // pad 1, kernel 3: out = floor((n - 1) / stride) + 1 = ceil(n / stride)
        ((t - 1) / self.stride_t + 1, (m - 1) / self.stride_m + 1)
    }

    pub fn forward(&self, x: &Grid) -> Grid {
        let out_ch = self.kernel.shape()[0];
        let in_ch = self.kernel.shape()[1];
        assert_eq!(x.ch, in_ch, "conv input channels");
        let (ot, om) = self.out_dims(x.t, x.m);
        let mut y = Grid::zeros(out_ch, ot, om);
        let kd = self.kernel.data();
        for co in 0..out_ch {
            let bias = self.bias.data()[co];
            for i in 0..ot {
                let ti = i * self.stride_t;
                for j in 0..om {
                    let mj = j * self.stride_m;
                    let mut acc = bias;
                    for ci in 0..in_ch {
                        let kbase = ((co * in_ch + ci) * 3) * 3;
                        for a in 0..3usize {
                            // replicate padding: clamp source index
                            let si = (ti + a).saturating_sub(1).min(x.t - 1);
                            for b in 0..3usize {
                                let sj = (mj + b).saturating_sub(1).min(x.m - 1);
                                acc += kd[kbase + a * 3 + b] * x.get(ci, si, sj);
                            }
                        }
                    }
                    y.data[(co * ot + i) * om + j] = acc;
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &Grid, dy: &Grid, grads: &mut Conv2d) -> Grid {
        let out_ch = self.kernel.shape()[0];
        let in_ch = self.kernel.shape()[1];
        let (ot, om) = (dy.t, dy.m);
        let mut dx = Grid::zeros(x.ch, x.t, x.m);
        let kd = self.kernel.data();
        let gk = grads.kernel.data_mut();
        let gb = grads.bias.data_mut();
        for co in 0..out_ch {
            for i in 0..ot {
                let ti = i * self.stride_t;
                for j in 0..om {
                    let mj = j * self.stride_m;
                    let g = dy.get(co, i, j);
                    if g == 0.0 {
                        continue;
                    }
                    gb[co] += g;
                    for ci in 0..in_ch {
                        let kbase = ((co * in_ch + ci) * 3) * 3;
                        for a in 0..3usize {
                            let si = (ti + a).saturating_sub(1).min(x.t - 1);
                            for b in 0..3usize {
                                let sj = (mj + b).saturating_sub(1).min(x.m - 1);
                                let xin = x.get(ci, si, sj);
                                gk[kbase + a * 3 + b] += g * xin;
                                dx.data[(ci * x.t + si) * x.m + sj] += g * kd[kbase + a * 3 + b];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// The full audio path: standardize, conv blocks with ReLU, flatten the
/// channel/mel axes per time step, project to `d`, optionally add a
/// sinusoidal positional encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEncoder {
    pub blocks: Vec<Conv2d>,
    pub proj: Linear,
    pub positional: bool,
    pub mel_bins: usize,
    pub total_stride: usize,
}

pub struct AudioCache {
    inputs: Vec<Grid>,     // input to each conv block (post standardization for block 0)
    activations: Vec<Grid>, // post-ReLU output of each block
    flat: Tensor,          // [t', ch*m'] input to proj
}

impl AudioEncoder {
    pub fn new(
        mel_bins: usize,
        channels: &[usize],
        time_stride: usize,
        d: usize,
        positional: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut blocks = Vec::with_capacity(channels.len());
        let mut in_ch = 1;
        let mut m = mel_bins;
        for &out_ch in channels {
            blocks.push(Conv2d::new(out_ch, in_ch, time_stride, 2, rng));
            in_ch = out_ch;
            m = (m - 1) / 2 + 1;
        }
        let flat_dim = in_ch * m;
        AudioEncoder {
            blocks,
            proj: Linear::new(d, flat_dim, rng),
            positional,
            mel_bins,
            total_stride: time_stride.pow(channels.len() as u32),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(self.proj.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.proj.params_mut());
        out
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.param_names(&format!("{prefix}.conv{i}")));
        }
        out.extend(self.proj.param_names(&format!("{prefix}.proj")));
        out
    }

    /// Matrix-global standardization of the feature matrix; constant
    /// matrices map to zeros.
    pub fn standardize(features: &FilterBankFeatures) -> Grid {
        let n = features.frames.len();
        let mean = features.frames.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = features
            .frames
            .iter()
            .map(|&v| (v as f64 - mean) * (v as f64 - mean))
            .sum::<f64>()
            / n as f64;
        let std = if var.sqrt() < 1e-8 { 1.0 } else { var.sqrt() };
        let mut grid = Grid::zeros(1, features.num_frames, features.num_mel_bins);
        for (g, &v) in grid.data.iter_mut().zip(&features.frames) {
            *g = (v as f64 - mean) / std;
        }
        grid
    }

    /// Encoded frame count for a given input frame count.
    pub fn encoded_frames(&self, num_frames: usize) -> usize {
        let mut t = num_frames;
        for b in &self.blocks {
            t = (t - 1) / b.stride_t + 1;
        }
        t
    }

    pub fn forward(&self, features: &FilterBankFeatures) -> Result<(Tensor, AudioCache)> {
        if features.num_mel_bins != self.mel_bins {
            return Err(Error::ShapeMismatch {
                context: "audio encoder mel bins".into(),
                expected: self.mel_bins.to_string(),
                got: features.num_mel_bins.to_string(),
            });
        }
        if features.num_frames < self.total_stride {
            return Err(Error::TooFewFrames {
                frames: features.num_frames,
                min: self.total_stride,
            });
        }
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut activations = Vec::with_capacity(self.blocks.len());
        let mut x = Self::standardize(features);
        for block in &self.blocks {
            inputs.push(x.clone());
            let mut y = block.forward(&x);
            for v in y.data.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            activations.push(y.clone());
            x = y;
        }
        // Flatten [ch, t', m'] -> [t', ch*m']
        let (ch, t, m) = (x.ch, x.t, x.m);
        let mut flat = Tensor::zeros(&[t, ch * m]);
        for c in 0..ch {
            for i in 0..t {
                for j in 0..m {
                    flat.row_mut(i)[c * m + j] = x.get(c, i, j);
                }
            }
        }
        let mut h = self.proj.forward(&flat);
        if self.positional {
            add_positional(&mut h);
        }
        Ok((
            h,
            AudioCache {
                inputs,
                activations,
                flat,
            },
        ))
    }

    pub fn backward(&self, cache: &AudioCache, dh: &Tensor, grads: &mut AudioEncoder) {
        // Positional encoding is additive.
        let dflat = self.proj.backward(&cache.flat, dh, &mut grads.proj);
        let last = cache.activations.last().expect("conv blocks");
        let (ch, t, m) = (last.ch, last.t, last.m);
        let mut dgrid = Grid::zeros(ch, t, m);
        for c in 0..ch {
            for i in 0..t {
                for j in 0..m {
                    dgrid.data[(c * t + i) * m + j] = dflat.row(i)[c * m + j];
                }
            }
        }
        for bi in (0..self.blocks.len()).rev() {
            // ReLU mask from the stored post-activation.
            for (dv, h) in dgrid.data.iter_mut().zip(&cache.activations[bi].data) {
                if *h == 0.0 {
                    *dv = 0.0;
                }
            }
            dgrid = self.blocks[bi].backward(&cache.inputs[bi], &dgrid, &mut grads.blocks[bi]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audiofeat::{FRAME_LEN_MS, FRAME_SHIFT_MS};
    use rand::SeedableRng;

    fn features(num_frames: usize, bins: usize, f: impl Fn(usize, usize) -> f32) -> FilterBankFeatures {
        let mut frames = vec![0f32; num_frames * bins];
        for i in 0..num_frames {
            for j in 0..bins {
                frames[i * bins + j] = f(i, j);
            }
        }
        FilterBankFeatures {
            frames,
            num_frames,
            num_mel_bins: bins,
            frame_len_ms: FRAME_LEN_MS,
            frame_shift_ms: FRAME_SHIFT_MS,
            sample_rate_hz: 4000,
        }
    }

    #[test]
    fn encoded_frame_count_is_ceil_div() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = AudioEncoder::new(16, &[2, 2, 2, 2], 2, 8, false, &mut rng);
        assert_eq!(enc.total_stride, 16);
        assert_eq!(enc.encoded_frames(1873), 118);
        let fb = features(1873, 16, |i, j| ((i * 7 + j) % 13) as f32 * 0.1);
        let (h, _) = enc.forward(&fb).unwrap();
        assert_eq!(h.rows(), 118);
        assert_eq!(h.cols(), 8);
    }

    #[test]
    fn constant_input_rows_identical_without_positional() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = AudioEncoder::new(8, &[2, 3], 2, 6, false, &mut rng);
        let fb = features(64, 8, |_, _| 0.37);
        let (h, _) = enc.forward(&fb).unwrap();
        for r in 1..h.rows() {
            assert_eq!(h.row(r), h.row(0), "row {r}");
        }
    }

    #[test]
    fn too_few_frames_errors_with_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = AudioEncoder::new(8, &[2, 2, 2, 2], 2, 6, false, &mut rng);
        let fb = features(10, 8, |_, _| 0.1);
        match enc.forward(&fb) {
            Err(Error::TooFewFrames { min, .. }) => assert_eq!(min, 16),
            Err(other) => panic!("expected TooFewFrames, got {other:?}"),
            Ok(_) => panic!("expected TooFewFrames, got success"),
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = Conv2d::new(3, 2, 2, 2, &mut rng);
        let mut x = Grid::zeros(2, 7, 5);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f64 - 5.0) * 0.1;
        }
        let wsum: Vec<f64> = (0..3 * 4 * 3).map(|i| ((i % 7) as f64 - 3.0) * 0.2).collect();
        let loss = |conv: &Conv2d, x: &Grid| -> f64 {
            let y = conv.forward(x);
            y.data.iter().zip(&wsum).map(|(a, b)| a * b).sum()
        };
        let y = conv.forward(&x);
        assert_eq!((y.ch, y.t, y.m), (3, 4, 3));
        let mut grads = conv.clone();
        grads.params_mut().into_iter().for_each(|t| t.zero());
        let mut dy = Grid::zeros(3, 4, 3);
        dy.data.copy_from_slice(&wsum);
        let dx = conv.backward(&x, &dy, &mut grads);

        let h = 1e-6;
        // kernel gradients
        let mut probe = conv.clone();
        for idx in [0usize, 17, 53] {
            let orig = probe.kernel.data()[idx];
            probe.kernel.data_mut()[idx] = orig + h;
            let up = loss(&probe, &x);
            probe.kernel.data_mut()[idx] = orig - h;
            let down = loss(&probe, &x);
            probe.kernel.data_mut()[idx] = orig;
            let want = (up - down) / (2.0 * h);
            let got = grads.kernel.data()[idx];
            assert!((got - want).abs() < 1e-6 * want.abs().max(1.0), "k[{idx}] {got} vs {want}");
        }
        // input gradients
        let mut xp = x.clone();
        for idx in [0usize, 23, 69] {
            let orig = xp.data[idx];
            xp.data[idx] = orig + h;
            let up = loss(&conv, &xp);
            xp.data[idx] = orig - h;
            let down = loss(&conv, &xp);
            xp.data[idx] = orig;
            let want = (up - down) / (2.0 * h);
            assert!((dx.data[idx] - want).abs() < 1e-6 * want.abs().max(1.0));
        }
    }
}
