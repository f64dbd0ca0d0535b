use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

pub fn selu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

pub fn selu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| selu_scalar(v)).collect();
    Tensor::from_vec_unchecked(x.shape(), data)
}

/// Derivative of SELU expressed through its output `y`.
fn selu_grad_from_output(y: f64) -> f64 {
    if y > 0.0 {
        SELU_LAMBDA
    } else {
        y + SELU_LAMBDA * SELU_ALPHA
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    FullyConnected,
}

/// Geometry of one zero-padding convolution. Fully connected layers are
/// convolutions whose kernel covers their whole input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: [usize; 2],
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub dilation: usize,
    pub selu: bool,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.kernel.iter().all(|&k| k > 0)
            && self.in_channels > 0
            && self.out_channels > 0
            && self.stride >= 1
            && self.dilation >= 1
            && (self.stride == 1 || self.dilation == 1);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid layer {self:?}")))
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel[0] * self.kernel[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    /// Output spatial size `floor((n - d (k - 1) - 1) / s) + 1`, or `None`
    /// if the input is smaller than the dilated kernel.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ext_h = self.dilation * (self.kernel[0] - 1) + 1;
        let ext_w = self.dilation * (self.kernel[1] - 1) + 1;
        if h < ext_h || w < ext_w {
            return None;
        }
        Some(((h - ext_h) / self.stride + 1, (w - ext_w) / self.stride + 1))
    }
}

/// Weights `out x (in * kh * kw)` in row-major order plus one bias per
/// output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub spec: LayerSpec,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(spec: LayerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { weight: vec![0.0; spec.weight_len()], bias: vec![0.0; spec.out_channels], spec })
    }

    /// Glorot-uniform weights and zero biases.
    pub fn glorot<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        let mut c = Self::zeros(spec)?;
        let area = (c.spec.kernel[0] * c.spec.kernel[1]) as f64;
        let fan_in = c.spec.in_channels as f64 * area;
        let fan_out = c.spec.out_channels as f64 * area;
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        for w in &mut c.weight {
            *w = rng.random_range(-limit..=limit);
        }
        Ok(c)
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        if x.channels() != self.spec.in_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input channels for {}", self.spec.in_channels, self.spec.name),
                actual: format!("{}", x.channels()),
            });
        }
        self.spec.output_size(x.height(), x.width()).ok_or_else(|| Error::ShapeMismatch {
            expected: format!(
                "input at least as large as the effective kernel of {}",
                self.spec.name
            ),
            actual: format!("{}x{}", x.height(), x.width()),
        })
    }

    fn is_pointwise(&self) -> bool {
        self.spec.kernel == [1, 1] && self.spec.stride == 1
    }

    /// Cross-correlation plus bias, optionally followed by SELU.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (oh, ow) = self.check_input(x)?;
        let n = oh * ow;
        let k = self.spec.in_channels * self.spec.kernel[0] * self.spec.kernel[1];
        let mut out = vec![0.0; self.spec.out_channels * n];
        for (o, b) in self.bias.iter().enumerate() {
            out[o * n..(o + 1) * n].fill(*b);
        }
        let cols_storage;
        let cols: &[f64] = if self.is_pointwise() {
            x.data()
        } else {
            cols_storage = im2col(x, &self.spec, oh, ow);
            &cols_storage
        };
        gemm(self.spec.out_channels, k, n, &self.weight, false, cols, false, &mut out, 1.0);
        if self.spec.selu {
            for v in &mut out {
                *v = selu_scalar(*v);
            }
        }
        Ok(Tensor::from_vec_unchecked([self.spec.out_channels, oh, ow], out))
    }

    /// Backpropagates `grad_out` (gradient with respect to this layer's
    /// output `y`, post-activation) given the layer input `x`. Accumulates
    /// parameter gradients into `gw`/`gb` and returns the input gradient if
    /// requested.
    pub fn backward(
        &self,
        x: &Tensor,
        y: &Tensor,
        grad_out: &Tensor,
        gw: &mut [f64],
        gb: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let (oh, ow) = (y.height(), y.width());
        let n = oh * ow;
        let k = self.spec.in_channels * self.spec.kernel[0] * self.spec.kernel[1];
        let mut g = grad_out.data().to_vec();
        if self.spec.selu {
            for (gv, yv) in g.iter_mut().zip(y.data()) {
                *gv *= selu_grad_from_output(*yv);
            }
        }
        for (o, b) in gb.iter_mut().enumerate() {
            *b += g[o * n..(o + 1) * n].iter().sum::<f64>();
        }
        let pointwise = self.is_pointwise();
        let cols_storage;
        let cols: &[f64] = if pointwise {
            x.data()
        } else {
            cols_storage = im2col(x, &self.spec, oh, ow);
            &cols_storage
        };
        gemm(self.spec.out_channels, n, k, &g, false, cols, true, gw, 1.0);
        if !need_input_grad {
            return None;
        }
        let mut gcols = vec![0.0; k * n];
        gemm(k, self.spec.out_channels, n, &self.weight, true, &g, false, &mut gcols, 0.0);
        let data = if pointwise { gcols } else { col2im(&gcols, x.shape(), &self.spec, oh, ow) };
        Some(Tensor::from_vec_unchecked(x.shape(), data))
    }
}

/// `K x N` patch matrix with `K = c * kh * kw` and `N = oh * ow`.
fn im2col(x: &Tensor, s: &LayerSpec, oh: usize, ow: usize) -> Vec<f64> {
    let [c, h, w] = x.shape();
    let [kh, kw] = s.kernel;
    let n = oh * ow;
    let data = x.data();
    let mut cols = vec![0.0; c * kh * kw * n];
    let mut row = 0;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = oy * s.stride + ky * s.dilation;
                    let src = (ch * h + iy) * w + kx * s.dilation;
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    if s.stride == 1 {
                        out.copy_from_slice(&data[src..src + ow]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            *o = data[src + ox * s.stride];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back to the input.
fn col2im(cols: &[f64], shape: [usize; 3], s: &LayerSpec, oh: usize, ow: usize) -> Vec<f64> {
    let [c, h, w] = shape;
    let [kh, kw] = s.kernel;
    let n = oh * ow;
    let mut out = vec![0.0; c * h * w];
    let mut row = 0;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = oy * s.stride + ky * s.dilation;
                    let base = (ch * h + iy) * w + kx * s.dilation;
                    for (ox, v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        out[base + ox * s.stride] += v;
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// `c = beta * c + op(a) * op(b)` for row-major `op(a): m x k`,
/// `op(b): k x n`, where `op` optionally transposes the stored matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every element addressed by these
    // strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(kernel: [usize; 2], cin: usize, cout: usize, stride: usize, dilation: usize) -> LayerSpec {
        LayerSpec {
            name: "t".into(),
            kind: LayerKind::Conv,
            kernel,
            in_channels: cin,
            out_channels: cout,
            stride,
            dilation,
            selu: false,
        }
    }

    /// Direct nested-loop cross-correlation.
    fn naive(x: &Tensor, c: &Conv2d) -> Tensor {
        let s = &c.spec;
        let (oh, ow) = s.output_size(x.height(), x.width()).unwrap();
        let mut out = vec![0.0; s.out_channels * oh * ow];
        for o in 0..s.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = c.bias[o];
                    for i in 0..s.in_channels {
                        for ky in 0..s.kernel[0] {
                            for kx in 0..s.kernel[1] {
                                let w = c.weight
                                    [((o * s.in_channels + i) * s.kernel[0] + ky) * s.kernel[1] + kx];
                                acc += w * x.get(
                                    i,
                                    oy * s.stride + ky * s.dilation,
                                    ox * s.stride + kx * s.dilation,
                                );
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor::new([s.out_channels, oh, ow], out).unwrap()
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let mut c = Conv2d::zeros(spec([1, 1], 1, 1, 1, 1)).unwrap();
        c.weight[0] = 1.0;
        let x = Tensor::new([1, 3, 4], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(c.forward(&x).unwrap(), x);
    }

    #[test]
    fn ones_kernel_sums_nine() {
        let mut c = Conv2d::zeros(spec([3, 3], 1, 1, 1, 1)).unwrap();
        c.weight.fill(1.0);
        let y = c.forward(&Tensor::new([1, 5, 5], vec![1.0; 25]).unwrap()).unwrap();
        assert_eq!(y.shape(), [1, 3, 3]);
        assert!(y.data().iter().all(|v| *v == 9.0));
    }

    #[test]
    fn floor_formula_for_strided_conv() {
        let s = spec([3, 3], 1, 1, 2, 1);
        assert_eq!(s.output_size(57, 57), Some((28, 28)));
        assert_eq!(s.output_size(26, 26), Some((12, 12)));
        assert_eq!(s.output_size(10, 10), Some((4, 4)));
        assert_eq!(spec([3, 3], 1, 1, 1, 4).output_size(8, 8), None);
        let c = Conv2d::zeros(spec([3, 3], 1, 1, 1, 4)).unwrap();
        assert!(c.forward(&Tensor::zeros([1, 8, 8])).is_err());
    }

    #[test]
    fn gemm_matches_naive_for_strides_and_dilations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (stride, dilation) in [(1, 1), (2, 1), (1, 3)] {
            let mut c = Conv2d::glorot(spec([3, 2], 3, 4, stride, dilation), &mut rng).unwrap();
            c.bias = vec![0.1, -0.2, 0.3, 0.0];
            let x = Tensor::new([3, 11, 12], (0..396).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let a = c.forward(&x).unwrap();
            let b = naive(&x, &c);
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selu_values_and_monotonicity() {
        assert_eq!(selu_scalar(0.0), 0.0);
        assert!((selu_scalar(1.0) - 1.0507).abs() < 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a: f64 = rng.random_range(-10.0..10.0);
            let b: f64 = rng.random_range(-10.0..10.0);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            assert!(selu_scalar(lo) <= selu_scalar(hi));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(Conv2d::zeros(spec([3, 3], 1, 1, 2, 2)).is_err());
        assert!(Conv2d::zeros(spec([0, 3], 1, 1, 1, 1)).is_err());
    }
}
