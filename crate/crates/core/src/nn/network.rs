use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::{Conv2d, LayerKind, LayerSpec};
use super::tensor::{shift_feature_map, shifted_pixel_valid, Tensor};
use crate::error::{Error, Result};

/// Number of actions scored per agent.
pub const ACTION_COUNT: usize = 12;

/// Channel widths of the policy network. `output_dim` is 12 (one reward per
/// action) or 6 (one per generator; the negative action is scored as the
/// negation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub roi_size: usize,
    pub conv_channels: [usize; 7],
    pub fc_width: usize,
    pub feature_dim: usize,
    pub decoder_width: usize,
    pub output_dim: usize,
}

impl NetworkConfig {
    pub fn full_width() -> Self {
        Self {
            roi_size: 61,
            conv_channels: [32, 32, 64, 64, 128, 128, 256],
            fc_width: 1024,
            feature_dim: 128,
            decoder_width: 1024,
            output_dim: ACTION_COUNT,
        }
    }

    /// Full-width layout with every hidden width divided by `divisor`. The
    /// 128-wide feature vector and the output stay fixed.
    pub fn narrowed(divisor: usize) -> Self {
        let f = Self::full_width();
        let d = divisor.max(1);
        Self {
            conv_channels: f.conv_channels.map(|c| (c / d).max(1)),
            fc_width: (f.fc_width / d).max(1),
            decoder_width: (f.decoder_width / d).max(1),
            ..f
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim != 6 && self.output_dim != ACTION_COUNT {
            return Err(Error::InvalidParameter(format!(
                "output_dim must be 6 or 12, got {}",
                self.output_dim
            )));
        }
        if self.roi_size.is_multiple_of(2) {
            return Err(Error::InvalidParameter("roi_size must be odd".into()));
        }
        let widths = self.conv_channels.iter().chain([
            &self.fc_width,
            &self.feature_dim,
            &self.decoder_width,
        ]);
        if widths.into_iter().any(|w| *w == 0) {
            return Err(Error::InvalidParameter("layer widths must be positive".into()));
        }
        self.encoder_specs().map(|_| ())
    }

    /// Encoder layers in CNN form. The first fully connected layer spans
    /// whatever spatial extent the convolutions leave.
    pub fn encoder_specs(&self) -> Result<Vec<LayerSpec>> {
        const STRIDES: [usize; 7] = [1, 1, 2, 1, 2, 1, 2];
        let mut specs = Vec::new();
        let mut cin = 1;
        let mut size = self.roi_size;
        for (i, (&cout, &stride)) in self.conv_channels.iter().zip(&STRIDES).enumerate() {
            let s = conv(format!("conv{}", i + 1), LayerKind::Conv, [3, 3], cin, cout, stride, true);
            size = s
                .output_size(size, size)
                .ok_or_else(|| Error::InvalidParameter(format!("roi_size {} too small", self.roi_size)))?
                .0;
            specs.push(s);
            cin = cout;
        }
        let fc = LayerKind::FullyConnected;
        specs.push(conv("fc1".into(), fc, [size, size], cin, self.fc_width, 1, true));
        specs.push(conv("fc2".into(), fc, [1, 1], self.fc_width, self.fc_width, 1, true));
        specs.push(conv("output".into(), fc, [1, 1], self.fc_width, self.feature_dim, 1, false));
        Ok(specs)
    }

    /// Decoder layers: pointwise over the concatenated feature vectors.
    pub fn decoder_specs(&self) -> Vec<LayerSpec> {
        let fc = LayerKind::FullyConnected;
        vec![
            conv("dec_fc1".into(), fc, [1, 1], 2 * self.feature_dim, self.decoder_width, 1, true),
            conv("dec_fc2".into(), fc, [1, 1], self.decoder_width, self.decoder_width, 1, true),
            conv("dec_output".into(), fc, [1, 1], self.decoder_width, self.output_dim, 1, false),
        ]
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::narrowed(8)
    }
}

fn conv(
    name: String,
    kind: LayerKind,
    kernel: [usize; 2],
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    selu: bool,
) -> LayerSpec {
    LayerSpec { name, kind, kernel, in_channels, out_channels, stride, dilation: 1, selu }
}

/// Sequence of convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub layers: Vec<Conv2d>,
}

/// Input and every layer output of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    acts: Vec<Tensor>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("trace holds the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Stack {
    fn init(specs: Vec<LayerSpec>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = specs.into_iter().map(|s| Conv2d::glorot(s, rng)).collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = self.layers[0].forward(x)?;
        for l in &self.layers[1..] {
            cur = l.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn forward_traced(&self, x: Tensor) -> Result<Trace> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for l in &self.layers {
            let y = l.forward(acts.last().expect("non-empty"))?;
            acts.push(y);
        }
        Ok(Trace { acts })
    }

    /// Accumulates parameter gradients for `grad_out` (with respect to the
    /// traced output) and optionally returns the input gradient.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_out: Tensor,
        grads: &mut [LayerGrad],
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let mut g = grad_out;
        for i in (0..self.layers.len()).rev() {
            let want = need_input_grad || i > 0;
            let gl = &mut grads[i];
            {
                let next = self.layers[i].backward(
                &trace.acts[i],
                &trace.acts[i + 1],
                &g,
                &mut gl.weight,
                &mut gl.bias,
                want,
            )?;
                g = next
            }
        }
        Some(g)
    }

    pub fn zero_grads(&self) -> Vec<LayerGrad> {
        self.layers
            .iter()
            .map(|l| LayerGrad { weight: vec![0.0; l.weight.len()], bias: vec![0.0; l.bias.len()] })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    /// Side of the input window that influences one output pixel.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for l in &self.layers {
            rf += (l.spec.kernel[0] - 1) * l.spec.dilation * jump;
            jump *= l.spec.stride;
        }
        rf
    }

    /// Stride-free equivalent: every stride-s layer becomes stride 1 and all
    /// later dilations are multiplied by s.
    fn dilated(&self) -> Stack {
        let mut mult = 1;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let mut c = l.clone();
                c.spec.dilation = l.spec.dilation * mult;
                c.spec.stride = 1;
                mult *= l.spec.stride;
                c
            })
            .collect();
        Stack { layers }
    }
}

/// Whether the encoders run per ROI with strides or densely with dilations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    Cnn,
    DilatedFcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Fixed,
    Moving,
}

/// Two independent encoders (fixed image, moving image) and a joint
/// decoder producing per-action reward estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork {
    config: NetworkConfig,
    form: Form,
    pub encoder_fixed: Stack,
    pub encoder_moving: Stack,
    pub decoder: Stack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder_fixed: Vec<LayerGrad>,
    pub encoder_moving: Vec<LayerGrad>,
    pub decoder: Vec<LayerGrad>,
}

impl Gradients {
    fn all(&self) -> impl Iterator<Item = &LayerGrad> {
        self.encoder_fixed.iter().chain(&self.encoder_moving).chain(&self.decoder)
    }

    /// Flat list of gradient buffers, aligned with
    /// [`PolicyNetwork::param_buffers_mut`].
    pub fn buffers(&self) -> Vec<&[f64]> {
        self.all().flat_map(|g| [g.weight.as_slice(), g.bias.as_slice()]).collect()
    }

    pub fn norm(&self) -> f64 {
        self.buffers().iter().flat_map(|b| b.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.buffers().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// One ROI pair with its 12 action rewards.
#[derive(Debug, Clone)]
pub struct RoiSample {
    pub fixed: Tensor,
    pub moving: Tensor,
    pub target: [f64; ACTION_COUNT],
}

/// Dense supervision for one shift of the moving feature map: per-pixel
/// action rewards (`12 x h x w`) and a validity mask over the `h x w` map.
#[derive(Debug, Clone)]
pub struct ShiftTarget {
    pub shift: [i64; 2],
    pub target: Tensor,
    pub mask: Vec<bool>,
}

/// A full image pair with supervision for several feature-map shifts.
#[derive(Debug, Clone)]
pub struct DenseSample {
    pub fixed: Tensor,
    pub moving: Tensor,
    pub shifts: Vec<ShiftTarget>,
}

#[derive(Debug, Clone)]
pub enum Sample {
    Roi(RoiSample),
    Dense(DenseSample),
}

/// Expands raw network outputs to the 12 canonical action rewards.
pub fn expand_rewards(out: &[f64]) -> [f64; ACTION_COUNT] {
    let mut r = [0.0; ACTION_COUNT];
    if out.len() == ACTION_COUNT {
        r.copy_from_slice(out);
    } else {
        for (j, v) in out.iter().enumerate().take(6) {
            r[2 * j] = *v;
            r[2 * j + 1] = -*v;
        }
    }
    r
}

/// Target for output `j` given the 12 action rewards.
fn target_for_output(target: &[f64; ACTION_COUNT], output_dim: usize, j: usize) -> f64 {
    if output_dim == ACTION_COUNT {
        target[j]
    } else {
        target[2 * j]
    }
}

impl PolicyNetwork {
    /// Glorot-initialised network in CNN form.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder_fixed = Stack::init(config.encoder_specs()?, &mut rng)?;
        let encoder_moving = Stack::init(config.encoder_specs()?, &mut rng)?;
        let decoder = Stack::init(config.decoder_specs(), &mut rng)?;
        Ok(Self { config, form: Form::Cnn, encoder_fixed, encoder_moving, decoder })
    }

    pub(crate) fn from_parts(
        config: NetworkConfig,
        form: Form,
        encoder_fixed: Stack,
        encoder_moving: Stack,
        decoder: Stack,
    ) -> Self {
        Self { config, form, encoder_fixed, encoder_moving, decoder }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn form(&self) -> Form {
        self.form
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.encoder_fixed.param_count()
            + self.encoder_moving.param_count()
            + self.decoder.param_count()
    }

    pub fn stacks(&self) -> [&Stack; 3] {
        [&self.encoder_fixed, &self.encoder_moving, &self.decoder]
    }

    fn encoder(&self, stream: Stream) -> &Stack {
        match stream {
            Stream::Fixed => &self.encoder_fixed,
            Stream::Moving => &self.encoder_moving,
        }
    }

    /// The same weights arranged as stride-free dilated convolutions.
    pub fn to_dilated_fcn(&self) -> PolicyNetwork {
        if self.form == Form::DilatedFcn {
            return self.clone();
        }
        Self {
            config: self.config.clone(),
            form: Form::DilatedFcn,
            encoder_fixed: self.encoder_fixed.dilated(),
            encoder_moving: self.encoder_moving.dilated(),
            decoder: self.decoder.dilated(),
        }
    }

    /// The same weights in strided per-ROI form.
    pub fn to_cnn(&self) -> Result<PolicyNetwork> {
        if self.form == Form::Cnn {
            return Ok(self.clone());
        }
        let mut net = PolicyNetwork::new(self.config.clone(), 0)?;
        for (dst, src) in [
            (&mut net.encoder_fixed, &self.encoder_fixed),
            (&mut net.encoder_moving, &self.encoder_moving),
            (&mut net.decoder, &self.decoder),
        ] {
            for (d, s) in dst.layers.iter_mut().zip(&src.layers) {
                d.weight.clone_from(&s.weight);
                d.bias.clone_from(&s.bias);
            }
        }
        Ok(net)
    }

    fn require(&self, form: Form) -> Result<()> {
        if self.form == form {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "operation needs the {form:?} form, network is {:?}",
                self.form
            )))
        }
    }

    fn check_roi(&self, roi: &Tensor) -> Result<()> {
        let r = self.config.roi_size;
        if roi.shape() != [1, r, r] {
            return Err(Error::ShapeMismatch {
                expected: format!("[1, {r}, {r}]"),
                actual: format!("{:?}", roi.shape()),
            });
        }
        Ok(())
    }

    /// Feature vector of one ROI.
    pub fn encoder_forward(&self, stream: Stream, roi: &Tensor) -> Result<Vec<f64>> {
        self.require(Form::Cnn)?;
        self.check_roi(roi)?;
        Ok(self.encoder(stream).forward(roi)?.into_data())
    }

    /// Raw outputs (`output_dim` values) for a pair of feature vectors.
    pub fn decoder_forward(&self, feat_fixed: &[f64], feat_moving: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.feature_dim;
        if feat_fixed.len() != d || feat_moving.len() != d {
            return Err(Error::ShapeMismatch {
                expected: format!("two {d}-vectors"),
                actual: format!("{} and {}", feat_fixed.len(), feat_moving.len()),
            });
        }
        let x = Tensor::concat_channels(
            &Tensor::vector(feat_fixed.to_vec())?,
            &Tensor::vector(feat_moving.to_vec())?,
        )?;
        Ok(self.decoder.forward(&x)?.into_data())
    }

    /// Raw outputs for one ROI pair.
    pub fn roi_forward(&self, fixed: &Tensor, moving: &Tensor) -> Result<Vec<f64>> {
        let f = self.encoder_forward(Stream::Fixed, fixed)?;
        let m = self.encoder_forward(Stream::Moving, moving)?;
        self.decoder_forward(&f, &m)
    }

    /// Spatial size of the dense output for an `h x w` image.
    pub fn dense_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let r = self.config.roi_size;
        if h < r || w < r {
            return Err(Error::ShapeMismatch {
                expected: format!("image at least {r}x{r}"),
                actual: format!("{h}x{w}"),
            });
        }
        Ok((h - r + 1, w - r + 1))
    }

    /// Dense feature map: pixel `(y, x)` is the encoding of the ROI whose
    /// top-left corner is `(y, x)`.
    pub fn fcn_forward(&self, stream: Stream, image: &Tensor) -> Result<Tensor> {
        self.require(Form::DilatedFcn)?;
        let (h, w) = self.dense_extent(image.height(), image.width())?;
        self.encoder(stream).forward(image)?.crop(0, 0, h, w)
    }

    /// Dense raw outputs for dense fixed and moving feature maps.
    pub fn decode_dense(&self, feat_fixed: &Tensor, feat_moving: &Tensor) -> Result<Tensor> {
        self.decoder.forward(&Tensor::concat_channels(feat_fixed, feat_moving)?)
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            encoder_fixed: self.encoder_fixed.zero_grads(),
            encoder_moving: self.encoder_moving.zero_grads(),
            decoder: self.decoder.zero_grads(),
        }
    }

    /// Flat list of parameter buffers (weights then bias per layer, fixed
    /// encoder, moving encoder, decoder).
    pub fn param_buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.encoder_fixed
            .layers
            .iter_mut()
            .chain(self.encoder_moving.layers.iter_mut())
            .chain(self.decoder.layers.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_buffers(&self) -> Vec<&[f64]> {
        self.stacks()
            .into_iter()
            .flat_map(|s| s.layers.iter())
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.param_buffers().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Mean squared error over the batch and its gradient. ROI samples need
    /// the CNN form, dense samples the dilated form.
    pub fn loss_and_gradient(&self, batch: &[Sample]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let mut grads = self.zero_grads();
        let weight = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for s in batch {
            loss += match s {
                Sample::Roi(r) => self.roi_sample_grad(r, &mut grads, weight)?,
                Sample::Dense(d) => self.dense_sample_grad(d, &mut grads, weight)?,
            };
        }
        Ok((loss, grads))
    }

    fn roi_sample_grad(&self, s: &RoiSample, grads: &mut Gradients, weight: f64) -> Result<f64> {
        self.require(Form::Cnn)?;
        self.check_roi(&s.fixed)?;
        self.check_roi(&s.moving)?;
        let tf = self.encoder_fixed.forward_traced(s.fixed.clone())?;
        let tm = self.encoder_moving.forward_traced(s.moving.clone())?;
        let x = Tensor::concat_channels(tf.output(), tm.output())?;
        let td = self.decoder.forward_traced(x)?;
        let out = td.output().data();
        let dim = self.config.output_dim;
        let mut loss = 0.0;
        let mut g = vec![0.0; dim];
        for j in 0..dim {
            let diff = out[j] - target_for_output(&s.target, dim, j);
            loss += diff * diff / dim as f64;
            g[j] = 2.0 * diff / dim as f64 * weight;
        }
        let gx = self
            .decoder
            .backward(&td, Tensor::from_vec_unchecked([dim, 1, 1], g), &mut grads.decoder, true)
            .expect("input gradient requested");
        let (gf, gm) = gx.split_channels(self.config.feature_dim);
        self.encoder_fixed.backward(&tf, gf, &mut grads.encoder_fixed, false);
        self.encoder_moving.backward(&tm, gm, &mut grads.encoder_moving, false);
        Ok(loss * weight)
    }

    fn dense_sample_grad(&self, s: &DenseSample, grads: &mut Gradients, weight: f64) -> Result<f64> {
        self.require(Form::DilatedFcn)?;
        if s.shifts.is_empty() {
            return Err(Error::Empty("dense sample shifts"));
        }
        if s.fixed.shape() != s.moving.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", s.fixed.shape()),
                actual: format!("{:?}", s.moving.shape()),
            });
        }
        let (h, w) = self.dense_extent(s.fixed.height(), s.fixed.width())?;
        let dim = self.config.output_dim;
        let tf = self.encoder_fixed.forward_traced(s.fixed.clone())?;
        let tm = self.encoder_moving.forward_traced(s.moving.clone())?;
        let [_, fh, fw] = tf.output().shape();
        let ff = tf.output().crop(0, 0, h, w)?;
        let fm = tm.output().crop(0, 0, h, w)?;
        let mut g_ff = Tensor::zeros(ff.shape());
        let mut g_fm = Tensor::zeros(fm.shape());
        let per_shift = weight / s.shifts.len() as f64;
        let mut loss = 0.0;
        for st in &s.shifts {
            if st.target.shape() != [ACTION_COUNT, h, w] || st.mask.len() != h * w {
                return Err(Error::ShapeMismatch {
                    expected: format!("targets [12, {h}, {w}] and {} mask entries", h * w),
                    actual: format!("{:?} and {}", st.target.shape(), st.mask.len()),
                });
            }
            let fm_s = shift_feature_map(&fm, st.shift)?;
            let td = self.decoder.forward_traced(Tensor::concat_channels(&ff, &fm_s)?)?;
            let out = td.output().data();
            let valid: Vec<bool> = (0..h * w)
                .map(|p| st.mask[p] && shifted_pixel_valid(h, w, st.shift, p / w, p % w))
                .collect();
            let count = valid.iter().filter(|v| **v).count() * dim;
            let mut g = vec![0.0; dim * h * w];
            if count > 0 {
                let norm = 1.0 / count as f64;
                let plane = h * w;
                let tgt = st.target.data();
                for (p, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
                    for j in 0..dim {
                        let tj = if dim == ACTION_COUNT { j } else { 2 * j };
                        let diff = out[j * plane + p] - tgt[tj * plane + p];
                        loss += diff * diff * norm * per_shift;
                        g[j * plane + p] = 2.0 * diff * norm * per_shift;
                    }
                }
            }
            let gx = self
                .decoder
                .backward(&td, Tensor::from_vec_unchecked([dim, h, w], g), &mut grads.decoder, true)
                .expect("input gradient requested");
            let (gf, gms) = gx.split_channels(self.config.feature_dim);
            g_ff.add_assign(&gf);
            g_fm.add_assign(&shift_feature_map(&gms, [-st.shift[0], -st.shift[1]])?);
        }
        self.encoder_fixed.backward(&tf, g_ff.embed(0, 0, fh, fw), &mut grads.encoder_fixed, false);
        self.encoder_moving.backward(&tm, g_fm.embed(0, 0, fh, fw), &mut grads.encoder_moving, false);
        Ok(loss)
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::NetworkConfig;

    pub(crate) fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            roi_size: 61,
            conv_channels: [2, 2, 3, 3, 2, 2, 3],
            fc_width: 4,
            feature_dim: 3,
            decoder_width: 4,
            output_dim: 12,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::tiny_config;
    use super::*;
    use crate::nn::conv::selu_scalar;
    use rand::Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::new([1, h, w], (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn encoder_sizes_follow_floor_formula() {
        let specs = NetworkConfig::full_width().encoder_specs().unwrap();
        let mut size = 61;
        let mut sizes = Vec::new();
        for s in &specs {
            size = s.output_size(size, size).unwrap().0;
            sizes.push(size);
        }
        assert_eq!(sizes, vec![59, 57, 28, 26, 12, 10, 4, 1, 1, 1]);
        assert_eq!(specs[7].kernel, [4, 4]);
        assert_eq!(specs.last().unwrap().out_channels, 128);
    }

    #[test]
    fn dilation_schedule_and_receptive_field() {
        let net = PolicyNetwork::new(tiny_config(), 1).unwrap();
        let fcn = net.to_dilated_fcn();
        let d: Vec<usize> = fcn.encoder_fixed.layers.iter().map(|l| l.spec.dilation).collect();
        assert_eq!(d, vec![1, 1, 1, 2, 2, 4, 4, 8, 8, 8]);
        assert!(fcn.encoder_fixed.layers.iter().all(|l| l.spec.stride == 1));
        assert_eq!(net.encoder_fixed.receptive_field(), 55);
        assert_eq!(fcn.encoder_fixed.receptive_field(), 55);
        assert_eq!(fcn.param_count(), net.param_count());
        assert_eq!(fcn.to_cnn().unwrap(), net);
    }

    #[test]
    fn zero_roi_with_zero_biases_gives_zero_features() {
        let net = PolicyNetwork::new(NetworkConfig::narrowed(8), 3).unwrap();
        let f = net.encoder_forward(Stream::Fixed, &Tensor::zeros([1, 61, 61])).unwrap();
        assert_eq!(f.len(), 128);
        assert!(f.iter().all(|v| *v == 0.0));
        assert_eq!(selu_scalar(0.0), 0.0);
    }

    #[test]
    fn encoder_is_deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let roi = random_image(&mut rng, 61, 61);
        let a = PolicyNetwork::new(NetworkConfig::narrowed(8), 7).unwrap();
        let b = PolicyNetwork::new(NetworkConfig::narrowed(8), 7).unwrap();
        let fa = a.encoder_forward(Stream::Moving, &roi).unwrap();
        let fb = b.encoder_forward(Stream::Moving, &roi).unwrap();
        assert_eq!(fa, fb);
        assert!(a.encoder_forward(Stream::Moving, &Tensor::zeros([1, 59, 61])).is_err());
    }

    #[test]
    fn decoder_shapes_and_asymmetry() {
        let net = PolicyNetwork::new(tiny_config(), 2).unwrap();
        assert_eq!(net.decoder_forward(&[0.0; 3], &[0.0; 3]).unwrap().len(), 12);
        let a = net.decoder_forward(&[0.3, -0.2, 0.9], &[0.1, 0.5, -0.4]).unwrap();
        let b = net.decoder_forward(&[0.1, 0.5, -0.4], &[0.3, -0.2, 0.9]).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
        assert!(net.decoder_forward(&[0.0; 2], &[0.0; 3]).is_err());
        let mut zero = net.clone();
        for b in zero.param_buffers_mut() {
            b.fill(0.0);
        }
        assert!(zero.decoder_forward(&[1.0; 3], &[2.0; 3]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fcn_pixels_match_cnn_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = PolicyNetwork::new(tiny_config(), 11).unwrap();
        let fcn = net.to_dilated_fcn();
        let img = random_image(&mut rng, 70, 66);
        let dense = fcn.fcn_forward(Stream::Fixed, &img).unwrap();
        assert_eq!(dense.shape(), [3, 10, 6]);
        for (y, x) in [(0, 0), (9, 5), (4, 2)] {
            let roi = img.crop(y, x, 61, 61).unwrap();
            let f = net.encoder_forward(Stream::Fixed, &roi).unwrap();
            for (c, v) in f.iter().enumerate() {
                assert!((dense.get(c, y, x) - v).abs() <= 1e-10 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn six_output_mode_negates() {
        let r = expand_rewards(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(r[0], 1.0);
        assert_eq!(r[1], -1.0);
        assert_eq!(r[11], -6.0);
        let cfg = NetworkConfig { output_dim: 7, ..tiny_config() };
        assert!(PolicyNetwork::new(cfg, 0).is_err());
    }
}
