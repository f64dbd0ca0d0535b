use crate::error::{Error, Result};
use crate::projection::Image2D;

/// Dense `channels x height x width` array, row-major within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) || data.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{shape:?} ({n} values)"),
                actual: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_vec_unchecked(shape: [usize; 3], data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    /// A `n x 1 x 1` tensor.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new([data.len(), 1, 1], data)
    }

    /// Single-channel tensor holding the image rows.
    pub fn from_image(img: &Image2D) -> Self {
        Self { shape: [1, img.height(), img.width()], data: img.data().to_vec() }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn plane(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    /// Channel vector at pixel `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.shape[0]).map(|c| self.get(c, y, x)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Window `[y0, y0 + h) x [x0, x0 + w)` of every channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        if y0 + h > self.shape[1] || x0 + w > self.shape[2] || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("window within {}x{}", self.shape[1], self.shape[2]),
                actual: format!("({y0}, {x0}) + {h}x{w}"),
            });
        }
        let mut out = Vec::with_capacity(self.shape[0] * h * w);
        for c in 0..self.shape[0] {
            for y in y0..y0 + h {
                let row = (c * self.shape[1] + y) * self.shape[2];
                out.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Ok(Tensor::from_vec_unchecked([self.shape[0], h, w], out))
    }

    /// Adjoint of [`Tensor::crop`]: places `self` at `(y0, x0)` in a zero
    /// tensor of spatial size `h x w`.
    pub fn embed(&self, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
        let mut out = Tensor::zeros([self.shape[0], h, w]);
        for c in 0..self.shape[0] {
            for y in 0..self.shape[1] {
                let src = (c * self.shape[1] + y) * self.shape[2];
                let dst = (c * h + y + y0) * w + x0;
                out.data[dst..dst + self.shape[2]]
                    .copy_from_slice(&self.data[src..src + self.shape[2]]);
            }
        }
        out
    }

    /// Stacks `a` and `b` along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape[1..] != b.shape[1..] {
            return Err(Error::ShapeMismatch {
                expected: format!("spatial {:?}", &a.shape[1..]),
                actual: format!("spatial {:?}", &b.shape[1..]),
            });
        }
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Tensor::from_vec_unchecked([a.shape[0] + b.shape[0], a.shape[1], a.shape[2]], data))
    }

    /// Splits off the first `k` channels.
    pub fn split_channels(&self, k: usize) -> (Tensor, Tensor) {
        assert!(k > 0 && k < self.shape[0]);
        let cut = k * self.plane();
        (
            Tensor::from_vec_unchecked([k, self.shape[1], self.shape[2]], self.data[..cut].to_vec()),
            Tensor::from_vec_unchecked(
                [self.shape[0] - k, self.shape[1], self.shape[2]],
                self.data[cut..].to_vec(),
            ),
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Integer translation of every channel by `shift = [dx, dy]` pixels:
/// `out(y, x) = feat(y - dy, x - dx)`, with zeros where the source falls
/// outside the map.
pub fn shift_feature_map(feat: &Tensor, shift: [i64; 2]) -> Result<Tensor> {
    let [c, h, w] = feat.shape;
    let [dx, dy] = shift;
    if dx.unsigned_abs() as usize >= w || dy.unsigned_abs() as usize >= h {
        return Err(Error::InvalidParameter(format!(
            "shift {shift:?} exceeds the {w}x{h} map"
        )));
    }
    let mut out = Tensor::zeros([c, h, w]);
    let xs = dx.max(0) as usize;
    let xe = (w as i64 + dx.min(0)) as usize;
    let src_x0 = (xs as i64 - dx) as usize;
    let n = xe - xs;
    for ch in 0..c {
        for y in 0..h {
            let sy = y as i64 - dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            let src = (ch * h + sy as usize) * w + src_x0;
            let dst = (ch * h + y) * w + xs;
            out.data[dst..dst + n].copy_from_slice(&feat.data[src..src + n]);
        }
    }
    Ok(out)
}

/// Whether pixel `(y, x)` of a map shifted by `shift` holds source data.
pub fn shifted_pixel_valid(h: usize, w: usize, shift: [i64; 2], y: usize, x: usize) -> bool {
    let sx = x as i64 - shift[0];
    let sy = y as i64 - shift[1];
    sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64
}
