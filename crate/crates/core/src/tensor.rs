use crate::error::{Error, Result};

/// Dense row-major f32 array with explicit dimensions.
///
/// Feature maps use channel-first (C, H, W) layout throughout. Public
/// constructors reject non-finite values; everything downstream may assume
/// the payload is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if dims.contains(&0) {
            return Err(Error::InvalidArg(format!("zero-sized dim in {dims:?}")));
        }
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} imply {numel} values, got {}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor constructor saw {v}")));
        }
        Ok(Self { dims, data })
    }

    /// Internal constructor for values already known to be finite.
    pub(crate) fn from_raw(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel = dims.iter().product();
        Self::from_raw(dims.to_vec(), vec![0.0; numel])
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        let numel = dims.iter().product();
        Self::from_raw(dims.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_raw(vec![1], vec![value])
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel = dims.iter().product();
        Self::from_raw(dims.to_vec(), (0..numel).map(&mut f).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// (C, H, W) accessors for the common 3-d case.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::ShapeMismatch(format!(
                "expected 3-d (C,H,W) tensor, got {other:?}"
            ))),
        }
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f32 {
        let (_, h, w) = (self.dims[0], self.dims[1], self.dims[2]);
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let (_, h, w) = (self.dims[0], self.dims[1], self.dims[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Tensor {
        Tensor::from_raw(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch(format!(
                "zip_map on {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_raw(self.dims.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f32) -> Tensor {
        self.map(|v| v * c)
    }

    /// Euclidean norm, accumulated in f64.
    pub fn norm_l2(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Rearranges (C·r², H, W) into (C, r·H, r·W).
///
/// Output position (c, r·h + dy, r·w + dx) takes input channel
/// c·r² + dy·r + dx at (h, w); a pure permutation of the values.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    if r == 0 {
        return Err(Error::InvalidArg("pixel_shuffle upscale factor 0".into()));
    }
    let (c_in, h, w) = x.chw()?;
    if r == 1 {
        return Ok(x.clone());
    }
    if c_in % (r * r) != 0 {
        return Err(Error::ShapeMismatch(format!(
            "pixel_shuffle: {c_in} channels not divisible by r^2 = {}",
            r * r
        )));
    }
    let c_out = c_in / (r * r);
    let (h_out, w_out) = (h * r, w * r);
    let mut out = vec![0.0f32; c_out * h_out * w_out];
    for c in 0..c_out {
        for dy in 0..r {
            for dx in 0..r {
                let cin = c * r * r + dy * r + dx;
                for y in 0..h {
                    let src = (cin * h + y) * w;
                    let dst = (c * h_out + y * r + dy) * w_out + dx;
                    for xp in 0..w {
                        out[dst + xp * r] = x.data[src + xp];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![c_out, h_out, w_out], out))
}

/// Exact inverse of [`pixel_shuffle`]: (C, r·H, r·W) into (C·r², H, W).
pub fn space_to_depth(x: &Tensor, r: usize) -> Result<Tensor> {
    if r == 0 {
        return Err(Error::InvalidArg("space_to_depth factor 0".into()));
    }
    let (c_in, h_in, w_in) = x.chw()?;
    if r == 1 {
        return Ok(x.clone());
    }
    if h_in % r != 0 || w_in % r != 0 {
        return Err(Error::ShapeMismatch(format!(
            "space_to_depth: spatial dims {h_in}x{w_in} not divisible by {r}"
        )));
    }
    let (h, w) = (h_in / r, w_in / r);
    let c_out = c_in * r * r;
    let mut out = vec![0.0f32; c_out * h * w];
    for c in 0..c_in {
        for dy in 0..r {
            for dx in 0..r {
                let cout = c * r * r + dy * r + dx;
                for y in 0..h {
                    let dst = (cout * h + y) * w;
                    let src = (c * h_in + y * r + dy) * w_in + dx;
                    for xp in 0..w {
                        out[dst + xp] = x.data[src + xp * r];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![c_out, h, w], out))
}
