//! Row-major single-channel images: depth maps, grayscale images, anomaly
//! maps and annotation ID masks.

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RasterError {
    #[error("buffer holds {got} values, {width}x{height} needs {expected}")]
    SizeMismatch { width: u32, height: u32, expected: usize, got: usize },
    #[error("resolution mismatch: {0}x{1} vs {2}x{3}")]
    ResolutionMismatch(u32, u32, u32, u32),
    #[error("invalid value {value} at pixel ({col}, {row})")]
    InvalidValue { col: u32, row: u32, value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: u32,
    height: u32,
    data: Vec<T>,
}

/// Camera-z depth in millimetres; 0 marks pixels without a surface.
pub type DepthMap = Raster<f64>;
/// Intensities in `[0, 1]`.
pub type GrayImage = Raster<f32>;
/// Per-pixel anomaly scores of a single view.
pub type AnomalyMap2D = Raster<f32>;
/// Per-pixel defect IDs, 0 = nominal/background.
pub type AnnotationImage = Raster<u16>;

impl<T: Copy> Raster<T> {
    pub fn new(width: u32, height: u32, data: Vec<T>) -> Result<Self, RasterError> {
        let expected = width as usize * height as usize;
        if data.len() != expected {
            return Err(RasterError::SizeMismatch { width, height, expected, got: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, value: T) -> Self {
        Self { width, height, data: vec![value; width as usize * height as usize] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, col: u32, row: u32) -> T {
        self.data[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, col: u32, row: u32, value: T) {
        let w = self.width as usize;
        self.data[row as usize * w + col as usize] = value;
    }

    pub fn same_size<U>(&self, other: &Raster<U>) -> Result<(), RasterError> {
        if self.width != other.width || self.height != other.height {
            return Err(RasterError::ResolutionMismatch(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    /// Pads to a square (bottom/right) with `fill`, then resamples to
    /// `target × target`; each output pixel reduces the input pixels its
    /// footprint covers.
    pub fn pad_and_resample(&self, target: u32, fill: T, reduce: impl Fn(&[T]) -> T) -> Self {
        let side = self.width.max(self.height) as usize;
        let target = target.max(1) as usize;
        let mut out = Vec::with_capacity(target * target);
        let mut buf = Vec::new();
        let span = |i: usize| {
            let lo = i * side / target;
            let hi = ((i + 1) * side).div_ceil(target).max(lo + 1);
            lo..hi.min(side)
        };
        for orow in 0..target {
            for ocol in 0..target {
                buf.clear();
                for r in span(orow) {
                    for c in span(ocol) {
                        let v = if r < self.height as usize && c < self.width as usize {
                            self.data[r * self.width as usize + c]
                        } else {
                            fill
                        };
                        buf.push(v);
                    }
                }
                out.push(reduce(&buf));
            }
        }
        Self { width: target as u32, height: target as u32, data: out }
    }
}

impl Raster<f64> {
    /// Checks every depth is finite and non-negative.
    pub fn validate_depth(&self) -> Result<(), RasterError> {
        self.find_invalid(|v| v.is_finite() && v >= 0.0)
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }

    /// Min-pooling over valid depths keeps foreground and background unmixed.
    pub fn pad_and_downsample_depth(&self, target: u32) -> Self {
        self.pad_and_resample(target, 0.0, |vals| {
            vals.iter().copied().filter(|&d| d > 0.0).fold(0.0, |m, d| if m == 0.0 || d < m { d } else { m })
        })
    }

    fn find_invalid(&self, ok: impl Fn(f64) -> bool) -> Result<(), RasterError> {
        match self.data.iter().position(|&v| !ok(v)) {
            None => Ok(()),
            Some(i) => Err(RasterError::InvalidValue {
                col: (i % self.width as usize) as u32,
                row: (i / self.width as usize) as u32,
                value: self.data[i],
            }),
        }
    }
}

impl Raster<f32> {
    pub fn validate_finite(&self) -> Result<(), RasterError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(RasterError::InvalidValue {
                col: (i % self.width as usize) as u32,
                row: (i / self.width as usize) as u32,
                value: self.data[i] as f64,
            }),
        }
    }

    /// Area-average resampling.
    pub fn pad_and_downsample_image(&self, target: u32) -> Self {
        self.pad_and_resample(target, 0.0, |vals| (vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64) as f32)
    }

    /// 3×3 box mean; border pixels average their in-image neighbours.
    pub fn box_smooth3(&self) -> Self {
        let (w, h) = (self.width as i64, self.height as i64);
        let mut out = vec![0f32; self.data.len()];
        for r in 0..h {
            for c in 0..w {
                let (mut sum, mut n) = (0f64, 0u32);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr >= 0 && rr < h && cc >= 0 && cc < w {
                            sum += self.data[(rr * w + cc) as usize] as f64;
                            n += 1;
                        }
                    }
                }
                out[(r * w + c) as usize] = (sum / n as f64) as f32;
            }
        }
        Self { width: self.width, height: self.height, data: out }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_is_checked() {
        assert!(Raster::new(2, 2, vec![0u16; 3]).is_err());
        assert!(Raster::new(2, 2, vec![0u16; 4]).is_ok());
    }

    #[test]
    fn depth_downsample_min_pools_valid_pixels() {
        let d = DepthMap::new(4, 2, vec![5.0, 0.0, 3.0, 4.0, 7.0, 2.0, 0.0, 0.0]).unwrap();
        let small = d.pad_and_downsample_depth(2);
        // padded to 4x4, each output pixel covers a 2x2 block
        assert_eq!(small.data(), &[2.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn image_downsample_averages() {
        let img = GrayImage::new(2, 2, vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        assert_eq!(img.pad_and_downsample_image(1).data(), &[0.5]);
    }

    #[test]
    fn non_integer_factor_covers_every_source_pixel() {
        let d = DepthMap::filled(4096, 3000, 1.0);
        let small = d.pad_and_downsample_depth(1540);
        assert_eq!((small.width(), small.height()), (1540, 1540));
        // rows beyond 3000 of the padded square are empty
        assert_eq!(small.get(0, 0), 1.0);
        assert_eq!(small.get(0, 1539), 0.0);
    }

    #[test]
    fn box_smoothing_preserves_constants() {
        let img = GrayImage::filled(5, 4, 0.25);
        assert!(img.box_smooth3().data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn invalid_depth_reported() {
        let d = DepthMap::new(2, 1, vec![1.0, -1.0]).unwrap();
        assert_eq!(d.validate_depth(), Err(RasterError::InvalidValue { col: 1, row: 0, value: -1.0 }));
    }
}
