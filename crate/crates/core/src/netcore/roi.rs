use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::synthworld::{pixel_span, FeatureGrid};

/// Summed-area table of a [`FeatureGrid`], one plane per channel, so that any
/// rectangular pixel mean costs O(channels).
#[derive(Debug, Clone)]
pub struct IntegralImage {
    height: usize,
    width: usize,
    channels: usize,
    sums: Vec<f64>,
}

impl IntegralImage {
    pub fn new(grid: &FeatureGrid) -> Self {
        let (h, w, c) = (grid.height, grid.width, grid.channels);
        let stride = (w + 1) * c;
        let mut sums = vec![0.0; (h + 1) * stride];
        for r in 0..h {
            let mut row_acc = vec![0.0; c];
            for col in 0..w {
                for ch in 0..c {
                    row_acc[ch] += grid.get(r, col, ch) as f64;
                    let above = sums[r * stride + (col + 1) * c + ch];
                    sums[(r + 1) * stride + (col + 1) * c + ch] = above + row_acc[ch];
                }
            }
        }
        Self { height: h, width: w, channels: c, sums }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    fn at(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.sums[r * (self.width + 1) * self.channels + c * self.channels + ch]
    }

    /// Per-channel mean over rows `r0..r1`, columns `c0..c1` (non-empty).
    fn mean_into(&self, (r0, r1): (usize, usize), (c0, c1): (usize, usize), out: &mut [f64]) {
        let n = ((r1 - r0) * (c1 - c0)) as f64;
        for (ch, o) in out.iter_mut().enumerate() {
            let s = self.at(r1, c1, ch) - self.at(r0, c1, ch) - self.at(r1, c0, ch) + self.at(r0, c0, ch);
            *o = s / n;
        }
    }

    /// `S x S` mean pooling of the clipped box. Cell `(i, j)` holds the
    /// per-channel mean of the pixels whose centers fall inside it; an empty
    /// cell takes the value of the pixel nearest to its center. Layout is
    /// `(i * S + j) * channels + ch`.
    pub fn pool(&self, bbox: &BBox, s: usize) -> Result<Vec<f64>> {
        let clipped = bbox
            .clip(self.width as f64, self.height as f64)
            .ok_or(Error::DegenerateRoi(bbox.corners()))?;
        let (x1, y1) = (clipped.x1(), clipped.y1());
        let (cw, ch) = (clipped.width() / s as f64, clipped.height() / s as f64);
        let mut out = vec![0.0; s * s * self.channels];
        for i in 0..s {
            let lo = y1 + i as f64 * ch;
            let rows = non_empty(pixel_span(lo, lo + ch, self.height), lo + 0.5 * ch, self.height);
            for j in 0..s {
                let lo = x1 + j as f64 * cw;
                let cols = non_empty(pixel_span(lo, lo + cw, self.width), lo + 0.5 * cw, self.width);
                let k = (i * s + j) * self.channels;
                self.mean_into(rows, cols, &mut out[k..k + self.channels]);
            }
        }
        Ok(out)
    }
}

fn non_empty(span: (usize, usize), center: f64, n: usize) -> (usize, usize) {
    if span.0 < span.1 {
        span
    } else {
        let p = (center.floor().max(0.0) as usize).min(n - 1);
        (p, p + 1)
    }
}

pub fn roi_pool(grid: &FeatureGrid, bbox: &BBox, s: usize) -> Result<Vec<f64>> {
    IntegralImage::new(grid).pool(bbox, s)
}
