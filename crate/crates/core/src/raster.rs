//! Planar floating-point rasters.

use crate::error::{OmgError, Result};
use crate::track::BoundingBox;

/// Channel-planar image: `data[c * height * width + y * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    /// Raster filled with one value per channel.
    pub fn filled(width: usize, height: usize, values: &[f32]) -> Self {
        let mut data = Vec::with_capacity(width * height * values.len());
        for &v in values {
            data.extend(std::iter::repeat_n(v, width * height));
        }
        Self {
            width,
            height,
            channels: values.len(),
            data,
        }
    }

    pub fn from_planar(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(OmgError::Shape(format!(
                "raster {channels}x{height}x{width} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn offset(&self, c: usize, x: usize, y: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[self.offset(c, x, y)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        let off = self.offset(c, x, y);
        self.data[off] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    /// Number of pixels where any channel is nonzero.
    pub fn nonzero_support(&self) -> usize {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|&(x, y)| (0..self.channels).any(|c| self.get(c, x, y) != 0.0))
            .count()
    }

    /// Copy of the pixels inside `region`, which must lie within the raster.
    pub fn crop(&self, region: &BoundingBox) -> Result<Raster> {
        if region.x < 0
            || region.y < 0
            || region.right() > self.width as i64
            || region.bottom() > self.height as i64
        {
            return Err(OmgError::Shape(format!(
                "crop {:?} exceeds {}x{} raster",
                region.as_array(),
                self.width,
                self.height
            )));
        }
        let (x0, y0) = (region.x as usize, region.y as usize);
        let (w, h) = (region.w as usize, region.h as usize);
        let mut out = Raster::zeros(w, h, self.channels);
        for c in 0..self.channels {
            for y in 0..h {
                let src = self.offset(c, x0, y0 + y);
                let dst = out.offset(c, 0, y);
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Ok(out)
    }

    /// Bilinear resampling with pixel-center alignment and edge clamping.
    /// Output values are convex combinations of input values.
    pub fn resize_bilinear(&self, out_width: usize, out_height: usize) -> Result<Raster> {
        if self.is_empty() || out_width == 0 || out_height == 0 {
            return Err(OmgError::Shape("cannot resize an empty raster".into()));
        }
        let xs = axis_weights(self.width, out_width);
        let ys = axis_weights(self.height, out_height);
        let mut out = Raster::zeros(out_width, out_height, self.channels);
        for c in 0..self.channels {
            let plane = self.plane(c);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let row0 = &plane[y0 * self.width..(y0 + 1) * self.width];
                let row1 = &plane[y1 * self.width..(y1 + 1) * self.width];
                let base = (c * out_height + oy) * out_width;
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = row0[x0] * (1.0 - fx) + row0[x1] * fx;
                    let bottom = row1[x0] * (1.0 - fx) + row1[x1] * fx;
                    out.data[base + ox] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
        Ok(out)
    }

    /// Stacks rasters of equal size along the channel axis.
    pub fn stack(parts: &[Raster]) -> Result<Raster> {
        let first = parts
            .first()
            .ok_or_else(|| OmgError::Shape("nothing to stack".into()))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.width != first.width || p.height != first.height {
                return Err(OmgError::Shape(format!(
                    "cannot stack {}x{} with {}x{}",
                    p.width, p.height, first.width, first.height
                )));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Raster::from_planar(first.width, first.height, channels, data)
    }
}

/// Per output coordinate: (lower source index, upper source index, weight of upper).
fn axis_weights(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}
