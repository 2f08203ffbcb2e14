//! The dense clip container shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A `T × H × W × C` clip stored frame-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f32>,
    /// Source frames between consecutive stored frames.
    pub frame_interval: usize,
    pub source_id: String,
}

/// Shape-only description, used by manifests and headers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl VideoTensor {
    pub fn new(t: usize, h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 || c == 0 {
            return Err(invalid(format!("empty video shape {t}x{h}x{w}x{c}")));
        }
        if data.len() != t * h * w * c {
            return Err(invalid(format!("video data length {} != {t}x{h}x{w}x{c}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("video contains non-finite values"));
        }
        Ok(Self { t, h, w, c, data, frame_interval: 1, source_id: String::new() })
    }

    pub fn zeros(t: usize, h: usize, w: usize, c: usize) -> Self {
        Self { t, h, w, c, data: vec![0.0; t * h * w * c], frame_interval: 1, source_id: String::new() }
    }

    /// Builds a clip from a per-element function `f(t, y, x, ch)`.
    pub fn from_fn(t: usize, h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize, usize) -> f32) -> Self {
        let mut v = Self::zeros(t, h, w, c);
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let i = v.index(ti, y, x, ch);
                        v.data[i] = f(ti, y, x, ch);
                    }
                }
            }
        }
        v
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    pub fn frames(&self) -> usize {
        self.t
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn shape(&self) -> VideoShape {
        VideoShape { frames: self.t, height: self.h, width: self.w, channels: self.c }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, ch: usize) -> usize {
        ((t * self.h + y) * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize, ch: usize) -> f32 {
        self.data[self.index(t, y, x, ch)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, y: usize, x: usize, ch: usize, v: f32) {
        let i = self.index(t, y, x, ch);
        self.data[i] = v;
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.h * self.w * self.c;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.h * self.w * self.c;
        &mut self.data[t * n..(t + 1) * n]
    }

    /// New clip holding the listed frames, in order (repeats allowed).
    pub fn select_frames(&self, indices: &[usize]) -> Self {
        let n = self.h * self.w * self.c;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.frame(i));
        }
        Self {
            t: indices.len(),
            h: self.h,
            w: self.w,
            c: self.c,
            data,
            frame_interval: self.frame_interval,
            source_id: self.source_id.clone(),
        }
    }

    /// Spatial crop over all frames. Panics when out of bounds.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        assert!(y0 + h <= self.h && x0 + w <= self.w, "crop out of bounds");
        let mut out = Self::zeros(self.t, h, w, self.c);
        for t in 0..self.t {
            for y in 0..h {
                let src = self.index(t, y0 + y, x0, 0);
                let dst = out.index(t, y, 0, 0);
                out.data[dst..dst + w * self.c].copy_from_slice(&self.data[src..src + w * self.c]);
            }
        }
        out.frame_interval = self.frame_interval;
        out.source_id = self.source_id.clone();
        out
    }

    /// Writes `block` with its top-left corner at `(y0, x0)`.
    pub fn paste(&mut self, block: &Self, y0: usize, x0: usize) {
        assert_eq!(block.t, self.t);
        assert_eq!(block.c, self.c);
        assert!(y0 + block.h <= self.h && x0 + block.w <= self.w, "paste out of bounds");
        let row = block.w * self.c;
        for t in 0..self.t {
            for y in 0..block.h {
                let dst = self.index(t, y0 + y, x0, 0);
                let src = block.index(t, y, 0, 0);
                self.data[dst..dst + row].copy_from_slice(&block.data[src..src + row]);
            }
        }
    }

    /// Area-average downscale by integer factors (frames and channels kept).
    pub fn downscale(&self, fy: usize, fx: usize) -> Result<Self> {
        if fy == 0 || fx == 0 || !self.h.is_multiple_of(fy) || !self.w.is_multiple_of(fx) {
            return Err(invalid(format!("cannot downscale {}x{} by {fy}x{fx}", self.h, self.w)));
        }
        let (h, w) = (self.h / fy, self.w / fx);
        let norm = 1.0 / (fy * fx) as f64;
        let mut out = Self::zeros(self.t, h, w, self.c);
        for t in 0..self.t {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..self.c {
                        let mut s = 0.0f64;
                        for dy in 0..fy {
                            for dx in 0..fx {
                                s += self.at(t, y * fy + dy, x * fx + dx, ch) as f64;
                            }
                        }
                        out.set(t, y, x, ch, (s * norm) as f32);
                    }
                }
            }
        }
        out.frame_interval = self.frame_interval;
        out.source_id = self.source_id.clone();
        Ok(out)
    }

    /// Resizes every frame: area averaging for integer shrink factors,
    /// bilinear with half-pixel centers otherwise.
    pub fn resize(&self, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(invalid("resize to an empty frame"));
        }
        if h == self.h && w == self.w {
            return Ok(self.clone());
        }
        if h <= self.h && w <= self.w && self.h.is_multiple_of(h) && self.w.is_multiple_of(w) {
            return self.downscale(self.h / h, self.w / w);
        }
        let mut out = Self::zeros(self.t, h, w, self.c);
        let sy = self.h as f64 / h as f64;
        let sx = self.w as f64 / w as f64;
        let coord = |o: usize, s: f64, n: usize| {
            let p = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, p - i0 as f64)
        };
        for t in 0..self.t {
            for y in 0..h {
                let (y0, y1, fy) = coord(y, sy, self.h);
                for x in 0..w {
                    let (x0, x1, fx) = coord(x, sx, self.w);
                    for ch in 0..self.c {
                        let a = self.at(t, y0, x0, ch) as f64 * (1.0 - fx) + self.at(t, y0, x1, ch) as f64 * fx;
                        let b = self.at(t, y1, x0, ch) as f64 * (1.0 - fx) + self.at(t, y1, x1, ch) as f64 * fx;
                        out.set(t, y, x, ch, (a * (1.0 - fy) + b * fy) as f32);
                    }
                }
            }
        }
        out.frame_interval = self.frame_interval;
        out.source_id = self.source_id.clone();
        Ok(out)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}
