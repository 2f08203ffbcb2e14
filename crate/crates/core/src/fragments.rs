//! Temporal sampling and grid-fragment extraction.
//!
//! A clip is cut into a `side × side` grid of patches. One `h × w` fragment is
//! sampled uniformly inside each patch, with the same spatial offset for every
//! frame, and the fragments are tiled back into a small composite clip.
//! When `H` or `W` is not a multiple of `side`, patches take the floor size
//! and the last patch row/column absorbs the remainder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::qrs::SelectionResult;
use crate::video::VideoTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub grid_side: usize,
    pub fragment_h: usize,
    pub fragment_w: usize,
}

impl GridSpec {
    pub fn new(grid_side: usize, fragment_h: usize, fragment_w: usize) -> Result<Self> {
        if grid_side == 0 || fragment_h == 0 || fragment_w == 0 {
            return Err(invalid(format!("grid {grid_side} with fragment {fragment_h}x{fragment_w}")));
        }
        Ok(Self { grid_side, fragment_h, fragment_w })
    }

    /// Square fragments.
    pub fn square(grid_side: usize, fragment: usize) -> Result<Self> {
        Self::new(grid_side, fragment, fragment)
    }

    pub fn num_fragments(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn composite_size(&self) -> (usize, usize) {
        (self.grid_side * self.fragment_h, self.grid_side * self.fragment_w)
    }

    /// Start and length of patch `i` along an axis of `extent` pixels.
    pub fn patch_span(&self, i: usize, extent: usize) -> (usize, usize) {
        let base = extent / self.grid_side;
        let start = i * base;
        let len = if i + 1 == self.grid_side { extent - start } else { base };
        (start, len)
    }
}

/// `side × side` fragments in row-major order, each `T × h × w × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct FragmentGrid {
    pub grid: GridSpec,
    pub fragments: Vec<VideoTensor>,
    /// Top-left `(y, x)` of each fragment in the source clip.
    pub source_coords: Vec<(usize, usize)>,
    /// Row-major grid index each fragment came from in the source grid.
    pub source_cells: Vec<usize>,
}

impl FragmentGrid {
    pub fn frames(&self) -> usize {
        self.fragments[0].frames()
    }

    pub fn channels(&self) -> usize {
        self.fragments[0].channels()
    }

    pub fn len(&self) -> usize {
        self.fragments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }

    /// Source pixel that produced composite pixel `(cy, cx)`.
    pub fn source_pixel(&self, cy: usize, cx: usize) -> (usize, usize) {
        let (i, j) = (cy / self.grid.fragment_h, cx / self.grid.fragment_w);
        let (sy, sx) = self.source_coords[i * self.grid.grid_side + j];
        (sy + cy % self.grid.fragment_h, sx + cx % self.grid.fragment_w)
    }
}

/// Picks `num_frames` frames `interval` apart from a random start. Clips that
/// are too short wrap around modulo `T`.
pub fn temporal_sample<R: Rng + ?Sized>(
    video: &VideoTensor,
    num_frames: usize,
    interval: usize,
    rng: &mut R,
) -> Result<VideoTensor> {
    let indices = temporal_indices(video.frames(), num_frames, interval, rng)?;
    let mut out = video.select_frames(&indices);
    out.frame_interval = video.frame_interval * interval;
    Ok(out)
}

/// Frame indices used by [`temporal_sample`].
pub fn temporal_indices<R: Rng + ?Sized>(
    total: usize,
    num_frames: usize,
    interval: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if num_frames < 1 || interval < 1 {
        return Err(invalid(format!("num_frames={num_frames}, interval={interval}")));
    }
    if total == 0 {
        return Err(invalid("empty clip"));
    }
    let span = (num_frames - 1) * interval + 1;
    let start = if total >= span { rng.gen_range(0..=total - span) } else { rng.gen_range(0..total) };
    Ok((0..num_frames).map(|k| (start + k * interval) % total).collect())
}

/// Cuts the clip into the grid and samples one fragment per patch.
pub fn partition_and_sample<R: Rng + ?Sized>(video: &VideoTensor, grid: &GridSpec, rng: &mut R) -> Result<FragmentGrid> {
    let side = grid.grid_side;
    let (ph, pw) = (video.height() / side, video.width() / side);
    if ph < grid.fragment_h || pw < grid.fragment_w {
        return Err(invalid(format!(
            "patch {ph}x{pw} of a {}x{} clip cannot hold a {}x{} fragment",
            video.height(),
            video.width(),
            grid.fragment_h,
            grid.fragment_w
        )));
    }
    let mut fragments = Vec::with_capacity(side * side);
    let mut coords = Vec::with_capacity(side * side);
    for i in 0..side {
        let (y0, hlen) = grid.patch_span(i, video.height());
        for j in 0..side {
            let (x0, wlen) = grid.patch_span(j, video.width());
            let oy = rng.gen_range(0..=hlen - grid.fragment_h);
            let ox = rng.gen_range(0..=wlen - grid.fragment_w);
            let (y, x) = (y0 + oy, x0 + ox);
            fragments.push(video.crop(y, x, grid.fragment_h, grid.fragment_w));
            coords.push((y, x));
        }
    }
    Ok(FragmentGrid { grid: *grid, fragments, source_coords: coords, source_cells: (0..side * side).collect() })
}

/// Tiles fragments into a `T × side·h × side·w × C` clip.
pub fn compose(fg: &FragmentGrid) -> VideoTensor {
    let g = fg.grid;
    let (ch, cw) = g.composite_size();
    let mut out = VideoTensor::zeros(fg.frames(), ch, cw, fg.channels());
    for (k, frag) in fg.fragments.iter().enumerate() {
        let (i, j) = (k / g.grid_side, k % g.grid_side);
        out.paste(frag, i * g.fragment_h, j * g.fragment_w);
    }
    out.frame_interval = fg.fragments[0].frame_interval;
    out.source_id = fg.fragments[0].source_id.clone();
    out
}

/// Splits a composite back into its blocks; coordinates refer to the composite.
pub fn decompose(composite: &VideoTensor, grid: &GridSpec) -> Result<FragmentGrid> {
    let (ch, cw) = grid.composite_size();
    if composite.height() != ch || composite.width() != cw {
        return Err(invalid(format!(
            "composite {}x{} does not match grid {}x{}",
            composite.height(),
            composite.width(),
            ch,
            cw
        )));
    }
    let side = grid.grid_side;
    let mut fragments = Vec::with_capacity(side * side);
    let mut coords = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let (y, x) = (i * grid.fragment_h, j * grid.fragment_w);
            fragments.push(composite.crop(y, x, grid.fragment_h, grid.fragment_w));
            coords.push((y, x));
        }
    }
    Ok(FragmentGrid { grid: *grid, fragments, source_coords: coords, source_cells: (0..side * side).collect() })
}

/// Keeps the selected fragments as a smaller square grid, in row-major
/// order of their original positions.
pub fn gather_selected(fg: &FragmentGrid, selection: &SelectionResult) -> Result<FragmentGrid> {
    gather_indices(fg, &selection.hard_indices)
}

pub fn gather_indices(fg: &FragmentGrid, indices: &[usize]) -> Result<FragmentGrid> {
    let k = indices.len();
    let side = (k as f64).sqrt().round() as usize;
    if k == 0 || side * side != k {
        return Err(invalid(format!("selection of {k} fragments is not a square grid")));
    }
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != k {
        return Err(invalid("selection contains duplicate indices"));
    }
    if let Some(&bad) = sorted.iter().find(|&&i| i >= fg.len()) {
        return Err(invalid(format!("fragment index {bad} out of range for {} fragments", fg.len())));
    }
    Ok(FragmentGrid {
        grid: GridSpec { grid_side: side, ..fg.grid },
        fragments: sorted.iter().map(|&i| fg.fragments[i].clone()).collect(),
        source_coords: sorted.iter().map(|&i| fg.source_coords[i]).collect(),
        source_cells: sorted.iter().map(|&i| fg.source_cells[i]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded;

    fn ramp(t: usize, h: usize, w: usize) -> VideoTensor {
        VideoTensor::from_fn(t, h, w, 1, |ti, y, x, _| (ti * 1_000_000 + y * 1000 + x) as f32)
    }

    #[test]
    fn temporal_sample_paper_geometry() {
        let v = ramp(64, 2, 2);
        let s = temporal_sample(&v, 32, 2, &mut seeded(3)).unwrap();
        assert_eq!(s.frames(), 32);
        let first = (s.at(0, 0, 0, 0) / 1_000_000.0) as usize;
        assert!(first <= 1);
        for k in 0..32 {
            assert_eq!(s.at(k, 0, 0, 0), ((first + 2 * k) * 1_000_000) as f32);
        }
        assert_eq!(s.frame_interval, 2);
    }

    #[test]
    fn temporal_sample_full_length_is_identity() {
        let v = ramp(32, 2, 2);
        assert_eq!(temporal_sample(&v, 32, 1, &mut seeded(9)).unwrap().data(), v.data());
    }

    #[test]
    fn temporal_sample_wraps_short_clip() {
        // hand enumeration: start s, then (s + 2k) mod 10
        let mut replay = seeded(7);
        let start: usize = replay.gen_range(0..10);
        let expected: Vec<usize> = (0..32).map(|k| (start + 2 * k) % 10).collect();
        assert_eq!(temporal_indices(10, 32, 2, &mut seeded(7)).unwrap(), expected);
    }

    #[test]
    fn temporal_sample_rejects_zero() {
        let v = ramp(4, 1, 1);
        assert!(temporal_sample(&v, 0, 1, &mut seeded(0)).is_err());
        assert!(temporal_sample(&v, 2, 0, &mut seeded(0)).is_err());
    }

    #[test]
    fn degenerate_patches_force_zero_offset() {
        let v = ramp(2, 288, 288);
        let g = GridSpec::square(9, 32).unwrap();
        let fg = partition_and_sample(&v, &g, &mut seeded(1)).unwrap();
        assert!(fg.source_coords.iter().enumerate().all(|(k, &(y, x))| (y, x) == ((k / 9) * 32, (k % 9) * 32)));
        assert_eq!(compose(&fg), v);
    }

    #[test]
    fn offsets_replay_rng_stream() {
        let v = ramp(1, 576, 576);
        let g = GridSpec::square(9, 32).unwrap();
        let fg = partition_and_sample(&v, &g, &mut seeded(0)).unwrap();
        let mut replay = seeded(0);
        for i in 0..9 {
            for j in 0..9 {
                let oy: usize = replay.gen_range(0..=32);
                let ox: usize = replay.gen_range(0..=32);
                assert_eq!(fg.source_coords[i * 9 + j], (i * 64 + oy, j * 64 + ox));
            }
        }
    }

    #[test]
    fn paper_composite_sizes() {
        assert_eq!(GridSpec::square(9, 32).unwrap().composite_size(), (288, 288));
        assert_eq!(GridSpec::square(7, 32).unwrap().composite_size(), (224, 224));
    }

    #[test]
    fn patch_smaller_than_fragment_is_rejected() {
        let v = ramp(1, 100, 100);
        let g = GridSpec::square(9, 32).unwrap();
        assert!(partition_and_sample(&v, &g, &mut seeded(0)).is_err());
    }

    #[test]
    fn remainder_goes_to_last_patch() {
        let g = GridSpec::square(9, 4).unwrap();
        assert_eq!(g.patch_span(0, 64), (0, 7));
        assert_eq!(g.patch_span(8, 64), (56, 8));
    }

    #[test]
    fn single_cell_grid_is_identity() {
        let v = ramp(3, 8, 8);
        let g = GridSpec::square(1, 8).unwrap();
        let fg = partition_and_sample(&v, &g, &mut seeded(0)).unwrap();
        assert_eq!(compose(&fg), v);
    }

    #[test]
    fn gather_rejects_non_square() {
        let v = ramp(1, 16, 16);
        let fg = partition_and_sample(&v, &GridSpec::square(4, 2).unwrap(), &mut seeded(0)).unwrap();
        assert!(gather_indices(&fg, &[0, 1, 2]).is_err());
        assert!(gather_indices(&fg, &[0, 0, 1, 2]).is_err());
        assert!(gather_indices(&fg, &[0, 1, 4, 99]).is_err());
        let all: Vec<usize> = (0..16).collect();
        assert_eq!(gather_indices(&fg, &all).unwrap(), fg);
    }
}
