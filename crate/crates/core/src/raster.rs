//! In-memory raster types shared by the generator, the network front end
//! and the evaluator.
//!
//! All images are row-major with `(x, y)` addressing, `x` growing to the
//! right and `y` growing downward.

use crate::error::ShapeError;

/// Single-channel image with intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ShapeError> {
        if data.len() != width * height {
            return Err(ShapeError::new(format!(
                "gray image {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Center crop to `width` x `height`. The offset on each axis is
    /// `(src - dst) / 2`, rounded down.
    pub fn center_crop(&self, width: usize, height: usize) -> Result<Self, ShapeError> {
        let data = center_crop_slice(&self.data, self.width, self.height, width, height)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Byte-level view used for determinism checks.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Binary mask; every entry is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, false)
    }

    pub fn filled(width: usize, height: usize, on: bool) -> Self {
        Self {
            width,
            height,
            data: vec![u8::from(on); width * height],
        }
    }

    /// Builds a mask from arbitrary bytes; any nonzero byte becomes 1.
    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ShapeError> {
        if data.len() != width * height {
            return Err(ShapeError::new(format!(
                "mask {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        let data = data.into_iter().map(|v| u8::from(v != 0)).collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count_ones() as f64 / self.data.len().max(1) as f64
    }

    pub fn center_crop(&self, width: usize, height: usize) -> Result<Self, ShapeError> {
        let data = center_crop_slice(&self.data, self.width, self.height, width, height)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// 3x3 (Chebyshev radius 1) dilation, repeated `radius` times.
    pub fn dilate(&self, radius: usize) -> Self {
        let mut cur = self.clone();
        for _ in 0..radius {
            let mut next = cur.clone();
            for y in 0..self.height {
                for x in 0..self.width {
                    if cur.get(x, y) {
                        continue;
                    }
                    let hit = neighbors8(x, y, self.width, self.height).any(|(nx, ny)| cur.get(nx, ny));
                    if hit {
                        next.set(x, y, true);
                    }
                }
            }
            cur = next;
        }
        cur
    }

    /// 3x3 erosion, repeated `radius` times. Pixels on the image border are
    /// treated as touching background.
    pub fn erode(&self, radius: usize) -> Self {
        self.complement().dilate_with_border(radius).complement()
    }

    fn dilate_with_border(&self, radius: usize) -> Self {
        let mut cur = self.clone();
        for _ in 0..radius {
            let mut next = cur.clone();
            for y in 0..self.height {
                for x in 0..self.width {
                    if cur.get(x, y) {
                        continue;
                    }
                    let on_border = x == 0 || y == 0 || x + 1 == self.width || y + 1 == self.height;
                    if on_border || neighbors8(x, y, self.width, self.height).any(|(nx, ny)| cur.get(nx, ny)) {
                        next.set(x, y, true);
                    }
                }
            }
            cur = next;
        }
        cur
    }

    /// Labels 8-connected components of set pixels. Returns the per-pixel
    /// component id (0 = background, components numbered from 1) and the
    /// pixel count of each component, indexed by `id - 1`.
    pub fn components(&self) -> (Vec<u32>, Vec<usize>) {
        let mut ids = vec![0u32; self.data.len()];
        let mut sizes = Vec::new();
        let mut stack = Vec::new();
        for start in 0..self.data.len() {
            if self.data[start] == 0 || ids[start] != 0 {
                continue;
            }
            let id = sizes.len() as u32 + 1;
            let mut size = 0usize;
            ids[start] = id;
            stack.push(start);
            while let Some(i) = stack.pop() {
                size += 1;
                let (x, y) = (i % self.width, i / self.width);
                for (nx, ny) in neighbors8(x, y, self.width, self.height) {
                    let j = ny * self.width + nx;
                    if self.data[j] != 0 && ids[j] == 0 {
                        ids[j] = id;
                        stack.push(j);
                    }
                }
            }
            sizes.push(size);
        }
        (ids, sizes)
    }

    /// Keeps only the largest 8-connected component (ties go to the one
    /// found first in raster order).
    pub fn largest_component(&self) -> Self {
        let (ids, sizes) = self.components();
        let Some(best) = sizes
            .iter()
            .enumerate()
            .fold(None::<(usize, usize)>, |acc, (i, &s)| match acc {
                Some((_, bs)) if bs >= s => acc,
                _ => Some((i, s)),
            })
            .map(|(i, _)| i as u32 + 1)
        else {
            return self.clone();
        };
        Self {
            width: self.width,
            height: self.height,
            data: ids.iter().map(|&id| u8::from(id == best)).collect(),
        }
    }
}

fn neighbors8(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let (x, y) = (x as isize, y as isize);
    (-1isize..=1)
        .flat_map(move |dy| (-1isize..=1).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| dx != 0 || dy != 0)
        .map(move |(dx, dy)| (x + dx, y + dy))
        .filter(move |&(nx, ny)| nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h)
        .map(|(nx, ny)| (nx as usize, ny as usize))
}

/// Center crop of a row-major plane.
pub fn center_crop_slice<T: Copy>(
    src: &[T],
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
) -> Result<Vec<T>, ShapeError> {
    if dst_w > src_w || dst_h > src_h {
        return Err(ShapeError::new(format!(
            "cannot center-crop {src_w}x{src_h} to larger {dst_w}x{dst_h}"
        )));
    }
    let ox = (src_w - dst_w) / 2;
    let oy = (src_h - dst_h) / 2;
    let mut out = Vec::with_capacity(dst_w * dst_h);
    for y in 0..dst_h {
        let row = (y + oy) * src_w + ox;
        out.extend_from_slice(&src[row..row + dst_w]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_crop_offsets() {
        let data: Vec<u8> = (0..100).map(|i| i as u8).collect();
        let m = center_crop_slice(&data, 10, 10, 6, 6).unwrap();
        assert_eq!(m[0], 22);
        assert_eq!(m[35], 77);
        assert!(center_crop_slice(&data, 10, 10, 11, 6).is_err());
    }

    #[test]
    fn largest_component_and_erosion() {
        let mut m = BinaryMask::new(12, 12);
        for y in 1..8 {
            for x in 1..8 {
                m.set(x, y, true);
            }
        }
        m.set(10, 10, true);
        let (_, sizes) = m.components();
        assert_eq!(sizes, vec![49, 1]);
        let big = m.largest_component();
        assert_eq!(big.count_ones(), 49);
        assert_eq!(big.erode(1).count_ones(), 25);
        assert_eq!(big.erode(1).dilate(1).count_ones(), 49);
    }

    #[test]
    fn mask_from_vec_binarizes() {
        let m = BinaryMask::from_vec(2, 2, vec![0, 3, 255, 1]).unwrap();
        assert_eq!(m.as_slice(), &[0, 1, 1, 1]);
        assert!(BinaryMask::from_vec(2, 2, vec![0; 3]).is_err());
    }
}
