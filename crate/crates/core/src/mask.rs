//! Per-pixel boolean coverage masks.

/// Row-major boolean grid; `true` marks pixels covered by the part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize, "mask size mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    /// Mask of pixels whose alpha channel is nonzero.
    pub fn from_alpha(image: &image::RgbaImage) -> Self {
        let data = image.pixels().map(|p| p[3] > 0).collect();
        Self::from_vec(image.width(), image.height(), data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Iterator over `(x, y)` of covered pixels in row-major order.
    pub fn covered(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| ((i % w) as u32, (i / w) as u32))
    }

    /// True when any covered pixel sits on the outermost row or column.
    pub fn touches_border(&self) -> bool {
        if self.width == 0 || self.height == 0 {
            return false;
        }
        let (w, h) = (self.width, self.height);
        (0..w).any(|x| self.get(x, 0) || self.get(x, h - 1))
            || (0..h).any(|y| self.get(0, y) || self.get(w - 1, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covered_iterates_row_major() {
        let mut m = Mask::new(4, 3);
        m.set(3, 0, true);
        m.set(1, 2, true);
        let pts: Vec<_> = m.covered().collect();
        assert_eq!(pts, vec![(3, 0), (1, 2)]);
        assert_eq!(m.count(), 2);
        assert!(m.touches_border());
    }

    #[test]
    fn interior_pixel_does_not_touch_border() {
        let mut m = Mask::new(5, 5);
        m.set(2, 2, true);
        assert!(!m.touches_border());
        assert!(!m.is_empty());
    }
}
