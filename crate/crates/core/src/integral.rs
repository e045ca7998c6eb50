//! Integral images (summed-area tables).

use crate::Grid;

/// Cumulative sums with a zero first row and column:
/// `table[y][x]` holds the sum of all source pixels with column `< x` and row `< y`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    table: Vec<f64>,
}

/// Inclusive pixel rectangle. May extend past the image; see [`IntegralImage::rect_sum`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub left: i64,
    pub top: i64,
    pub right: i64,
    pub bottom: i64,
}

impl Rect {
    pub fn new(left: i64, top: i64, right: i64, bottom: i64) -> Self {
        debug_assert!(left <= right && top <= bottom);
        Self {
            left,
            top,
            right,
            bottom,
        }
    }

    /// `width x height` rectangle with top-left corner `(x, y)`.
    pub fn from_origin(x: i64, y: i64, width: i64, height: i64) -> Self {
        Self::new(x, y, x + width - 1, y + height - 1)
    }
}

impl IntegralImage {
    pub fn new(img: &Grid) -> Self {
        let (w, h) = (img.width(), img.height());
        let stride = w + 1;
        let mut table = vec![0.0; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += img.get(x, y);
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
            }
        }
        Self {
            width: w,
            height: h,
            table,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Table entry for the corner `(x, y)`, `0 <= x <= width`, `0 <= y <= height`.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.table[y * (self.width + 1) + x]
    }

    /// Sum over `r` clipped to the image; zero when the intersection is empty.
    #[inline]
    pub fn rect_sum(&self, r: Rect) -> f64 {
        let l = r.left.max(0);
        let t = r.top.max(0);
        let rt = r.right.min(self.width as i64 - 1);
        let b = r.bottom.min(self.height as i64 - 1);
        if l > rt || t > b {
            return 0.0;
        }
        let (l, t, rt, b) = (l as usize, t as usize, rt as usize + 1, b as usize + 1);
        self.at(rt, b) + self.at(l, t) - self.at(l, b) - self.at(rt, t)
    }

    /// Sum over the `w x h` box whose top-left pixel is `(x, y)`.
    #[inline]
    pub fn box_sum(&self, x: i64, y: i64, w: i64, h: i64) -> f64 {
        self.rect_sum(Rect::from_origin(x, y, w, h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ones_2x2() {
        let ii = IntegralImage::new(&Grid::filled(2, 2, 1.0));
        assert_eq!(ii.at(2, 2), 4.0);
    }

    #[test]
    fn single_pixel_table() {
        let ii = IntegralImage::new(&Grid::filled(1, 1, 7.0));
        assert_eq!(ii.table, vec![0.0, 0.0, 0.0, 7.0]);
    }

    #[test]
    fn full_and_outside_rects() {
        let img = Grid::from_fn(5, 4, |x, y| (x + 10 * y) as f64);
        let ii = IntegralImage::new(&img);
        let total: f64 = img.data().iter().sum();
        assert_eq!(ii.rect_sum(Rect::new(0, 0, 4, 3)), total);
        assert_eq!(ii.rect_sum(Rect::new(-10, -10, 100, 100)), total);
        assert_eq!(ii.rect_sum(Rect::new(5, 0, 9, 3)), 0.0);
        assert_eq!(ii.rect_sum(Rect::new(-3, -3, -1, 2)), 0.0);
    }

    fn image_strategy() -> impl Strategy<Value = Grid> {
        (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
            prop::collection::vec(0u8..=255, w * h)
                .prop_map(move |v| Grid::from_vec(w, h, v.into_iter().map(f64::from).collect()))
        })
    }

    proptest! {
        #[test]
        fn split_rect_is_additive(img in image_strategy(), cut in 0usize..12) {
            let ii = IntegralImage::new(&img);
            let w = img.width() as i64;
            let h = img.height() as i64;
            let c = (cut as i64).min(w - 1);
            let whole = ii.rect_sum(Rect::new(0, 0, w - 1, h - 1));
            let left = ii.rect_sum(Rect::new(0, 0, c, h - 1));
            let right = if c + 1 <= w - 1 { ii.rect_sum(Rect::new(c + 1, 0, w - 1, h - 1)) } else { 0.0 };
            prop_assert!((whole - left - right).abs() <= 1e-9 * whole.abs().max(1.0));
        }

        #[test]
        fn nonnegative_images_have_nonnegative_sums(
            img in image_strategy(), l in -3i64..12, t in -3i64..12, w in 1i64..10, h in 1i64..10,
        ) {
            let ii = IntegralImage::new(&img);
            prop_assert!(ii.rect_sum(Rect::from_origin(l, t, w, h)) >= 0.0);
        }
    }
}
