use serde::{Deserialize, Serialize};

/// Half-open pixel box `[xmin, xmax) x [ymin, ymax)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: i32,
    pub ymin: i32,
    pub xmax: i32,
    pub ymax: i32,
}

impl BBox {
    /// Returns `None` unless `0 <= xmin < xmax` and `0 <= ymin < ymax`.
    pub fn new(xmin: i32, ymin: i32, xmax: i32, ymax: i32) -> Option<Self> {
        let b = Self {
            xmin,
            ymin,
            xmax,
            ymax,
        };
        b.is_valid().then_some(b)
    }

    pub fn is_valid(&self) -> bool {
        0 <= self.xmin && self.xmin < self.xmax && 0 <= self.ymin && self.ymin < self.ymax
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.is_valid() && self.xmax as i64 <= width as i64 && self.ymax as i64 <= height as i64
    }

    pub fn width(&self) -> i32 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> i32 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> i64 {
        self.width() as i64 * self.height() as i64
    }

    pub fn intersection_area(&self, other: &BBox) -> i64 {
        let w = self.xmax.min(other.xmax) - self.xmin.max(other.xmin);
        let h = self.ymax.min(other.ymax) - self.ymin.max(other.ymin);
        if w <= 0 || h <= 0 {
            0
        } else {
            w as i64 * h as i64
        }
    }
}

impl std::fmt::Display for BBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.xmin, self.ymin, self.xmax, self.ymax)
    }
}
