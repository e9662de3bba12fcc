use crate::types::PIXEL_EPS;

/// Row-major H×W raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == width * height).then_some(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub type DepthMap = Image<f64>;
pub type GaussianMap = Image<i32>;
pub type RgbImage = Image<[f64; 3]>;

/// Bilinear lookup of a depth map at sub-pixel `(x, y)` (pixel centres at
/// integers). Returns `None` outside `[0, w-1] × [0, h-1]` or when any
/// neighbour carrying weight holds the invalid sentinel 0.
pub fn sample_depth_bilinear(depth: &DepthMap, x: f64, y: f64) -> Option<f64> {
    let (xmax, ymax) = ((depth.width - 1) as f64, (depth.height - 1) as f64);
    if !(x >= -PIXEL_EPS && y >= -PIXEL_EPS && x <= xmax + PIXEL_EPS && y <= ymax + PIXEL_EPS) {
        return None;
    }
    let (x, y) = (x.clamp(0.0, xmax), y.clamp(0.0, ymax));
    let x0 = (x.floor() as usize).min(depth.width - 1);
    let y0 = (y.floor() as usize).min(depth.height - 1);
    let x1 = (x0 + 1).min(depth.width - 1);
    let y1 = (y0 + 1).min(depth.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ];
    let mut acc = 0.0;
    for (px, py, w) in taps {
        if w == 0.0 {
            continue;
        }
        let d = depth.get(px, py);
        if d <= 0.0 {
            return None;
        }
        acc += w * d;
    }
    Some(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_basics() {
        let d = Image::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(sample_depth_bilinear(&d, 0.0, 0.0), Some(1.0));
        assert_eq!(sample_depth_bilinear(&d, 1.0, 1.0), Some(4.0));
        assert_eq!(sample_depth_bilinear(&d, 0.5, 0.5), Some(2.5));
        assert_eq!(sample_depth_bilinear(&d, 1.5, 0.0), None);
        let holed = Image::from_vec(2, 2, vec![1.0, 0.0, 3.0, 4.0]).unwrap();
        assert_eq!(sample_depth_bilinear(&holed, 0.5, 0.5), None);
        assert_eq!(sample_depth_bilinear(&holed, 0.0, 0.5), Some(2.0));
    }
}
