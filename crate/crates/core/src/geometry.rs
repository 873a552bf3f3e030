//! Axis-aligned boxes, IoU, and the coordinate conventions used by model
//! interfaces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack allowed on normalized coordinates before they count as out of range.
pub const RANGE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate box [{0}, {1}, {2}, {3}]")]
    DegenerateBox(f64, f64, f64, f64),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("coordinate {value} outside [0, {limit}]")]
    OutOfRange { value: f64, limit: f64 },
    #[error("invalid image size {0}x{1}")]
    InvalidImage(u32, u32),
}

/// Canonical absolute `(x_min, y_min, x_max, y_max)` rectangle in pixels.
///
/// Always finite with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(into = "[f64; 4]")]
pub struct Box {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl Box {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        if !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::DegenerateBox(x_min, y_min, x_max, y_max));
        }
        Ok(Box {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self, GeometryError> {
        Box::new(c[0], c[1], c[2], c[3])
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self, GeometryError> {
        Box::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    /// Intersection with the image rectangle, if it has positive area.
    pub fn clamp_to(&self, image: ImageSize) -> Result<Self, GeometryError> {
        let w = image.width as f64;
        let h = image.height as f64;
        Box::new(
            self.x_min.clamp(0.0, w),
            self.y_min.clamp(0.0, h),
            self.x_max.clamp(0.0, w),
            self.y_max.clamp(0.0, h),
        )
    }

    pub fn within(&self, image: ImageSize) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= image.width as f64 && self.y_max <= image.height as f64
    }

    /// Smallest box containing both.
    pub fn union_hull(&self, other: &Box) -> Box {
        Box {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    pub fn intersection(&self, other: &Box) -> Option<Box> {
        Box::new(
            self.x_min.max(other.x_min),
            self.y_min.max(other.y_min),
            self.x_max.min(other.x_max),
            self.y_max.min(other.y_max),
        )
        .ok()
    }

    /// Lexicographic total order on `(x_min, y_min, x_max, y_max)`.
    pub fn total_cmp(&self, other: &Box) -> std::cmp::Ordering {
        self.x_min
            .total_cmp(&other.x_min)
            .then(self.y_min.total_cmp(&other.y_min))
            .then(self.x_max.total_cmp(&other.x_max))
            .then(self.y_max.total_cmp(&other.y_max))
    }
}

impl From<Box> for [f64; 4] {
    fn from(b: Box) -> Self {
        b.to_array()
    }
}

impl<'de> Deserialize<'de> for Box {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let c = <[f64; 4]>::deserialize(d)?;
        Box::from_array(c).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidImage(width, height));
        }
        Ok(ImageSize { width, height })
    }
}

/// Coordinate conventions of evaluated model interfaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoordConvention {
    /// `(x_min, y_min, x_max, y_max)` in pixels.
    XyxyAbs,
    /// `(y_min, x_min, y_max, x_max)` in pixels.
    YxyxAbs,
    /// `(x_min, y_min, x_max, y_max)` normalized to `[0, 1]`.
    XyxyNorm01,
    /// `(x_min, y_min, x_max, y_max)` relative on a `[0, 1000]` grid.
    XyxyRel1000,
}

impl CoordConvention {
    pub const ALL: [CoordConvention; 4] = [
        CoordConvention::XyxyAbs,
        CoordConvention::YxyxAbs,
        CoordConvention::XyxyNorm01,
        CoordConvention::XyxyRel1000,
    ];

    fn scale_limit(self) -> Option<f64> {
        match self {
            CoordConvention::XyxyAbs | CoordConvention::YxyxAbs => None,
            CoordConvention::XyxyNorm01 => Some(1.0),
            CoordConvention::XyxyRel1000 => Some(1000.0),
        }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &Box, b: &Box) -> f64 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Converts interface coordinates to a canonical absolute box.
pub fn to_canonical(coords: [f64; 4], conv: CoordConvention, image: ImageSize) -> Result<Box, GeometryError> {
    if coords.iter().any(|c| !c.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    if let Some(limit) = conv.scale_limit() {
        for &value in &coords {
            if value < -RANGE_TOLERANCE || value > limit + RANGE_TOLERANCE {
                return Err(GeometryError::OutOfRange { value, limit });
            }
        }
    }
    let w = image.width as f64;
    let h = image.height as f64;
    let [a, b, c, d] = coords;
    match conv {
        CoordConvention::XyxyAbs => Box::new(a, b, c, d),
        CoordConvention::YxyxAbs => Box::new(b, a, d, c),
        CoordConvention::XyxyNorm01 => Box::new(a * w, b * h, c * w, d * h),
        CoordConvention::XyxyRel1000 => Box::new(a * w / 1000.0, b * h / 1000.0, c * w / 1000.0, d * h / 1000.0),
    }
}

/// Inverse of [`to_canonical`]. The box is clamped to the image first when it
/// still has positive area after clamping.
pub fn from_canonical(b: &Box, conv: CoordConvention, image: ImageSize) -> [f64; 4] {
    let b = b.clamp_to(image).unwrap_or(*b);
    let w = image.width as f64;
    let h = image.height as f64;
    match conv {
        CoordConvention::XyxyAbs => b.to_array(),
        CoordConvention::YxyxAbs => [b.y_min, b.x_min, b.y_max, b.x_max],
        CoordConvention::XyxyNorm01 => [b.x_min / w, b.y_min / h, b.x_max / w, b.y_max / h],
        CoordConvention::XyxyRel1000 => [
            b.x_min * 1000.0 / w,
            b.y_min * 1000.0 / h,
            b.x_max * 1000.0 / w,
            b.y_max * 1000.0 / h,
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> Box {
        Box::new(a, b, c, d).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bx(0., 0., 10., 10.), &bx(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&bx(0., 0., 10., 10.), &bx(20., 20., 30., 30.)), 0.0);
        // inter 50, union 150
        let v = iou(&bx(0., 0., 10., 10.), &bx(5., 0., 15., 10.));
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        // touching edges share no area
        assert_eq!(iou(&bx(0., 0., 10., 10.), &bx(10., 0., 20., 10.)), 0.0);
    }

    #[test]
    fn degenerate_and_non_finite_rejected() {
        assert!(matches!(
            Box::new(1., 0., 1., 5.),
            Err(GeometryError::DegenerateBox(..))
        ));
        assert!(matches!(
            Box::new(0., 5., 1., 2.),
            Err(GeometryError::DegenerateBox(..))
        ));
        assert_eq!(Box::new(0., 0., f64::NAN, 1.), Err(GeometryError::NonFinite));
        assert!(ImageSize::new(0, 4).is_err());
    }

    #[test]
    fn to_canonical_examples() {
        let img = ImageSize::new(200, 100).unwrap();
        assert_eq!(
            to_canonical([10., 20., 30., 40.], CoordConvention::YxyxAbs, img).unwrap(),
            bx(20., 10., 40., 30.)
        );
        assert_eq!(
            to_canonical([0.5, 0.5, 1.0, 1.0], CoordConvention::XyxyNorm01, img).unwrap(),
            bx(100., 50., 200., 100.)
        );
        assert_eq!(
            to_canonical([500., 500., 1000., 1000.], CoordConvention::XyxyRel1000, img).unwrap(),
            bx(100., 50., 200., 100.)
        );
    }

    #[test]
    fn to_canonical_errors() {
        let img = ImageSize::new(200, 100).unwrap();
        assert!(matches!(
            to_canonical([0.5, 0.5, 1.1, 1.0], CoordConvention::XyxyNorm01, img),
            Err(GeometryError::OutOfRange { .. })
        ));
        assert!(matches!(
            to_canonical([0., 0., 1000.5, 10.], CoordConvention::XyxyRel1000, img),
            Err(GeometryError::OutOfRange { .. })
        ));
        // within tolerance
        assert!(to_canonical([0., 0., 1.0 + 5e-7, 1.], CoordConvention::XyxyNorm01, img).is_ok());
        assert!(matches!(
            to_canonical([30., 20., 10., 40.], CoordConvention::XyxyAbs, img),
            Err(GeometryError::DegenerateBox(..))
        ));
    }

    #[test]
    fn from_canonical_examples() {
        let img = ImageSize::new(200, 100).unwrap();
        assert_eq!(
            from_canonical(&bx(20., 10., 40., 30.), CoordConvention::YxyxAbs, img),
            [10., 20., 30., 40.]
        );
        assert_eq!(
            from_canonical(&bx(100., 50., 200., 100.), CoordConvention::XyxyNorm01, img),
            [0.5, 0.5, 1.0, 1.0]
        );
    }

    #[test]
    fn round_trip_thousand_random_boxes() {
        let mut rng = crate::rng::Pcg32::seed_from(3);
        for _ in 0..1000 {
            let img = ImageSize::new(1 + rng.below(4000) as u32, 1 + rng.below(4000) as u32).unwrap();
            let (w, h) = (img.width as f64, img.height as f64);
            let x0 = rng.uniform(0.0, w * 0.9);
            let y0 = rng.uniform(0.0, h * 0.9);
            let b = bx(x0, y0, rng.uniform(x0 + w * 0.05, w), rng.uniform(y0 + h * 0.05, h));
            for conv in CoordConvention::ALL {
                let back = to_canonical(from_canonical(&b, conv, img), conv, img).unwrap();
                for (p, q) in back.to_array().iter().zip(b.to_array()) {
                    assert!((p - q).abs() <= 1e-9 * w.max(h), "{conv:?} {b:?} {back:?}");
                }
            }
        }
    }

    fn arb_box() -> impl Strategy<Value = Box> {
        (-500.0f64..500.0, -500.0f64..500.0, 0.01f64..300.0, 0.01f64..300.0)
            .prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn iou_translation_invariant(a in arb_box(), b in arb_box(), dx in -100.0f64..100.0, dy in -100.0f64..100.0) {
            let moved = iou(&a.translate(dx, dy).unwrap(), &b.translate(dx, dy).unwrap());
            prop_assert!((moved - iou(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn conversion_round_trip(c0 in 0.0f64..0.45, c1 in 0.0f64..0.45, c2 in 0.55f64..1.0, c3 in 0.55f64..1.0,
                                 w in 1u32..5000, h in 1u32..5000) {
            let img = ImageSize::new(w, h).unwrap();
            for conv in CoordConvention::ALL {
                let coords = match conv {
                    CoordConvention::XyxyNorm01 => [c0, c1, c2, c3],
                    CoordConvention::XyxyRel1000 => [c0 * 1000., c1 * 1000., c2 * 1000., c3 * 1000.],
                    CoordConvention::XyxyAbs => [c0 * w as f64, c1 * h as f64, c2 * w as f64, c3 * h as f64],
                    CoordConvention::YxyxAbs => [c1 * h as f64, c0 * w as f64, c3 * h as f64, c2 * w as f64],
                };
                let b = to_canonical(coords, conv, img).unwrap();
                let back = from_canonical(&b, conv, img);
                for (p, q) in back.iter().zip(coords) {
                    prop_assert!((p - q).abs() <= 1e-9 * q.abs().max(1.0));
                }
            }
        }
    }
}
