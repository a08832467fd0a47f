//! Gaussian heatmap targets and argmax decoding.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};

/// Default Gaussian standard deviation in network-space pixels.
pub const DEFAULT_SIGMA: f64 = 3.0;

/// A landmark position in pixel coordinates (`x` = column, `y` = row).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    pub index: usize,
}

impl Landmark {
    pub fn new(x: f64, y: f64, index: usize) -> Self {
        Self { x, y, index }
    }

    pub fn distance(&self, other: &Landmark) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSpec {
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    /// Amplitude at the landmark pixel.
    pub peak: f64,
}

impl HeatmapSpec {
    pub fn new(height: usize, width: usize, sigma: f64, peak: f64) -> Result<Self> {
        let spec = Self {
            height,
            width,
            sigma,
            peak,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig("heatmap dims must be >= 1".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.peak > 0.0 && self.peak <= 1.0) {
            return Err(Error::InvalidConfig(format!("peak must be in (0, 1], got {}", self.peak)));
        }
        Ok(())
    }
}

/// Row-major `height x width` field of values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height * width != values.len() || values.is_empty() {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                actual: vec![values.len()],
            });
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid_input(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_values(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Result of [`encode_gaussian`].
#[derive(Clone, Debug)]
pub struct Encoded {
    pub heatmap: Heatmap,
    /// The landmark lay outside the field and was moved onto its border.
    pub clamped: bool,
}

/// Renders `peak * exp(-r^2 / (2 sigma^2))` around the landmark.
pub fn encode_gaussian(landmark: &Landmark, spec: &HeatmapSpec) -> Result<Encoded> {
    spec.validate()?;
    if !landmark.x.is_finite() || !landmark.y.is_finite() {
        return Err(invalid_input(format!(
            "non-finite landmark ({}, {})",
            landmark.x, landmark.y
        )));
    }
    let max_x = (spec.width - 1) as f64;
    let max_y = (spec.height - 1) as f64;
    let cx = landmark.x.clamp(0.0, max_x);
    let cy = landmark.y.clamp(0.0, max_y);
    let clamped = cx != landmark.x || cy != landmark.y;
    let denom = 2.0 * spec.sigma * spec.sigma;
    let mut values = Vec::with_capacity(spec.height * spec.width);
    for i in 0..spec.height {
        let dy = i as f64 - cy;
        for j in 0..spec.width {
            let dx = j as f64 - cx;
            let v = spec.peak * (-(dx * dx + dy * dy) / denom).exp();
            values.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(Encoded {
        heatmap: Heatmap {
            height: spec.height,
            width: spec.width,
            values,
        },
        clamped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoded {
    pub x: f64,
    pub y: f64,
    /// Value at the selected pixel.
    pub score: f64,
    /// Every pixel had the same value; the position is meaningless.
    pub degenerate: bool,
}

impl Decoded {
    pub fn landmark(&self, index: usize) -> Landmark {
        Landmark::new(self.x, self.y, index)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    /// Shift a quarter pixel towards the larger neighbour on each axis.
    pub subpixel: bool,
}

/// Position of the maximum; ties go to the lowest row, then lowest column.
pub fn decode_argmax(heatmap: &Heatmap) -> Decoded {
    decode_with(heatmap, DecodeOptions::default())
}

pub fn decode_with(heatmap: &Heatmap, options: DecodeOptions) -> Decoded {
    let (row, col, score, degenerate) = argmax_field(&heatmap.values, heatmap.width);
    let mut x = col as f64;
    let mut y = row as f64;
    if options.subpixel && !degenerate {
        let at = |r: usize, c: usize| heatmap.values[r * heatmap.width + c];
        if col > 0 && col + 1 < heatmap.width {
            x += 0.25 * (at(row, col + 1) - at(row, col - 1)).signum();
        }
        if row > 0 && row + 1 < heatmap.height {
            y += 0.25 * (at(row + 1, col) - at(row - 1, col)).signum();
        }
    }
    Decoded {
        x,
        y,
        score,
        degenerate,
    }
}

/// `(row, col, max, all_equal)` of a row-major field.
pub(crate) fn argmax_field(values: &[f64], width: usize) -> (usize, usize, f64, bool) {
    let mut best = 0;
    let mut min = values[0];
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
        min = min.min(v);
    }
    let max = values[best];
    (best / width, best % width, max, max == min)
}

/// Maps pixel coordinates between two image sizes given as `(height, width)`.
pub fn rescale_coords(
    landmark: &Landmark,
    from: (usize, usize),
    to: (usize, usize),
) -> Result<Landmark> {
    if from.0 == 0 || from.1 == 0 || to.0 == 0 || to.1 == 0 {
        return Err(invalid_input("image dimensions must be >= 1"));
    }
    Ok(Landmark {
        x: landmark.x * to.1 as f64 / from.1 as f64,
        y: landmark.y * to.0 as f64 / from.0 as f64,
        index: landmark.index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(h: usize, w: usize, sigma: f64, peak: f64) -> HeatmapSpec {
        HeatmapSpec::new(h, w, sigma, peak).unwrap()
    }

    #[test]
    fn gaussian_values() {
        let hm = encode_gaussian(&Landmark::new(3.0, 3.0, 0), &spec(7, 7, 1.0, 1.0))
            .unwrap()
            .heatmap;
        assert_eq!(hm.get(3, 3), 1.0);
        // one pixel right of the landmark: exp(-1/2)
        assert!((hm.get(3, 4) - 0.606_530_659_712_633_4).abs() < 1e-15);
        let hm = encode_gaussian(&Landmark::new(3.0, 3.0, 0), &spec(7, 7, 1.0, 0.9))
            .unwrap()
            .heatmap;
        assert_eq!(hm.get(3, 3), 0.9);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(HeatmapSpec::new(4, 4, 0.0, 1.0).is_err());
        assert!(HeatmapSpec::new(4, 4, 1.0, 0.0).is_err());
        assert!(HeatmapSpec::new(0, 4, 1.0, 1.0).is_err());
        let s = spec(4, 4, 1.0, 1.0);
        assert!(encode_gaussian(&Landmark::new(f64::NAN, 1.0, 0), &s).is_err());
    }

    #[test]
    fn outside_landmark_is_clamped_and_flagged() {
        let enc = encode_gaussian(&Landmark::new(7.4, -0.3, 0), &spec(5, 6, 1.0, 1.0)).unwrap();
        assert!(enc.clamped);
        let d = decode_argmax(&enc.heatmap);
        assert_eq!((d.x, d.y), (5.0, 0.0));
        let inside = encode_gaussian(&Landmark::new(2.0, 2.0, 0), &spec(5, 6, 1.0, 1.0)).unwrap();
        assert!(!inside.clamped);
    }

    #[test]
    fn decode_rules() {
        let hm = encode_gaussian(&Landmark::new(5.0, 2.0, 0), &spec(9, 9, 2.0, 1.0))
            .unwrap()
            .heatmap;
        let d = decode_argmax(&hm);
        assert_eq!((d.x, d.y, d.degenerate), (5.0, 2.0, false));

        let flat = Heatmap::filled(4, 4, 0.5).unwrap();
        let d = decode_argmax(&flat);
        assert_eq!((d.x, d.y, d.degenerate), (0.0, 0.0, true));

        let mut v = vec![0.0; 16];
        v[4 + 1] = 0.8;
        v[2 * 4 + 2] = 0.8;
        let d = decode_argmax(&Heatmap::from_values(4, 4, v).unwrap());
        assert_eq!((d.x, d.y), (1.0, 1.0));
    }

    #[test]
    fn subpixel_moves_towards_larger_neighbour() {
        let hm = encode_gaussian(&Landmark::new(4.3, 3.8, 0), &spec(9, 9, 1.5, 1.0))
            .unwrap()
            .heatmap;
        let plain = decode_argmax(&hm);
        assert_eq!((plain.x, plain.y), (4.0, 4.0));
        let sub = decode_with(&hm, DecodeOptions { subpixel: true });
        assert_eq!((sub.x, sub.y), (4.25, 3.75));
    }

    #[test]
    fn rescale_examples() {
        let l = Landmark::new(100.0, 200.0, 3);
        let r = rescale_coords(&l, (2400, 1935), (512, 416)).unwrap();
        // 100 * 416 / 1935 and 200 * 512 / 2400
        assert!((r.x - 21.498_708_010_335_92).abs() < 1e-9);
        assert!((r.y - 42.666_666_666_666_67).abs() < 1e-9);
        assert_eq!(r.index, 3);
        assert_eq!(rescale_coords(&l, (10, 20), (10, 20)).unwrap(), l);
        assert!(rescale_coords(&l, (0, 20), (10, 20)).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_integer_landmarks(h in 3usize..40, w in 3usize..40, fx in 0.0f64..1.0, fy in 0.0f64..1.0, sigma in 0.5f64..6.0) {
            let x = 1 + ((w - 2) as f64 * fx) as usize % (w - 2);
            let y = 1 + ((h - 2) as f64 * fy) as usize % (h - 2);
            let hm = encode_gaussian(&Landmark::new(x as f64, y as f64, 0), &spec(h, w, sigma, 1.0)).unwrap().heatmap;
            let d = decode_argmax(&hm);
            prop_assert_eq!((d.x, d.y), (x as f64, y as f64));
        }

        #[test]
        fn monotone_decay(lx in 0.0f64..0.99, sigma in 0.5f64..5.0) {
            let s = spec(1, 64, sigma, 1.0);
            let hm = encode_gaussian(&Landmark::new(lx, 0.0, 0), &s).unwrap().heatmap;
            // columns 1.. are ordered by increasing distance from the landmark
            for j in 2..64 {
                let (near, far) = (hm.get(0, j - 1), hm.get(0, j));
                prop_assert!(far < near || near == 0.0);
            }
        }

        #[test]
        fn reflection_symmetry(h in 2usize..20, w in 2usize..20, lx in 0.0f64..1.0, ly in 0.0f64..1.0, qi in 0usize..400, sigma in 0.5f64..4.0) {
            let x = lx * (w - 1) as f64;
            let y = ly * (h - 1) as f64;
            let s = spec(h, w, sigma, 1.0);
            let a = encode_gaussian(&Landmark::new(x, y, 0), &s).unwrap().heatmap;
            let b = encode_gaussian(&Landmark::new((w - 1) as f64 - x, (h - 1) as f64 - y, 0), &s).unwrap().heatmap;
            let (i, j) = (qi / 20 % h, qi % 20 % w);
            let va = a.get(i, j);
            let vb = b.get(h - 1 - i, w - 1 - j);
            prop_assert!((va - vb).abs() <= 1e-12 * va.max(1e-300));
        }

        #[test]
        fn rescale_composes(x in 0.0f64..500.0, y in 0.0f64..500.0, dims in proptest::collection::vec(1usize..3000, 6)) {
            let l = Landmark::new(x, y, 0);
            let a = (dims[0], dims[1]);
            let b = (dims[2], dims[3]);
            let c = (dims[4], dims[5]);
            let two = rescale_coords(&rescale_coords(&l, a, b).unwrap(), b, c).unwrap();
            let one = rescale_coords(&l, a, c).unwrap();
            prop_assert!((two.x - one.x).abs() <= 1e-9 * one.x.abs().max(1e-12));
            prop_assert!((two.y - one.y).abs() <= 1e-9 * one.y.abs().max(1e-12));
            let back = rescale_coords(&rescale_coords(&l, a, b).unwrap(), b, a).unwrap();
            prop_assert!((back.x - x).abs() <= 1e-9 * x.max(1e-12));
        }
    }
}
