//! Gramian Angular Difference Field encoding of sTEC-rate windows.
//!
//! A window is min-max rescaled into `[-1, 1]`, each value is read as the
//! cosine of an angle, and the image entry `(i, j)` is the sine of the angle
//! difference. The field is antisymmetric with a zero diagonal.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GADF_MAGIC: &[u8; 4] = b"GADF";
pub const GADF_FORMAT_VERSION: u8 = 1;
const DOMAIN_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GadfError {
    #[error("scaled value {value} at index {index} lies outside [-1, 1]")]
    OutOfDomain { index: usize, value: f64 },
    #[error("not a GADF file (bad magic)")]
    BadMagic,
    #[error("unsupported GADF format version {0}")]
    Version(u8),
    #[error("GADF payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("png: {0}")]
    Png(#[from] png::EncodingError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Fixed-length slice of an arc, the unit that becomes one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub station_id: String,
    pub satellite_id: String,
    /// Index of the first value within the source arc.
    pub arc_offset: usize,
    pub start_epoch: i64,
    pub cadence_s: i64,
    pub values: Vec<f64>,
    /// Min and max over the whole source arc, used by [`RescaleScope::Arc`].
    pub arc_range: (f64, f64),
    /// Some value was produced by gap interpolation.
    pub has_interpolated: bool,
}

impl Window {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Exclusive end of the window's epoch span.
    pub fn end_epoch(&self) -> i64 {
        self.start_epoch + self.values.len() as i64 * self.cadence_s
    }

    /// Epoch of the final sample.
    pub fn last_epoch(&self) -> i64 {
        self.end_epoch() - self.cadence_s
    }
}

/// Row-major real matrix. Square for raw fields, `H x W` after resizing.
#[derive(Debug, Clone, PartialEq)]
pub struct GadfMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl GadfMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn write_binary<W: Write>(&self, mut sink: W) -> Result<(), GadfError> {
        sink.write_all(GADF_MAGIC)?;
        sink.write_all(&[GADF_FORMAT_VERSION])?;
        sink.write_all(&(self.rows as u32).to_le_bytes())?;
        sink.write_all(&(self.cols as u32).to_le_bytes())?;
        for &v in &self.data {
            sink.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads the binary layout written by [`GadfMatrix::write_binary`].
    /// Values come back at 32-bit precision.
    pub fn read_binary<R: Read>(mut source: R) -> Result<Self, GadfError> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        if bytes.len() < 13 {
            return Err(if bytes.len() >= 4 && &bytes[..4] != GADF_MAGIC {
                GadfError::BadMagic
            } else {
                GadfError::Truncated {
                    expected: 13,
                    found: bytes.len(),
                }
            });
        }
        if &bytes[..4] != GADF_MAGIC {
            return Err(GadfError::BadMagic);
        }
        if bytes[4] != GADF_FORMAT_VERSION {
            return Err(GadfError::Version(bytes[4]));
        }
        let rows = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let cols = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
        let expected = 13 + rows * cols * 4;
        if bytes.len() != expected {
            return Err(GadfError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let data = bytes[13..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(Self { rows, cols, data })
    }
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.pixels[i * self.width + j]
    }

    pub fn write_png<W: Write>(&self, sink: W) -> Result<(), GadfError> {
        let mut enc = png::Encoder::new(sink, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&self.pixels)?;
        writer.finish()?;
        Ok(())
    }
}

/// Min-max rescaling into `[-1, 1]`. A constant input maps to all zeros.
pub fn rescale_unit(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = min_max(values);
    rescale_with_range(values, lo, hi)
}

pub fn rescale_with_range(values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    if span <= 0.0 {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|&x| ((2.0 * x - hi - lo) / span).clamp(-1.0, 1.0))
        .collect()
}

pub(crate) fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// `M[i][j] = sin(phi_i - phi_j)` with `phi = arccos(x)`, evaluated in closed
/// form as `sqrt(1 - x_i^2) x_j - x_i sqrt(1 - x_j^2)`.
pub fn gadf_matrix(scaled: &[f64]) -> Result<GadfMatrix, GadfError> {
    let mut xs = Vec::with_capacity(scaled.len());
    for (index, &value) in scaled.iter().enumerate() {
        if !(value.abs() <= 1.0 + DOMAIN_TOL) {
            return Err(GadfError::OutOfDomain { index, value });
        }
        xs.push(value.clamp(-1.0, 1.0));
    }
    let sines: Vec<f64> = xs.iter().map(|&x| (1.0 - x * x).max(0.0).sqrt()).collect();
    let n = xs.len();
    let mut m = GadfMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sines[i] * xs[j] - xs[i] * sines[j];
            m.set(i, j, v);
            m.set(j, i, -v);
        }
    }
    Ok(m)
}

/// Corner-aligned bilinear resampling: output corners coincide with input
/// corners. A single output row (or column) samples the input centre.
pub fn resize_bilinear(m: &GadfMatrix, target: (usize, usize)) -> GadfMatrix {
    let (h, w) = target;
    assert!(h >= 1 && w >= 1, "target size must be positive");
    if (h, w) == (m.rows, m.cols) {
        return m.clone();
    }
    let ys = sample_coords(m.rows, h);
    let xs = sample_coords(m.cols, w);
    let mut out = GadfMatrix::zeros(h, w);
    for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
            let top = m.get(y0, x0) * (1.0 - fx) + m.get(y0, x1) * fx;
            let bottom = m.get(y1, x0) * (1.0 - fx) + m.get(y1, x1) * fx;
            out.set(i, j, top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn sample_coords(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 {
                (src - 1) as f64 / 2.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// `round((v + 1) / 2 * 255)`, for inspection only.
pub fn quantize_to_image(m: &GadfMatrix) -> GrayImage {
    GrayImage {
        height: m.rows,
        width: m.cols,
        pixels: m
            .data
            .iter()
            .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RescaleScope {
    /// Each window is normalised by its own min and max.
    #[default]
    Window,
    /// Windows are normalised by the min and max of their source arc.
    Arc,
}

/// Window → classifier input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GadfEncoder {
    pub image_size: usize,
    pub scope: RescaleScope,
}

impl GadfEncoder {
    pub fn new(image_size: usize) -> Self {
        Self {
            image_size,
            scope: RescaleScope::Window,
        }
    }

    pub fn encode_values(&self, values: &[f64], arc_range: Option<(f64, f64)>) -> GadfMatrix {
        let scaled = match (self.scope, arc_range) {
            (RescaleScope::Arc, Some((lo, hi))) => rescale_with_range(values, lo, hi),
            _ => rescale_unit(values),
        };
        let field = gadf_matrix(&scaled).expect("rescaled values lie in [-1, 1]");
        resize_bilinear(&field, (self.image_size, self.image_size))
    }

    pub fn encode(&self, window: &Window) -> GadfMatrix {
        self.encode_values(&window.values, Some(window.arc_range))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    fn brute_force(scaled: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        for &xi in scaled {
            for &xj in scaled {
                out.push((xi.acos() - xj.acos()).sin());
            }
        }
        out
    }

    #[test]
    fn rescale_examples() {
        assert_close(&rescale_unit(&[1.0, 2.0, 3.0]), &[-1.0, 0.0, 1.0], 0.0);
        assert_close(&rescale_unit(&[5.0, 5.0, 5.0]), &[0.0, 0.0, 0.0], 0.0);
        assert_close(&rescale_unit(&[0.0, 10.0]), &[-1.0, 1.0], 0.0);
    }

    #[test]
    fn analytic_three_by_three() {
        let m = gadf_matrix(&[-1.0, 0.0, 1.0]).unwrap();
        let expected = [0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0, 0.0];
        assert_close(&m.data, &expected, 1e-12);
    }

    #[test]
    fn zeros_map_to_zero_field() {
        let m = gadf_matrix(&[0.0; 7]).unwrap();
        assert!(m.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_out_of_domain() {
        assert!(matches!(
            gadf_matrix(&[0.0, 1.5]),
            Err(GadfError::OutOfDomain { index: 1, .. })
        ));
        assert!(gadf_matrix(&[1.0 + 1e-13]).is_ok());
        assert!(gadf_matrix(&[f64::NAN]).is_err());
    }

    #[test]
    fn random_w8_matches_brute_force() {
        let raw = [0.3, -1.2, 4.4, 0.0, 2.2, -0.7, 1.9, 3.3];
        let scaled = rescale_unit(&raw);
        let m = gadf_matrix(&scaled).unwrap();
        assert_close(&m.data, &brute_force(&scaled), 1e-12);
    }

    #[test]
    fn resize_identity_and_paper_size() {
        let m = gadf_matrix(&rescale_unit(&(0..60).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>())).unwrap();
        assert_close(&resize_bilinear(&m, (60, 60)).data, &m.data, 1e-12);
        let big = resize_bilinear(&m, (224, 224));
        assert_eq!((big.rows, big.cols), (224, 224));
        assert!(big.data.iter().all(|v| v.abs() <= 1.0));
        // corners stay put
        assert_eq!(big.get(0, 223), m.get(0, 59));
        assert_eq!(big.get(223, 0), m.get(59, 0));
    }

    #[test]
    fn resize_two_by_two_center() {
        let m = GadfMatrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let r = resize_bilinear(&m, (3, 3));
        // hand bilinear: edge midpoints are 0.5 / -0.5 averages, centre is the mean of four
        assert_close(&r.data, &[0.0, 0.5, 1.0, -0.5, 0.0, 0.5, -1.0, -0.5, 0.0], 1e-15);
    }

    #[test]
    fn quantize_endpoints() {
        let m = GadfMatrix::from_rows(&[vec![-1.0, 1.0, 0.0]]);
        assert_eq!(quantize_to_image(&m).pixels, vec![0, 255, 128]);
        let z = quantize_to_image(&GadfMatrix::zeros(4, 4));
        assert!(z.pixels.iter().all(|&p| p == 128));
    }

    #[test]
    fn quantized_antisymmetry() {
        let scaled = rescale_unit(&[0.1, 0.9, -0.3, 0.5, 0.45, -2.0]);
        let img = quantize_to_image(&gadf_matrix(&scaled).unwrap());
        for i in 0..6 {
            for j in 0..6 {
                let s = img.get(i, j) as i32 + img.get(j, i) as i32;
                assert!((s - 255).abs() <= 1, "{i},{j}: {s}");
            }
        }
    }

    #[test]
    fn binary_round_trip_and_errors() {
        let m = resize_bilinear(&gadf_matrix(&rescale_unit(&[1.0, 3.0, 2.0, 0.0])).unwrap(), (5, 5));
        let mut buf = Vec::new();
        m.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"GADF");
        assert_eq!(buf.len(), 13 + 25 * 4);
        let back = GadfMatrix::read_binary(buf.as_slice()).unwrap();
        assert_close(&back.data, &m.data, 1e-7);

        assert!(matches!(
            GadfMatrix::read_binary(&buf[..buf.len() - 1]),
            Err(GadfError::Truncated { .. })
        ));
        let mut bumped = buf.clone();
        bumped[4] = 9;
        assert!(matches!(GadfMatrix::read_binary(bumped.as_slice()), Err(GadfError::Version(9))));
        bumped[0] = b'X';
        assert!(matches!(GadfMatrix::read_binary(bumped.as_slice()), Err(GadfError::BadMagic)));
    }

    #[test]
    fn png_has_signature() {
        let img = quantize_to_image(&GadfMatrix::zeros(3, 3));
        let mut buf = Vec::new();
        img.write_png(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"\x89PNG\r\n\x1a\n");
    }

    #[test]
    fn arc_scope_uses_arc_range() {
        let enc = GadfEncoder {
            image_size: 3,
            scope: RescaleScope::Arc,
        };
        // window spans half the arc range, so scaled values stay inside (-1, 1)
        let m = enc.encode_values(&[0.0, 0.5, 1.0], Some((-1.0, 1.0)));
        let direct = gadf_matrix(&[0.0, 0.5, 1.0]).unwrap();
        assert_close(&m.data, &direct.data, 1e-15);
    }

    proptest! {
        #[test]
        fn field_properties(raw in prop::collection::vec(-5.0f64..5.0, 2..=64)) {
            let scaled = rescale_unit(&raw);
            let m = gadf_matrix(&scaled).unwrap();
            let n = raw.len();
            let oracle = brute_force(&scaled);
            for i in 0..n {
                prop_assert!(m.get(i, i).abs() <= 1e-12);
                for j in 0..n {
                    prop_assert!(m.get(i, j).abs() <= 1.0 + 1e-12);
                    prop_assert!((m.get(i, j) + m.get(j, i)).abs() <= 1e-12);
                    prop_assert!((m.get(i, j) - oracle[i * n + j]).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn rescale_affine_invariant(
            raw in prop::collection::vec(-5.0f64..5.0, 2..40),
            a in 0.01f64..100.0,
            b in -50.0f64..50.0,
        ) {
            let base = rescale_unit(&raw);
            let shifted: Vec<f64> = raw.iter().map(|x| a * x + b).collect();
            let moved = rescale_unit(&shifted);
            let (lo, hi) = min_max(&raw);
            // differences below this resolution are rounding, not structure
            prop_assume!(hi - lo > 1e-3);
            for (x, y) in base.iter().zip(&moved) {
                prop_assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
            }
        }
    }
}
