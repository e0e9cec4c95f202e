//! Effective receptive field maps.
//!
//! The map is the absolute gradient of a tap's centre activation (summed
//! over channels) with respect to the input, summed over input channels and
//! normalised to unit mass.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Model, TAP_NAMES};
use crate::nn::{Layer, Unit, UnitMut};
use crate::rep_conv::RepHDWConv;
use crate::tensor::{join, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ErfMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, non-negative, sums to 1 (or all zero if the gradient vanished).
    pub data: Vec<f64>,
}

impl ErfMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn centre(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    /// Bounding box `(y0, x0, y1, x1)` (inclusive) of the non-zero entries.
    pub fn support(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.at(y, x) > 0.0 {
                    b = Some(match b {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        b
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for y in 0..self.height {
            let row: Vec<String> = (0..self.width).map(|x| format!("{:.6e}", self.at(y, x))).collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    /// Binary greyscale PGM, scaled so the maximum maps to 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let max = self.data.iter().copied().fold(0.0, f64::max);
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 }),
        );
        out
    }

    /// Writes `<stem>.csv` and `<stem>.pgm`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        std::fs::write(stem.with_extension("csv"), self.to_csv())?;
        let mut f = std::fs::File::create(stem.with_extension("pgm"))?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }
}

/// Computes the map for whatever `forward` returns on `input` (batch 1).
pub fn erf_map<T: Scalar>(
    input: &Tensor<T>,
    mut forward: impl FnMut(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<ErfMap> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let y = forward(&mut tape, x)?;
    let s = tape.shape(y);
    let (cy, cx) = (s.h() / 2, s.w() / 2);
    let mask = Tensor::from_fn(s, |[n, _, yy, xx]| {
        if n == 0 && yy == cy && xx == cx {
            T::one()
        } else {
            T::zero()
        }
    });
    let loss = tape.weighted_sum(y, mask)?;
    tape.backward(loss)?;
    let g = tape.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
    let (h, w) = input.shape().spatial();
    let mut data = vec![0.0; h * w];
    for c in 0..input.shape().c() {
        for (d, v) in data.iter_mut().zip(g.plane(0, c)) {
            *d += v.as_f64().abs();
        }
    }
    let total: f64 = data.iter().sum();
    if total > 0.0 {
        data.iter_mut().for_each(|v| *v /= total);
    }
    Ok(ErfMap {
        height: h,
        width: w,
        data,
    })
}

/// Smallest Chebyshev radius around the centre whose window holds at least
/// `mass` of the map.
pub fn erf_radius(map: &ErfMap, mass: f64) -> f64 {
    let total: f64 = map.data.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let (cy, cx) = map.centre();
    let max_r = cy.max(cx).max(map.height - cy).max(map.width - cx);
    let target = mass * total * (1.0 - 1e-12);
    for r in 0..=max_r {
        let mut inside = 0.0;
        for y in cy.saturating_sub(r)..(cy + r + 1).min(map.height) {
            for x in cx.saturating_sub(r)..(cx + r + 1).min(map.width) {
                inside += map.at(y, x);
            }
        }
        if inside >= target {
            return r as f64;
        }
    }
    max_r as f64
}

impl<T: Scalar> Model<T> {
    /// ERF of a named tap, e.g. `"n3"` or `"head5"`.
    pub fn erf(&self, tap: &str, input: &Tensor<T>) -> Result<ErfMap> {
        if !TAP_NAMES.contains(&tap) {
            return Err(Error::UnknownTap(tap.to_string()));
        }
        erf_map(input, |tape, x| {
            let taps = self.forward_taps(tape, x)?;
            Ok(taps.get(tap).expect("known tap"))
        })
    }
}

/// `depth` RepHDW convolutions, each followed by SiLU.
#[derive(Clone, Debug)]
pub struct DwStack<T: Scalar = f32> {
    pub layers: Vec<RepHDWConv<T>>,
}

impl<T: Scalar> DwStack<T> {
    pub fn new(channels: usize, kernel: usize, depth: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(DwStack {
            layers: (0..depth)
                .map(|_| RepHDWConv::with_default_branches(channels, kernel, rng))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            h = l.forward(tape, h)?;
            h = tape.act(h)?;
        }
        Ok(h)
    }
}

impl<T: Scalar> Layer<T> for DwStack<T> {
    fn units<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Unit<'a, T>)>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push((join(prefix, &format!("dw{i}")), Unit::Rep(l)));
        }
    }
    fn units_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, UnitMut<'a, T>)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((join(prefix, &format!("dw{i}")), UnitMut::Rep(l)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ErfMap {
        let mut data: Vec<f64> = (0..h * w).map(|i| f(i / w, i % w)).collect();
        let t: f64 = data.iter().sum();
        data.iter_mut().for_each(|v| *v /= t);
        ErfMap {
            height: h,
            width: w,
            data,
        }
    }

    #[test]
    fn dirac_has_zero_radius() {
        let m = map(9, 9, |y, x| if (y, x) == (4, 4) { 1.0 } else { 0.0 });
        assert_eq!(erf_radius(&m, 0.95), 0.0);
    }

    #[test]
    fn uniform_three_by_three_has_radius_one() {
        let m = map(9, 9, |y, x| {
            if y.abs_diff(4) <= 1 && x.abs_diff(4) <= 1 {
                1.0
            } else {
                0.0
            }
        });
        assert_eq!(erf_radius(&m, 0.95), 1.0);
        assert_eq!(m.support(), Some((3, 3, 5, 5)));
    }

    #[test]
    fn pgm_header_and_size() {
        let m = map(2, 3, |y, x| (y * 3 + x) as f64);
        let pgm = m.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(pgm.len(), 11 + 6);
        assert_eq!(*pgm.last().unwrap(), 255);
        assert_eq!(m.to_csv().lines().count(), 2);
    }
}
