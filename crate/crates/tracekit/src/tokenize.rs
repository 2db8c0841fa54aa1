//! Coordinate quantization (1000 bins per dimension) and the `<traj>` token
//! grammar: serialization, parsing, and bin-center dequantization.
//!
//! The canonical interchange form is
//! `<traj>(x1,y1),(x2,y2),...</traj>` with integer bins in 0..=999 and no
//! whitespace. The parser additionally tolerates single spaces after commas
//! and the per-point variant `<Traj>[x,y]</Traj> <Traj>[x,y]</Traj>` used in
//! task prompts.

use thiserror::Error;

use crate::trace::{TimedTrace, TracePoint};

pub const BINS: u32 = 1000;

/// A trace quantized to integer bins in `[0, 999]^2`. Timestamps do not
/// survive tokenization; the printed grammar has no time field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedTrace {
    pub coords: Vec<(u32, u32)>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TokenizeError {
    #[error("image dimension is zero")]
    ZeroImageDimension,
    #[error("trace contains no points")]
    EmptyTrace,
    #[error("syntax error at byte {0}")]
    Syntax(usize),
    #[error("coordinate {value} out of range at byte {offset}")]
    OutOfRange { offset: usize, value: i64 },
    #[error("token body contains no coordinates")]
    EmptyBody,
}

/// Quantize one coordinate: normalize by the extent, `floor(u*1000)`, clamp
/// to 999 so the closed upper edge maps to the last bin.
fn quantize_coord(v: f64, extent: f64) -> u32 {
    let bin = ((v / extent) * BINS as f64).floor();
    (bin.max(0.0) as u32).min(BINS - 1)
}

pub fn quantize(trace: &TimedTrace) -> Result<QuantizedTrace, TokenizeError> {
    if trace.image_width <= 0.0 || trace.image_height <= 0.0 {
        return Err(TokenizeError::ZeroImageDimension);
    }
    Ok(QuantizedTrace {
        coords: trace
            .points
            .iter()
            .map(|p| {
                (
                    quantize_coord(p.x, trace.image_width),
                    quantize_coord(p.y, trace.image_height),
                )
            })
            .collect(),
    })
}

/// Canonical serialization: `<traj>(x1,y1),(x2,y2),...</traj>`.
pub fn serialize(qt: &QuantizedTrace) -> Result<String, TokenizeError> {
    if qt.coords.is_empty() {
        return Err(TokenizeError::EmptyTrace);
    }
    let body = qt
        .coords
        .iter()
        .map(|&(x, y)| format!("({x},{y})"))
        .collect::<Vec<_>>()
        .join(",");
    Ok(format!("<traj>{body}</traj>"))
}

/// Bin centers mapped back to pixel coordinates: `x = (bx + 0.5)/1000 * width`.
pub fn dequantize(qt: &QuantizedTrace, width: f64, height: f64) -> Vec<(f64, f64)> {
    debug_assert!(width > 0.0 && height > 0.0);
    qt.coords
        .iter()
        .map(|&(bx, by)| {
            (
                (bx as f64 + 0.5) / BINS as f64 * width,
                (by as f64 + 0.5) / BINS as f64 * height,
            )
        })
        .collect()
}

/// Bin centers as timestampless [`TracePoint`]s, for metric evaluation.
pub fn dequantize_to_trace(qt: &QuantizedTrace, width: f64, height: f64) -> TimedTrace {
    let points = dequantize(qt, width, height)
        .into_iter()
        .enumerate()
        .map(|(i, (x, y))| TracePoint::new(x, y, i as f64))
        .collect();
    TimedTrace::new(points, width, height)
}

struct Scanner<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn new(text: &'a str) -> Self {
        Self { text, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn skip_ws(&mut self) {
        while self.rest().starts_with(|c: char| c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn integer(&mut self) -> Result<u32, TokenizeError> {
        let start = self.pos;
        let digits: String = self.rest().chars().take_while(|c| c.is_ascii_digit()).collect();
        if digits.is_empty() {
            return Err(TokenizeError::Syntax(start));
        }
        self.pos += digits.len();
        let value: i64 = digits.parse().map_err(|_| TokenizeError::Syntax(start))?;
        if !(0..BINS as i64).contains(&value) {
            return Err(TokenizeError::OutOfRange {
                offset: start,
                value,
            });
        }
        Ok(value as u32)
    }

    fn pair(&mut self, open: char, close: char) -> Result<(u32, u32), TokenizeError> {
        if !self.eat(&open.to_string()) {
            return Err(TokenizeError::Syntax(self.pos));
        }
        let x = self.integer()?;
        if !self.eat(",") {
            return Err(TokenizeError::Syntax(self.pos));
        }
        if self.rest().starts_with(' ') {
            self.pos += 1;
        }
        let y = self.integer()?;
        if !self.eat(&close.to_string()) {
            return Err(TokenizeError::Syntax(self.pos));
        }
        Ok((x, y))
    }
}

/// Parse a trace token string in either supported grammar. Errors carry the
/// byte offset of the first offending character.
pub fn parse(text: &str) -> Result<QuantizedTrace, TokenizeError> {
    let mut s = Scanner::new(text);
    s.skip_ws();
    if s.rest().starts_with("<traj>") {
        parse_canonical(&mut s)
    } else if s.rest().starts_with("<Traj>") {
        parse_per_point(&mut s)
    } else {
        Err(TokenizeError::Syntax(s.pos))
    }
}

fn parse_canonical(s: &mut Scanner) -> Result<QuantizedTrace, TokenizeError> {
    s.eat("<traj>");
    if s.eat("</traj>") {
        return Err(TokenizeError::EmptyBody);
    }
    let mut coords = Vec::new();
    loop {
        coords.push(s.pair('(', ')')?);
        if s.eat("</traj>") {
            break;
        }
        if !s.eat(",") {
            return Err(TokenizeError::Syntax(s.pos));
        }
        if s.rest().starts_with(' ') {
            s.pos += 1;
        }
    }
    s.skip_ws();
    if !s.rest().is_empty() {
        return Err(TokenizeError::Syntax(s.pos));
    }
    Ok(QuantizedTrace { coords })
}

fn parse_per_point(s: &mut Scanner) -> Result<QuantizedTrace, TokenizeError> {
    let mut coords = Vec::new();
    loop {
        if !s.eat("<Traj>") {
            return Err(TokenizeError::Syntax(s.pos));
        }
        coords.push(s.pair('[', ']')?);
        if !s.eat("</Traj>") {
            return Err(TokenizeError::Syntax(s.pos));
        }
        s.skip_ws();
        if s.rest().is_empty() {
            break;
        }
    }
    if coords.is_empty() {
        return Err(TokenizeError::EmptyBody);
    }
    Ok(QuantizedTrace { coords })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(pts: &[(f64, f64)], w: f64, h: f64) -> TimedTrace {
        TimedTrace::new(
            pts.iter()
                .enumerate()
                .map(|(i, &(x, y))| TracePoint::new(x, y, i as f64))
                .collect(),
            w,
            h,
        )
    }

    #[test]
    fn quantize_basic_formula() {
        let qt = quantize(&trace(&[(50.0, 0.0)], 100.0, 100.0)).unwrap();
        assert_eq!(qt.coords, vec![(500, 0)]);
    }

    #[test]
    fn upper_edge_clamps_to_999() {
        let qt = quantize(&trace(&[(100.0, 100.0)], 100.0, 100.0)).unwrap();
        assert_eq!(qt.coords, vec![(999, 999)]);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert_eq!(
            quantize(&trace(&[(1.0, 1.0)], 0.0, 100.0)),
            Err(TokenizeError::ZeroImageDimension)
        );
    }

    #[test]
    fn serialize_single_and_extremes() {
        let qt = QuantizedTrace {
            coords: vec![(500, 250)],
        };
        assert_eq!(serialize(&qt).unwrap(), "<traj>(500,250)</traj>");
        let qt = QuantizedTrace {
            coords: vec![(0, 0), (999, 999)],
        };
        assert_eq!(serialize(&qt).unwrap(), "<traj>(0,0),(999,999)</traj>");
        assert_eq!(
            serialize(&QuantizedTrace { coords: vec![] }),
            Err(TokenizeError::EmptyTrace)
        );
    }

    #[test]
    fn parse_canonical_grammar() {
        let qt = parse("<traj>(10,20),(30,40)</traj>").unwrap();
        assert_eq!(qt.coords, vec![(10, 20), (30, 40)]);
        // tolerated single space after commas
        let qt = parse("<traj>(10, 20), (30, 40)</traj>").unwrap();
        assert_eq!(qt.coords, vec![(10, 20), (30, 40)]);
    }

    #[test]
    fn parse_per_point_grammar() {
        let qt = parse("<Traj>[80,200]</Traj> <Traj>[100,180]</Traj>").unwrap();
        assert_eq!(qt.coords, vec![(80, 200), (100, 180)]);
    }

    #[test]
    fn out_of_range_reports_offset() {
        let err = parse("<traj>(1000,5)</traj>").unwrap_err();
        assert_eq!(
            err,
            TokenizeError::OutOfRange {
                offset: 7,
                value: 1000
            }
        );
    }

    #[test]
    fn malformed_nesting_rejected() {
        assert!(matches!(parse("<traj>(1,2)"), Err(TokenizeError::Syntax(_))));
        assert!(matches!(
            parse("<traj>(1,2)</Traj>"),
            Err(TokenizeError::Syntax(_))
        ));
        assert_eq!(parse("<traj></traj>"), Err(TokenizeError::EmptyBody));
    }

    #[test]
    fn dequantize_bin_centers() {
        let qt = QuantizedTrace {
            coords: vec![(500, 0)],
        };
        let pts = dequantize(&qt, 100.0, 100.0);
        assert!((pts[0].0 - 50.05).abs() < 1e-12);
        assert!((pts[0].1 - 0.05).abs() < 1e-12);
    }

    #[test]
    fn dequantize_then_quantize_is_identity_on_all_bins() {
        let qt = QuantizedTrace {
            coords: (0..BINS).map(|b| (b, BINS - 1 - b)).collect(),
        };
        let pts = dequantize(&qt, 640.0, 480.0);
        let trace = trace(&pts, 640.0, 480.0);
        assert_eq!(quantize(&trace).unwrap(), qt);
    }

    #[test]
    fn quantization_monotone() {
        let mut last = 0;
        for i in 0..=1000 {
            let bin = quantize_coord(i as f64 * 0.64, 640.0);
            assert!(bin >= last);
            last = bin;
        }
    }

    proptest! {
        #[test]
        fn parse_serialize_roundtrip(coords in prop::collection::vec((0u32..1000, 0u32..1000), 1..50)) {
            let qt = QuantizedTrace { coords };
            let text = serialize(&qt).unwrap();
            prop_assert_eq!(parse(&text).unwrap(), qt);
        }

        #[test]
        fn quantization_error_bounded(x in 0.0f64..640.0) {
            let t = trace(&[(x, x * 0.5)], 640.0, 480.0);
            let qt = quantize(&t).unwrap();
            let back = dequantize(&qt, 640.0, 480.0);
            prop_assert!((x - back[0].0).abs() <= 640.0 / 2000.0 + 1e-9);
        }
    }
}
