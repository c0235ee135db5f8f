//! Quantities with mandatory unit suffixes, e.g. `"532nm"`, `"1 mW"`, `"0.4 W^-1/2"`.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Length,
    Power,
    InverseLength,
    /// Coupling constant, `W^-1/2`.
    InverseSqrtPower,
}

impl Dimension {
    /// Suffixes with their power-of-ten exponent.
    fn units(self) -> &'static [(&'static str, i32)] {
        match self {
            Dimension::Length => &[
                ("nm", -9),
                ("um", -6),
                ("µm", -6),
                ("mm", -3),
                ("cm", -2),
                ("m", 0),
            ],
            Dimension::Power => &[("nW", -9), ("uW", -6), ("µW", -6), ("mW", -3), ("W", 0)],
            Dimension::InverseLength => &[("1/mm", 3), ("1/um", 6), ("1/m", 0), ("rad/m", 0)],
            Dimension::InverseSqrtPower => &[("W^-1/2", 0), ("1/sqrt(W)", 0)],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Length => "length",
            Dimension::Power => "power",
            Dimension::InverseLength => "inverse length",
            Dimension::InverseSqrtPower => "coupling (W^-1/2)",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitError {
    pub input: String,
    pub expected: Dimension,
}

impl fmt::Display for UnitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let units: Vec<&str> = self.expected.units().iter().map(|(u, _)| *u).collect();
        write!(
            f,
            "`{}` is not a {} with a unit suffix (one of {})",
            self.input,
            self.expected.name(),
            units.join(", ")
        )
    }
}

/// Parses `"<number><unit>"` (whitespace between them optional) into SI.
pub fn parse_quantity(input: &str, dim: Dimension) -> Result<f64, UnitError> {
    let err = || UnitError {
        input: input.to_string(),
        expected: dim,
    };
    let s = input.trim();
    // Longest suffix first so "mm" is not read as "m".
    let mut units: Vec<&(&str, i32)> = dim.units().iter().collect();
    units.sort_by_key(|(u, _)| std::cmp::Reverse(u.len()));
    for &(unit, exp) in units {
        if let Some(num) = s.strip_suffix(unit) {
            let num = num.trim_end();
            if num.is_empty() {
                return Err(err());
            }
            let v: f64 = num.parse().map_err(|_| err())?;
            if !v.is_finite() {
                return Err(err());
            }
            // Dividing by an exact 10^k keeps "40um" == 40e-6.
            let p = 10f64.powi(exp.abs());
            return Ok(if exp < 0 { v / p } else { v * p });
        }
    }
    Err(err())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_suffixes() {
        assert_eq!(parse_quantity("532nm", Dimension::Length).unwrap(), 532e-9);
        assert_eq!(parse_quantity("1 mm", Dimension::Length).unwrap(), 1e-3);
        assert_eq!(parse_quantity("40µm", Dimension::Length).unwrap(), 40e-6);
        assert_eq!(parse_quantity("2 m", Dimension::Length).unwrap(), 2.0);
        assert_eq!(parse_quantity("1mW", Dimension::Power).unwrap(), 1e-3);
        assert_eq!(parse_quantity("-250 1/m", Dimension::InverseLength).unwrap(), -250.0);
        assert_eq!(parse_quantity("0.4 W^-1/2", Dimension::InverseSqrtPower).unwrap(), 0.4);
    }

    #[test]
    fn rejects_missing_or_wrong_units() {
        for bad in ["532", "nm", "532 mW", "1e3 furlong", "NaN nm", ""] {
            assert!(parse_quantity(bad, Dimension::Length).is_err(), "{bad}");
        }
        assert!(parse_quantity("1 mm", Dimension::Power).is_err());
    }
}
