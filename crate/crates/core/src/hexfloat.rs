//! C99 `%a`-style hexadecimal floating point text, used so that model files
//! round-trip every `f64` bit pattern exactly.
//!
//! Normal numbers are written as `[-]0x1.<hex>p<exp>`, subnormals as
//! `[-]0x0.<hex>p-1022`, and the specials as `inf`, `-inf`, `nan`.

use crate::error::{Error, Result};

pub fn format(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let mantissa = bits & 0x000f_ffff_ffff_ffff;
    if exp_bits == 0 && mantissa == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if exp_bits == 0 {
        (0, -1022)
    } else {
        (1, exp_bits - 1023)
    };
    let mut frac = format!("{mantissa:013x}");
    while frac.ends_with('0') {
        frac.pop();
    }
    let exp_sign = if exp >= 0 { "+" } else { "" };
    if frac.is_empty() {
        format!("{sign}0x{lead}p{exp_sign}{exp}")
    } else {
        format!("{sign}0x{lead}.{frac}p{exp_sign}{exp}")
    }
}

/// Parses text produced by [`format`]. Only canonical forms are accepted.
pub fn parse(s: &str) -> Result<f64> {
    let bad = || Error::format(format!("invalid hex float {s:?}"));
    match s {
        "nan" => return Ok(f64::NAN),
        "inf" => return Ok(f64::INFINITY),
        "-inf" => return Ok(f64::NEG_INFINITY),
        _ => {}
    }
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s),
    };
    let rest = rest.strip_prefix("0x").ok_or_else(bad)?;
    let (mant, exp) = rest.split_once('p').ok_or_else(bad)?;
    let exp: i64 = exp.parse().map_err(|_| bad())?;
    let (lead, frac) = match mant.split_once('.') {
        Some((l, f)) => (l, f),
        None => (mant, ""),
    };
    if frac.len() > 13 || !frac.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(bad());
    }
    let mut frac_bits: u64 = 0;
    for (i, c) in frac.chars().enumerate() {
        let d = c.to_digit(16).ok_or_else(bad)? as u64;
        frac_bits |= d << (48 - 4 * i);
    }
    let sign_bit = if neg { 1u64 << 63 } else { 0 };
    let bits = match lead {
        "1" => {
            let biased = exp + 1023;
            if !(1..=2046).contains(&biased) {
                return Err(bad());
            }
            sign_bit | ((biased as u64) << 52) | frac_bits
        }
        "0" => {
            if frac_bits == 0 && exp == 0 {
                sign_bit
            } else if exp == -1022 {
                sign_bit | frac_bits
            } else {
                return Err(bad());
            }
        }
        _ => return Err(bad()),
    };
    Ok(f64::from_bits(bits))
}

/// Serde adapter for `Vec<f64>` fields written as hex strings.
pub(crate) mod vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| super::format(*x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.iter()
            .map(|t| super::parse(t).map_err(serde::de::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_values() {
        assert_eq!(format(1.0), "0x1p+0");
        assert_eq!(format(1.5), "0x1.8p+0");
        assert_eq!(format(-0.15625), "-0x1.4p-3");
        assert_eq!(format(0.0), "0x0p+0");
        assert_eq!(format(-0.0), "-0x0p+0");
        assert_eq!(format(f64::MIN_POSITIVE / 2.0), "0x0.8p-1022");
        assert_eq!(parse("0x1.8p+0").unwrap(), 1.5);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse("1.5").is_err());
        assert!(parse("0x2p+0").is_err());
        assert!(parse("0x1.zp+0").is_err());
    }

    proptest! {
        #[test]
        fn round_trips_every_bit_pattern(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            let back = parse(&format(v)).unwrap();
            if v.is_nan() {
                prop_assert!(back.is_nan());
            } else {
                prop_assert_eq!(back.to_bits(), bits);
            }
        }
    }
}
