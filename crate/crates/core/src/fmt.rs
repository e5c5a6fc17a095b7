//! Canonical number formatting shared by every file writer.
//!
//! Floats are written with six significant digits in `%g` style: fixed
//! notation for decimal exponents in `[-4, 6)`, scientific otherwise,
//! trailing zeros removed. Parsing a canonical string and formatting it
//! again yields the same string.

/// Formats `v` with six significant digits.
pub fn fmt_f64(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        trim_zeros(&s).to_string()
    } else {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rounds `v` to what a canonical write followed by a read produces.
pub fn canonical(v: f64) -> f64 {
    fmt_f64(v).parse().unwrap_or(v)
}

/// Formats an optional metric using the `-1` sentinel for "undefined".
pub fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => fmt_f64(v),
        None => "-1".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn formats_like_printf_g() {
        assert_eq!(fmt_f64(0.0), "0");
        assert_eq!(fmt_f64(-0.0), "0");
        assert_eq!(fmt_f64(1.0), "1");
        assert_eq!(fmt_f64(123.456789), "123.457");
        assert_eq!(fmt_f64(-3.5), "-3.5");
        assert_eq!(fmt_f64(0.1), "0.1");
        assert_eq!(fmt_f64(25.0), "25");
        assert_eq!(fmt_f64(1234567.0), "1.23457e+06");
        assert_eq!(fmt_f64(0.0000123456), "1.23456e-05");
        assert_eq!(fmt_f64(-0.00001), "-1e-05");
        assert_eq!(fmt_f64(0.000123456), "0.000123456");
    }

    proptest! {
        #[test]
        fn format_parse_format_is_stable(v in -1e9f64..1e9) {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            prop_assert_eq!(fmt_f64(back), s);
        }

        #[test]
        fn tiny_values_are_stable(v in -1e-3f64..1e-3) {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            prop_assert_eq!(fmt_f64(back), s);
        }
    }
}
