//! Text encoding of floats for CSV output.

/// 17 significant digits (round-trippable), with `inf`, `-inf` and `nan` tokens.
pub fn format_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:.16e}")
    }
}

pub fn parse_f64(tok: &str) -> Option<f64> {
    tok.trim().parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_tokens() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 1e300, 0.0, f64::MIN_POSITIVE] {
            assert_eq!(parse_f64(&format_f64(x)), Some(x));
        }
        assert_eq!(format_f64(f64::INFINITY), "inf");
        assert_eq!(format_f64(f64::NAN), "nan");
        assert!(parse_f64("nan").unwrap().is_nan());
        assert_eq!(parse_f64("-inf"), Some(f64::NEG_INFINITY));
    }
}
