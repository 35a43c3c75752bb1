//! Number formatting shared by every CSV writer.

/// Formats `x` with 12 significant digits, like C's `%.12g`.
pub fn sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent always present");
    let exp: i32 = exp.parse().expect("exponent is an integer");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::sig;

    #[test]
    fn matches_printf_g() {
        assert_eq!(sig(0.1), "0.1");
        assert_eq!(sig(2.0), "2");
        assert_eq!(sig(-100.0), "-100");
        assert_eq!(sig(1.0 / 3.0), "0.333333333333");
        assert_eq!(sig(123456.789), "123456.789");
        assert_eq!(sig(1e-7), "1e-7");
        assert_eq!(sig(2.5e15), "2.5e15");
        assert_eq!(sig(0.00012345), "0.00012345");
        assert_eq!(sig(-0.0), "0");
    }

    #[test]
    fn round_trips_to_twelve_digits() {
        for &x in &[0.123456789012345, 98765.4321012345, -3.3e-9, 7.0e20] {
            let back: f64 = sig(x).parse().unwrap();
            assert!(((back - x) / x).abs() < 1e-11);
        }
    }
}
