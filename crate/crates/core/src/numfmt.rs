//! Fixed 17-significant-digit decimal output for CSV and JSON.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Number, Value};

/// Formats `v` with 17 significant digits in scientific notation, which
/// round-trips every finite `f64` exactly.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// JSON number carrying the 17-digit decimal text verbatim; non-finite
/// values become `null`.
pub fn json_number(v: f64) -> Value {
    if !v.is_finite() {
        return Value::Null;
    }
    match fmt17(v).parse::<Number>() {
        Ok(n) => Value::Number(n),
        Err(_) => Value::Null,
    }
}

pub fn json_array(vs: &[f64]) -> Value {
    Value::Array(vs.iter().map(|&v| json_number(v)).collect())
}

/// `serialize_with` adaptor for `f64` fields.
pub fn ser_f64<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    json_number(*v).serialize(s)
}

pub fn ser_f64_slice<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    json_array(v).serialize(s)
}

pub fn ser_pairs<S: Serializer>(v: &[[f64; 2]], s: S) -> Result<S::Ok, S::Error> {
    Value::Array(v.iter().map(|p| json_array(p)).collect()).serialize(s)
}

/// Accepts `null` as NaN so that diagnostics of failed runs still load.
pub fn de_f64_or_nan<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn non_finite_is_null() {
        assert_eq!(json_number(f64::NAN), Value::Null);
        assert_eq!(json_number(f64::INFINITY), Value::Null);
    }

    #[test]
    fn text_is_seventeen_digits() {
        assert_eq!(fmt17(1.0), "1.0000000000000000e0");
        assert_eq!(json_number(-0.25).to_string(), "-2.5000000000000000e-1");
    }

    proptest! {
        #[test]
        fn json_round_trip_is_exact(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(v.is_finite());
            let text = serde_json::to_string(&json_number(v)).unwrap();
            let back: f64 = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
            prop_assert_eq!(fmt17(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
