//! Round-trippable float formatting for CSV and JSON output.

use serde::{de, Deserializer, Serializer};

/// Shortest representation that parses back to the same `f64`;
/// non-finite values print as `inf`, `-inf` and `nan`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:?}")
    }
}

/// Serde adapter: finite floats as JSON numbers, the rest as strings.
pub fn serialize_f64<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else {
        s.serialize_str(&fmt_f64(*x))
    }
}

/// Serde adapter accepting numbers or the strings written by [`serialize_f64`].
pub fn deserialize_f64<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    struct V;
    impl de::Visitor<'_> for V {
        type Value = f64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a number, \"inf\", \"-inf\" or \"nan\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            match v {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
            }
        }
    }
    d.deserialize_any(V)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        for x in [0.1, 1.0 / 3.0, 1e-300, 6.02e23, -0.0, 2.5] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert_eq!(fmt_f64(1.0), "1.0");
    }

    #[derive(serde::Serialize, serde::Deserialize)]
    struct Wrap(
        #[serde(serialize_with = "serialize_f64", deserialize_with = "deserialize_f64")] f64,
    );

    #[test]
    fn json_adapter_round_trips_non_finite() {
        for x in [f64::INFINITY, f64::NEG_INFINITY, 0.25, 3.0] {
            let text = serde_json::to_string(&Wrap(x)).unwrap();
            assert_eq!(serde_json::from_str::<Wrap>(&text).unwrap().0, x);
        }
        assert_eq!(serde_json::from_str::<Wrap>("7").unwrap().0, 7.0);
        assert!(serde_json::from_str::<Wrap>("\"seven\"").is_err());
    }
}
