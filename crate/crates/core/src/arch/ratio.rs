use std::fmt;
use std::str::FromStr;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Non-negative rational number kept in lowest terms, e.g. the mixer ratio
/// `1/4` or the FFN expansion `2`. Serialized as `"1/4"` / `"2"`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ratio {
    num: u32,
    den: u32,
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 { a } else { gcd(b, a % b) }
}

impl Ratio {
    pub const ZERO: Ratio = Ratio { num: 0, den: 1 };

    pub fn new(num: u32, den: u32) -> Option<Self> {
        if den == 0 {
            return None;
        }
        let g = gcd(num, den).max(1);
        Some(Ratio { num: num / g, den: den / g })
    }

    pub const fn integer(v: u32) -> Self {
        Ratio { num: v, den: 1 }
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    pub fn is_zero(self) -> bool {
        self.num == 0
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `round(self · n)`, halves rounded up.
    pub fn scale_round(self, n: usize) -> usize {
        let num = self.num as usize * n;
        let den = self.den as usize;
        (2 * num + den) / (2 * den)
    }

    /// `self · n` when it is an integer.
    pub fn scale_exact(self, n: usize) -> Option<usize> {
        let num = self.num as usize * n;
        num.is_multiple_of(self.den as usize).then(|| num / self.den as usize)
    }

    /// Closest ratio with denominator at most 64 to a float, if within 1e-9.
    pub fn from_f64(v: f64) -> Option<Self> {
        if !(v.is_finite() && v >= 0.0) {
            return None;
        }
        (1..=64u32).find_map(|den| {
            let num = (v * den as f64).round();
            ((num / den as f64 - v).abs() < 1e-9 && num <= u32::MAX as f64).then(|| Ratio::new(num as u32, den).unwrap())
        })
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl fmt::Debug for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Ratio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let parse = |t: &str| t.trim().parse::<u32>().map_err(|e| format!("bad ratio {s:?}: {e}"));
        match s.split_once('/') {
            Some((a, b)) => Ratio::new(parse(a)?, parse(b)?).ok_or_else(|| format!("zero denominator in {s:?}")),
            None => match s.parse::<u32>() {
                Ok(v) => Ok(Ratio::integer(v)),
                Err(_) => s
                    .parse::<f64>()
                    .ok()
                    .and_then(Ratio::from_f64)
                    .ok_or_else(|| format!("bad ratio {s:?}")),
            },
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Ratio;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a ratio such as \"1/4\", 0 or 0.25")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Ratio, E> {
                v.parse().map_err(E::custom)
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Ratio, E> {
                u32::try_from(v).map(Ratio::integer).map_err(E::custom)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Ratio, E> {
                u32::try_from(v).map(Ratio::integer).map_err(E::custom)
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Ratio, E> {
                Ratio::from_f64(v).ok_or_else(|| E::custom(format!("{v} is not a small rational")))
            }
        }
        d.deserialize_any(V)
    }
}
