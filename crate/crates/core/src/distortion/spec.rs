use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::DistortionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    CodecJpeg,
    CodecWebp,
    LearnedCodec,
    Resample,
    Blur,
    Noise,
    ColorTone,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::CodecJpeg,
        Family::CodecWebp,
        Family::LearnedCodec,
        Family::Resample,
        Family::Blur,
        Family::Noise,
        Family::ColorTone,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::CodecJpeg => "codec_jpeg",
            Family::CodecWebp => "codec_webp",
            Family::LearnedCodec => "learned_codec",
            Family::Resample => "resample",
            Family::Blur => "blur",
            Family::Noise => "noise",
            Family::ColorTone => "color_tone",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A scalar parameter value: numbers for strengths, short strings for modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Param {
    Number(f64),
    Text(String),
}

impl From<f64> for Param {
    fn from(v: f64) -> Self {
        Param::Number(v)
    }
}

impl From<&str> for Param {
    fn from(v: &str) -> Self {
        Param::Text(v.to_owned())
    }
}

/// A named, parameterized and seeded degradation operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub family: Family,
    #[serde(default)]
    pub params: BTreeMap<String, Param>,
    #[serde(default)]
    pub seed: u64,
}

impl DistortionSpec {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            params: BTreeMap::new(),
            seed: 0,
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Param>) -> Self {
        self.params.insert(key.to_owned(), value.into());
        self
    }

    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Validates parameters and resolves them into a typed operator.
    pub fn resolve(&self) -> Result<Operator, DistortionError> {
        let p = Params {
            family: self.family,
            map: &self.params,
        };
        let op = match self.family {
            Family::CodecJpeg => {
                p.only(&["quality"])?;
                Operator::Jpeg {
                    quality: p.integer("quality", 1, 100)? as u8,
                }
            }
            Family::CodecWebp => {
                p.only(&["quality"])?;
                Operator::Webp {
                    quality: p.integer("quality", 0, 100)? as u8,
                }
            }
            Family::LearnedCodec => {
                p.only(&["codec", "step", "levels"])?;
                let step = p.number("step")?;
                p.check("step", step > 0.0 && step <= 1024.0, "must lie in (0, 1024]")?;
                Operator::Learned {
                    codec: p.text_or("codec", super::codec::HAAR_STUB_ID)?,
                    step,
                    levels: p.integer_or("levels", 1, 6, 3)? as u32,
                }
            }
            Family::Resample => {
                p.only(&["scale", "filter"])?;
                let scale = p.number("scale")?;
                p.check("scale", scale > 0.0 && scale <= 1.0, "must lie in (0, 1]")?;
                let filter = match p.text_or("filter", "bilinear")?.as_str() {
                    "nearest" => ResampleFilter::Nearest,
                    "bilinear" => ResampleFilter::Bilinear,
                    "bicubic" => ResampleFilter::Bicubic,
                    "lanczos" => ResampleFilter::Lanczos,
                    other => return Err(p.invalid("filter", format!("unknown filter {other:?}"))),
                };
                Operator::Resample { scale, filter }
            }
            Family::Blur => {
                p.only(&["kind", "sigma", "radius"])?;
                match p.text_or("kind", "gaussian")?.as_str() {
                    "gaussian" => {
                        let sigma = p.number("sigma")?;
                        p.check("sigma", sigma > 0.0 && sigma <= 64.0, "must lie in (0, 64]")?;
                        Operator::GaussianBlur { sigma }
                    }
                    "box" => Operator::BoxBlur {
                        radius: p.integer("radius", 1, 64)? as u32,
                    },
                    other => return Err(p.invalid("kind", format!("unknown blur {other:?}"))),
                }
            }
            Family::Noise => {
                p.only(&["kind", "sigma", "amount"])?;
                match p.text_or("kind", "gaussian")?.as_str() {
                    "gaussian" => {
                        let sigma = p.number("sigma")?;
                        p.check("sigma", (0.0..=255.0).contains(&sigma), "must lie in [0, 255]")?;
                        Operator::GaussianNoise { sigma }
                    }
                    "salt_pepper" => {
                        let amount = p.number("amount")?;
                        p.check("amount", (0.0..=1.0).contains(&amount), "must lie in [0, 1]")?;
                        Operator::SaltPepper { amount }
                    }
                    other => return Err(p.invalid("kind", format!("unknown noise {other:?}"))),
                }
            }
            Family::ColorTone => {
                p.only(&["op", "amount"])?;
                let amount = p.number("amount")?;
                let op = match p.text("op")?.as_str() {
                    "brightness" => {
                        p.check("amount", amount.abs() <= 255.0, "must lie in [-255, 255]")?;
                        ToneOp::Brightness
                    }
                    "contrast" => {
                        p.check("amount", amount > 0.0 && amount <= 16.0, "must lie in (0, 16]")?;
                        ToneOp::Contrast
                    }
                    "gamma" => {
                        p.check("amount", amount > 0.0 && amount <= 16.0, "must lie in (0, 16]")?;
                        ToneOp::Gamma
                    }
                    "saturation" => {
                        p.check("amount", (0.0..=16.0).contains(&amount), "must lie in [0, 16]")?;
                        ToneOp::Saturation
                    }
                    other => return Err(p.invalid("op", format!("unknown tone op {other:?}"))),
                };
                Operator::Tone { op, amount }
            }
        };
        Ok(op)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleFilter {
    Nearest,
    Bilinear,
    Bicubic,
    Lanczos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToneOp {
    Brightness,
    Contrast,
    Gamma,
    Saturation,
}

/// A validated distortion operator.
#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    Jpeg { quality: u8 },
    Webp { quality: u8 },
    Learned { codec: String, step: f64, levels: u32 },
    Resample { scale: f64, filter: ResampleFilter },
    GaussianBlur { sigma: f64 },
    BoxBlur { radius: u32 },
    GaussianNoise { sigma: f64 },
    SaltPepper { amount: f64 },
    Tone { op: ToneOp, amount: f64 },
}

struct Params<'a> {
    family: Family,
    map: &'a BTreeMap<String, Param>,
}

impl Params<'_> {
    fn invalid(&self, key: &str, reason: impl Into<String>) -> DistortionError {
        DistortionError::InvalidParams {
            family: self.family,
            param: key.to_owned(),
            reason: reason.into(),
        }
    }

    fn only(&self, allowed: &[&str]) -> Result<(), DistortionError> {
        match self.map.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(self.invalid(k, "unknown parameter")),
            None => Ok(()),
        }
    }

    fn check(&self, key: &str, ok: bool, reason: &str) -> Result<(), DistortionError> {
        if ok {
            Ok(())
        } else {
            Err(self.invalid(key, reason))
        }
    }

    fn number(&self, key: &str) -> Result<f64, DistortionError> {
        match self.map.get(key) {
            Some(Param::Number(v)) if v.is_finite() => Ok(*v),
            Some(Param::Number(_)) => Err(self.invalid(key, "must be finite")),
            Some(Param::Text(_)) => Err(self.invalid(key, "expected a number")),
            None => Err(self.invalid(key, "missing")),
        }
    }

    fn integer(&self, key: &str, lo: i64, hi: i64) -> Result<i64, DistortionError> {
        let v = self.number(key)?;
        if v.fract() != 0.0 || v < lo as f64 || v > hi as f64 {
            return Err(self.invalid(key, format!("must be an integer in [{lo}, {hi}]")));
        }
        Ok(v as i64)
    }

    fn integer_or(&self, key: &str, lo: i64, hi: i64, default: i64) -> Result<i64, DistortionError> {
        if self.map.contains_key(key) {
            self.integer(key, lo, hi)
        } else {
            Ok(default)
        }
    }

    fn text(&self, key: &str) -> Result<String, DistortionError> {
        match self.map.get(key) {
            Some(Param::Text(s)) => Ok(s.clone()),
            Some(Param::Number(_)) => Err(self.invalid(key, "expected a string")),
            None => Err(self.invalid(key, "missing")),
        }
    }

    fn text_or(&self, key: &str, default: &str) -> Result<String, DistortionError> {
        if self.map.contains_key(key) {
            self.text(key)
        } else {
            Ok(default.to_owned())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jpeg_quality_bounds() {
        for q in [0.0, 101.0, 50.5] {
            let s = DistortionSpec::new(Family::CodecJpeg).with("quality", q);
            assert!(matches!(s.resolve(), Err(DistortionError::InvalidParams { .. })), "{q}");
        }
        let s = DistortionSpec::new(Family::CodecJpeg).with("quality", 100.0);
        assert_eq!(s.resolve().unwrap(), Operator::Jpeg { quality: 100 });
    }

    #[test]
    fn blur_sigma_must_be_positive() {
        let s = DistortionSpec::new(Family::Blur).with("sigma", 0.0);
        assert!(s.resolve().is_err());
    }

    #[test]
    fn resample_scale_range() {
        for scale in [0.0, -0.5, 1.5] {
            let s = DistortionSpec::new(Family::Resample).with("scale", scale);
            assert!(s.resolve().is_err());
        }
        let s = DistortionSpec::new(Family::Resample).with("scale", 1.0);
        assert!(s.resolve().is_ok());
    }

    #[test]
    fn unknown_params_rejected() {
        let s = DistortionSpec::new(Family::Noise)
            .with("sigma", 2.0)
            .with("colour", 1.0);
        let err = s.resolve().unwrap_err().to_string();
        assert!(err.contains("colour"), "{err}");
    }

    #[test]
    fn spec_toml_shape() {
        let s: DistortionSpec = toml::from_str(
            r#"
            family = "color_tone"
            seed = 9
            params = { op = "gamma", amount = 1.25 }
            "#,
        )
        .unwrap();
        assert_eq!(s.seed, 9);
        assert_eq!(
            s.resolve().unwrap(),
            Operator::Tone {
                op: ToneOp::Gamma,
                amount: 1.25
            }
        );
    }
}
