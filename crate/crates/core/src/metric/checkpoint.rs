//! JSON checkpoint for the metric head. Floats are written in shortest
//! round-trip form, so save followed by load is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Fusion, MetricError, MetricParams};

pub const CHECKPOINT_FORMAT: &str = "machsim-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub backbone: String,
    pub groups: usize,
    pub partition: Vec<Vec<usize>>,
    pub group_logits: Vec<f64>,
    pub gate_logit: f64,
    pub fusion: Fusion,
    pub learn_layer_weights: bool,
}

#[derive(Deserialize)]
struct Tag {
    format: String,
    version: u32,
}

impl Checkpoint {
    pub fn new(backbone: impl Into<String>, params: &MetricParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            backbone: backbone.into(),
            groups: params.partition.len(),
            partition: params.partition.clone(),
            group_logits: params.group_logits.clone(),
            gate_logit: params.gate_logit,
            fusion: params.fusion,
            learn_layer_weights: params.learn_layer_weights,
        }
    }

    pub fn params(&self) -> MetricParams {
        MetricParams {
            partition: self.partition.clone(),
            group_logits: self.group_logits.clone(),
            gate_logit: self.gate_logit,
            fusion: self.fusion,
            learn_layer_weights: self.learn_layer_weights,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self, MetricError> {
        let corrupt = |e: serde_json::Error| MetricError::Corrupt(e.to_string());
        let tag: Tag = serde_json::from_str(text).map_err(corrupt)?;
        if tag.format != CHECKPOINT_FORMAT {
            return Err(MetricError::Corrupt(format!("unknown format `{}`", tag.format)));
        }
        if tag.version != CHECKPOINT_VERSION {
            return Err(MetricError::VersionMismatch {
                found: tag.version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let ck: Checkpoint = serde_json::from_str(text).map_err(corrupt)?;
        if ck.groups != ck.partition.len() {
            return Err(MetricError::Corrupt(format!(
                "groups = {} but partition has {}",
                ck.groups,
                ck.partition.len()
            )));
        }
        ck.params().validate().map_err(|e| MetricError::Corrupt(e.to_string()))?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MetricError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| MetricError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| MetricError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut p = MetricParams::new(12);
        p.group_logits = vec![0.1, -1.0 / 3.0, std::f64::consts::PI];
        p.gate_logit = 1e-300;
        Checkpoint::new("synthetic", &p)
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.params().to_vec().iter().zip(ck.params().to_vec()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_is_corrupt() {
        let text = sample().to_json();
        let cut = &text[..text.len() / 2];
        assert!(matches!(Checkpoint::parse(cut), Err(MetricError::Corrupt(_))));
        assert!(matches!(Checkpoint::parse(""), Err(MetricError::Corrupt(_))));
    }

    #[test]
    fn future_version_is_rejected() {
        let text = sample().to_json().replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(
            Checkpoint::parse(&text),
            Err(MetricError::VersionMismatch { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn inconsistent_group_count_is_corrupt() {
        let text = sample().to_json().replace("\"groups\": 3", "\"groups\": 4");
        assert!(matches!(Checkpoint::parse(&text), Err(MetricError::Corrupt(_))));
    }

    proptest! {
        #[test]
        fn any_finite_params_round_trip_bitwise(
            w in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 3),
            g in prop::num::f64::NORMAL,
        ) {
            let mut p = MetricParams::new(12);
            p.group_logits = w;
            p.gate_logit = g;
            let ck = Checkpoint::new("synthetic", &p);
            let back = Checkpoint::parse(&ck.to_json()).unwrap().params();
            for (a, b) in back.to_vec().iter().zip(p.to_vec()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
