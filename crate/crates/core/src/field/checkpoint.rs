//! JSON checkpoints holding the field configuration, the parameter layout,
//! and every parameter value. Floats round-trip bit-exactly.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{FieldArch, FieldConfig, FieldModel, ParamVector, Segment};
use crate::error::{MapError, Result};

pub const CHECKPOINT_FORMAT: &str = "taco-field-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub field: FieldConfig,
    pub segments: Vec<Segment>,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &FieldModel, step: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            step,
            field: model.arch().config.clone(),
            segments: model.layout().segments().to_vec(),
            values: model.params().values().to_vec(),
        }
    }

    /// Rebuilds the model, checking the stored layout against the one
    /// implied by the stored configuration.
    pub fn into_model(self) -> Result<FieldModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(MapError::Config(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let arch = Arc::new(FieldArch::new(self.field)?);
        if arch.layout.segments() != self.segments.as_slice() {
            return Err(MapError::Dimension(
                "checkpoint layout disagrees with its field configuration".into(),
            ));
        }
        let params = ParamVector::new(arch.layout.clone(), self.values)?;
        FieldModel::from_parts(arch, params)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| MapError::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| MapError::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| MapError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MapError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| MapError::Format {
            path: path.into(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, SeedStream};
    use proptest::prelude::*;

    fn small_config() -> FieldConfig {
        FieldConfig {
            levels: 2,
            base_resolution: 4,
            encoding_bins: 4,
            decoder: crate::field::DecoderSpec {
                hidden_width: 8,
                latent_dim: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), scale in -1e6f64..1e6) {
            let mut rng = SeedStream::new(seed).rng(0, Purpose::Init, 0);
            let mut model = FieldModel::new(small_config(), &mut rng).unwrap();
            model.params_mut().values_mut()[0] = scale / 3.0;
            model.params_mut().values_mut()[1] = f64::MIN_POSITIVE;
            let ck = Checkpoint::from_model(&model, 7);
            let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap().into_model().unwrap();
            let a: Vec<u64> = model.params().values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.params().values().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn mismatched_layout_is_rejected() {
        let model = FieldModel::zeros(small_config()).unwrap();
        let mut ck = Checkpoint::from_model(&model, 0);
        ck.segments.pop();
        assert!(ck.into_model().is_err());
    }
}
