use serde::{Deserialize, Serialize};

use crate::autodiff::PaddingMode;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    PtnS,
    PtnB,
    CcnnS,
    CcnnB,
    PcnnS,
    PcnnB,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::PtnS,
        Variant::PtnB,
        Variant::CcnnS,
        Variant::CcnnB,
        Variant::PcnnS,
        Variant::PcnnB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PtnS => "ptn-s",
            Variant::PtnB => "ptn-b",
            Variant::CcnnS => "ccnn-s",
            Variant::CcnnB => "ccnn-b",
            Variant::PcnnS => "pcnn-s",
            Variant::PcnnB => "pcnn-b",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn has_origin_predictor(self) -> bool {
        matches!(self, Variant::PtnS | Variant::PtnB)
    }

    /// Whether the classifier sees a polar image.
    pub fn is_polar(self) -> bool {
        !matches!(self, Variant::CcnnS | Variant::CcnnB)
    }

    pub fn is_big(self) -> bool {
        matches!(self, Variant::PtnB | Variant::CcnnB | Variant::PcnnB)
    }
}

/// 3x3 convolution, batch normalization and ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub filters: usize,
    pub stride: usize,
    pub padding: PaddingMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Rotate training inputs by a uniform angle in `[0, 2 pi)`.
    pub rotation: bool,
    /// Half-width of the uniform origin perturbation applied in training, as
    /// a fraction of the input width. Zero disables it.
    pub origin_shift: f64,
    /// Evenly spaced input rotations whose logits are summed at evaluation.
    pub test_time_rotations: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation: false,
            origin_shift: 0.05,
            test_time_rotations: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub num_classes: usize,
    /// Side of the square input images.
    pub input_size: usize,
    /// Side of the square polar image; defaults to `input_size`.
    pub polar_size: Option<usize>,
    /// Wrap-around vertical padding in classifier blocks that see polar maps.
    pub wrap_padding: bool,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub augmentation: AugmentationConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            variant: Variant::PtnS,
            num_classes: 10,
            input_size: 28,
            polar_size: None,
            wrap_padding: true,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
            augmentation: AugmentationConfig::default(),
        }
    }
}

/// Extra stride-2 blocks of 16 filters prepended for inputs larger than
/// MNIST: one up to 64 pixels, two beyond.
fn extra_blocks(size: usize) -> usize {
    match size {
        0..=32 => 0,
        33..=64 => 1,
        _ => 2,
    }
}

impl NetworkConfig {
    pub fn new(variant: Variant, input_size: usize) -> Self {
        Self {
            variant,
            input_size,
            ..Self::default()
        }
    }

    pub fn polar_side(&self) -> usize {
        self.polar_size.unwrap_or(self.input_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.input_size < 4 || self.polar_side() < 4 {
            return Err(Error::Config("input and polar sizes must be at least 4".into()));
        }
        if !(0.0..0.5).contains(&self.augmentation.origin_shift) {
            return Err(Error::Config("augmentation.origin_shift must be in [0, 0.5)".into()));
        }
        if self.augmentation.test_time_rotations < 1 {
            return Err(Error::Config("augmentation.test_time_rotations must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_epsilon <= 0.0 {
            return Err(Error::Config("invalid batch norm momentum/epsilon".into()));
        }
        Ok(())
    }

    fn classifier_padding(&self) -> PaddingMode {
        if self.variant.is_polar() && self.wrap_padding {
            PaddingMode::WRAP
        } else {
            PaddingMode::ZERO
        }
    }

    /// Side of the map the classifier receives.
    pub fn classifier_input_side(&self) -> usize {
        if self.variant.is_polar() {
            self.polar_side()
        } else {
            self.input_size
        }
    }

    pub fn classifier_blocks(&self) -> Vec<BlockSpec> {
        let padding = self.classifier_padding();
        let block = |filters, stride| BlockSpec {
            filters,
            stride,
            padding,
        };
        let mut blocks: Vec<BlockSpec> = (0..extra_blocks(self.classifier_input_side()))
            .map(|_| block(16, 2))
            .collect();
        if self.variant.is_big() {
            let filters = [16, 16, 32, 32, 32, 64, 64, 64];
            let mut prev = blocks.last().map_or(filters[0], |b| b.filters);
            for f in filters {
                blocks.push(block(f, if f > prev { 2 } else { 1 }));
                prev = f;
            }
        } else {
            // Seven blocks of 20 with a single subsampling after the second.
            for i in 0..7 {
                blocks.push(block(20, if i == 2 { 2 } else { 1 }));
            }
        }
        blocks
    }

    pub fn origin_blocks(&self) -> Vec<BlockSpec> {
        if !self.variant.has_origin_predictor() {
            return Vec::new();
        }
        let strided = extra_blocks(self.input_size).max(1);
        (0..3)
            .map(|i| BlockSpec {
                filters: 20,
                stride: if i < strided { 2 } else { 1 },
                padding: PaddingMode::ZERO,
            })
            .collect()
    }

    /// Total subsampling of the origin predictor.
    pub fn origin_stride_product(&self) -> usize {
        self.origin_blocks().iter().map(|b| b.stride).product()
    }

    /// Total vertical subsampling of the classifier.
    pub fn classifier_stride_product(&self) -> usize {
        self.classifier_blocks().iter().map(|b| b.stride).product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_classifier_layout() {
        let cfg = NetworkConfig::new(Variant::PtnS, 28);
        let blocks = cfg.classifier_blocks();
        assert_eq!(blocks.len(), 7);
        assert!(blocks.iter().all(|b| b.filters == 20 && b.padding == PaddingMode::WRAP));
        assert_eq!(blocks.iter().filter(|b| b.stride == 2).count(), 1);
        assert_eq!(cfg.origin_stride_product(), 2);
    }

    #[test]
    fn big_classifier_strides_where_filters_grow() {
        let cfg = NetworkConfig::new(Variant::CcnnB, 28);
        let b = cfg.classifier_blocks();
        let filters: Vec<_> = b.iter().map(|b| b.filters).collect();
        assert_eq!(filters, [16, 16, 32, 32, 32, 64, 64, 64]);
        let strides: Vec<_> = b.iter().map(|b| b.stride).collect();
        assert_eq!(strides, [1, 1, 2, 1, 1, 2, 1, 1]);
        assert!(b.iter().all(|b| b.padding == PaddingMode::ZERO));
    }

    #[test]
    fn large_inputs_get_extra_blocks() {
        let cfg = NetworkConfig::new(Variant::PtnB, 96);
        let b = cfg.classifier_blocks();
        assert_eq!(b.len(), 10);
        assert_eq!((b[0].filters, b[0].stride), (16, 2));
        assert_eq!((b[1].filters, b[1].stride), (16, 2));
        assert_eq!(b[2].stride, 1);
        assert_eq!(cfg.origin_stride_product(), 4);
        assert_eq!(NetworkConfig::new(Variant::PtnB, 42).classifier_blocks().len(), 9);
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(matches!(Variant::parse("stn-s"), Err(Error::Config(_))));
    }

    #[test]
    fn toml_schema() {
        let cfg: NetworkConfig =
            toml::from_str("variant = \"pcnn-b\"\ninput_size = 42\n[augmentation]\nrotation = true\n").unwrap();
        assert_eq!(cfg.variant, Variant::PcnnB);
        assert!(cfg.augmentation.rotation);
        assert_eq!(cfg.augmentation.origin_shift, 0.05);
        assert!(toml::from_str::<NetworkConfig>("variant = \"stn-b\"").is_err());
        assert!(toml::from_str::<NetworkConfig>("bogus = 1").is_err());
    }
}
