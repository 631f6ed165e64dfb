use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DfnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Enhancement,
    SuperResolution,
}

impl Variant {
    /// Output side length divided by input side length.
    pub fn scale(self) -> usize {
        match self {
            Variant::Enhancement => 1,
            Variant::SuperResolution => 2,
        }
    }
}

/// Declarative architecture. Widths are per stage; the encoder and decoder
/// always have three stages.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Width of each of the two head branches (3×3 and 5×5).
    pub head_branch_width: usize,
    /// `[c1, c2, c3]`: head output and the first two encoder stage outputs.
    pub encoder_channels: Vec<usize>,
    /// `c4`: last encoder stage output, bottleneck input and output.
    pub bottleneck_channels: usize,
    pub bottleneck_reduced: usize,
    pub bottleneck_growth: usize,
    pub bottleneck_layers: usize,
    pub decoder_channels: Vec<usize>,
    pub cbam_reduction: usize,
    /// Width of the 2× upscaling block; ignored for enhancement.
    pub sr_mid_width: usize,
    /// Bias terms in the CBAM MLP and spatial conv.
    pub cbam_bias: bool,
}

impl ModelConfig {
    pub fn enhancement() -> Self {
        ModelConfig {
            variant: Variant::Enhancement,
            head_branch_width: 16,
            encoder_channels: vec![64, 128, 256],
            bottleneck_channels: 256,
            bottleneck_reduced: 128,
            bottleneck_growth: 64,
            bottleneck_layers: 3,
            decoder_channels: vec![128, 64, 32],
            cbam_reduction: 8,
            sr_mid_width: 16,
            cbam_bias: true,
        }
    }

    /// Every enhancement width quartered, plus the upscaling block.
    pub fn super_resolution() -> Self {
        ModelConfig {
            variant: Variant::SuperResolution,
            head_branch_width: 4,
            encoder_channels: vec![16, 32, 48],
            bottleneck_channels: 48,
            bottleneck_reduced: 32,
            bottleneck_growth: 16,
            bottleneck_layers: 3,
            decoder_channels: vec![32, 16, 8],
            cbam_reduction: 8,
            sr_mid_width: 16,
            cbam_bias: true,
        }
    }

    pub fn preset(variant: Variant) -> Self {
        match variant {
            Variant::Enhancement => Self::enhancement(),
            Variant::SuperResolution => Self::super_resolution(),
        }
    }

    /// Checks every width and the channel arithmetic of the graph.
    pub fn validate(&self) -> Result<()> {
        let err = |field: &'static str, reason: String| Err(DfnError::Config { field, reason });
        if self.encoder_channels.len() != 3 {
            return err("encoder_channels", format!("expected 3 stages, got {}", self.encoder_channels.len()));
        }
        if self.decoder_channels.len() != 3 {
            return err("decoder_channels", format!("expected 3 stages, got {}", self.decoder_channels.len()));
        }
        let mut widths = vec![
            ("head_branch_width", self.head_branch_width),
            ("bottleneck_channels", self.bottleneck_channels),
            ("bottleneck_reduced", self.bottleneck_reduced),
            ("bottleneck_growth", self.bottleneck_growth),
            ("bottleneck_layers", self.bottleneck_layers),
            ("cbam_reduction", self.cbam_reduction),
        ];
        widths.extend(self.encoder_channels.iter().map(|&c| ("encoder_channels", c)));
        widths.extend(self.decoder_channels.iter().map(|&c| ("decoder_channels", c)));
        if self.variant == Variant::SuperResolution {
            widths.push(("sr_mid_width", self.sr_mid_width));
        }
        for (field, v) in widths {
            if v == 0 {
                return err(field, "must be positive".into());
            }
        }
        let r = self.cbam_reduction;
        let mut attended = self.encoder_channels.iter().map(|&c| ("encoder_channels", c)).collect::<Vec<_>>();
        attended.push(("bottleneck_channels", self.bottleneck_channels));
        attended.extend(self.decoder_channels.iter().map(|&c| ("decoder_channels", c)));
        for (field, c) in attended {
            if c % r != 0 {
                return err(field, format!("{c} channels enter a CBAM but are not divisible by cbam_reduction {r}"));
            }
        }
        // Ghost convs produce the encoder stage outputs c2, c3, c4.
        let ghost_outputs = [
            ("encoder_channels", self.encoder_channels[1]),
            ("encoder_channels", self.encoder_channels[2]),
            ("bottleneck_channels", self.bottleneck_channels),
        ];
        for (field, c) in ghost_outputs {
            if c % 2 != 0 {
                return err(field, format!("ghost conv output width {c} must be even"));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding, lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
