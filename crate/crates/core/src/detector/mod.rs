//! Single-shot multibox detector: backbone with named taps, priors,
//! matching, loss, decoding.

pub mod boxes;
pub mod loss;
pub mod matching;
pub mod model;
pub mod nms;
pub mod priors;

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

pub use boxes::{decode_box, encode_box, iou, CenterBox, CornerBox, DEFAULT_VARIANCES};
pub use loss::{multibox_loss, smooth_l1, LossOutput, DEFAULT_NEG_POS_RATIO};
pub use matching::{match_priors, GroundTruth, MatchResult, DEFAULT_MATCH_THRESHOLD};
pub use model::{
    decode_detections, detect_forward, model_cost, BackboneCache, DetectConfig, Detector, DetectorCache,
    DetectorOutput, Head, ModelConfig, ModelCost, PredTap,
};
pub use nms::{nms, score_order, Detection, DEFAULT_NMS_IOU, DEFAULT_TOP_K};
pub use priors::{generate_priors, priors_for_layers, PriorLayer, PriorSet};

/// Named backbone activations that can feed heads, fusion or the ERF probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tap {
    Conv3a,
    Conv4a,
    Conv5a,
    Fc6a,
    Extra,
}

impl Tap {
    pub const ALL: [Tap; 5] = [Tap::Conv3a, Tap::Conv4a, Tap::Conv5a, Tap::Fc6a, Tap::Extra];

    pub fn name(&self) -> &'static str {
        match self {
            Tap::Conv3a => "conv3a",
            Tap::Conv4a => "conv4a",
            Tap::Conv5a => "conv5a",
            Tap::Fc6a => "fc6a",
            Tap::Extra => "extra",
        }
    }

    /// Index of the backbone stage whose (post-ReLU) output this tap is.
    pub(crate) fn stage(&self) -> usize {
        match self {
            Tap::Conv3a => 2,
            Tap::Conv4a => 3,
            Tap::Conv5a => 4,
            Tap::Fc6a => 5,
            Tap::Extra => 6,
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Tap::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown tap `{s}`")))
    }
}
