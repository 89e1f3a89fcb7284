use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Softmax dimension used to turn the coarse mask into spatial-center weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpatialSoftmaxAxis {
    /// Per class, over all `H·W` positions.
    #[default]
    Spatial,
    /// Per pixel, over classes (same weighting as the semantic center).
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PeKind {
    /// Depthwise 3×3 convolution of the features plus an identity residual.
    #[default]
    Conditional,
    Sinusoidal,
    Learnable,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    #[default]
    GroundTruth,
    /// Guidance from the student's own coarse mask instead of the labels.
    #[serde(rename = "self")]
    SelfGuided,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $text),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}; expected one of: ", $($text, " "),+),
                        other
                    ))),
                }
            }
        }
    };
}

text_enum!(SpatialSoftmaxAxis { Spatial => "spatial", Channel => "channel" });
text_enum!(PeKind { Conditional => "conditional", Sinusoidal => "sinusoidal", Learnable => "learnable", None => "none" });
text_enum!(TeacherMode { GroundTruth => "ground_truth", SelfGuided => "self" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub feat_dim: usize,
    pub lambda_r: f64,
    pub lambda_s: f64,
    pub lambda_p: f64,
    pub boundary_edge_size: usize,
    pub spatial_softmax_axis: SpatialSoftmaxAxis,
    pub pe_kind: PeKind,
    pub center_normalize: bool,
    pub teacher_mode: TeacherMode,
    pub ignore_index: u32,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            feat_dim: 16,
            lambda_r: 1.0,
            lambda_s: 1.0,
            lambda_p: 1.0,
            boundary_edge_size: 4,
            spatial_softmax_axis: SpatialSoftmaxAxis::Spatial,
            pe_kind: PeKind::Conditional,
            center_normalize: true,
            teacher_mode: TeacherMode::GroundTruth,
            ignore_index: 255,
        }
    }
}

impl HeadConfig {
    pub fn new(num_classes: usize, feat_dim: usize) -> Self {
        Self {
            num_classes,
            feat_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.feat_dim == 0 {
            return Err(Error::Config("feat_dim must be >= 1".into()));
        }
        if self.boundary_edge_size == 0 {
            return Err(Error::Config("boundary_edge_size must be >= 1".into()));
        }
        for (name, v) in [
            ("lambda_r", self.lambda_r),
            ("lambda_s", self.lambda_s),
            ("lambda_p", self.lambda_p),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if (self.ignore_index as usize) < self.num_classes {
            return Err(Error::Config(format!(
                "ignore_index {} collides with a class index",
                self.ignore_index
            )));
        }
        Ok(())
    }

    /// Flat `key=value` view, used for checkpoint metadata and manifests.
    pub fn to_entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_classes", self.num_classes.to_string()),
            ("feat_dim", self.feat_dim.to_string()),
            ("lambda_r", self.lambda_r.to_string()),
            ("lambda_s", self.lambda_s.to_string()),
            ("lambda_p", self.lambda_p.to_string()),
            ("boundary_edge_size", self.boundary_edge_size.to_string()),
            ("spatial_softmax_axis", self.spatial_softmax_axis.to_string()),
            ("pe_kind", self.pe_kind.to_string()),
            ("center_normalize", self.center_normalize.to_string()),
            ("teacher_mode", self.teacher_mode.to_string()),
            ("ignore_index", self.ignore_index.to_string()),
        ]
    }

    pub fn from_entries<'a>(lookup: impl Fn(&str) -> Option<&'a str>) -> Result<Self> {
        fn field<'a, V: FromStr>(lookup: &impl Fn(&str) -> Option<&'a str>, key: &str) -> Result<V> {
            let raw = lookup(key).ok_or_else(|| Error::Config(format!("missing config entry {key}")))?;
            raw.parse()
                .map_err(|_| Error::Config(format!("cannot parse {key}={raw}")))
        }
        let cfg = Self {
            num_classes: field(&lookup, "num_classes")?,
            feat_dim: field(&lookup, "feat_dim")?,
            lambda_r: field(&lookup, "lambda_r")?,
            lambda_s: field(&lookup, "lambda_s")?,
            lambda_p: field(&lookup, "lambda_p")?,
            boundary_edge_size: field(&lookup, "boundary_edge_size")?,
            spatial_softmax_axis: field(&lookup, "spatial_softmax_axis")?,
            pe_kind: field(&lookup, "pe_kind")?,
            center_normalize: field(&lookup, "center_normalize")?,
            teacher_mode: field(&lookup, "teacher_mode")?,
            ignore_index: field(&lookup, "ignore_index")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
