use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// How a task's native annotation is squeezed into a 3-channel `[-1, 1]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Palette,
    UnitVector,
    AffineInvariantPercentile,
    AffineInvariantMinmax,
    Tonemap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricDirection {
    HigherBetter,
    LowerBetter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Semantic,
    Normal,
    Depth,
    OpticalFlow,
    SceneFlow,
    Shading,
    Albedo,
}

impl TaskId {
    pub const ALL: [TaskId; 7] = [
        TaskId::Semantic,
        TaskId::Normal,
        TaskId::Depth,
        TaskId::OpticalFlow,
        TaskId::SceneFlow,
        TaskId::Shading,
        TaskId::Albedo,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Semantic => "semantic",
            TaskId::Normal => "normal",
            TaskId::Depth => "depth",
            TaskId::OpticalFlow => "optical_flow",
            TaskId::SceneFlow => "scene_flow",
            TaskId::Shading => "shading",
            TaskId::Albedo => "albedo",
        }
    }

    pub fn frames_required(self) -> usize {
        match self {
            TaskId::OpticalFlow | TaskId::SceneFlow => 2,
            _ => 1,
        }
    }

    pub fn codec_kind(self) -> CodecKind {
        match self {
            TaskId::Semantic => CodecKind::Palette,
            TaskId::Normal => CodecKind::UnitVector,
            TaskId::Depth => CodecKind::AffineInvariantPercentile,
            TaskId::OpticalFlow | TaskId::SceneFlow => CodecKind::AffineInvariantMinmax,
            TaskId::Shading | TaskId::Albedo => CodecKind::Tonemap,
        }
    }

    pub fn metric_direction(self) -> MetricDirection {
        match self {
            TaskId::Semantic => MetricDirection::HigherBetter,
            _ => MetricDirection::LowerBetter,
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            TaskId::Semantic => "miou",
            TaskId::Normal => "mae_deg",
            TaskId::Depth => "abs_rel",
            TaskId::OpticalFlow => "epe_2d",
            TaskId::SceneFlow => "epe_3d",
            TaskId::Shading | TaskId::Albedo => "rmse",
        }
    }

    /// Channel count of the native (real-valued) annotation; semantic labels are 1.
    pub fn native_channels(self) -> usize {
        match self {
            TaskId::Semantic | TaskId::Depth | TaskId::Shading => 1,
            TaskId::OpticalFlow => 2,
            TaskId::Normal | TaskId::SceneFlow | TaskId::Albedo => 3,
        }
    }

    /// All tasks except `self`, in canonical order.
    pub fn auxiliaries(self) -> Vec<TaskId> {
        TaskId::ALL.into_iter().filter(|&t| t != self).collect()
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}
