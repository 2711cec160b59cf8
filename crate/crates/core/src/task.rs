//! The sixteen task codes, their dimensions and answer formats.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    GD,
    RD,
    BG,
    CG,
    MCR,
    OC,
    FGR,
    RS,
    CS,
    GC,
    RC,
    CC,
    CRC,
    DrR,
    DsR,
    PDR,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dimension {
    Grounding,
    #[serde(rename = "Fine-grained Understanding")]
    FineGrained,
    Counting,
    #[serde(rename = "Spatial Reasoning")]
    Spatial,
}

/// Answer representation a task demands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerFormat {
    /// Set of boxes scored by soft F1.
    Boxes,
    /// Single box scored by the best predicted box.
    Box,
    Mask,
    Count,
    Option,
}

impl Task {
    pub const ALL: [Task; 16] = [
        Task::GD,
        Task::RD,
        Task::BG,
        Task::CG,
        Task::MCR,
        Task::OC,
        Task::FGR,
        Task::RS,
        Task::CS,
        Task::GC,
        Task::RC,
        Task::CC,
        Task::CRC,
        Task::DrR,
        Task::DsR,
        Task::PDR,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Task::GD => "GD",
            Task::RD => "RD",
            Task::BG => "BG",
            Task::CG => "CG",
            Task::MCR => "MCR",
            Task::OC => "OC",
            Task::FGR => "FGR",
            Task::RS => "RS",
            Task::CS => "CS",
            Task::GC => "GC",
            Task::RC => "RC",
            Task::CC => "CC",
            Task::CRC => "CRC",
            Task::DrR => "DrR",
            Task::DsR => "DsR",
            Task::PDR => "PDR",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::GD => "Global Detection",
            Task::RD => "Regional Detection",
            Task::BG => "Basic Grounding",
            Task::CG => "Complex Grounding",
            Task::MCR => "Multi-Condition Retrieval",
            Task::OC => "Object Classification",
            Task::FGR => "Fine-Grained Recognition",
            Task::RS => "Referring Segmentation",
            Task::CS => "Component Segmentation",
            Task::GC => "Global Counting",
            Task::RC => "Regional Counting",
            Task::CC => "Conditional Counting",
            Task::CRC => "Cross-Region Compare",
            Task::DrR => "Directional Relationship",
            Task::DsR => "Distance Relationship",
            Task::PDR => "Pattern Distribution Recognition",
        }
    }

    pub fn dimension(self) -> Dimension {
        match self {
            Task::GD | Task::RD | Task::BG | Task::CG | Task::MCR => Dimension::Grounding,
            Task::OC | Task::FGR | Task::RS | Task::CS => Dimension::FineGrained,
            Task::GC | Task::RC | Task::CC | Task::CRC => Dimension::Counting,
            Task::DrR | Task::DsR | Task::PDR => Dimension::Spatial,
        }
    }

    pub fn answer_format(self) -> AnswerFormat {
        match self {
            Task::GD | Task::RD | Task::MCR => AnswerFormat::Boxes,
            Task::BG | Task::CG => AnswerFormat::Box,
            Task::RS | Task::CS => AnswerFormat::Mask,
            Task::GC | Task::RC | Task::CC | Task::CRC => AnswerFormat::Count,
            Task::OC | Task::FGR | Task::DrR | Task::DsR | Task::PDR => AnswerFormat::Option,
        }
    }

    /// Tasks whose query is bound to an explicit region.
    pub fn requires_region(self) -> bool {
        matches!(self, Task::RD | Task::RC | Task::CRC)
    }

    /// Tasks that compare two explicit regions.
    pub fn requires_second_region(self) -> bool {
        self == Task::CRC
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let s = s.trim();
        Task::ALL
            .into_iter()
            .find(|t| t.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown task code {s:?}")))
    }
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Grounding,
        Dimension::FineGrained,
        Dimension::Counting,
        Dimension::Spatial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Grounding => "Grounding",
            Dimension::FineGrained => "Fine-grained Understanding",
            Dimension::Counting => "Counting",
            Dimension::Spatial => "Spatial Reasoning",
        }
    }

    pub fn tasks(self) -> impl Iterator<Item = Task> {
        Task::ALL.into_iter().filter(move |t| t.dimension() == self)
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
