use serde::{Deserialize, Serialize};

use super::words::{Category, Color, SceneClass, Shape, Size, MAX_GRID_SIDE, REGION_NAMES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub position: (u8, u8),
    pub color: Color,
    pub size: Size,
    pub shape: Shape,
    pub category: Category,
}

impl SceneObject {
    pub fn row(&self) -> u8 {
        self.position.0
    }

    pub fn col(&self) -> u8 {
        self.position.1
    }
}

/// A synthetic aerial scene: a grid holding at most one attributed object per cell.
///
/// Objects are kept in row-major cell order, which makes the serialized form
/// canonical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawScene")]
pub struct SceneGrid {
    width: u8,
    height: u8,
    scene_class: SceneClass,
    objects: Vec<SceneObject>,
}

#[derive(Deserialize)]
struct RawScene {
    width: u8,
    height: u8,
    scene_class: SceneClass,
    objects: Vec<SceneObject>,
}

impl TryFrom<RawScene> for SceneGrid {
    type Error = Error;

    fn try_from(raw: RawScene) -> Result<Self> {
        SceneGrid::new(raw.width, raw.height, raw.scene_class, raw.objects)
    }
}

impl SceneGrid {
    pub fn new(
        width: u8,
        height: u8,
        scene_class: SceneClass,
        mut objects: Vec<SceneObject>,
    ) -> Result<Self> {
        if width == 0 || height == 0 || width > MAX_GRID_SIDE || height > MAX_GRID_SIDE {
            return Err(Error::Input(format!(
                "grid {width}x{height} outside 1..={MAX_GRID_SIDE}"
            )));
        }
        for o in &objects {
            if o.row() >= height || o.col() >= width {
                return Err(Error::Input(format!(
                    "object at {:?} outside {width}x{height} grid",
                    o.position
                )));
            }
        }
        objects.sort_by_key(|o| o.position);
        if objects.windows(2).any(|w| w[0].position == w[1].position) {
            return Err(Error::Input("two objects share a cell".into()));
        }
        Ok(Self {
            width,
            height,
            scene_class,
            objects,
        })
    }

    pub fn width(&self) -> u8 {
        self.width
    }

    pub fn height(&self) -> u8 {
        self.height
    }

    pub fn scene_class(&self) -> SceneClass {
        self.scene_class
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn object_at(&self, row: u8, col: u8) -> Option<&SceneObject> {
        self.objects
            .binary_search_by_key(&(row, col), |o| o.position)
            .ok()
            .map(|i| &self.objects[i])
    }

    /// Coarse region name ("top left" .. "bottom right") of a cell.
    pub fn region_of(&self, row: u8, col: u8) -> &'static str {
        let band = |x: u8, n: u8| (usize::from(x) * 3 / usize::from(n)).min(2);
        REGION_NAMES[band(row, self.height) * 3 + band(col, self.width)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    A,
    B,
    C,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::A, Stage::B, Stage::C];

    pub fn tasks(self) -> &'static [TaskKind] {
        match self {
            Stage::A => &[TaskKind::Color, TaskKind::Size, TaskKind::YesNo],
            Stage::B => &[TaskKind::Number, TaskKind::Shape, TaskKind::Transportation],
            Stage::C => &[TaskKind::Location, TaskKind::Scene],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// The reinforcement-learning split that trains this stage.
    pub fn rl_split(self) -> Split {
        match self {
            Stage::A => Split::RlA,
            Stage::B => Split::RlB,
            Stage::C => Split::RlC,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Color,
    Size,
    #[serde(rename = "yesno")]
    YesNo,
    Number,
    Shape,
    Transportation,
    Location,
    Scene,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::Color,
        TaskKind::Size,
        TaskKind::YesNo,
        TaskKind::Number,
        TaskKind::Shape,
        TaskKind::Transportation,
        TaskKind::Location,
        TaskKind::Scene,
    ];

    pub fn stage(self) -> Stage {
        match self {
            TaskKind::Color | TaskKind::Size | TaskKind::YesNo => Stage::A,
            TaskKind::Number | TaskKind::Shape | TaskKind::Transportation => Stage::B,
            TaskKind::Location | TaskKind::Scene => Stage::C,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Color => "color",
            TaskKind::Size => "size",
            TaskKind::YesNo => "yesno",
            TaskKind::Number => "number",
            TaskKind::Shape => "shape",
            TaskKind::Transportation => "transportation",
            TaskKind::Location => "location",
            TaskKind::Scene => "scene",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Sft,
    RlA,
    RlB,
    RlC,
    Test,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Sft, Split::RlA, Split::RlB, Split::RlC, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Sft => "sft",
            Split::RlA => "rl_a",
            Split::RlB => "rl_b",
            Split::RlC => "rl_c",
            Split::Test => "test",
        }
    }

    pub fn is_train(self) -> bool {
        self != Split::Test
    }
}
