//! Deterministic synthetic aerial-VQA datasets.
//!
//! Scenes are small attributed grids; questions come from fixed templates
//! for eight task kinds grouped into three stages, with an exact answer
//! oracle and mechanically generated reasoning traces.

mod generate;
mod question;
mod scene;
mod serialize;
pub mod words;

pub use generate::{
    apportion, generate_dataset, Dataset, GenConfig, SplitRatios, StageRatios, VqaSample,
};
pub use question::{answer_oracle, gold_reasoning, Question};
pub use scene::{SceneGrid, SceneObject, Split, Stage, TaskKind};
pub use serialize::{deserialize_scene, serialize_scene, serialized_len, SCENE_CLOSE, SCENE_OPEN};
