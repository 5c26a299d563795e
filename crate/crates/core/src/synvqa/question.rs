//! Question templates, the answer oracle and mechanical gold reasoning.

use super::scene::{SceneGrid, SceneObject, TaskKind};
use super::words::{cell_token, parse_cell_token, Category, Color};
use crate::error::{Error, Result};

/// A question instantiated from one of the fixed templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Question {
    ColorAt { row: u8, col: u8 },
    SizeAt { row: u8, col: u8 },
    IsColorAt { row: u8, col: u8, color: Color },
    Count { category: Category },
    ShapeAt { row: u8, col: u8 },
    VehicleAt { row: u8, col: u8 },
    WhereIs { color: Color, category: Category },
    SceneKind,
}

impl Question {
    pub fn task(&self) -> TaskKind {
        match self {
            Question::ColorAt { .. } => TaskKind::Color,
            Question::SizeAt { .. } => TaskKind::Size,
            Question::IsColorAt { .. } => TaskKind::YesNo,
            Question::Count { .. } => TaskKind::Number,
            Question::ShapeAt { .. } => TaskKind::Shape,
            Question::VehicleAt { .. } => TaskKind::Transportation,
            Question::WhereIs { .. } => TaskKind::Location,
            Question::SceneKind => TaskKind::Scene,
        }
    }

    pub fn render(&self) -> String {
        match *self {
            Question::ColorAt { row, col } => {
                format!("what color is the object at {}", cell_token(row, col))
            }
            Question::SizeAt { row, col } => {
                format!("what size is the object at {}", cell_token(row, col))
            }
            Question::IsColorAt { row, col, color } => {
                format!("is the object at {} {color}", cell_token(row, col))
            }
            Question::Count { category } => format!("how many {}", category.plural()),
            Question::ShapeAt { row, col } => {
                format!("what shape is the object at {}", cell_token(row, col))
            }
            Question::VehicleAt { row, col } => {
                format!("what vehicle is at {}", cell_token(row, col))
            }
            Question::WhereIs { color, category } => format!("where is the {color} {category}"),
            Question::SceneKind => "what scene is shown".to_string(),
        }
    }

    pub fn parse(text: &str) -> Result<Question> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let unsupported = || Error::UnsupportedQuestion(text.to_string());
        let cell = |w: &str| parse_cell_token(w).ok_or_else(unsupported);
        let q = match words.as_slice() {
            ["what", attr, "is", "the", "object", "at", c] => {
                let (row, col) = cell(c)?;
                match *attr {
                    "color" => Question::ColorAt { row, col },
                    "size" => Question::SizeAt { row, col },
                    "shape" => Question::ShapeAt { row, col },
                    _ => return Err(unsupported()),
                }
            }
            ["is", "the", "object", "at", c, color] => {
                let (row, col) = cell(c)?;
                let color = Color::from_word(color).ok_or_else(unsupported)?;
                Question::IsColorAt { row, col, color }
            }
            ["how", "many", plural] => Question::Count {
                category: Category::from_plural(plural).ok_or_else(unsupported)?,
            },
            ["what", "vehicle", "is", "at", c] => {
                let (row, col) = cell(c)?;
                Question::VehicleAt { row, col }
            }
            ["where", "is", "the", color, category] => Question::WhereIs {
                color: Color::from_word(color).ok_or_else(unsupported)?,
                category: Category::from_word(category).ok_or_else(unsupported)?,
            },
            ["what", "scene", "is", "shown"] => Question::SceneKind,
            _ => return Err(unsupported()),
        };
        Ok(q)
    }
}

fn occupied(scene: &SceneGrid, row: u8, col: u8) -> Result<&SceneObject> {
    scene.object_at(row, col).ok_or_else(|| {
        Error::UnsupportedQuestion(format!("no object at {}", cell_token(row, col)))
    })
}

fn unique_match(scene: &SceneGrid, color: Color, category: Category) -> Result<&SceneObject> {
    let mut it = scene
        .objects()
        .iter()
        .filter(|o| o.color == color && o.category == category);
    match (it.next(), it.next()) {
        (Some(o), None) => Ok(o),
        _ => Err(Error::UnsupportedQuestion(format!(
            "no unique {color} {category} in scene"
        ))),
    }
}

/// Ground-truth answer for `question` about `scene`.
pub fn answer_oracle(scene: &SceneGrid, question: &Question) -> Result<String> {
    let ans = match *question {
        Question::ColorAt { row, col } => occupied(scene, row, col)?.color.word().to_string(),
        Question::SizeAt { row, col } => occupied(scene, row, col)?.size.word().to_string(),
        Question::ShapeAt { row, col } => occupied(scene, row, col)?.shape.word().to_string(),
        Question::IsColorAt { row, col, color } => {
            if occupied(scene, row, col)?.color == color { "yes" } else { "no" }.to_string()
        }
        Question::Count { category } => scene
            .objects()
            .iter()
            .filter(|o| o.category == category)
            .count()
            .to_string(),
        Question::VehicleAt { row, col } => {
            let o = occupied(scene, row, col)?;
            if !o.category.is_transportation() {
                return Err(Error::UnsupportedQuestion(format!(
                    "object at {} is not a vehicle",
                    cell_token(row, col)
                )));
            }
            o.category.word().to_string()
        }
        Question::WhereIs { color, category } => {
            let o = unique_match(scene, color, category)?;
            scene.region_of(o.row(), o.col()).to_string()
        }
        Question::SceneKind => scene.scene_class().word().to_string(),
    };
    Ok(ans)
}

fn describe(o: &SceneObject) -> String {
    format!(
        "{} holds {} {} {} {}",
        cell_token(o.row(), o.col()),
        o.color,
        o.size,
        o.shape,
        o.category
    )
}

/// Mechanical step-by-step trace that ends in the oracle answer.
pub fn gold_reasoning(scene: &SceneGrid, question: &Question) -> Result<String> {
    let text = match *question {
        Question::ColorAt { row, col }
        | Question::SizeAt { row, col }
        | Question::ShapeAt { row, col } => describe(occupied(scene, row, col)?),
        Question::VehicleAt { row, col } => {
            answer_oracle(scene, question)?;
            describe(occupied(scene, row, col)?)
        }
        Question::IsColorAt { row, col, color } => {
            format!("{} asked {color}", describe(occupied(scene, row, col)?))
        }
        Question::Count { category } => {
            let cells: Vec<String> = scene
                .objects()
                .iter()
                .filter(|o| o.category == category)
                .map(|o| cell_token(o.row(), o.col()))
                .collect();
            if cells.is_empty() {
                format!("{} none count 0", category.plural())
            } else {
                format!("{} at {} count {}", category.plural(), cells.join(" "), cells.len())
            }
        }
        Question::WhereIs { color, category } => {
            let o = unique_match(scene, color, category)?;
            format!(
                "{color} {category} at {} region {}",
                cell_token(o.row(), o.col()),
                scene.region_of(o.row(), o.col())
            )
        }
        Question::SceneKind => format!("header shows {}", scene.scene_class()),
    };
    Ok(text)
}
