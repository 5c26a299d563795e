//! Token serialization of scenes. This is the policy's only view of the "image".

use super::scene::{SceneGrid, SceneObject};
use super::words::{cell_token, parse_cell_token, Category, Color, SceneClass, Shape, Size};
use crate::error::{Error, Result};

pub const SCENE_OPEN: &str = "<scene>";
pub const SCENE_CLOSE: &str = "</scene>";
const OBJECT_TOKENS: usize = 5;
const HEADER_TOKENS: usize = 4;

/// Number of tokens `serialize_scene` produces for a scene with `objects` objects.
pub fn serialized_len(objects: usize) -> usize {
    HEADER_TOKENS + OBJECT_TOKENS * objects + 1
}

/// `<scene> class width height (cell color size shape category)* </scene>`
pub fn serialize_scene(scene: &SceneGrid, budget: usize) -> Result<Vec<String>> {
    let len = serialized_len(scene.objects().len());
    if len > budget {
        return Err(Error::Encoding(format!(
            "scene needs {len} tokens, budget is {budget}"
        )));
    }
    let mut out = Vec::with_capacity(len);
    out.push(SCENE_OPEN.to_string());
    out.push(scene.scene_class().word().to_string());
    out.push(scene.width().to_string());
    out.push(scene.height().to_string());
    for o in scene.objects() {
        out.push(cell_token(o.row(), o.col()));
        out.push(o.color.word().to_string());
        out.push(o.size.word().to_string());
        out.push(o.shape.word().to_string());
        out.push(o.category.word().to_string());
    }
    out.push(SCENE_CLOSE.to_string());
    Ok(out)
}

pub fn deserialize_scene<S: AsRef<str>>(tokens: &[S]) -> Result<SceneGrid> {
    let bad = |what: &str| Error::Encoding(format!("malformed scene tokens: {what}"));
    let toks: Vec<&str> = tokens.iter().map(|t| t.as_ref()).collect();
    if toks.len() < HEADER_TOKENS + 1
        || toks[0] != SCENE_OPEN
        || toks[toks.len() - 1] != SCENE_CLOSE
    {
        return Err(bad("missing scene delimiters"));
    }
    let class = SceneClass::from_word(toks[1]).ok_or_else(|| bad("scene class"))?;
    let width: u8 = toks[2].parse().map_err(|_| bad("width"))?;
    let height: u8 = toks[3].parse().map_err(|_| bad("height"))?;
    let body = &toks[HEADER_TOKENS..toks.len() - 1];
    if !body.len().is_multiple_of(OBJECT_TOKENS) {
        return Err(bad("truncated object"));
    }
    let objects = body
        .chunks(OBJECT_TOKENS)
        .map(|c| {
            Ok(SceneObject {
                position: parse_cell_token(c[0]).ok_or_else(|| bad("cell"))?,
                color: Color::from_word(c[1]).ok_or_else(|| bad("color"))?,
                size: Size::from_word(c[2]).ok_or_else(|| bad("size"))?,
                shape: Shape::from_word(c[3]).ok_or_else(|| bad("shape"))?,
                category: Category::from_word(c[4]).ok_or_else(|| bad("category"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scene = SceneGrid::new(width, height, class, objects)
        .map_err(|e| Error::Encoding(e.to_string()))?;
    Ok(scene)
}
