//! Closed attribute vocabularies shared by the generator, the question
//! templates and the policy vocabulary.

use serde::{Deserialize, Serialize};

macro_rules! word_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|v| *v == self).unwrap()
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

word_enum!(Color {
    Red => "red", Blue => "blue", Green => "green", White => "white",
    Black => "black", Gray => "gray", Yellow => "yellow", Orange => "orange",
});

word_enum!(Size { Small => "small", Medium => "medium", Large => "large" });

word_enum!(Shape {
    Circle => "circle", Square => "square", Rectangle => "rectangle", Triangle => "triangle",
});

word_enum!(Category {
    Car => "car", Truck => "truck", Bus => "bus", Boat => "boat", Plane => "plane",
    House => "house", Tree => "tree", Field => "field", Factory => "factory",
});

word_enum!(SceneClass {
    Residential => "residential", Farmland => "farmland", Harbor => "harbor", Industrial => "industrial",
});

impl Category {
    pub fn is_transportation(self) -> bool {
        matches!(
            self,
            Category::Car | Category::Truck | Category::Bus | Category::Boat | Category::Plane
        )
    }

    pub fn plural(self) -> &'static str {
        match self {
            Category::Car => "cars",
            Category::Truck => "trucks",
            Category::Bus => "buses",
            Category::Boat => "boats",
            Category::Plane => "planes",
            Category::House => "houses",
            Category::Tree => "trees",
            Category::Field => "fields",
            Category::Factory => "factories",
        }
    }

    pub fn from_plural(w: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.plural() == w)
    }
}

impl SceneClass {
    /// Relative category frequencies for objects placed in a scene of this class,
    /// indexed like `Category::ALL`.
    pub fn category_weights(self) -> [u32; 9] {
        //            car truck bus boat plane house tree field factory
        match self {
            SceneClass::Residential => [3, 1, 1, 0, 0, 4, 2, 0, 0],
            SceneClass::Farmland => [1, 2, 0, 0, 0, 1, 3, 4, 0],
            SceneClass::Harbor => [1, 2, 0, 5, 0, 0, 0, 0, 1],
            SceneClass::Industrial => [2, 3, 1, 0, 1, 0, 0, 0, 4],
        }
    }
}

/// Nine coarse regions of a grid, used by location questions.
pub const REGION_NAMES: [&str; 9] = [
    "top left",
    "top",
    "top right",
    "left",
    "center",
    "right",
    "bottom left",
    "bottom",
    "bottom right",
];

/// Largest count a number question can have as its answer.
pub const MAX_COUNT: usize = 20;

/// Largest supported grid side; bounded by the numeric tokens used in the scene header.
pub const MAX_GRID_SIDE: u8 = 20;

pub fn cell_token(row: u8, col: u8) -> String {
    format!("r{row}c{col}")
}

pub fn parse_cell_token(tok: &str) -> Option<(u8, u8)> {
    let rest = tok.strip_prefix('r')?;
    let (r, c) = rest.split_once('c')?;
    if r.is_empty() || c.is_empty() || (r.len() > 1 && r.starts_with('0')) || (c.len() > 1 && c.starts_with('0')) {
        return None;
    }
    Some((r.parse().ok()?, c.parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_round_trip() {
        for c in Color::ALL {
            assert_eq!(Color::from_word(c.word()), Some(*c));
        }
        for c in Category::ALL {
            assert_eq!(Category::from_plural(c.plural()), Some(*c));
        }
        assert_eq!(Category::ALL.iter().filter(|c| c.is_transportation()).count(), 5);
    }

    #[test]
    fn cell_tokens() {
        assert_eq!(cell_token(2, 13), "r2c13");
        assert_eq!(parse_cell_token("r2c13"), Some((2, 13)));
        assert_eq!(parse_cell_token("r02c1"), None);
        assert_eq!(parse_cell_token("rc1"), None);
        assert_eq!(parse_cell_token("red"), None);
    }
}
