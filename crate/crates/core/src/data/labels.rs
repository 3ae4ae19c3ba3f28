//! Shot label taxonomy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

macro_rules! label_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(into = "String", try_from = "String")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub const COUNT: usize = Self::ALL.len();

            /// Canonical short string written to manifests and reports.
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }
        }

        impl FromStr for $name {
            type Err = Error;

            /// Case-insensitive.
            fn from_str(s: &str) -> Result<Self, Error> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str().eq_ignore_ascii_case(s.trim()))
                    .ok_or_else(|| Error::UnknownLabel(s.to_string()))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String {
                v.as_str().to_string()
            }
        }

        impl TryFrom<String> for $name {
            type Error = Error;

            fn try_from(s: String) -> Result<Self, Error> {
                s.parse()
            }
        }
    };
}

label_enum! {
    /// Shot scale, from farthest to closest framing.
    ScaleType {
        Ls => "LS",
        Fs => "FS",
        Ms => "MS",
        Cs => "CS",
        Ecs => "ECS",
    }
}

label_enum! {
    /// Camera movement type.
    MovementType {
        Static => "static",
        Motion => "motion",
        Push => "push",
        Pull => "pull",
    }
}

label_enum! {
    /// Dataset partition. `Predict` holds unlabeled shots for inference only.
    Split {
        Train => "train",
        Val => "val",
        Test => "test",
        Predict => "predict",
    }
}

/// Which of the two classification problems a component serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Scale,
    Movement,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Scale, Task::Movement];

    pub fn num_classes(self) -> usize {
        match self {
            Task::Scale => ScaleType::COUNT,
            Task::Movement => MovementType::COUNT,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Scale => "scale",
            Task::Movement => "movement",
        }
    }

    pub fn class_name(self, index: usize) -> &'static str {
        match self {
            Task::Scale => ScaleType::from_index(index).map_or("?", ScaleType::as_str),
            Task::Movement => MovementType::from_index(index).map_or("?", MovementType::as_str),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taxonomy_sizes() {
        assert_eq!(ScaleType::COUNT, 5);
        assert_eq!(MovementType::COUNT, 4);
        assert!(ScaleType::Ls < ScaleType::Ecs);
    }

    #[test]
    fn parsing_is_case_insensitive_and_writing_canonical() {
        assert_eq!("ecs".parse::<ScaleType>().unwrap(), ScaleType::Ecs);
        assert_eq!("PUSH".parse::<MovementType>().unwrap(), MovementType::Push);
        assert_eq!(MovementType::Push.to_string(), "push");
        assert_eq!(ScaleType::Cs.to_string(), "CS");
        assert!("XL".parse::<ScaleType>().is_err());
    }
}
