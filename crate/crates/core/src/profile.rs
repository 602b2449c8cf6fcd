use serde::{Deserialize, Serialize};

/// Scene capture profile; selects the learning-rate schedule and NNFM weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Profile {
    /// Forward-facing captures.
    #[default]
    #[serde(rename = "forward")]
    Forward,
    /// Captures surrounding the subject.
    #[serde(rename = "360")]
    Full360,
}

impl Profile {
    /// Style-color learning rate at the start and end of stylization.
    pub fn lr_range(self) -> (f64, f64) {
        match self {
            Profile::Forward => (1e-1, 1e-2),
            Profile::Full360 => (1e-2, 5e-3),
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forward" => Ok(Profile::Forward),
            "360" => Ok(Profile::Full360),
            other => Err(format!("unknown profile {other:?}, expected \"forward\" or \"360\"")),
        }
    }
}
