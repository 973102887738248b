use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Scan type identifier of the form `<anatomy>-fs` or `<anatomy>-nfs`.
///
/// The suffix records whether fat suppression was on. Rulers fall back to
/// another anatomy with the same suffix when no exact match exists.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ScanType {
    anatomy: String,
    fat_suppressed: bool,
}

impl ScanType {
    pub fn new(anatomy: &str, fat_suppressed: bool) -> Result<Self> {
        let valid = !anatomy.is_empty()
            && anatomy
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
        if !valid {
            return Err(Error::invalid(format!("bad anatomy name {anatomy:?}")));
        }
        Ok(ScanType {
            anatomy: anatomy.to_string(),
            fat_suppressed,
        })
    }

    pub fn anatomy(&self) -> &str {
        &self.anatomy
    }

    pub fn fat_suppressed(&self) -> bool {
        self.fat_suppressed
    }
}

impl FromStr for ScanType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(anatomy) = s.strip_suffix("-nfs") {
            ScanType::new(anatomy, false)
        } else if let Some(anatomy) = s.strip_suffix("-fs") {
            ScanType::new(anatomy, true)
        } else {
            Err(Error::invalid(format!(
                "scan type {s:?} must end in -fs or -nfs"
            )))
        }
    }
}

impl TryFrom<String> for ScanType {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ScanType> for String {
    fn from(s: ScanType) -> String {
        s.to_string()
    }
}

impl fmt::Display for ScanType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.fat_suppressed { "fs" } else { "nfs" };
        write!(f, "{}-{}", self.anatomy, tag)
    }
}
