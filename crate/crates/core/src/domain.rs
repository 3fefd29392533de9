//! Domains and the global camera-class index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn opposite(self) -> Domain {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Domain> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Data(format!("unknown domain `{other}`"))),
        }
    }
}

/// Bijection between `(domain, camera_id)` pairs and the global camera class
/// index: source cameras occupy `[0, c_s)`, target cameras `[c_s, c_s + c_t)`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CameraIndexer {
    c_s: usize,
    c_t: usize,
}

impl CameraIndexer {
    pub fn new(c_s: usize, c_t: usize) -> Result<Self> {
        if c_s == 0 || c_t == 0 {
            return Err(Error::InvalidConfig(
                "camera counts must be at least 1 per domain".into(),
            ));
        }
        Ok(CameraIndexer { c_s, c_t })
    }

    pub fn source_cameras(&self) -> usize {
        self.c_s
    }

    pub fn target_cameras(&self) -> usize {
        self.c_t
    }

    pub fn total(&self) -> usize {
        self.c_s + self.c_t
    }

    pub fn global_index(&self, domain: Domain, camera_id: usize) -> Result<usize> {
        let (base, count) = match domain {
            Domain::Source => (0, self.c_s),
            Domain::Target => (self.c_s, self.c_t),
        };
        if camera_id >= count {
            return Err(Error::LabelOutOfRange {
                label: camera_id,
                classes: count,
            });
        }
        Ok(base + camera_id)
    }

    pub fn domain_of(&self, global: usize) -> Result<Domain> {
        if global < self.c_s {
            Ok(Domain::Source)
        } else if global < self.total() {
            Ok(Domain::Target)
        } else {
            Err(Error::LabelOutOfRange {
                label: global,
                classes: self.total(),
            })
        }
    }

    /// Global indices of the cameras in `domain`.
    pub fn range_of(&self, domain: Domain) -> std::ops::Range<usize> {
        match domain {
            Domain::Source => 0..self.c_s,
            Domain::Target => self.c_s..self.total(),
        }
    }

    /// Camera count of the domain opposite to `domain`.
    pub fn opposite_count(&self, domain: Domain) -> usize {
        match domain {
            Domain::Source => self.c_t,
            Domain::Target => self.c_s,
        }
    }
}
