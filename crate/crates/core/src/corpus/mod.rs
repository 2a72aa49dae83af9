//! Training and validation corpora: segmentation, codec ladders, resampling
//! and split manifests.

pub mod manifest;
pub mod prepare;
pub mod resample;
pub mod segment;
pub mod toy;
pub mod transcode;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

pub use manifest::{build_manifest, ClipFiles, ClipRecord, Manifest, ManifestHeader, SourceClips};
pub use prepare::{list_sources, prepare_corpus, CorpusConfig};
pub use resample::resample;
pub use segment::segment;
pub use transcode::{encode_decode, AlignConfig, ExternalTranscoder, ToyTranscoder, Transcoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Codec {
    Aac,
    Opus,
    Mp3,
    None,
}

impl Codec {
    pub const CODED: [Codec; 3] = [Codec::Aac, Codec::Opus, Codec::Mp3];

    pub fn as_str(self) -> &'static str {
        match self {
            Codec::Aac => "aac",
            Codec::Opus => "opus",
            Codec::Mp3 => "mp3",
            Codec::None => "none",
        }
    }
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Codec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "aac" => Ok(Codec::Aac),
            "opus" => Ok(Codec::Opus),
            "mp3" => Ok(Codec::Mp3),
            "none" => Ok(Codec::None),
            other => Err(Error::Config(format!("unknown codec `{other}`"))),
        }
    }
}

/// A coding bitrate in kbps, or `Inf` for the uncoded original.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Bitrate {
    Kbps(u32),
    Inf,
}

impl fmt::Display for Bitrate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bitrate::Kbps(k) => write!(f, "{k}"),
            Bitrate::Inf => f.write_str("inf"),
        }
    }
}

impl Serialize for Bitrate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Bitrate::Kbps(k) => s.serialize_u32(*k),
            Bitrate::Inf => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Bitrate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u32),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(0) => Err(serde::de::Error::custom("bitrate must be positive")),
            Raw::N(k) => Ok(Bitrate::Kbps(k)),
            Raw::S(s) if s.eq_ignore_ascii_case("inf") => Ok(Bitrate::Inf),
            Raw::S(s) => Err(serde::de::Error::custom(format!("bad bitrate `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
