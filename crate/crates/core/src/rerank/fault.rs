//! Fault-injecting wrappers for the judge and segmenter clients.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::judge::{JudgeCandidate, JudgeClient, JudgeError};
use super::segment::{SegmentCrop, SegmenterClient, SegmenterError};
use super::LookImage;
use crate::querygen::LayerKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeFault {
    #[default]
    Ok,
    /// Sleep this long, then answer normally.
    Slow(#[serde(with = "millis")] Duration),
    /// Drop one candidate from the reply.
    Invalid,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterFault {
    #[default]
    Ok,
    Down,
}

pub struct FaultyJudge {
    inner: Arc<dyn JudgeClient>,
    fault: JudgeFault,
}

impl FaultyJudge {
    pub fn new(inner: Arc<dyn JudgeClient>, fault: JudgeFault) -> Self {
        Self { inner, fault }
    }
}

impl JudgeClient for FaultyJudge {
    fn judge(&self, look: &LookImage, candidates: &[JudgeCandidate]) -> Result<BTreeMap<String, f32>, JudgeError> {
        match self.fault {
            JudgeFault::Ok => self.inner.judge(look, candidates),
            JudgeFault::Slow(d) => {
                std::thread::sleep(d);
                self.inner.judge(look, candidates)
            }
            JudgeFault::Invalid => {
                let mut scores = self.inner.judge(look, candidates)?;
                if let Some(first) = candidates.first() {
                    scores.remove(&first.id);
                }
                Ok(scores)
            }
            JudgeFault::Down => Err(JudgeError::Unavailable("injected outage".into())),
        }
    }
}

pub struct FaultySegmenter {
    inner: Arc<dyn SegmenterClient>,
    fault: SegmenterFault,
}

impl FaultySegmenter {
    pub fn new(inner: Arc<dyn SegmenterClient>, fault: SegmenterFault) -> Self {
        Self { inner, fault }
    }
}

impl SegmenterClient for FaultySegmenter {
    fn segment(&self, look: &LookImage, layer: LayerKey) -> Result<SegmentCrop, SegmenterError> {
        match self.fault {
            SegmenterFault::Ok => self.inner.segment(look, layer),
            SegmenterFault::Down => Err(SegmenterError::Unavailable("injected outage".into())),
        }
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}
