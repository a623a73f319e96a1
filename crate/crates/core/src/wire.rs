//! Canonical byte encoding of [`KnowledgeMessage`], used for message-size
//! accounting.
//!
//! Layout (all integers little-endian, floats IEEE-754 binary64):
//!
//! ```text
//! message   := sender:u32 target:series config:config best:candidate
//! series    := len:u32 value:f64*len
//! config    := count:u32 record*count            (ascending agent id)
//! record    := agent:u32 index:u32 lambda:u64 schedule:series
//! candidate := creator:u32 fitness:f64 config
//! ```

use std::sync::Arc;

use thiserror::Error;

use crate::agent::KnowledgeMessage;
use crate::candidate::Candidate;
use crate::model::{AgentId, PlanningHorizon, Schedule, SelectionRecord, SystemConfiguration, TargetProfile};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WireError {
    #[error("message truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after message")]
    Trailing(usize),
    #[error("records not in strictly ascending agent order at byte {0}")]
    Unordered(usize),
    #[error("invalid value: {0}")]
    Invalid(String),
}

pub fn encode(msg: &KnowledgeMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(msg));
    out.extend_from_slice(&msg.sender.0.to_le_bytes());
    put_series(&mut out, &msg.target);
    put_config(&mut out, &msg.config);
    out.extend_from_slice(&msg.best.creator().0.to_le_bytes());
    out.extend_from_slice(&msg.best.fitness().to_le_bytes());
    put_config(&mut out, msg.best.configuration());
    out
}

/// Length of [`encode`]'s output without materializing it.
pub fn encoded_len(msg: &KnowledgeMessage) -> usize {
    4 + series_len(msg.target.len()) + config_len(&msg.config) + 4 + 8 + config_len(msg.best.configuration())
}

fn series_len(n: usize) -> usize {
    4 + 8 * n
}

fn config_len(config: &SystemConfiguration) -> usize {
    4 + config
        .iter()
        .map(|r| 4 + 4 + 8 + series_len(r.schedule.len()))
        .sum::<usize>()
}

fn put_series(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_config(out: &mut Vec<u8>, config: &SystemConfiguration) {
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    for r in config.iter() {
        out.extend_from_slice(&r.agent_id.0.to_le_bytes());
        out.extend_from_slice(&r.schedule_index.to_le_bytes());
        out.extend_from_slice(&r.lambda.to_le_bytes());
        put_series(out, &r.schedule);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        let end = self.pos + N;
        let bytes = self.buf.get(self.pos..end).ok_or(WireError::Truncated(self.pos))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice of length N"))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        self.take::<8>().map(f64::from_le_bytes)
    }

    fn series(&mut self) -> Result<Vec<f64>, WireError> {
        let n = self.u32()? as usize;
        if self.buf.len().saturating_sub(self.pos) < 8 * n {
            return Err(WireError::Truncated(self.pos));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn config(&mut self) -> Result<SystemConfiguration, WireError> {
        let n = self.u32()?;
        let mut config = SystemConfiguration::new();
        let mut last: Option<u32> = None;
        for _ in 0..n {
            let at = self.pos;
            let agent = self.u32()?;
            if last.is_some_and(|l| l >= agent) {
                return Err(WireError::Unordered(at));
            }
            last = Some(agent);
            let schedule_index = self.u32()?;
            let lambda = self.u64()?;
            let schedule = Schedule::new(self.series()?).map_err(|e| WireError::Invalid(e.to_string()))?;
            config.insert(SelectionRecord {
                agent_id: AgentId(agent),
                schedule_index,
                schedule,
                lambda,
            });
        }
        Ok(config)
    }
}

/// Decodes a message. The target is validated against the full horizon of
/// its own length, so any finite values are accepted.
pub fn decode(bytes: &[u8]) -> Result<KnowledgeMessage, WireError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let sender = AgentId(r.u32()?);
    let target = r.series()?;
    let horizon = PlanningHorizon::full(target.len(), 1.0).map_err(|e| WireError::Invalid(e.to_string()))?;
    let target = TargetProfile::new(target, &horizon).map_err(|e| WireError::Invalid(e.to_string()))?;
    let config = Arc::new(r.config()?);
    let creator = AgentId(r.u32()?);
    let fitness = r.f64()?;
    let best_config = Arc::new(r.config()?);
    if r.pos != bytes.len() {
        return Err(WireError::Trailing(bytes.len() - r.pos));
    }
    Ok(KnowledgeMessage {
        sender,
        target,
        config,
        best: Arc::new(Candidate::from_parts(best_config, fitness, creator)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_config(t: usize) -> impl Strategy<Value = SystemConfiguration> {
        proptest::collection::btree_map(
            any::<u32>(),
            (any::<u32>(), any::<u64>(), proptest::collection::vec(-1e6f64..1e6, t)),
            0..5,
        )
        .prop_map(|m| {
            m.into_iter()
                .map(|(a, (i, l, v))| SelectionRecord {
                    agent_id: AgentId(a),
                    schedule_index: i,
                    schedule: Schedule::new(v).unwrap(),
                    lambda: l,
                })
                .collect()
        })
    }

    fn arb_message() -> impl Strategy<Value = KnowledgeMessage> {
        (1usize..6).prop_flat_map(|t| {
            (
                any::<u32>(),
                proptest::collection::vec(-1e3f64..1e3, t),
                arb_config(t),
                arb_config(t),
                any::<u32>(),
                0f64..1e6,
            )
                .prop_map(|(sender, target, config, best, creator, fitness)| {
                    let h = PlanningHorizon::full(target.len(), 1.0).unwrap();
                    KnowledgeMessage {
                        sender: AgentId(sender),
                        target: TargetProfile::new(target, &h).unwrap(),
                        config: Arc::new(config),
                        best: Arc::new(Candidate::from_parts(Arc::new(best), fitness, AgentId(creator))),
                    }
                })
        })
    }

    fn same(a: &KnowledgeMessage, b: &KnowledgeMessage) -> bool {
        a.sender == b.sender
            && a.target == b.target
            && a.config == b.config
            && a.best.configuration() == b.best.configuration()
            && a.best.fitness().to_bits() == b.best.fitness().to_bits()
            && a.best.creator() == b.best.creator()
            && a.best.key() == b.best.key()
    }

    proptest! {
        #[test]
        fn round_trip(msg in arb_message()) {
            let bytes = encode(&msg);
            prop_assert_eq!(bytes.len(), encoded_len(&msg));
            let back = decode(&bytes).unwrap();
            prop_assert!(same(&msg, &back));
            prop_assert_eq!(encode(&back), bytes);
        }

        #[test]
        fn truncation_is_detected(msg in arb_message(), cut in any::<prop::sample::Index>()) {
            let bytes = encode(&msg);
            let cut = cut.index(bytes.len());
            prop_assert!(decode(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn fixed_layout() {
        let h = PlanningHorizon::full(1, 1.0).unwrap();
        let config: SystemConfiguration = [SelectionRecord {
            agent_id: AgentId(2),
            schedule_index: 1,
            schedule: Schedule::new(vec![-2.0]).unwrap(),
            lambda: 3,
        }]
        .into_iter()
        .collect();
        let config = Arc::new(config);
        let msg = KnowledgeMessage {
            sender: AgentId(2),
            target: TargetProfile::new(vec![-100.0], &h).unwrap(),
            config: config.clone(),
            best: Arc::new(Candidate::from_parts(config, 98.0, AgentId(2))),
        };
        let bytes = encode(&msg);
        // sender + target(4+8) + config(4 + 4+4+8+4+8) + creator + fitness + config
        assert_eq!(bytes.len(), 4 + 12 + 32 + 4 + 8 + 32);
        assert_eq!(&bytes[0..4], &[2, 0, 0, 0]);
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &(-100.0f64).to_le_bytes());
        assert_eq!(&bytes[16..20], &[1, 0, 0, 0]);
        let mut tail = bytes.clone();
        tail.push(0);
        assert_eq!(decode(&tail).unwrap_err(), WireError::Trailing(1));
    }
}
