//! Cross-validation split plans over `(participant, session)` keys.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SessionKey {
    pub participant_id: u16,
    pub session_id: u16,
}

impl SessionKey {
    pub fn new(participant_id: u16, session_id: u16) -> Self {
        Self {
            participant_id,
            session_id,
        }
    }
}

impl fmt::Display for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{:02}_s{:02}", self.participant_id, self.session_id)
    }
}

/// How folds are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method")]
pub enum SplitMethod {
    /// Per subject: each participant is cross-validated on its own
    /// sessions, `folds` folds per participant.
    #[serde(rename = "PS")]
    PerSubject { folds: usize },
    /// Leave one subject out.
    #[serde(rename = "LOSO")]
    Loso,
    /// Leave one subject out, plus the held-out participant's first
    /// session as calibration data in training.
    #[serde(rename = "AOS")]
    AddOneSession,
    /// Session-level k-fold with all participants pooled into one model:
    /// fold `j` tests the `j`-th block of sessions of every participant.
    #[serde(rename = "POOLED")]
    PooledSessions { folds: usize },
}

impl SplitMethod {
    pub fn label(&self) -> &'static str {
        match self {
            SplitMethod::PerSubject { .. } => "PS",
            SplitMethod::Loso => "LOSO",
            SplitMethod::AddOneSession => "AOS",
            SplitMethod::PooledSessions { .. } => "POOLED",
        }
    }
}

impl FromStr for SplitMethod {
    type Err = Error;

    /// Parses `PS`, `LOSO`, `AOS` or `POOLED`; `PS` and `POOLED` default to
    /// five folds and accept a `:k` suffix (`PS:2`).
    fn from_str(s: &str) -> Result<Self> {
        let (name, folds) = match s.split_once(':') {
            Some((n, k)) => (
                n,
                Some(
                    k.parse::<usize>()
                        .map_err(|_| Error::InvalidArgument(format!("bad fold count in split '{s}'")))?,
                ),
            ),
            None => (s, None),
        };
        let folds = folds.unwrap_or(5);
        match name.to_ascii_uppercase().as_str() {
            "PS" => Ok(SplitMethod::PerSubject { folds }),
            "LOSO" => Ok(SplitMethod::Loso),
            "AOS" => Ok(SplitMethod::AddOneSession),
            "POOLED" => Ok(SplitMethod::PooledSessions { folds }),
            _ => Err(Error::InvalidArgument(format!(
                "unknown split method '{s}' (expected PS, LOSO, AOS or POOLED)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub name: String,
    pub train: Vec<SessionKey>,
    pub test: Vec<SessionKey>,
}

impl Fold {
    pub fn is_disjoint(&self) -> bool {
        let train: BTreeSet<_> = self.train.iter().collect();
        self.test.iter().all(|k| !train.contains(k))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    #[serde(flatten)]
    pub method: SplitMethod,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split plan serializes")
    }
}

fn sessions_by_participant(keys: &[SessionKey]) -> Result<BTreeMap<u16, Vec<u16>>> {
    if keys.is_empty() {
        return Err(Error::Config("dataset index is empty".into()));
    }
    let mut map: BTreeMap<u16, Vec<u16>> = BTreeMap::new();
    for k in keys {
        map.entry(k.participant_id).or_default().push(k.session_id);
    }
    for (p, sessions) in map.iter_mut() {
        sessions.sort_unstable();
        if sessions.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("participant {p} lists a session twice")));
        }
    }
    Ok(map)
}

fn keys_of(p: u16, sessions: &[u16]) -> impl Iterator<Item = SessionKey> + '_ {
    sessions.iter().map(move |&s| SessionKey::new(p, s))
}

fn check_divisible(p: u16, sessions: usize, folds: usize) -> Result<usize> {
    if folds == 0 || !sessions.is_multiple_of(folds) {
        return Err(Error::Config(format!(
            "participant {p}: {sessions} sessions cannot be divided into {folds} equal folds"
        )));
    }
    Ok(sessions / folds)
}

/// Builds the folds for `method` over the given session keys.
pub fn make_splits(keys: &[SessionKey], method: SplitMethod) -> Result<SplitPlan> {
    let by_p = sessions_by_participant(keys)?;
    let mut folds = Vec::new();
    match method {
        SplitMethod::PerSubject { folds: k } => {
            for (&p, sessions) in &by_p {
                let per = check_divisible(p, sessions.len(), k)?;
                for j in 0..k {
                    let test = &sessions[j * per..(j + 1) * per];
                    folds.push(Fold {
                        name: format!("PS-p{p:02}-f{j}"),
                        train: keys_of(p, sessions)
                            .filter(|key| !test.contains(&key.session_id))
                            .collect(),
                        test: keys_of(p, test).collect(),
                    });
                }
            }
        }
        SplitMethod::PooledSessions { folds: k } => {
            let mut per_p = BTreeMap::new();
            for (&p, sessions) in &by_p {
                per_p.insert(p, check_divisible(p, sessions.len(), k)?);
            }
            for j in 0..k {
                let mut train = Vec::new();
                let mut test = Vec::new();
                for (&p, sessions) in &by_p {
                    let per = per_p[&p];
                    for (i, key) in keys_of(p, sessions).enumerate() {
                        if i / per == j {
                            test.push(key);
                        } else {
                            train.push(key);
                        }
                    }
                }
                folds.push(Fold {
                    name: format!("POOLED-f{j}"),
                    train,
                    test,
                });
            }
        }
        SplitMethod::Loso | SplitMethod::AddOneSession => {
            if by_p.len() < 2 {
                return Err(Error::Config(format!(
                    "{} needs at least two participants",
                    method.label()
                )));
            }
            for (&held, held_sessions) in &by_p {
                let mut train: Vec<SessionKey> = by_p
                    .iter()
                    .filter(|(&p, _)| p != held)
                    .flat_map(|(&p, s)| keys_of(p, s))
                    .collect();
                let test: Vec<SessionKey> = if method == SplitMethod::AddOneSession {
                    if held_sessions.len() < 2 {
                        return Err(Error::Config(format!(
                            "AOS needs at least two sessions for participant {held}"
                        )));
                    }
                    train.push(SessionKey::new(held, held_sessions[0]));
                    train.sort();
                    keys_of(held, &held_sessions[1..]).collect()
                } else {
                    keys_of(held, held_sessions).collect()
                };
                folds.push(Fold {
                    name: format!("{}-p{held:02}", method.label()),
                    train,
                    test,
                });
            }
        }
    }
    Ok(SplitPlan { method, folds })
}
