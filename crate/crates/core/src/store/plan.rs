//! Session plans: the ordered, disjoint class partition of an incremental run.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::format::{DatasetManifest, LabeledEmbedding, Split};
use super::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    /// Half of the classes in the base session, the rest split equally.
    BigStart,
    /// All sessions (base included) equally sized.
    SmallStart,
}

impl fmt::Display for SessionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SessionMode::BigStart => f.write_str("big_start"),
            SessionMode::SmallStart => f.write_str("small_start"),
        }
    }
}

impl std::str::FromStr for SessionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "big_start" | "big" => Ok(SessionMode::BigStart),
            "small_start" | "small" => Ok(SessionMode::SmallStart),
            other => Err(format!("unknown session mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub mode: SessionMode,
    pub shots: usize,
    pub seed: u64,
    /// Class ids per session; session 0 is the base session.
    pub sessions: Vec<Vec<u32>>,
}

/// Published split layouts for the standard benchmarks, keyed by a
/// normalized dataset name: (big-start sessions, big-start base classes,
/// small-start sessions).
const KNOWN_LAYOUTS: &[(&str, usize, usize, usize, usize)] = &[
    // name, classes, big sessions, big base, small sessions
    ("cifar100", 100, 6, 50, 10),
    ("cub200", 200, 11, 100, 10),
    ("eurosat", 10, 6, 5, 5),
    ("fgvcaircraft", 100, 11, 50, 10),
    ("resisc45", 45, 6, 20, 9),
    ("stanfordcars", 196, 8, 98, 7),
];

fn normalized_name(name: &str) -> String {
    name.chars().filter(char::is_ascii_alphanumeric).collect::<String>().to_ascii_lowercase()
}

fn known_layout(name: &str, class_count: usize) -> Option<(usize, usize, usize)> {
    let key = normalized_name(name);
    KNOWN_LAYOUTS
        .iter()
        .find(|(n, c, ..)| *n == key && *c == class_count)
        .map(|&(_, _, big, base, small)| (big, base, small))
}

/// Session count used when none is given explicitly.
pub fn default_session_count(name: &str, class_count: usize, mode: SessionMode) -> usize {
    if let Some((big, _, small)) = known_layout(name, class_count) {
        return match mode {
            SessionMode::BigStart => big,
            SessionMode::SmallStart => small,
        };
    }
    match mode {
        SessionMode::BigStart => 1 + (class_count - class_count.div_ceil(2)).min(5),
        SessionMode::SmallStart => class_count.min(5),
    }
}

/// Number of classes in each session. Remainders go to the base session.
pub fn session_sizes(
    class_count: usize,
    mode: SessionMode,
    sessions: usize,
    base_override: Option<usize>,
) -> Result<Vec<usize>, StoreError> {
    if class_count < 2 || sessions < 2 {
        return Err(StoreError::TooFewClasses { classes: class_count, sessions });
    }
    let incremental = sessions - 1;
    let per_session = match mode {
        SessionMode::BigStart => {
            let base = base_override.unwrap_or_else(|| class_count.div_ceil(2));
            class_count.saturating_sub(base) / incremental
        }
        SessionMode::SmallStart => class_count / sessions,
    };
    if per_session == 0 {
        return Err(StoreError::TooFewClasses { classes: class_count, sessions });
    }
    let base = class_count - per_session * incremental;
    let mut sizes = vec![base];
    sizes.extend(std::iter::repeat_n(per_session, incremental));
    Ok(sizes)
}

/// Builds a plan with the default session count for the dataset.
pub fn build_session_plan(
    manifest: &DatasetManifest,
    mode: SessionMode,
    shots: usize,
    seed: u64,
) -> Result<SessionPlan, StoreError> {
    let sessions = default_session_count(&manifest.name, manifest.class_count, mode);
    build_session_plan_with(manifest, mode, sessions, shots, seed)
}

/// Builds a plan with an explicit session count (base session included).
///
/// Classes are assigned in ascending id order; a nonzero `seed` shuffles
/// them first.
pub fn build_session_plan_with(
    manifest: &DatasetManifest,
    mode: SessionMode,
    sessions: usize,
    shots: usize,
    seed: u64,
) -> Result<SessionPlan, StoreError> {
    if shots == 0 {
        return Err(StoreError::Invalid("shots must be at least 1".into()));
    }
    let base_override = match (mode, known_layout(&manifest.name, manifest.class_count)) {
        (SessionMode::BigStart, Some((big, base, _))) if big == sessions => Some(base),
        _ => None,
    };
    let sizes = session_sizes(manifest.class_count, mode, sessions, base_override)?;
    let mut classes = manifest.class_ids();
    if seed != 0 {
        classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut rest = classes.as_slice();
    for n in sizes {
        let (head, tail) = rest.split_at(n);
        out.push(head.to_vec());
        rest = tail;
    }
    Ok(SessionPlan { mode, shots, seed, sessions: out })
}

impl SessionPlan {
    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn base_classes(&self) -> &[u32] {
        &self.sessions[0]
    }

    /// Classes seen up to and including `session`, in session order.
    pub fn seen_classes(&self, session: usize) -> Vec<u32> {
        self.sessions[..=session].iter().flatten().copied().collect()
    }

    /// Checks disjointness and that every class exists in the manifest.
    pub fn validate_against(&self, manifest: &DatasetManifest) -> Result<(), StoreError> {
        let known: BTreeSet<u32> = manifest.class_ids().into_iter().collect();
        let mut seen = BTreeSet::new();
        for (t, s) in self.sessions.iter().enumerate() {
            if s.is_empty() {
                return Err(StoreError::Invalid(format!("session {t} has no classes")));
            }
            for c in s {
                if !known.contains(c) {
                    return Err(StoreError::Invalid(format!("class {c} of session {t} not in dataset")));
                }
                if !seen.insert(*c) {
                    return Err(StoreError::Invalid(format!("class {c} appears in two sessions")));
                }
            }
        }
        if self.sessions.len() < 2 {
            return Err(StoreError::Invalid("plan needs at least two sessions".into()));
        }
        Ok(())
    }

    /// One-line summary in the style of a split table.
    pub fn summary(&self) -> String {
        let inc = self.sessions.get(1).map_or(0, Vec::len);
        format!(
            "{} sessions, base {}, inc {}",
            self.sessions.len(),
            self.sessions[0].len(),
            inc
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| StoreError::Invalid(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| StoreError::Invalid(format!("plan file: {e}")))
    }
}

fn session_rng(seed: u64, session: usize, class_id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((session as u64) << 32) | u64::from(class_id));
    rng
}

/// Training records for `session`.
///
/// The base session returns every training record of its classes; later
/// sessions return exactly `plan.shots` records per class, drawn without
/// replacement. Output is grouped by class in session order, records within
/// a class in file order.
pub fn sample_session_data<'a>(
    plan: &SessionPlan,
    session: usize,
    records: &'a [LabeledEmbedding],
    seed: u64,
) -> Result<Vec<&'a LabeledEmbedding>, StoreError> {
    let classes = plan
        .sessions
        .get(session)
        .ok_or(StoreError::NoSuchSession { session, sessions: plan.sessions.len() })?;
    let mut out = Vec::new();
    for &c in classes {
        let pool: Vec<&LabeledEmbedding> =
            records.iter().filter(|r| r.class_id == c && r.split == Split::Train).collect();
        if session == 0 {
            out.extend(pool);
            continue;
        }
        if pool.len() < plan.shots {
            return Err(StoreError::NotEnoughShots { class_id: c, available: pool.len(), shots: plan.shots });
        }
        let mut picked = index::sample(&mut session_rng(seed, session, c), pool.len(), plan.shots).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| pool[i]));
    }
    Ok(out)
}

/// Test records of the classes introduced in `session` alone.
pub fn session_test_data<'a>(
    plan: &SessionPlan,
    session: usize,
    records: &'a [LabeledEmbedding],
) -> Vec<&'a LabeledEmbedding> {
    let classes: BTreeSet<u32> = plan.sessions[session].iter().copied().collect();
    records
        .iter()
        .filter(|r| r.split == Split::Test && classes.contains(&r.class_id))
        .collect()
}
