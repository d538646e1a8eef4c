//! Results CSV, per-session curves and summary tables.
//!
//! A results file has the header `kind,session,seen_classes,accuracy,a_last,a_inc`,
//! one `session` row per evaluated session and a final `summary` row. A run
//! that stopped early ends with a `# FAILED: ...` line instead of the summary.

use std::fmt::Write as _;
use std::io::Write;

use thiserror::Error;

use crate::protocol::{macro_metrics, SessionRecord, SessionResult};

pub const RESULTS_HEADER: &str = "kind,session,seen_classes,accuracy,a_last,a_inc";
pub const FAILURE_MARKER: &str = "# FAILED";

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("{0}")]
    Malformed(String),
    #[error("run `{0}` did not complete")]
    Incomplete(String),
    #[error("no results given")]
    Empty,
}

pub fn session_row(r: &SessionRecord) -> String {
    format!("session,{},{},{:.6},,", r.session, r.seen_classes, r.accuracy)
}

pub fn summary_row(a_last: f64, a_inc: f64) -> String {
    format!("summary,,,,{a_last:.6},{a_inc:.6}")
}

pub fn results_csv(result: &SessionResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{RESULTS_HEADER}");
    for r in &result.sessions {
        let _ = writeln!(s, "{}", session_row(r));
    }
    let _ = writeln!(s, "{}", summary_row(result.a_last, result.a_inc));
    s
}

/// Writes rows as sessions complete so partial results survive a failure.
pub struct ResultsWriter<W: Write> {
    out: W,
}

impl<W: Write> ResultsWriter<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "{RESULTS_HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn session(&mut self, r: &SessionRecord) -> std::io::Result<()> {
        writeln!(self.out, "{}", session_row(r))?;
        self.out.flush()
    }

    pub fn summary(&mut self, a_last: f64, a_inc: f64) -> std::io::Result<()> {
        writeln!(self.out, "{}", summary_row(a_last, a_inc))?;
        self.out.flush()
    }

    pub fn failed(&mut self, message: &str) -> std::io::Result<()> {
        writeln!(self.out, "{FAILURE_MARKER}: {}", message.replace('\n', " "))?;
        self.out.flush()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionPoint {
    pub session: usize,
    pub seen_classes: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResults {
    pub sessions: Vec<SessionPoint>,
    /// `(A_last, A_inc)`; absent for a failed run.
    pub summary: Option<(f64, f64)>,
    pub failure: Option<String>,
}

fn field<T: std::str::FromStr>(line: usize, name: &str, v: &str) -> Result<T, ReportError> {
    v.parse().map_err(|_| ReportError::Malformed(format!("line {line}: bad {name} `{v}`")))
}

pub fn parse_results(text: &str) -> Result<ParsedResults, ReportError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RESULTS_HEADER => {}
        _ => return Err(ReportError::Malformed("missing results header".into())),
    }
    let mut out = ParsedResults { sessions: Vec::new(), summary: None, failure: None };
    for (i, line) in lines {
        let n = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(FAILURE_MARKER) {
            out.failure = Some(rest.trim_start_matches(':').trim().to_string());
            continue;
        }
        if out.summary.is_some() {
            return Err(ReportError::Malformed(format!("line {n}: content after the summary row")));
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(ReportError::Malformed(format!("line {n}: expected 6 columns, found {}", cols.len())));
        }
        match cols[0] {
            "session" => out.sessions.push(SessionPoint {
                session: field(n, "session", cols[1])?,
                seen_classes: field(n, "seen_classes", cols[2])?,
                accuracy: field(n, "accuracy", cols[3])?,
            }),
            "summary" => out.summary = Some((field(n, "a_last", cols[4])?, field(n, "a_inc", cols[5])?)),
            other => return Err(ReportError::Malformed(format!("line {n}: unknown row kind `{other}`"))),
        }
    }
    Ok(out)
}

/// `run,session,seen_classes,accuracy` rows over several runs.
pub fn curves_csv(runs: &[(String, ParsedResults)]) -> String {
    let mut s = String::from("run,session,seen_classes,accuracy\n");
    for (name, r) in runs {
        for p in &r.sessions {
            let _ = writeln!(s, "{name},{},{},{:.6}", p.session, p.seen_classes, p.accuracy);
        }
    }
    s
}

/// Per-run metrics and, for more than one run, their macro means.
pub fn summary_table(runs: &[(String, ParsedResults)]) -> Result<String, ReportError> {
    if runs.is_empty() {
        return Err(ReportError::Empty);
    }
    let width = runs.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(4);
    let mut s = format!("{:<width$}  {:>8}  {:>8}\n", "run", "A_last", "A_inc");
    let mut pairs = Vec::with_capacity(runs.len());
    for (name, r) in runs {
        let (last, inc) = r.summary.ok_or_else(|| ReportError::Incomplete(name.clone()))?;
        let _ = writeln!(s, "{name:<width$}  {last:>8.2}  {inc:>8.2}");
        pairs.push((last, inc));
    }
    if runs.len() > 1 {
        let (m_last, m_inc) = macro_metrics(&pairs).expect("nonempty");
        let _ = writeln!(s, "{:<width$}  {m_last:>8.2}  {m_inc:>8.2}", "mean");
    }
    Ok(s)
}
