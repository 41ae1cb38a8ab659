//! Human-readable timeline of a recorded run.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::log::{EventKind, EventLog, LogError};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Summary {
    pub elections: usize,
    pub admits: usize,
    pub discoveries: usize,
    pub accepts: usize,
    pub rejects: usize,
    pub removals: usize,
    pub alerts: usize,
    /// Latest `lineage epoch` per group.
    pub epochs: BTreeMap<String, String>,
}

/// Renders the timeline for a log in its text form. The output depends on
/// nothing but `text`; an empty log renders as an empty string.
pub fn report(text: &str) -> Result<String, LogError> {
    let events = EventLog::parse_text(text)?;
    if events.is_empty() {
        return Ok(String::new());
    }
    let mut out = String::from("timeline\n");
    let mut s = Summary::default();
    for e in &events {
        let w = e.words();
        let line = match e.kind {
            EventKind::Elect => {
                s.elections += 1;
                Some(format!("elect {} {}", e.principals, e.detail))
            }
            EventKind::Admit => {
                s.admits += 1;
                Some(format!("admit {} {}", e.principals, w.first().unwrap_or(&"?")))
            }
            EventKind::Remove => {
                s.removals += 1;
                Some(format!("remove {} {}", e.principals, e.detail))
            }
            EventKind::Rekey => {
                if let [g, l, ep] = w.as_slice() {
                    s.epochs.insert(g.to_string(), format!("{l} {ep}"));
                }
                Some(format!("epoch {}", e.detail))
            }
            EventKind::Alert => {
                s.alerts += 1;
                Some(format!("alert {} {}", e.principals, e.detail))
            }
            EventKind::Verdict => {
                match w.first() {
                    Some(&"accept") => s.accepts += 1,
                    Some(&"reject") => s.rejects += 1,
                    _ => {}
                }
                Some(format!("verdict {} {}", e.principals, e.detail))
            }
            EventKind::Info => match w.first() {
                Some(&"discover") => {
                    s.discoveries += 1;
                    Some(e.detail.clone())
                }
                Some(&"leave" | &"crash" | &"dissolve" | &"orphan" | &"join_abort" | &"join_reject") => {
                    Some(format!("{} {}", e.principals, e.detail))
                }
                Some(&"session_confirmed" | &"session_abort" | &"data" | &"route_negative") => Some(e.detail.clone()),
                _ => None,
            },
            _ => None,
        };
        if let Some(l) = line {
            let _ = writeln!(out, "  t={} {l}", e.tick);
        }
    }
    let _ = writeln!(out, "summary");
    let _ = writeln!(out, "  elections {}", s.elections);
    let _ = writeln!(out, "  admits {}", s.admits);
    let _ = writeln!(out, "  discoveries {}", s.discoveries);
    let _ = writeln!(out, "  accepts {}", s.accepts);
    let _ = writeln!(out, "  rejects {}", s.rejects);
    let _ = writeln!(out, "  removals {}", s.removals);
    let _ = writeln!(out, "  alerts {}", s.alerts);
    for (g, ep) in &s.epochs {
        let _ = writeln!(out, "  epoch {g} {ep}");
    }
    Ok(out)
}
