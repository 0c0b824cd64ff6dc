//! Timestamped speaker spans and RTTM serialization.

use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TimelineError {
    #[error("bad RTTM line {line}: {reason}")]
    BadLine { line: usize, reason: String },
    #[error("span has non-positive duration: {0}")]
    BadDuration(f64),
    #[error("span has empty speaker label")]
    EmptyLabel,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Span {
    pub start: f64,
    pub duration: f64,
    pub speaker: String,
}

impl Span {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

/// A diarization hypothesis or reference: a list of speaker spans.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timeline {
    pub file_id: String,
    pub spans: Vec<Span>,
}

impl Timeline {
    pub fn new(file_id: &str) -> Timeline {
        Timeline {
            file_id: file_id.to_string(),
            spans: Vec::new(),
        }
    }

    pub fn push(&mut self, start: f64, duration: f64, speaker: &str) -> Result<(), TimelineError> {
        if duration <= 0.0 {
            return Err(TimelineError::BadDuration(duration));
        }
        if speaker.is_empty() {
            return Err(TimelineError::EmptyLabel);
        }
        self.spans.push(Span {
            start,
            duration,
            speaker: speaker.to_string(),
        });
        Ok(())
    }

    pub fn speakers(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in &self.spans {
            if !out.contains(&s.speaker.as_str()) {
                out.push(&s.speaker);
            }
        }
        out
    }

    pub fn total_speech(&self) -> f64 {
        self.spans.iter().map(|s| s.duration).sum()
    }

    pub fn end(&self) -> f64 {
        self.spans.iter().map(|s| s.end()).fold(0.0, f64::max)
    }

    /// Serialize as RTTM, spans sorted by start time (stable for ties),
    /// start/duration printed to 3 decimals.
    pub fn to_rttm(&self) -> String {
        let mut spans = self.spans.clone();
        spans.sort_by(|a, b| a.start.partial_cmp(&b.start).unwrap());
        let mut out = String::new();
        for s in &spans {
            writeln!(
                out,
                "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
                self.file_id, s.start, s.duration, s.speaker
            )
            .unwrap();
        }
        out
    }

    pub fn write_rttm(&self, path: &Path) -> Result<(), TimelineError> {
        std::fs::write(path, self.to_rttm())?;
        Ok(())
    }

    pub fn from_rttm(text: &str) -> Result<Timeline, TimelineError> {
        let mut timeline = Timeline::new("");
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 8 || fields[0] != "SPEAKER" {
                return Err(TimelineError::BadLine {
                    line: i + 1,
                    reason: "expected `SPEAKER <file> 1 <start> <dur> ... <label> ...`".into(),
                });
            }
            let parse = |s: &str, what: &str| -> Result<f64, TimelineError> {
                s.parse().map_err(|_| TimelineError::BadLine {
                    line: i + 1,
                    reason: format!("bad {what}: {s}"),
                })
            };
            if timeline.file_id.is_empty() {
                timeline.file_id = fields[1].to_string();
            }
            let start = parse(fields[3], "start")?;
            let duration = parse(fields[4], "duration")?;
            timeline.push(start, duration, fields[7])?;
        }
        Ok(timeline)
    }

    pub fn read_rttm(path: &Path) -> Result<Timeline, TimelineError> {
        Timeline::from_rttm(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rttm_line_format_is_exact() {
        let mut t = Timeline::new("mtg0");
        t.push(1.25, 3.0, "spk1").unwrap();
        assert_eq!(
            t.to_rttm(),
            "SPEAKER mtg0 1 1.250 3.000 <NA> <NA> spk1 <NA> <NA>\n"
        );
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let mut t = Timeline::new("m");
        t.push(5.5, 1.234, "b").unwrap();
        t.push(0.0, 2.0, "a").unwrap();
        t.push(2.75, 0.5, "a").unwrap();
        let first = t.to_rttm();
        let back = Timeline::from_rttm(&first).unwrap();
        assert_eq!(back.to_rttm(), first);
    }

    #[test]
    fn rejects_bad_spans() {
        let mut t = Timeline::new("m");
        assert!(matches!(
            t.push(0.0, 0.0, "a"),
            Err(TimelineError::BadDuration(_))
        ));
        assert!(matches!(t.push(0.0, 1.0, ""), Err(TimelineError::EmptyLabel)));
    }

    #[test]
    fn rejects_malformed_rttm() {
        let err = Timeline::from_rttm("SPEAKER only four fields\n").unwrap_err();
        assert!(matches!(err, TimelineError::BadLine { line: 1, .. }));
    }
}
