//! Parser for the trip-table text format used by the standard traffic
//! assignment benchmarks: a metadata header in angle brackets, `~` comments,
//! and per-origin blocks of `destination : flow ;` entries.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct TripsTable {
    pub zones: Option<usize>,
    pub declared_total: Option<f64>,
    /// (origin, destination, flow) in file order, zeros included.
    pub entries: Vec<(usize, usize, f64)>,
}

impl TripsTable {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.2).sum()
    }

    pub fn positive_entries(&self) -> usize {
        self.entries.iter().filter(|e| e.2 > 0.0).count()
    }
}

pub fn parse_trips(text: &str) -> Result<TripsTable> {
    let mut table = TripsTable::default();
    let mut origin: Option<usize> = None;
    let mut seen: std::collections::BTreeSet<(usize, usize)> = Default::default();

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = match raw.find('~') {
            Some(i) => &raw[..i],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }

        if let Some(rest) = line.strip_prefix('<') {
            let Some(end) = rest.find('>') else {
                return Err(Error::Demand(format!("line {lineno}: unterminated metadata tag")));
            };
            let tag = rest[..end].trim().to_ascii_uppercase();
            let value = rest[end + 1..].trim();
            match tag.as_str() {
                "NUMBER OF ZONES" => {
                    table.zones = Some(value.parse().map_err(|_| {
                        Error::Demand(format!("line {lineno}: bad zone count '{value}'"))
                    })?);
                }
                "TOTAL OD FLOW" => {
                    table.declared_total = Some(value.parse().map_err(|_| {
                        Error::Demand(format!("line {lineno}: bad total flow '{value}'"))
                    })?);
                }
                _ => {} // other metadata tags are ignored
            }
            continue;
        }

        if let Some(rest) = strip_keyword(line, "Origin") {
            let o: usize = rest.trim().parse().map_err(|_| {
                Error::Demand(format!("line {lineno}: bad origin id '{}'", rest.trim()))
            })?;
            origin = Some(o);
            continue;
        }

        let Some(o) = origin else {
            return Err(Error::Demand(format!(
                "line {lineno}: entry before any Origin header"
            )));
        };
        for part in line.split(';') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let Some((dst, flow)) = part.split_once(':') else {
                return Err(Error::Demand(format!(
                    "line {lineno}: expected 'dest : flow;', got '{part}'"
                )));
            };
            let d: usize = dst.trim().parse().map_err(|_| {
                Error::Demand(format!("line {lineno}: bad destination '{}'", dst.trim()))
            })?;
            let f: f64 = flow.trim().parse().map_err(|_| {
                Error::Demand(format!("line {lineno}: bad flow '{}'", flow.trim()))
            })?;
            if f < 0.0 || !f.is_finite() {
                return Err(Error::Demand(format!(
                    "line {lineno}: negative or non-finite flow {f} for ({o},{d})"
                )));
            }
            if !seen.insert((o, d)) {
                return Err(Error::Demand(format!(
                    "line {lineno}: duplicate entry for ({o},{d})"
                )));
            }
            table.entries.push((o, d, f));
        }
    }

    if let (Some(declared), total) = (table.declared_total, table.total()) {
        let scale = declared.abs().max(1.0);
        if (declared - total).abs() / scale > 1e-9 {
            return Err(Error::Demand(format!(
                "declared total {declared} does not match entry sum {total}"
            )));
        }
    }
    Ok(table)
}

fn strip_keyword<'a>(line: &'a str, kw: &str) -> Option<&'a str> {
    if line.len() >= kw.len() && line[..kw.len()].eq_ignore_ascii_case(kw) {
        Some(&line[kw.len()..])
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
<NUMBER OF ZONES> 3
<TOTAL OD FLOW> 60.0
<END OF METADATA>

~ comment line
Origin 1
    2 : 10.0;  3 : 20.0; ~ trailing comment
Origin  2
    1 : 5.0;
    3 : 0.0;
Origin 3
    1 : 25.0;
";

    #[test]
    fn parses_blocks_comments_and_metadata() {
        let t = parse_trips(SAMPLE).unwrap();
        assert_eq!(t.zones, Some(3));
        assert_eq!(t.declared_total, Some(60.0));
        assert_eq!(t.entries.len(), 5);
        assert_eq!(t.entries[0], (1, 2, 10.0));
        assert_eq!(t.entries[3], (2, 3, 0.0));
        assert_eq!(t.total(), 60.0);
        assert_eq!(t.positive_entries(), 4);
    }

    #[test]
    fn rejects_mismatched_total() {
        let bad = SAMPLE.replace("60.0</", "61.0</").replace(
            "<TOTAL OD FLOW> 60.0",
            "<TOTAL OD FLOW> 61.0",
        );
        let err = parse_trips(&bad).unwrap_err();
        assert!(err.to_string().contains("does not match"));
    }

    #[test]
    fn rejects_entry_without_origin() {
        let err = parse_trips("2 : 10.0;").unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn rejects_duplicates_and_bad_numbers() {
        let dup = "Origin 1\n2 : 1.0;\n2 : 2.0;\n";
        assert!(parse_trips(dup).unwrap_err().to_string().contains("duplicate"));
        let bad = "Origin 1\n2 : twelve;\n";
        assert!(parse_trips(bad).unwrap_err().to_string().contains("bad flow"));
    }
}
