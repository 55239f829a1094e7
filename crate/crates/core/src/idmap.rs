//! Kernel id-map lines (`inside outside count`).

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IdMapEntry {
    pub inside: u32,
    pub outside: u32,
    pub count: u32,
}

impl IdMapEntry {
    pub const fn new(inside: u32, outside: u32, count: u32) -> Self {
        IdMapEntry {
            inside,
            outside,
            count,
        }
    }

    /// The map a process sees when it is not in any child user namespace.
    pub const IDENTITY: IdMapEntry = IdMapEntry::new(0, 0, u32::MAX);
}

impl fmt::Display for IdMapEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.inside, self.outside, self.count)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed id map line {line}: {text:?}")]
pub struct MalformedIdMap {
    pub line: usize,
    pub text: String,
}

/// Parses `/proc/<pid>/uid_map` style text. Blank lines are ignored.
pub fn parse_id_map(text: &str) -> Result<Vec<IdMapEntry>, MalformedIdMap> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = || MalformedIdMap {
                line: i + 1,
                text: l.to_string(),
            };
            let fields: Vec<&str> = l.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<u32>().map_err(|_| bad());
            Ok(IdMapEntry::new(num(fields[0])?, num(fields[1])?, num(fields[2])?))
        })
        .collect()
}

/// Renders entries the way the kernel expects them to be written: one line
/// each, in a single buffer.
pub fn format_id_map(entries: &[IdMapEntry]) -> String {
    entries.iter().map(|e| format!("{e}\n")).collect()
}

pub fn is_identity_map(entries: &[IdMapEntry]) -> bool {
    entries == [IdMapEntry::IDENTITY]
}

/// Translates an inside id to the outside id, if mapped.
pub fn map_to_outside(entries: &[IdMapEntry], inside: u32) -> Option<u32> {
    entries.iter().find_map(|e| {
        let delta = inside.checked_sub(e.inside)?;
        (delta < e.count).then(|| e.outside + delta)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_kernel_columns() {
        let m = parse_id_map("         0       1000          1\n").unwrap();
        assert_eq!(m, vec![IdMapEntry::new(0, 1000, 1)]);
        let m = parse_id_map("0 0 4294967295").unwrap();
        assert!(is_identity_map(&m));
        assert!(parse_id_map("0 1000").is_err());
        assert!(parse_id_map("0 x 1").is_err());
    }

    #[test]
    fn formats_one_line_per_entry() {
        let s = format_id_map(&[IdMapEntry::new(0, 1000, 1), IdMapEntry::new(1, 100000, 65536)]);
        assert_eq!(s, "0 1000 1\n1 100000 65536\n");
        assert_eq!(parse_id_map(&s).unwrap().len(), 2);
    }

    #[test]
    fn maps_ids_through_ranges() {
        let m = [IdMapEntry::new(0, 1000, 1), IdMapEntry::new(1, 100000, 65536)];
        assert_eq!(map_to_outside(&m, 0), Some(1000));
        assert_eq!(map_to_outside(&m, 5), Some(100004));
        assert_eq!(map_to_outside(&m, 65537), None);
    }
}
