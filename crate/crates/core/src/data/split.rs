//! Split files: one frame per line, `<sequence> <frame index> [l|r]`.
//! Blank lines and `#` comments are ignored.

use std::path::Path;

use crate::error::{bail, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitEntry {
    pub sequence: String,
    pub index: usize,
    pub side: Side,
}

pub fn parse_split(text: &str) -> Result<Vec<SplitEntry>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<_> = line.split_whitespace().collect();
        if !(2..=3).contains(&parts.len()) {
            bail!(
                Data,
                "split line {}: expected `<sequence> <index> [l|r]`, got `{raw}`",
                n + 1
            );
        }
        let index = parts[1].parse().map_err(|_| {
            Error::Data(format!(
                "split line {}: bad frame index `{}`",
                n + 1,
                parts[1]
            ))
        })?;
        let side = match parts.get(2).copied() {
            None | Some("l") => Side::Left,
            Some("r") => Side::Right,
            Some(s) => bail!(Data, "split line {}: side must be l or r, got `{s}`", n + 1),
        };
        out.push(SplitEntry {
            sequence: parts[0].to_string(),
            index,
            side,
        });
    }
    Ok(out)
}

pub fn read_split(path: &Path) -> Result<Vec<SplitEntry>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_split(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sides_comments_and_blanks() {
        let s = "# header\n2011_09_26/drive_0001 5 l\n\nseq 7 r\nseq 8\n";
        let e = parse_split(s).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e[0].sequence, "2011_09_26/drive_0001");
        assert_eq!(e[1].side, Side::Right);
        assert_eq!(e[2].index, 8);
        assert!(parse_split("").unwrap().is_empty());
        assert!(parse_split("seq x").is_err());
        assert!(parse_split("seq 1 q").is_err());
    }
}
