//! Line-oriented dataset files: `src ||| tgt` with space-separated ids.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use dfsq_core::tasks::{format_pair, parse_pair, Pair};

pub fn write_pairs(path: &Path, pairs: &[Pair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format_pair(p));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_pairs(path: &Path) -> Result<Vec<Pair>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_pair(l).map_err(|e| anyhow::anyhow!("{e}")))
        .collect()
}

/// Sources for `decode --input`: either bare id lines or full pair lines,
/// in which case the part before `|||` is used.
pub fn read_sources(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let src_part = line.split("|||").next().unwrap_or("").trim();
            src_part
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>()
                        .with_context(|| format!("bad token id '{tok}'"))
                })
                .collect()
        })
        .collect()
}
