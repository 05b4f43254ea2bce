//! Shared scanning for `Pair <n>:` structured model responses.

use alloc::string::String;
use alloc::vec::Vec;

const DECORATION: &[char] = &['*', '#', '-', '>', '`', '_'];

/// If `line` opens a `Pair <n>:` section, return `n` and the remainder of the line.
pub(crate) fn pair_header(line: &str) -> Option<(usize, &str)> {
    let s = line.trim().trim_start_matches(|c: char| DECORATION.contains(&c) || c.is_whitespace());
    let head = s.get(..4)?;
    if !head.eq_ignore_ascii_case("pair") {
        return None;
    }
    let rest = s[4..].trim_start();
    let rest = rest.strip_prefix('#').or_else(|| rest.strip_prefix('[')).unwrap_or(rest);
    let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let index: usize = rest[..digits].parse().ok()?;
    let rest = rest[digits..].strip_prefix(']').unwrap_or(&rest[digits..]);
    let rest = rest.trim_start_matches(|c: char| c == '*' || c.is_whitespace());
    let body = rest.strip_prefix(':')?;
    Some((index, body.trim_start_matches(|c: char| c == '*' || c.is_whitespace())))
}

/// Split a response into `(index, body)` sections in order of appearance.
/// Lines before the first header are ignored; lines after a header are
/// appended to its body.
pub(crate) fn pair_sections(raw: &str) -> Vec<(usize, String)> {
    let mut sections: Vec<(usize, String)> = Vec::new();
    for line in raw.lines() {
        if let Some((index, body)) = pair_header(line) {
            sections.push((index, String::from(body.trim_end())));
        } else if let Some((_, body)) = sections.last_mut() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if !body.is_empty() {
                body.push('\n');
            }
            body.push_str(line);
        }
    }
    sections
}
