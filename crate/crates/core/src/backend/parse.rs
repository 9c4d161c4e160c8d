//! Parsing of numbered-list replies. Templates ask for N items; replies come
//! back as `1. item` / `2) item` lines.

use super::BackendError;

/// Extracts items from a numbered-list reply, stripping `k.` / `k)` prefixes
/// and surrounding whitespace. Lines without numbering and blank lines are
/// ignored. Errors with [`BackendError::EmptyList`] if no items are found.
pub fn parse_numbered_list(reply: &str) -> Result<Vec<String>, BackendError> {
    let mut items = Vec::new();
    for line in reply.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let digits: usize = line.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits == 0 {
            continue;
        }
        let rest = &line[digits..];
        let rest = match rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            Some(r) => r,
            None => continue,
        };
        let item = rest.trim();
        if !item.is_empty() {
            items.push(item.to_string());
        }
    }
    if items.is_empty() {
        Err(BackendError::EmptyList)
    } else {
        Ok(items)
    }
}
