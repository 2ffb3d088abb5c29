use crate::error::{Error, Result};

/// Base pairs `(i, j)`, `i < j`, of a plain dot-bracket string, ordered by `i`.
///
/// Only `(`, `)` and `.` are accepted; pseudoknot brackets are rejected.
pub fn parse_dot_bracket(s: &str) -> Result<Vec<(usize, usize)>> {
    let mut stack = Vec::new();
    let mut pairs = Vec::new();
    for (pos, ch) in s.chars().enumerate() {
        match ch {
            '(' => stack.push(pos),
            ')' => {
                let open = stack.pop().ok_or(Error::Balance {
                    position: pos,
                    message: "unmatched ')'",
                })?;
                pairs.push((open, pos));
            }
            '.' => {}
            other => {
                return Err(Error::Alphabet {
                    position: pos,
                    found: other,
                    expected: "( ) .",
                })
            }
        }
    }
    if let Some(&open) = stack.first() {
        return Err(Error::Balance {
            position: open,
            message: "unclosed '('",
        });
    }
    pairs.sort_unstable();
    Ok(pairs)
}

/// Inverse of [`parse_dot_bracket`] for a structure of length `len`.
pub fn to_dot_bracket(len: usize, pairs: &[(usize, usize)]) -> String {
    let mut out = vec![b'.'; len];
    for &(i, j) in pairs {
        out[i] = b'(';
        out[j] = b')';
    }
    String::from_utf8(out).expect("ascii")
}
