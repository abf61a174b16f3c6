//! Fixed token inventory of the toy world.

use std::fmt;

use thiserror::Error;

pub const N_DIGITS: usize = 10;
pub const N_SLOTS: usize = 16;

pub const SOLVE: usize = 10;
pub const PROPOSE: usize = 11;
pub const CHECK: usize = 12;
pub const DOC: usize = 13;
pub const Q: usize = 14;
pub const A: usize = 15;
pub const SEP: usize = 16;
pub const EOS: usize = 17;
pub const SLOT0: usize = 18;
pub const NUL: usize = SLOT0 + N_SLOTS;

pub const VOCAB_SIZE: usize = NUL + 1;

const MARKERS: [&str; 8] = ["<SOLVE>", "<PROPOSE>", "<CHECK>", "<DOC>", "<Q>", "<A>", "<SEP>", "<EOS>"];

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown toy token `{0}`")]
pub struct UnknownToken(pub String);

pub fn is_digit(t: usize) -> bool {
    t < N_DIGITS
}

pub fn is_slot(t: usize) -> bool {
    (SLOT0..SLOT0 + N_SLOTS).contains(&t)
}

pub fn slot_token(slot: u8) -> usize {
    assert!((slot as usize) < N_SLOTS, "slot out of range");
    SLOT0 + slot as usize
}

pub fn slot_of(t: usize) -> Option<u8> {
    is_slot(t).then(|| (t - SLOT0) as u8)
}

pub fn token_name(t: usize) -> String {
    match t {
        0..=9 => t.to_string(),
        SOLVE..=EOS => MARKERS[t - SOLVE].to_string(),
        _ if is_slot(t) => format!("s{}", t - SLOT0),
        NUL => "<NUL>".to_string(),
        _ => panic!("token id {t} out of range"),
    }
}

pub fn token_id(name: &str) -> Result<usize, UnknownToken> {
    if let Some(i) = MARKERS.iter().position(|m| *m == name) {
        return Ok(SOLVE + i);
    }
    if name == "<NUL>" {
        return Ok(NUL);
    }
    if name.len() == 1 {
        if let Some(d) = name.chars().next().and_then(|c| c.to_digit(10)) {
            return Ok(d as usize);
        }
    }
    if let Some(rest) = name.strip_prefix('s') {
        if let Ok(n) = rest.parse::<usize>() {
            if n < N_SLOTS && rest == n.to_string() {
                return Ok(SLOT0 + n);
            }
        }
    }
    Err(UnknownToken(name.to_string()))
}

pub fn tokenize(text: &str) -> Result<Vec<usize>, UnknownToken> {
    text.split_whitespace().map(token_id).collect()
}

pub fn render(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| token_name(t)).collect::<Vec<_>>().join(" ")
}

/// Digit tokens for a non-negative integer, most significant first.
pub fn number_tokens(value: u32) -> Vec<usize> {
    value.to_string().bytes().map(|b| (b - b'0') as usize).collect()
}

/// Wrapper for printing token slices.
pub struct Tokens<'a>(pub &'a [usize]);

impl fmt::Display for Tokens<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render(self.0))
    }
}
