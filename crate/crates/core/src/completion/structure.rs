//! Textual description of a completion generator's layer schedule.
//!
//! ```text
//! structure := segment "-" segment [ "-" segment ]
//! segment   := count "(" kind ")"
//! kind      := "C" | "CM"
//! ```
//!
//! Three segments give the down-sampling, residual and up-sampling stages.
//! Two segments omit the residual stage. Down and up counts must agree so
//! that every encoder stage has a decoder partner.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::masked::ConvKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Segment {
    pub count: usize,
    pub kind: ConvKind,
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.count, self.kind.token())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    pub down: Segment,
    /// `None` for the two-segment form.
    pub residual: Option<Segment>,
    pub up: Segment,
}

pub const DEFAULT_STRUCTURE: &str = "4(CM)-6(CM)-4(CM)";

impl Default for NetworkSpec {
    fn default() -> Self {
        DEFAULT_STRUCTURE.parse().expect("default structure parses")
    }
}

impl NetworkSpec {
    /// Number of stride-2 stages on each side.
    pub fn depth(&self) -> usize {
        self.down.count
    }

    pub fn residual_blocks(&self) -> usize {
        self.residual.map_or(0, |s| s.count)
    }

    pub fn residual_kind(&self) -> ConvKind {
        self.residual.map_or(self.down.kind, |s| s.kind)
    }

    /// True when every layer is a masked convolution.
    pub fn all_masked(&self) -> bool {
        self.down.kind == ConvKind::CM
            && self.up.kind == ConvKind::CM
            && (self.residual_blocks() == 0 || self.residual_kind() == ConvKind::CM)
    }

    /// Same counts with every kind replaced by `kind`.
    pub fn with_kind(&self, kind: ConvKind) -> NetworkSpec {
        let set = |s: Segment| Segment { count: s.count, kind };
        NetworkSpec {
            down: set(self.down),
            residual: self.residual.map(set),
            up: set(self.up),
        }
    }

    pub fn parse(text: &str) -> Result<NetworkSpec> {
        Parser { s: text.as_bytes(), pos: 0 }.spec()
    }
}

const STAGES: [&str; 3] = ["down", "residual", "up"];

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, position: usize, message: String) -> Error {
        Error::Parse { position, message }
    }

    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn segment(&mut self, index: usize) -> Result<(Segment, usize)> {
        let start = self.pos;
        let name = |i: usize| format!("segment {} ({})", i + 1, STAGES.get(i).copied().unwrap_or("extra"));
        if self.peek() == Some(b'-') {
            return Err(self.err(start, format!("{}: negative count", name(index))));
        }
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(start, format!("{}: expected a layer count", name(index))));
        }
        let digits = std::str::from_utf8(&self.s[start..self.pos]).expect("ascii digits");
        let count: usize = digits
            .parse()
            .map_err(|_| self.err(start, format!("{}: count {digits} is too large", name(index))))?;
        if self.peek() != Some(b'(') {
            return Err(self.err(self.pos, format!("{}: expected '(' after the count", name(index))));
        }
        self.pos += 1;
        let kind_start = self.pos;
        while matches!(self.peek(), Some(c) if c != b')' && c != b'-') {
            self.pos += 1;
        }
        let token = String::from_utf8_lossy(&self.s[kind_start..self.pos]).into_owned();
        let kind = match token.as_str() {
            "C" => ConvKind::C,
            "CM" => ConvKind::CM,
            _ => {
                return Err(self.err(
                    kind_start,
                    format!("{}: unknown layer kind {token:?} (expected C or CM)", name(index)),
                ))
            }
        };
        if self.peek() != Some(b')') {
            return Err(self.err(self.pos, format!("{}: expected ')'", name(index))));
        }
        self.pos += 1;
        Ok((Segment { count, kind }, start))
    }

    fn spec(&mut self) -> Result<NetworkSpec> {
        let mut segs = Vec::with_capacity(3);
        loop {
            if segs.len() == 3 {
                return Err(self.err(self.pos, "at most 3 segments are allowed".into()));
            }
            segs.push(self.segment(segs.len())?);
            match self.peek() {
                None => break,
                Some(b'-') => self.pos += 1,
                Some(c) => {
                    return Err(self.err(
                        self.pos,
                        format!("unexpected character {:?} after segment {}", c as char, segs.len()),
                    ))
                }
            }
        }
        if segs.len() < 2 {
            return Err(self.err(self.pos, "expected at least 2 segments".into()));
        }
        let (down, _) = segs[0];
        let (up, up_pos) = *segs.last().expect("nonempty");
        if down.count != up.count {
            let stage = if segs.len() == 3 { "segment 3 (up)" } else { "segment 2 (up)" };
            return Err(self.err(
                up_pos,
                format!("{stage}: up count {} differs from down count {}", up.count, down.count),
            ));
        }
        Ok(NetworkSpec {
            down,
            residual: (segs.len() == 3).then(|| segs[1].0),
            up,
        })
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NetworkSpec::parse(s)
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.residual {
            Some(r) => write!(f, "{}-{}-{}", self.down, r, self.up),
            None => write!(f, "{}-{}", self.down, self.up),
        }
    }
}
