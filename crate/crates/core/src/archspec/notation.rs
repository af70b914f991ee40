//! Parser for the `R x d* d [@ x size ...]` shorthand, e.g. `32x4d @x28x14`.
//!
//! `R` is a number or the literal `N` (one path per channel, so the group
//! count equals the layer width). Each `x size` after `@` marks the stage
//! with that output resolution as collective: 56 -> conv2, 28 -> conv3,
//! 14 -> conv4, 7 -> conv5. `×` may be used for `x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cardinality {
    Fixed(usize),
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notation {
    pub cardinality: Cardinality,
    /// Channels per path, `d*`.
    pub path_width: usize,
    /// Stage names in the order written.
    pub collective_stages: Vec<String>,
}

const STAGE_SIZES: [(usize, &str); 4] = [(56, "conv2"), (28, "conv3"), (14, "conv4"), (7, "conv5")];

struct Cursor<'a> {
    chars: Vec<(usize, char)>,
    at: usize,
    text: &'a str,
}

impl Cursor<'_> {
    fn pos(&self) -> usize {
        self.chars
            .get(self.at)
            .map_or(self.text.chars().count(), |&(i, _)| i)
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.at).map(|&(_, c)| c)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.at += 1;
        }
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            pos: self.pos(),
            reason: reason.into(),
        }
    }

    fn times(&mut self) -> Result<()> {
        self.skip_ws();
        match self.peek() {
            Some('x' | 'X' | '×') => {
                self.at += 1;
                Ok(())
            }
            _ => Err(self.fail("expected 'x'")),
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_ws();
        let start = self.at;
        let pos = self.pos();
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.at += 1;
        }
        if self.at == start {
            return Err(self.fail("expected a number"));
        }
        let digits: String = self.chars[start..self.at].iter().map(|&(_, c)| c).collect();
        match digits.parse::<usize>() {
            Ok(0) | Err(_) => Err(Error::Parse {
                pos,
                reason: format!("{digits} is not a positive count"),
            }),
            Ok(v) => Ok(v),
        }
    }
}

pub fn parse_notation(text: &str) -> Result<Notation> {
    let mut cur = Cursor {
        chars: text.chars().enumerate().collect(),
        at: 0,
        text,
    };
    cur.skip_ws();
    let cardinality = if matches!(cur.peek(), Some('N' | 'n')) {
        cur.at += 1;
        Cardinality::PerLayer
    } else {
        Cardinality::Fixed(cur.number()?)
    };
    cur.times()?;
    let path_width = cur.number()?;
    cur.skip_ws();
    if cur.peek() != Some('d') {
        return Err(cur.fail("expected 'd' after the path width"));
    }
    cur.at += 1;
    cur.skip_ws();
    let mut collective_stages = Vec::new();
    if cur.peek() == Some('@') {
        cur.at += 1;
        loop {
            cur.times()?;
            cur.skip_ws();
            let pos = cur.pos();
            let size = cur.number()?;
            let stage = STAGE_SIZES
                .iter()
                .find(|(s, _)| *s == size)
                .map(|(_, n)| n.to_string())
                .ok_or_else(|| Error::Parse {
                    pos,
                    reason: format!("no stage has output size {size} (expected 56, 28, 14 or 7)"),
                })?;
            if collective_stages.contains(&stage) {
                return Err(Error::Parse {
                    pos,
                    reason: format!("stage {stage} marked twice"),
                });
            }
            collective_stages.push(stage);
            cur.skip_ws();
            if cur.peek().is_none() {
                break;
            }
        }
    }
    if cur.peek().is_some() {
        return Err(cur.fail("unexpected trailing input"));
    }
    Ok(Notation {
        cardinality,
        path_width,
        collective_stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pos(text: &str) -> usize {
        match parse_notation(text) {
            Err(Error::Parse { pos, .. }) => pos,
            other => panic!("{text:?}: {other:?}"),
        }
    }

    #[test]
    fn examples() {
        let n = parse_notation("32x4d @x14").unwrap();
        assert_eq!(n.cardinality, Cardinality::Fixed(32));
        assert_eq!(n.path_width, 4);
        assert_eq!(n.collective_stages, vec!["conv4"]);
        let n = parse_notation("32×4d @×28×14").unwrap();
        assert_eq!(n.collective_stages, vec!["conv3", "conv4"]);
        let n = parse_notation("64x4d").unwrap();
        assert_eq!((n.cardinality, n.path_width), (Cardinality::Fixed(64), 4));
        assert!(n.collective_stages.is_empty());
        let n = parse_notation(" N x 1d ").unwrap();
        assert_eq!((n.cardinality, n.path_width), (Cardinality::PerLayer, 1));
        assert_eq!(
            parse_notation("136x1d").unwrap().cardinality,
            Cardinality::Fixed(136)
        );
    }

    #[test]
    fn errors_carry_positions() {
        assert_eq!(pos(""), 0);
        assert_eq!(pos("32y4d"), 2);
        assert_eq!(pos("32x4"), 4);
        assert_eq!(pos("32x4d @x15"), 8);
        assert_eq!(pos("32x4d @"), 7);
        assert_eq!(pos("32x4d extra"), 6);
        assert_eq!(pos("0x4d"), 0);
        assert_eq!(pos("32x4d @x14x14"), 11);
    }
}
