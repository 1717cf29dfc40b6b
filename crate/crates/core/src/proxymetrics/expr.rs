//! Boolean concept expressions over ground-truth feature indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// AND/OR tree over feature-index leaves (tasks use 1-3 leaves).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoolExpr {
    Leaf(usize),
    And(Box<BoolExpr>, Box<BoolExpr>),
    Or(Box<BoolExpr>, Box<BoolExpr>),
}

impl BoolExpr {
    pub fn and(a: BoolExpr, b: BoolExpr) -> BoolExpr {
        BoolExpr::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: BoolExpr, b: BoolExpr) -> BoolExpr {
        BoolExpr::Or(Box::new(a), Box::new(b))
    }

    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<usize>) {
        match self {
            BoolExpr::Leaf(f) => out.push(*f),
            BoolExpr::And(a, b) | BoolExpr::Or(a, b) => {
                a.collect_leaves(out);
                b.collect_leaves(out);
            }
        }
    }

    pub fn eval(&self, fires: &impl Fn(usize) -> bool) -> bool {
        match self {
            BoolExpr::Leaf(f) => fires(*f),
            BoolExpr::And(a, b) => a.eval(fires) && b.eval(fires),
            BoolExpr::Or(a, b) => a.eval(fires) || b.eval(fires),
        }
    }

    /// Compact text form: `f17`, `(f17&f1098)`, `((f12&f123)|f1037)`.
    pub fn to_text(&self) -> String {
        match self {
            BoolExpr::Leaf(f) => format!("f{f}"),
            BoolExpr::And(a, b) => format!("({}&{})", a.to_text(), b.to_text()),
            BoolExpr::Or(a, b) => format!("({}|{})", a.to_text(), b.to_text()),
        }
    }

    pub fn parse(s: &str) -> Result<BoolExpr> {
        let bytes = s.as_bytes();
        let (expr, used) = Self::parse_inner(bytes, 0)?;
        if used != bytes.len() {
            return Err(Error::format(format!("trailing input in expression `{s}`")));
        }
        Ok(expr)
    }

    fn parse_inner(b: &[u8], mut pos: usize) -> Result<(BoolExpr, usize)> {
        if pos >= b.len() {
            return Err(Error::format("unexpected end of expression"));
        }
        if b[pos] == b'(' {
            let (lhs, after_lhs) = Self::parse_inner(b, pos + 1)?;
            if after_lhs >= b.len() {
                return Err(Error::format("missing operator"));
            }
            let op = b[after_lhs];
            let (rhs, after_rhs) = Self::parse_inner(b, after_lhs + 1)?;
            if after_rhs >= b.len() || b[after_rhs] != b')' {
                return Err(Error::format("missing closing paren"));
            }
            let expr = match op {
                b'&' => BoolExpr::and(lhs, rhs),
                b'|' => BoolExpr::or(lhs, rhs),
                other => {
                    return Err(Error::format(format!("unknown operator `{}`", other as char)))
                }
            };
            Ok((expr, after_rhs + 1))
        } else if b[pos] == b'f' {
            pos += 1;
            let start = pos;
            while pos < b.len() && b[pos].is_ascii_digit() {
                pos += 1;
            }
            if pos == start {
                return Err(Error::format("expected feature index after `f`"));
            }
            let idx: usize = std::str::from_utf8(&b[start..pos])
                .unwrap()
                .parse()
                .map_err(|e| Error::format(format!("bad feature index: {e}")))?;
            Ok((BoolExpr::Leaf(idx), pos))
        } else {
            Err(Error::format(format!("unexpected character `{}`", b[pos] as char)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_matches_definition() {
        let e = BoolExpr::and(BoolExpr::Leaf(3), BoolExpr::Leaf(7));
        let fires = |f: usize| f == 3 || f == 7;
        assert!(e.eval(&fires));
        let fires_one = |f: usize| f == 3;
        assert!(!e.eval(&fires_one));
        let o = BoolExpr::or(BoolExpr::Leaf(3), BoolExpr::Leaf(7));
        assert!(o.eval(&fires_one));
    }

    #[test]
    fn text_roundtrip() {
        let exprs = vec![
            BoolExpr::Leaf(17),
            BoolExpr::and(BoolExpr::Leaf(17), BoolExpr::Leaf(1098)),
            BoolExpr::or(
                BoolExpr::and(BoolExpr::Leaf(12), BoolExpr::Leaf(123)),
                BoolExpr::Leaf(1037),
            ),
        ];
        for e in exprs {
            let s = e.to_text();
            assert_eq!(BoolExpr::parse(&s).unwrap(), e, "{s}");
        }
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(BoolExpr::parse("").is_err());
        assert!(BoolExpr::parse("f").is_err());
        assert!(BoolExpr::parse("(f1&f2").is_err());
        assert!(BoolExpr::parse("f1)").is_err());
        assert!(BoolExpr::parse("(f1^f2)").is_err());
    }
}
