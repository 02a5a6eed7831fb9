//! Recursive-descent parser for the constraint surface syntax.
//!
//! Grammar:
//!
//! ```text
//! expr      := term (OR term)*
//! term      := factor (AND factor)*
//! factor    := NOT factor | '(' expr ')' | predicate | TRUE
//! predicate := ident op literal
//!            | ident IN '{' literal (',' literal)* '}'
//!            | EXISTS ident
//! op        := = | != | < | <= | > | >=
//! literal   := bare token | '"' escaped string '"'
//! ```
//!
//! Keywords are uppercase. `TRUE` names the unconstrained expression so that
//! every expression tree has a textual form.

use thiserror::Error;

use super::{CmpOp, ConstraintExpr, Predicate, MAX_EXPR_DEPTH};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("constraint parse error at byte {position}: {message}")]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

/// Parses a constraint expression from its text form.
pub fn parse_constraint(text: &str) -> Result<ConstraintExpr, ParseError> {
    let mut p = Parser { src: text, pos: 0 };
    p.skip_ws();
    let expr = p.expr(0)?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.err("trailing input after expression"));
    }
    Ok(expr)
}

impl<'a> Parser<'a> {
    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError {
            position: self.pos,
            message: message.into(),
        }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn eat(&mut self, token: &str) -> bool {
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    /// Consumes `word` only when it is followed by a non-identifier
    /// character, so `ORDER` is not read as `OR DER`.
    fn eat_keyword(&mut self, word: &str) -> bool {
        let rest = self.rest();
        if !rest.starts_with(word) {
            return false;
        }
        match rest[word.len()..].chars().next() {
            Some(c) if c.is_ascii_alphanumeric() || c == '_' => false,
            _ => {
                self.pos += word.len();
                true
            }
        }
    }

    fn expr(&mut self, depth: usize) -> Result<ConstraintExpr, ParseError> {
        if depth > MAX_EXPR_DEPTH {
            return Err(self.err(format!("expression depth exceeds {MAX_EXPR_DEPTH}")));
        }
        let first = self.term(depth + 1)?;
        let mut children = vec![first];
        loop {
            self.skip_ws();
            if !self.eat_keyword("OR") {
                break;
            }
            self.skip_ws();
            children.push(self.term(depth + 1)?);
        }
        if children.len() == 1 {
            Ok(children.pop().expect("one child"))
        } else {
            ConstraintExpr::or(children).map_err(|e| self.err(e.to_string()))
        }
    }

    fn term(&mut self, depth: usize) -> Result<ConstraintExpr, ParseError> {
        if depth > MAX_EXPR_DEPTH {
            return Err(self.err(format!("expression depth exceeds {MAX_EXPR_DEPTH}")));
        }
        let first = self.factor(depth + 1)?;
        let mut children = vec![first];
        loop {
            self.skip_ws();
            if !self.eat_keyword("AND") {
                break;
            }
            self.skip_ws();
            children.push(self.factor(depth + 1)?);
        }
        if children.len() == 1 {
            Ok(children.pop().expect("one child"))
        } else {
            ConstraintExpr::and(children).map_err(|e| self.err(e.to_string()))
        }
    }

    fn factor(&mut self, depth: usize) -> Result<ConstraintExpr, ParseError> {
        if depth > MAX_EXPR_DEPTH {
            return Err(self.err(format!("expression depth exceeds {MAX_EXPR_DEPTH}")));
        }
        self.skip_ws();
        if self.eat_keyword("NOT") {
            self.skip_ws();
            let child = self.factor(depth + 1)?;
            return ConstraintExpr::not(child).map_err(|e| self.err(e.to_string()));
        }
        if self.eat_keyword("TRUE") {
            return Ok(ConstraintExpr::True);
        }
        if self.eat("(") {
            let inner = self.expr(depth + 1)?;
            self.skip_ws();
            if !self.eat(")") {
                return Err(self.err("expected ')'"));
            }
            return Ok(inner);
        }
        if self.eat_keyword("EXISTS") {
            self.skip_ws();
            let attr = self.ident()?;
            let p = Predicate::new(attr, CmpOp::Exists, vec![])
                .map_err(|e| self.err(e.to_string()))?;
            return Ok(ConstraintExpr::Leaf(p));
        }
        let attr = self.ident()?;
        self.skip_ws();
        if self.eat_keyword("IN") {
            self.skip_ws();
            if !self.eat("{") {
                return Err(self.err("expected '{' after IN"));
            }
            let mut constants = Vec::new();
            loop {
                self.skip_ws();
                constants.push(self.literal()?);
                self.skip_ws();
                if self.eat(",") {
                    continue;
                }
                if self.eat("}") {
                    break;
                }
                return Err(self.err("expected ',' or '}' in IN set"));
            }
            let p = Predicate::new(attr, CmpOp::In, constants)
                .map_err(|e| self.err(e.to_string()))?;
            return Ok(ConstraintExpr::Leaf(p));
        }
        let op = self.cmp_op()?;
        self.skip_ws();
        let lit = self.literal()?;
        let p = Predicate::new(attr, op, vec![lit]).map_err(|e| self.err(e.to_string()))?;
        Ok(ConstraintExpr::Leaf(p))
    }

    fn cmp_op(&mut self) -> Result<CmpOp, ParseError> {
        // Two-character operators first.
        for (tok, op) in [
            ("!=", CmpOp::Neq),
            ("<=", CmpOp::Le),
            (">=", CmpOp::Ge),
            ("<", CmpOp::Lt),
            (">", CmpOp::Gt),
            ("=", CmpOp::Eq),
        ] {
            if self.eat(tok) {
                return Ok(op);
            }
        }
        Err(self.err("expected comparison operator"))
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        let rest = self.rest();
        let mut chars = rest.char_indices();
        match chars.next() {
            Some((_, c)) if c.is_ascii_alphabetic() || c == '_' => {}
            _ => return Err(self.err("expected identifier")),
        }
        let end = rest
            .char_indices()
            .find(|(_, c)| !(c.is_ascii_alphanumeric() || *c == '_'))
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        let ident = &rest[..end];
        if matches!(ident, "AND" | "OR" | "NOT" | "IN" | "EXISTS" | "TRUE") {
            return Err(self.err(format!("keyword {ident} cannot be an identifier")));
        }
        self.pos += end;
        Ok(ident.to_string())
    }

    fn literal(&mut self) -> Result<String, ParseError> {
        if self.peek() == Some('"') {
            self.pos += 1;
            let mut out = String::new();
            let mut chars = self.rest().char_indices();
            loop {
                match chars.next() {
                    None => return Err(self.err("unterminated string literal")),
                    Some((i, '"')) => {
                        self.pos += i + 1;
                        return Ok(out);
                    }
                    Some((_, '\\')) => match chars.next() {
                        Some((_, '"')) => out.push('"'),
                        Some((_, '\\')) => out.push('\\'),
                        _ => return Err(self.err("bad escape in string literal")),
                    },
                    Some((_, c)) => out.push(c),
                }
            }
        }
        let rest = self.rest();
        let end = rest
            .char_indices()
            .find(|(_, c)| !(c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-' | '+')))
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        if end == 0 {
            return Err(self.err("expected literal"));
        }
        let lit = rest[..end].to_string();
        self.pos += end;
        Ok(lit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contextml::{ContextElement, EntityRef, ParamValue};
    use crate::matching::eval_expr;

    fn element(atoms: &[(&str, &str)]) -> ContextElement {
        ContextElement::new(
            "p",
            EntityRef::new("username", "alice").unwrap(),
            "s",
            atoms
                .iter()
                .map(|(n, v)| ParamValue::atom(*n, *v))
                .collect(),
            0,
            1_000_000,
            100,
        )
        .unwrap()
    }

    #[test]
    fn parses_age_gt_25() {
        let expr = parse_constraint("age > 25").unwrap();
        match &expr {
            ConstraintExpr::Leaf(p) => {
                assert_eq!(p.attr(), "age");
                assert_eq!(p.op(), CmpOp::Gt);
                assert_eq!(p.constants(), ["25".to_string()]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn contradiction_evaluates_false_everywhere() {
        let expr = parse_constraint("EXISTS x AND NOT EXISTS x").unwrap();
        assert!(!eval_expr(&expr, &element(&[])));
        assert!(!eval_expr(&expr, &element(&[("x", "1")])));
        assert!(!eval_expr(&expr, &element(&[("x", "1"), ("y", "2")])));
    }

    #[test]
    fn structural_parse_with_or_root() {
        let expr = parse_constraint("a = 1 OR (b < 2 AND c IN {x,y})").unwrap();
        match &expr {
            ConstraintExpr::Or(children) => {
                assert_eq!(children.len(), 2);
                assert!(matches!(children[0], ConstraintExpr::Leaf(_)));
                match &children[1] {
                    ConstraintExpr::And(inner) => {
                        assert_eq!(inner.len(), 2);
                    }
                    other => panic!("unexpected {other:?}"),
                }
            }
            other => panic!("unexpected {other:?}"),
        }
        // Three leaves in total.
        fn count_leaves(e: &ConstraintExpr) -> usize {
            match e {
                ConstraintExpr::Leaf(_) => 1,
                ConstraintExpr::True => 0,
                ConstraintExpr::Not(c) => count_leaves(c),
                ConstraintExpr::And(cs) | ConstraintExpr::Or(cs) => {
                    cs.iter().map(count_leaves).sum()
                }
            }
        }
        assert_eq!(count_leaves(&expr), 3);
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = parse_constraint("age >").unwrap_err();
        assert!(err.position >= 5, "{err:?}");
        assert!(parse_constraint("").is_err());
        assert!(parse_constraint("a = 1 OR").is_err());
        assert!(parse_constraint("(a = 1").is_err());
        assert!(parse_constraint("a IN {}").is_err());
    }

    #[test]
    fn keyword_prefix_identifiers_parse() {
        // ORDER starts with OR but is an identifier.
        let expr = parse_constraint("ORDER = 5 OR NOTICE > 2");
        assert!(expr.is_ok(), "{expr:?}");
    }

    #[test]
    fn round_trips_canonical_text() {
        let samples = [
            "age > 25",
            "EXISTS x AND NOT EXISTS x",
            "a = 1 OR (b < 2 AND c IN {x,y})",
            "NOT (a = 1 AND b = 2)",
            "a IN {one,two,three}",
            "name = \"hello world\"",
            "TRUE AND age > 25",
        ];
        for s in samples {
            let expr = parse_constraint(s).unwrap();
            let text = expr.to_text();
            let reparsed = parse_constraint(&text).unwrap();
            assert_eq!(expr, reparsed, "round trip failed for {s} -> {text}");
        }
    }

    #[test]
    fn quoted_literals_with_escapes() {
        let expr = parse_constraint(r#"a = "say \"hi\" \\ there""#).unwrap();
        match &expr {
            ConstraintExpr::Leaf(p) => {
                assert_eq!(p.constants()[0], "say \"hi\" \\ there");
            }
            other => panic!("unexpected {other:?}"),
        }
        let text = expr.to_text();
        assert_eq!(parse_constraint(&text).unwrap(), expr);
    }
}
