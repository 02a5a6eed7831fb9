//! Subscription constraint language and matcher.
//!
//! A subscription carries a stateless logical expression over notification
//! attributes. Evaluation is total: missing attributes make the individual
//! predicate false (never an error), and Boolean structure is evaluated on
//! top of that.

mod parser;

pub use parser::{parse_constraint, ParseError};

use std::fmt;

use thiserror::Error;

use crate::contextml::{ContextElement, EntityRef, ParamValue};

/// Maximum depth of a [`ConstraintExpr`] tree.
pub const MAX_EXPR_DEPTH: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConstraintError {
    #[error("predicate invalid: {0}")]
    BadPredicate(String),
    #[error("expression invalid: {0}")]
    BadExpr(String),
    #[error("subscription invalid: {0}")]
    BadSubscription(String),
}

/// Comparison operator of a single predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CmpOp {
    Eq,
    Neq,
    Lt,
    Le,
    Gt,
    Ge,
    In,
    Exists,
}

impl CmpOp {
    pub fn symbol(&self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Neq => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::In => "IN",
            CmpOp::Exists => "EXISTS",
        }
    }
}

/// One attribute constraint `(attr, op, constants)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Predicate {
    attr: String,
    op: CmpOp,
    constants: Vec<String>,
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl Predicate {
    /// `EXISTS` takes no constants, `IN` at least one, every other operator
    /// exactly one. Attribute names are identifiers so the constraint text
    /// form stays parseable.
    pub fn new(
        attr: impl Into<String>,
        op: CmpOp,
        constants: Vec<String>,
    ) -> Result<Self, ConstraintError> {
        let attr = attr.into();
        if !is_ident(&attr) {
            return Err(ConstraintError::BadPredicate(format!(
                "attribute name {attr:?} is not an identifier"
            )));
        }
        let arity_ok = match op {
            CmpOp::Exists => constants.is_empty(),
            CmpOp::In => !constants.is_empty(),
            _ => constants.len() == 1,
        };
        if !arity_ok {
            return Err(ConstraintError::BadPredicate(format!(
                "operator {} given {} constants",
                op.symbol(),
                constants.len()
            )));
        }
        Ok(Predicate { attr, op, constants })
    }

    pub fn attr(&self) -> &str {
        &self.attr
    }

    pub fn op(&self) -> CmpOp {
        self.op
    }

    pub fn constants(&self) -> &[String] {
        &self.constants
    }
}

/// Boolean expression tree over predicates. `True` is the unconstrained
/// expression (a subscription document with no constraint child).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ConstraintExpr {
    True,
    Leaf(Predicate),
    Not(Box<ConstraintExpr>),
    And(Vec<ConstraintExpr>),
    Or(Vec<ConstraintExpr>),
}

impl ConstraintExpr {
    pub fn and(children: Vec<ConstraintExpr>) -> Result<Self, ConstraintError> {
        Self::nary(children, true)
    }

    pub fn or(children: Vec<ConstraintExpr>) -> Result<Self, ConstraintError> {
        Self::nary(children, false)
    }

    fn nary(children: Vec<ConstraintExpr>, is_and: bool) -> Result<Self, ConstraintError> {
        if children.len() < 2 {
            return Err(ConstraintError::BadExpr(
                "And/Or need at least two children".into(),
            ));
        }
        let expr = if is_and {
            ConstraintExpr::And(children)
        } else {
            ConstraintExpr::Or(children)
        };
        if expr.depth() > MAX_EXPR_DEPTH {
            return Err(ConstraintError::BadExpr(format!(
                "expression depth exceeds {MAX_EXPR_DEPTH}"
            )));
        }
        Ok(expr)
    }

    pub fn not(child: ConstraintExpr) -> Result<Self, ConstraintError> {
        let expr = ConstraintExpr::Not(Box::new(child));
        if expr.depth() > MAX_EXPR_DEPTH {
            return Err(ConstraintError::BadExpr(format!(
                "expression depth exceeds {MAX_EXPR_DEPTH}"
            )));
        }
        Ok(expr)
    }

    pub fn depth(&self) -> usize {
        match self {
            ConstraintExpr::True | ConstraintExpr::Leaf(_) => 1,
            ConstraintExpr::Not(c) => 1 + c.depth(),
            ConstraintExpr::And(cs) | ConstraintExpr::Or(cs) => {
                1 + cs.iter().map(|c| c.depth()).max().unwrap_or(0)
            }
        }
    }

    /// Canonical text form in the constraint surface grammar. Parsing the
    /// result yields a structurally equal tree.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.render(&mut out, 0);
        out
    }

    // prec: 0 = expr (Or level), 1 = term (And level), 2 = factor.
    fn render(&self, out: &mut String, prec: u8) {
        let own = match self {
            ConstraintExpr::Or(_) => 0,
            ConstraintExpr::And(_) => 1,
            _ => 2,
        };
        let need_parens = own < prec;
        if need_parens {
            out.push('(');
        }
        match self {
            ConstraintExpr::True => out.push_str("TRUE"),
            ConstraintExpr::Leaf(p) => render_predicate(p, out),
            ConstraintExpr::Not(c) => {
                out.push_str("NOT ");
                c.render(out, 2);
            }
            ConstraintExpr::And(cs) => {
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        out.push_str(" AND ");
                    }
                    c.render(out, 2);
                }
            }
            ConstraintExpr::Or(cs) => {
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        out.push_str(" OR ");
                    }
                    c.render(out, 1);
                }
            }
        }
        if need_parens {
            out.push(')');
        }
    }
}

impl fmt::Display for ConstraintExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn is_bare_literal(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-' | '+'))
        && !matches!(s, "AND" | "OR" | "NOT" | "IN" | "EXISTS" | "TRUE")
}

fn render_literal(lit: &str, out: &mut String) {
    if is_bare_literal(lit) {
        out.push_str(lit);
    } else {
        out.push('"');
        for c in lit.chars() {
            match c {
                '"' => out.push_str("\\\""),
                '\\' => out.push_str("\\\\"),
                _ => out.push(c),
            }
        }
        out.push('"');
    }
}

fn render_predicate(p: &Predicate, out: &mut String) {
    match p.op {
        CmpOp::Exists => {
            out.push_str("EXISTS ");
            out.push_str(&p.attr);
        }
        CmpOp::In => {
            out.push_str(&p.attr);
            out.push_str(" IN {");
            for (i, c) in p.constants.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                render_literal(c, out);
            }
            out.push('}');
        }
        op => {
            out.push_str(&p.attr);
            out.push(' ');
            out.push_str(op.symbol());
            out.push(' ');
            render_literal(&p.constants[0], out);
        }
    }
}

/// Subscription priority; LOW routes through the bulk queue when the broker
/// operates in bulk mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Priority {
    #[default]
    High,
    Low,
}

impl Priority {
    pub fn as_str(&self) -> &'static str {
        match self {
            Priority::High => "HIGH",
            Priority::Low => "LOW",
        }
    }

    pub fn parse(s: &str) -> Option<Priority> {
        match s {
            "HIGH" => Some(Priority::High),
            "LOW" => Some(Priority::Low),
            _ => None,
        }
    }
}

/// How matched notifications travel back to the subscriber. Direct call
/// back skips broker routing and makes the data non-cacheable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CallbackMode {
    #[default]
    BrokerRouted,
    Direct,
}

impl CallbackMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CallbackMode::BrokerRouted => "BROKER_ROUTED",
            CallbackMode::Direct => "DIRECT",
        }
    }

    pub fn parse(s: &str) -> Option<CallbackMode> {
        match s {
            "BROKER_ROUTED" => Some(CallbackMode::BrokerRouted),
            "DIRECT" => Some(CallbackMode::Direct),
            _ => None,
        }
    }
}

/// A subscription σ: scope-targeted constraint expression with expiry,
/// priority, callback mode and one-time flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Subscription {
    pub id: String,
    pub subscriber_id: String,
    pub scope: String,
    pub entity: Option<EntityRef>,
    pub expr: ConstraintExpr,
    pub expiry: u64,
    pub priority: Priority,
    pub callback: CallbackMode,
    pub one_time: bool,
}

impl Subscription {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        subscriber_id: impl Into<String>,
        scope: impl Into<String>,
        entity: Option<EntityRef>,
        expr: ConstraintExpr,
        expiry: u64,
        now: u64,
    ) -> Result<Self, ConstraintError> {
        let id = id.into();
        let subscriber_id = subscriber_id.into();
        let scope = scope.into();
        if scope.is_empty() {
            return Err(ConstraintError::BadSubscription("scope is empty".into()));
        }
        if id.is_empty() || subscriber_id.is_empty() {
            return Err(ConstraintError::BadSubscription(
                "id and subscriberId must be non-empty".into(),
            ));
        }
        if expiry <= now {
            return Err(ConstraintError::BadSubscription(format!(
                "expiry {expiry} not in the future at creation time {now}"
            )));
        }
        Ok(Subscription {
            id,
            subscriber_id,
            scope,
            entity,
            expr,
            expiry,
            priority: Priority::default(),
            callback: CallbackMode::default(),
            one_time: false,
        })
    }

    /// Reconstructs a subscription without the creation-time expiry check.
    /// Used when decoding documents, where the subscription may legitimately
    /// already be expired (trace replay).
    pub fn from_parts(
        id: impl Into<String>,
        subscriber_id: impl Into<String>,
        scope: impl Into<String>,
        entity: Option<EntityRef>,
        expr: ConstraintExpr,
        expiry: u64,
    ) -> Result<Self, ConstraintError> {
        let id = id.into();
        let subscriber_id = subscriber_id.into();
        let scope = scope.into();
        if scope.is_empty() {
            return Err(ConstraintError::BadSubscription("scope is empty".into()));
        }
        if id.is_empty() || subscriber_id.is_empty() {
            return Err(ConstraintError::BadSubscription(
                "id and subscriberId must be non-empty".into(),
            ));
        }
        Ok(Subscription {
            id,
            subscriber_id,
            scope,
            entity,
            expr,
            expiry,
            priority: Priority::default(),
            callback: CallbackMode::default(),
            one_time: false,
        })
    }

    pub fn with_priority(mut self, p: Priority) -> Self {
        self.priority = p;
        self
    }

    pub fn with_callback(mut self, c: CallbackMode) -> Self {
        self.callback = c;
        self
    }

    pub fn one_time(mut self) -> Self {
        self.one_time = true;
        self
    }

    pub fn expired(&self, now: u64) -> bool {
        self.expiry <= now
    }
}

/// Looks up `attr` among the top-level atoms of `data`. Nested structure and
/// array members are not addressable; the constraint language is flat.
fn resolve_atom<'a>(attr: &str, data: &'a [ParamValue]) -> Option<&'a str> {
    data.iter().find_map(|p| match p {
        ParamValue::Atom { name, value } if name == attr => Some(value.as_str()),
        _ => None,
    })
}

/// Evaluates one predicate against a notification data part. Total: a data
/// part without the named attribute makes every operator false, including
/// `EXISTS` (negation is handled at the expression level).
pub fn eval_predicate(p: &Predicate, data: &[ParamValue]) -> bool {
    let Some(value) = resolve_atom(p.attr(), data) else {
        return false;
    };
    match p.op {
        CmpOp::Exists => true,
        CmpOp::Eq => value == p.constants[0],
        CmpOp::Neq => value != p.constants[0],
        CmpOp::In => p.constants.iter().any(|c| c == value),
        CmpOp::Lt | CmpOp::Le | CmpOp::Gt | CmpOp::Ge => {
            let ord = compare_values(value, &p.constants[0]);
            match p.op {
                CmpOp::Lt => ord == std::cmp::Ordering::Less,
                CmpOp::Le => ord != std::cmp::Ordering::Greater,
                CmpOp::Gt => ord == std::cmp::Ordering::Greater,
                CmpOp::Ge => ord != std::cmp::Ordering::Less,
                _ => unreachable!(),
            }
        }
    }
}

/// Numeric comparison when both sides parse as decimal numbers, otherwise
/// lexicographic. Atom values are strings; `age > 25` needs the numeric
/// reading.
fn compare_values(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal),
        _ => a.cmp(b),
    }
}

/// Evaluates σ's expression against a notification: standard Boolean
/// semantics over [`eval_predicate`] results. Pure and stateless.
pub fn eval_expr(expr: &ConstraintExpr, v: &ContextElement) -> bool {
    eval_expr_data(expr, &v.data)
}

pub fn eval_expr_data(expr: &ConstraintExpr, data: &[ParamValue]) -> bool {
    match expr {
        ConstraintExpr::True => true,
        ConstraintExpr::Leaf(p) => eval_predicate(p, data),
        ConstraintExpr::Not(c) => !eval_expr_data(c, data),
        ConstraintExpr::And(cs) => cs.iter().all(|c| eval_expr_data(c, data)),
        ConstraintExpr::Or(cs) => cs.iter().any(|c| eval_expr_data(c, data)),
    }
}

/// Full match test: σ must not be expired, scopes must agree, the optional
/// entity gate must pass, then the expression decides.
pub fn matches(sub: &Subscription, v: &ContextElement, now: u64) -> bool {
    if sub.expired(now) {
        return false;
    }
    if sub.scope != v.scope {
        return false;
    }
    if let Some(entity) = &sub.entity {
        if *entity != v.entity {
            return false;
        }
    }
    eval_expr(&sub.expr, v)
}

/// Linear-scan oracle for the matching set N(σ): exactly the candidates for
/// which [`matches`] holds, in input order. Used as the reference for broker
/// routing equivalence tests.
pub fn matching_set_oracle<'a>(
    sub: &Subscription,
    candidates: &'a [ContextElement],
    now: u64,
) -> Vec<&'a ContextElement> {
    candidates.iter().filter(|v| matches(sub, v, now)).collect()
}
