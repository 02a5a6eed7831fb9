//! Canonical ContextML text codec.
//!
//! The element vocabulary is fixed: `ctxEl(contextProvider, entity@type@id,
//! scope, timestamp, expires, dataPart(par|parS|parA))`, `ctxSubscr(id,
//! subscriber, entity?, scope, constraint?, expires, priority?, callback?)`
//! and `ctxPublish(subscriptionId*, ctxEl)`, plus the broker coordination
//! documents (`ctxNotify`, `ctxForward`, `subTableUpdate`, `regTableUpdate`,
//! `lookupRequest`, `lookupReply`). Encoding is deterministic: fixed
//! attribute order, fixed child order, two-space indentation. The same text
//! is the on-disk trace format and the logical wire format inside the
//! simulator.

use thiserror::Error;

use super::{
    ClientAdvertisement, ClientRole, ContextElement, EntityRef, MessageBody, MessageHeader,
    ParamValue, ProtocolMessage,
};
use crate::matching::{
    parse_constraint, CallbackMode, ConstraintExpr, Priority, Subscription,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("malformed document at line {line}, column {col}: {message}")]
    MalformedDocument {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("invariant violation at {path}: {message}")]
    InvariantViolation { path: String, message: String },
}

fn schema(path: &str, message: impl Into<String>) -> CodecError {
    CodecError::SchemaViolation {
        path: path.to_string(),
        message: message.into(),
    }
}

fn invariant(path: &str, err: impl ToString) -> CodecError {
    CodecError::InvariantViolation {
        path: path.to_string(),
        message: err.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Minimal XML document model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Element {
    name: String,
    attrs: Vec<(String, String)>,
    children: Vec<Element>,
    /// Verbatim text content; only meaningful for leaf elements.
    text: Option<String>,
}

impl Element {
    fn new(name: &str) -> Element {
        Element {
            name: name.to_string(),
            attrs: Vec::new(),
            children: Vec::new(),
            text: None,
        }
    }

    fn attr(mut self, name: &str, value: impl Into<String>) -> Element {
        self.attrs.push((name.to_string(), value.into()));
        self
    }

    fn child(mut self, child: Element) -> Element {
        self.children.push(child);
        self
    }

    fn text_content(mut self, text: impl Into<String>) -> Element {
        self.text = Some(text.into());
        self
    }

    fn leaf(name: &str, text: impl Into<String>) -> Element {
        Element::new(name).text_content(text)
    }

    fn get_attr(&self, name: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }

    fn require_attr(&self, name: &str) -> Result<&str, CodecError> {
        self.get_attr(name)
            .ok_or_else(|| schema(&self.name, format!("missing attribute {name}")))
    }

    fn require_text(&self) -> Result<&str, CodecError> {
        if !self.children.is_empty() {
            return Err(schema(&self.name, "expected text content, found children"));
        }
        Ok(self.text.as_deref().unwrap_or(""))
    }
}

fn escape_text(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            _ => out.push(c),
        }
    }
}

fn escape_attr(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
}

fn write_element(el: &Element, indent: usize, out: &mut String) {
    for _ in 0..indent {
        out.push_str("  ");
    }
    out.push('<');
    out.push_str(&el.name);
    for (name, value) in &el.attrs {
        out.push(' ');
        out.push_str(name);
        out.push_str("=\"");
        escape_attr(value, out);
        out.push('"');
    }
    if let Some(text) = &el.text {
        out.push('>');
        escape_text(text, out);
        out.push_str("</");
        out.push_str(&el.name);
        out.push_str(">\n");
    } else if el.children.is_empty() {
        out.push_str("/>\n");
    } else {
        out.push_str(">\n");
        for child in &el.children {
            write_element(child, indent + 1, out);
        }
        for _ in 0..indent {
            out.push_str("  ");
        }
        out.push_str("</");
        out.push_str(&el.name);
        out.push_str(">\n");
    }
}

// ---------------------------------------------------------------------------
// XML subset parser with location-carrying errors
// ---------------------------------------------------------------------------

struct Reader<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn malformed(&self, message: impl Into<String>) -> CodecError {
        let consumed = &self.src[..self.pos.min(self.src.len())];
        let line = consumed.matches('\n').count() + 1;
        let col = consumed
            .rsplit('\n')
            .next()
            .map(|l| l.chars().count())
            .unwrap_or(0)
            + 1;
        CodecError::MalformedDocument {
            line,
            col,
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

    fn eat(&mut self, token: &str) -> bool {
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn name(&mut self) -> Result<String, CodecError> {
        let rest = self.rest();
        let end = rest
            .char_indices()
            .find(|(_, c)| !(c.is_ascii_alphanumeric() || *c == '_'))
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        if end == 0 {
            return Err(self.malformed("expected name"));
        }
        let name = rest[..end].to_string();
        self.pos += end;
        Ok(name)
    }

    fn unescape(&self, raw: &str) -> Result<String, CodecError> {
        let mut out = String::with_capacity(raw.len());
        let mut it = raw.char_indices();
        while let Some((i, c)) = it.next() {
            if c != '&' {
                out.push(c);
                continue;
            }
            let rest = &raw[i..];
            let semi = rest.find(';').ok_or_else(|| {
                self.malformed("unterminated entity reference")
            })?;
            let entity = &rest[1..semi];
            out.push(match entity {
                "amp" => '&',
                "lt" => '<',
                "gt" => '>',
                "quot" => '"',
                "apos" => '\'',
                other => {
                    return Err(self.malformed(format!("unknown entity &{other};")));
                }
            });
            // Skip the consumed entity body.
            for _ in 0..semi {
                it.next();
            }
        }
        Ok(out)
    }

    fn attribute(&mut self) -> Result<(String, String), CodecError> {
        let name = self.name()?;
        if !self.eat("=") {
            return Err(self.malformed("expected '=' in attribute"));
        }
        if !self.eat("\"") {
            return Err(self.malformed("expected '\"' opening attribute value"));
        }
        let rest = self.rest();
        let end = rest
            .find('"')
            .ok_or_else(|| self.malformed("unterminated attribute value"))?;
        let raw = &rest[..end];
        if let Some(bad) = raw.find('<') {
            self.pos += bad;
            return Err(self.malformed("raw '<' in attribute value"));
        }
        let value = self.unescape(raw)?;
        self.pos += end + 1;
        Ok((name, value))
    }

    fn element(&mut self) -> Result<Element, CodecError> {
        if !self.eat("<") {
            return Err(self.malformed("expected '<'"));
        }
        let name = self.name()?;
        let mut el = Element::new(&name);
        loop {
            self.skip_ws();
            if self.eat("/>") {
                return Ok(el);
            }
            if self.eat(">") {
                break;
            }
            let (attr_name, value) = self.attribute()?;
            if el.get_attr(&attr_name).is_some() {
                return Err(self.malformed(format!("duplicate attribute {attr_name}")));
            }
            el.attrs.push((attr_name, value));
        }
        // Content: either a verbatim text run up to the close tag, or a
        // sequence of child elements separated by ignorable whitespace.
        let content_start = self.pos;
        loop {
            let rest = self.rest();
            let Some(lt) = rest.find('<') else {
                return Err(self.malformed(format!("missing close tag for {name}")));
            };
            self.pos += lt;
            let text_end = self.pos;
            if self.eat("</") {
                let close = self.name()?;
                if close != name {
                    return Err(self.malformed(format!(
                        "close tag {close} does not match open tag {name}"
                    )));
                }
                self.skip_ws_in_tag()?;
                if el.children.is_empty() {
                    // Leaf element: the gap between tags is its exact text.
                    let raw = &self.src[content_start..text_end];
                    el.text = Some(self.unescape(raw)?);
                }
                return Ok(el);
            }
            if !rest[..lt].trim().is_empty() {
                return Err(self.malformed("mixed text and element content"));
            }
            let child = self.element()?;
            el.children.push(child);
        }
    }

    fn skip_ws_in_tag(&mut self) -> Result<(), CodecError> {
        self.skip_ws();
        if !self.eat(">") {
            return Err(self.malformed("expected '>' closing tag"));
        }
        Ok(())
    }
}

fn parse_document(text: &str) -> Result<Element, CodecError> {
    let mut r = Reader { src: text, pos: 0 };
    r.skip_ws();
    let el = r.element()?;
    r.skip_ws();
    if r.pos != text.len() {
        return Err(r.malformed("trailing content after document element"));
    }
    Ok(el)
}

// ---------------------------------------------------------------------------
// Message encoding
// ---------------------------------------------------------------------------

/// Encodes a protocol message into its canonical ContextML text. Pure and
/// deterministic: structurally equal messages encode byte-identically.
pub fn encode_message(msg: &ProtocolMessage) -> String {
    let mut root = match &msg.body {
        MessageBody::Subscribe(sub) => subscription_element(sub),
        MessageBody::Publish {
            element,
            matched_subscription_ids,
        } => {
            let mut el = Element::new("ctxPublish");
            for id in matched_subscription_ids {
                el = el.child(Element::leaf("subscriptionId", id));
            }
            el.child(context_element(element))
        }
        MessageBody::Notify {
            element,
            subscription_id,
        } => Element::new("ctxNotify")
            .child(Element::leaf("subscriptionId", subscription_id))
            .child(context_element(element)),
        MessageBody::Forward {
            element,
            matched_subscription_ids,
        } => {
            let mut el = Element::new("ctxForward");
            for id in matched_subscription_ids {
                el = el.child(Element::leaf("subscriptionId", id));
            }
            el.child(context_element(element))
        }
        MessageBody::SubTableUpdate {
            origin_broker_id,
            subscription,
        } => Element::new("subTableUpdate")
            .attr("origin", origin_broker_id)
            .child(subscription_element(subscription)),
        MessageBody::RegTableUpdate {
            origin_broker_id,
            advertisements,
        } => {
            let mut el = Element::new("regTableUpdate").attr("origin", origin_broker_id);
            for adv in advertisements {
                el = el.child(advertisement_element(adv));
            }
            el
        }
        MessageBody::LookupRequest { scope } => {
            Element::new("lookupRequest").child(Element::leaf("scope", scope))
        }
        MessageBody::LookupReply { endpoint } => {
            let mut el = Element::new("lookupReply");
            if let Some(ep) = endpoint {
                el = el.child(Element::leaf("endpoint", ep));
            }
            el
        }
    };
    // Header attributes lead, in fixed order.
    let mut attrs = vec![
        ("messageId".to_string(), msg.header.message_id.clone()),
        ("sender".to_string(), msg.header.sender_id.clone()),
        ("sentAt".to_string(), msg.header.sent_at.to_string()),
    ];
    attrs.append(&mut root.attrs);
    root.attrs = attrs;
    let mut out = String::new();
    write_element(&root, 0, &mut out);
    out
}

fn entity_element(entity: &EntityRef) -> Element {
    Element::new("entity")
        .attr("type", entity.entity_type())
        .attr("id", entity.id())
}

fn param_element(p: &ParamValue) -> Element {
    match p {
        ParamValue::Atom { name, value } => Element::leaf("par", value.clone()).attr("name", name),
        ParamValue::Struct { name, members } => {
            let mut el = Element::new("parS").attr("name", name);
            for m in members {
                el = el.child(param_element(m));
            }
            // An empty struct still needs a close tag to stay distinguishable
            // from an empty atom on re-parse.
            el
        }
        ParamValue::Array { name, items } => {
            let mut el = Element::new("parA").attr("name", name);
            for it in items {
                el = el.child(param_element(it));
            }
            el
        }
    }
}

fn context_element(el: &ContextElement) -> Element {
    let mut data_part = Element::new("dataPart");
    for p in &el.data {
        data_part = data_part.child(param_element(p));
    }
    Element::new("ctxEl")
        .attr("contextProvider", &el.provider_id)
        .attr("payloadBytes", el.payload_bytes.to_string())
        .child(entity_element(&el.entity))
        .child(Element::leaf("scope", &el.scope))
        .child(Element::leaf("timestamp", el.timestamp.to_string()))
        .child(Element::leaf("expires", el.expiry.to_string()))
        .child(data_part)
}

fn subscription_element(sub: &Subscription) -> Element {
    let mut el = Element::new("ctxSubscr")
        .attr("id", &sub.id)
        .attr("subscriber", &sub.subscriber_id);
    if sub.one_time {
        el = el.attr("oneTime", "true");
    }
    if let Some(entity) = &sub.entity {
        el = el.child(entity_element(entity));
    }
    el = el.child(Element::leaf("scope", &sub.scope));
    if sub.expr != ConstraintExpr::True {
        el = el.child(Element::leaf("constraint", sub.expr.to_text()));
    }
    el = el.child(Element::leaf("expires", sub.expiry.to_string()));
    if sub.priority != Priority::High {
        el = el.child(Element::leaf("priority", sub.priority.as_str()));
    }
    if sub.callback != CallbackMode::BrokerRouted {
        el = el.child(Element::leaf("callback", sub.callback.as_str()));
    }
    el
}

fn advertisement_element(adv: &ClientAdvertisement) -> Element {
    let mut el = Element::new("client")
        .attr("id", &adv.client_id)
        .attr("endpoint", &adv.endpoint)
        .attr("role", adv.role.as_str())
        .attr("lastUpdated", adv.last_updated.to_string());
    for scope in &adv.served_scopes {
        el = el.child(Element::leaf("scope", scope));
    }
    el
}

// ---------------------------------------------------------------------------
// Message parsing
// ---------------------------------------------------------------------------

/// Parses a canonical ContextML document back into a protocol message.
/// `parse_message(encode_message(m))` structurally equals `m` for every
/// constructible message.
pub fn parse_message(text: &str) -> Result<ProtocolMessage, CodecError> {
    let root = parse_document(text)?;
    let header = MessageHeader {
        message_id: root.require_attr("messageId")?.to_string(),
        sender_id: root.require_attr("sender")?.to_string(),
        sent_at: parse_u64(&root, root.require_attr("sentAt")?, "sentAt")?,
    };
    let mut children = ChildCursor::new(&root);
    let body = match root.name.as_str() {
        "ctxSubscr" => MessageBody::Subscribe(parse_subscription(&root)?),
        "ctxPublish" => {
            let matched = children.take_leaf_texts("subscriptionId")?;
            let element = parse_context_element(children.require("ctxEl")?)?;
            children.finish()?;
            MessageBody::Publish {
                element,
                matched_subscription_ids: matched,
            }
        }
        "ctxNotify" => {
            let mut ids = children.take_leaf_texts("subscriptionId")?;
            if ids.len() != 1 {
                return Err(schema("ctxNotify", "expected exactly one subscriptionId"));
            }
            let element = parse_context_element(children.require("ctxEl")?)?;
            children.finish()?;
            MessageBody::Notify {
                element,
                subscription_id: ids.remove(0),
            }
        }
        "ctxForward" => {
            let matched = children.take_leaf_texts("subscriptionId")?;
            let element = parse_context_element(children.require("ctxEl")?)?;
            children.finish()?;
            MessageBody::Forward {
                element,
                matched_subscription_ids: matched,
            }
        }
        "subTableUpdate" => {
            let origin = root.require_attr("origin")?.to_string();
            let sub = parse_subscription(children.require("ctxSubscr")?)?;
            children.finish()?;
            MessageBody::SubTableUpdate {
                origin_broker_id: origin,
                subscription: sub,
            }
        }
        "regTableUpdate" => {
            let origin = root.require_attr("origin")?.to_string();
            let mut advertisements = Vec::new();
            while let Some(client) = children.take("client") {
                advertisements.push(parse_advertisement(client)?);
            }
            children.finish()?;
            MessageBody::RegTableUpdate {
                origin_broker_id: origin,
                advertisements,
            }
        }
        "lookupRequest" => {
            let scope = children.require("scope")?.require_text()?.to_string();
            children.finish()?;
            MessageBody::LookupRequest { scope }
        }
        "lookupReply" => {
            let endpoint = children
                .take("endpoint")
                .map(|e| e.require_text().map(str::to_string))
                .transpose()?;
            children.finish()?;
            MessageBody::LookupReply { endpoint }
        }
        other => return Err(schema(other, "unknown document element")),
    };
    Ok(ProtocolMessage { header, body })
}

/// Sequential reader over an element's children enforcing canonical order.
struct ChildCursor<'a> {
    parent: &'a str,
    children: &'a [Element],
    next: usize,
}

impl<'a> ChildCursor<'a> {
    fn new(el: &'a Element) -> ChildCursor<'a> {
        ChildCursor {
            parent: &el.name,
            children: &el.children,
            next: 0,
        }
    }

    fn peek(&self) -> Option<&'a Element> {
        self.children.get(self.next)
    }

    fn take(&mut self, name: &str) -> Option<&'a Element> {
        match self.peek() {
            Some(el) if el.name == name => {
                self.next += 1;
                Some(el)
            }
            _ => None,
        }
    }

    fn require(&mut self, name: &str) -> Result<&'a Element, CodecError> {
        self.take(name)
            .ok_or_else(|| schema(self.parent, format!("missing required child {name}")))
    }

    fn take_leaf_texts(&mut self, name: &str) -> Result<Vec<String>, CodecError> {
        let mut out = Vec::new();
        while let Some(el) = self.take(name) {
            out.push(el.require_text()?.to_string());
        }
        Ok(out)
    }

    fn finish(self) -> Result<(), CodecError> {
        if let Some(extra) = self.peek() {
            return Err(schema(
                self.parent,
                format!("unexpected child element {}", extra.name),
            ));
        }
        Ok(())
    }
}

fn parse_u64(el: &Element, raw: &str, field: &str) -> Result<u64, CodecError> {
    raw.parse::<u64>()
        .map_err(|_| schema(&el.name, format!("{field} is not an unsigned integer: {raw:?}")))
}

fn parse_entity(el: &Element) -> Result<EntityRef, CodecError> {
    let entity_type = el.require_attr("type")?;
    let id = el.require_attr("id")?;
    EntityRef::new(entity_type, id).map_err(|e| invariant("entity", e))
}

fn parse_param(el: &Element) -> Result<ParamValue, CodecError> {
    let name = el.require_attr("name")?.to_string();
    match el.name.as_str() {
        "par" => Ok(ParamValue::Atom {
            name,
            value: el.require_text()?.to_string(),
        }),
        "parS" => {
            let members = el
                .children
                .iter()
                .map(parse_param)
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ParamValue::Struct { name, members })
        }
        "parA" => {
            let items = el
                .children
                .iter()
                .map(parse_param)
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ParamValue::Array { name, items })
        }
        other => Err(schema("dataPart", format!("unknown parameter element {other}"))),
    }
}

fn parse_context_element(el: &Element) -> Result<ContextElement, CodecError> {
    let provider = el.require_attr("contextProvider")?.to_string();
    let payload_bytes = parse_u64(el, el.require_attr("payloadBytes")?, "payloadBytes")?;
    let mut children = ChildCursor::new(el);
    let entity = parse_entity(children.require("entity")?)?;
    let scope = children.require("scope")?.require_text()?.to_string();
    let timestamp_el = children.require("timestamp")?;
    let timestamp = parse_u64(timestamp_el, timestamp_el.require_text()?, "timestamp")?;
    let expires_el = children.require("expires")?;
    let expiry = parse_u64(expires_el, expires_el.require_text()?, "expires")?;
    let data_part = children.require("dataPart")?;
    let data = data_part
        .children
        .iter()
        .map(parse_param)
        .collect::<Result<Vec<_>, _>>()?;
    children.finish()?;
    ContextElement::new(provider, entity, scope, data, timestamp, expiry, payload_bytes)
        .map_err(|e| invariant("ctxEl", e))
}

fn parse_subscription(el: &Element) -> Result<Subscription, CodecError> {
    let id = el.require_attr("id")?.to_string();
    let subscriber = el.require_attr("subscriber")?.to_string();
    let one_time = match el.get_attr("oneTime") {
        None => false,
        Some("true") => true,
        Some(other) => {
            return Err(schema("ctxSubscr", format!("bad oneTime value {other:?}")));
        }
    };
    let mut children = ChildCursor::new(el);
    let entity = children
        .take("entity")
        .map(parse_entity)
        .transpose()?;
    let scope = children.require("scope")?.require_text()?.to_string();
    let expr = match children.take("constraint") {
        None => ConstraintExpr::True,
        Some(c) => parse_constraint(c.require_text()?)
            .map_err(|e| schema("constraint", e.to_string()))?,
    };
    let expires_el = children.require("expires")?;
    let expiry = parse_u64(expires_el, expires_el.require_text()?, "expires")?;
    let priority = match children.take("priority") {
        None => Priority::High,
        Some(p) => {
            let raw = p.require_text()?;
            Priority::parse(raw)
                .ok_or_else(|| schema("priority", format!("unknown priority {raw:?}")))?
        }
    };
    let callback = match children.take("callback") {
        None => CallbackMode::BrokerRouted,
        Some(c) => {
            let raw = c.require_text()?;
            CallbackMode::parse(raw)
                .ok_or_else(|| schema("callback", format!("unknown callback {raw:?}")))?
        }
    };
    children.finish()?;
    let mut sub = Subscription::from_parts(id, subscriber, scope, entity, expr, expiry)
        .map_err(|e| invariant("ctxSubscr", e))?;
    sub.priority = priority;
    sub.callback = callback;
    sub.one_time = one_time;
    Ok(sub)
}

fn parse_advertisement(el: &Element) -> Result<ClientAdvertisement, CodecError> {
    let id = el.require_attr("id")?.to_string();
    let endpoint = el.require_attr("endpoint")?.to_string();
    let role_raw = el.require_attr("role")?;
    let role = ClientRole::parse(role_raw)
        .ok_or_else(|| schema("client", format!("unknown role {role_raw:?}")))?;
    let last_updated = parse_u64(el, el.require_attr("lastUpdated")?, "lastUpdated")?;
    let mut served = Vec::new();
    let mut children = ChildCursor::new(el);
    while let Some(scope) = children.take("scope") {
        served.push(scope.require_text()?.to_string());
    }
    children.finish()?;
    ClientAdvertisement::new(id, endpoint, role, served, last_updated)
        .map_err(|e| invariant("client", e))
}
