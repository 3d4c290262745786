//! A deliberately tiny Python subset for the fake sandbox.
//!
//! Supported: assignments, `print`, integer/float/string arithmetic, lists,
//! `len`/`range`/`str`/`int`/`float`/`abs`/`min`/`max`/`round`, `for` loops
//! over lists, `while True:` (reported as a timeout), and opaque objects for
//! anything reached through a known name (`plt`, `np`, preloads). Every call
//! to `plt.show()` produces one rendered image.

use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Value {
    None,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<Value>),
    /// Module or library handle (`plt`, `np`, ...).
    Module(&'static str),
    /// A preloaded video with its frame count.
    Video(u64),
    /// Anything else the subset does not model.
    Opaque(String),
    Builtin(&'static str),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::None => f.write_str("None"),
            Value::Bool(b) => f.write_str(if *b { "True" } else { "False" }),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => {
                if x.is_finite() && x.fract() == 0.0 && x.abs() < 1e16 {
                    write!(f, "{x:.1}")
                } else {
                    write!(f, "{x}")
                }
            }
            Value::Str(s) => f.write_str(s),
            Value::List(items) => {
                f.write_str("[")?;
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    match v {
                        Value::Str(s) => write!(f, "'{s}'")?,
                        other => write!(f, "{other}")?,
                    }
                }
                f.write_str("]")
            }
            Value::Module(m) => write!(f, "<module '{m}'>"),
            Value::Video(n) => write!(f, "<VideoReader frames={n}>"),
            Value::Opaque(d) => write!(f, "<{d}>"),
            Value::Builtin(b) => write!(f, "<built-in function {b}>"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Outcome {
    Finished,
    /// Python-style exception text.
    Raised(String),
    /// The code never terminates.
    Hangs,
}

pub(crate) struct Run {
    pub stdout: String,
    pub renders: u32,
    pub outcome: Outcome,
}

const MAX_LOOP_ITERS: usize = 100_000;

pub(crate) fn run(code: &str, ns: &mut HashMap<String, Value>) -> Run {
    let mut m = Machine {
        ns,
        stdout: String::new(),
        renders: 0,
    };
    let lines: Vec<&str> = code.lines().collect();
    let outcome = match m.block(&lines) {
        Ok(()) => Outcome::Finished,
        Err(Exit::Raise(msg)) => Outcome::Raised(format!("Traceback (most recent call last):\n{msg}")),
        Err(Exit::Hang) => Outcome::Hangs,
    };
    Run {
        stdout: m.stdout,
        renders: m.renders,
        outcome,
    }
}

enum Exit {
    Raise(String),
    Hang,
}

type Res<T> = Result<T, Exit>;

fn raise<T>(kind: &str, msg: impl fmt::Display) -> Res<T> {
    Err(Exit::Raise(format!("{kind}: {msg}")))
}

fn indent_of(line: &str) -> usize {
    line.len() - line.trim_start().len()
}

struct Machine<'a> {
    ns: &'a mut HashMap<String, Value>,
    stdout: String,
    renders: u32,
}

impl Machine<'_> {
    fn block(&mut self, lines: &[&str]) -> Res<()> {
        let mut i = 0;
        while i < lines.len() {
            let line = lines[i];
            let stmt = strip_comment(line).trim();
            i += 1;
            if stmt.is_empty() {
                continue;
            }
            if let Some((header, inline)) = inline_compound(stmt) {
                self.compound(header, &[inline])?;
                continue;
            }
            if let Some(header) = stmt.strip_suffix(':') {
                let base = indent_of(line);
                let start = i;
                while i < lines.len()
                    && (strip_comment(lines[i]).trim().is_empty() || indent_of(lines[i]) > base)
                {
                    i += 1;
                }
                let body = &lines[start..i];
                self.compound(header, body)?;
                continue;
            }
            self.simple(stmt)?;
        }
        Ok(())
    }

    fn compound(&mut self, header: &str, body: &[&str]) -> Res<()> {
        let header = header.trim();
        if let Some(cond) = header.strip_prefix("while ") {
            let cond = cond.trim();
            if cond == "True" || cond == "1" {
                return Err(Exit::Hang);
            }
            return raise("SyntaxError", "only `while True:` is supported");
        }
        if let Some(rest) = header.strip_prefix("for ") {
            let Some((var, iter)) = rest.split_once(" in ") else {
                return raise("SyntaxError", "invalid syntax");
            };
            let var = var.trim();
            if !is_ident(var) {
                return raise("SyntaxError", "invalid loop target");
            }
            let items = match self.eval(iter)? {
                Value::List(items) => items,
                Value::Str(s) => s.chars().map(|c| Value::Str(c.to_string())).collect(),
                other => return raise("TypeError", format!("'{}' object is not iterable", type_name(&other))),
            };
            if items.len() > MAX_LOOP_ITERS {
                return Err(Exit::Hang);
            }
            for item in items {
                self.ns.insert(var.to_owned(), item);
                self.block(body)?;
            }
            return Ok(());
        }
        if let Some(cond) = header.strip_prefix("if ") {
            if truthy(&self.eval(cond)?) {
                self.block(body)?;
            }
            return Ok(());
        }
        raise("SyntaxError", "invalid syntax")
    }

    fn simple(&mut self, stmt: &str) -> Res<()> {
        if stmt.starts_with("import ") || stmt.starts_with("from ") || stmt == "pass" {
            return Ok(());
        }
        if let Some(rest) = stmt.strip_prefix("raise ") {
            let kind = rest.split('(').next().unwrap_or("Exception").trim();
            return raise(kind, "");
        }
        if let Some((target, expr)) = split_assignment(stmt) {
            let v = self.eval(expr)?;
            if is_ident(target) {
                self.ns.insert(target.to_owned(), v);
            } else {
                // attribute or subscript targets: evaluate the root for NameError
                let root: String = target.chars().take_while(|c| c.is_alphanumeric() || *c == '_').collect();
                self.lookup(&root)?;
            }
            return Ok(());
        }
        self.eval(stmt).map(|_| ())
    }

    fn lookup(&self, name: &str) -> Res<Value> {
        if let Some(v) = self.ns.get(name) {
            return Ok(v.clone());
        }
        let v = match name {
            "True" => Value::Bool(true),
            "False" => Value::Bool(false),
            "None" => Value::None,
            "plt" => Value::Module("plt"),
            "np" | "numpy" => Value::Module("np"),
            "math" => Value::Module("math"),
            "print" | "len" | "range" | "str" | "int" | "float" | "abs" | "min" | "max" | "round"
            | "sum" => Value::Builtin(builtin_name(name)),
            _ => return raise("NameError", format!("name '{name}' is not defined")),
        };
        Ok(v)
    }

    fn eval(&mut self, src: &str) -> Res<Value> {
        let toks = tokenize(src)?;
        let mut p = Parser { toks: &toks, pos: 0 };
        let v = self.expr(&mut p)?;
        if p.pos != toks.len() {
            return raise("SyntaxError", "invalid syntax");
        }
        Ok(v)
    }

    fn expr(&mut self, p: &mut Parser) -> Res<Value> {
        let lhs = self.arith(p)?;
        if let Some(Tok::Op(op)) = p.peek() {
            if matches!(op.as_str(), "==" | "!=" | "<" | ">" | "<=" | ">=") {
                let op = op.clone();
                p.pos += 1;
                let rhs = self.arith(p)?;
                return compare(&op, &lhs, &rhs);
            }
        }
        Ok(lhs)
    }

    fn arith(&mut self, p: &mut Parser) -> Res<Value> {
        let mut acc = self.term(p)?;
        while let Some(Tok::Op(op)) = p.peek() {
            if op != "+" && op != "-" {
                break;
            }
            let op = op.clone();
            p.pos += 1;
            let rhs = self.term(p)?;
            acc = binop(&op, acc, rhs)?;
        }
        Ok(acc)
    }

    fn term(&mut self, p: &mut Parser) -> Res<Value> {
        let mut acc = self.unary(p)?;
        while let Some(Tok::Op(op)) = p.peek() {
            if !matches!(op.as_str(), "*" | "/" | "//" | "%") {
                break;
            }
            let op = op.clone();
            p.pos += 1;
            let rhs = self.unary(p)?;
            acc = binop(&op, acc, rhs)?;
        }
        Ok(acc)
    }

    fn unary(&mut self, p: &mut Parser) -> Res<Value> {
        if let Some(Tok::Op(op)) = p.peek() {
            if op == "-" {
                p.pos += 1;
                return match self.unary(p)? {
                    Value::Int(i) => Ok(Value::Int(-i)),
                    Value::Float(x) => Ok(Value::Float(-x)),
                    Value::Opaque(d) => Ok(Value::Opaque(d)),
                    other => raise("TypeError", format!("bad operand type for unary -: '{}'", type_name(&other))),
                };
            }
        }
        self.postfix(p)
    }

    fn postfix(&mut self, p: &mut Parser) -> Res<Value> {
        let mut v = self.primary(p)?;
        loop {
            match p.peek() {
                Some(Tok::Open('(')) => {
                    p.pos += 1;
                    let args = self.items(p, ')')?;
                    v = self.call(v, args)?;
                }
                Some(Tok::Open('[')) => {
                    p.pos += 1;
                    let idx = self.subscript(p)?;
                    v = index(v, idx)?;
                }
                Some(Tok::Dot) => {
                    p.pos += 1;
                    let Some(Tok::Ident(attr)) = p.next() else {
                        return raise("SyntaxError", "invalid syntax");
                    };
                    v = attribute(v, attr);
                }
                _ => return Ok(v),
            }
        }
    }

    /// Slices evaluate their bounds (for NameError) and yield `None` as index.
    fn subscript(&mut self, p: &mut Parser) -> Res<Option<Value>> {
        let mut single: Option<Value> = None;
        let mut sliced = false;
        loop {
            match p.peek() {
                Some(Tok::Close(']')) => {
                    p.pos += 1;
                    return Ok(if sliced { None } else { single });
                }
                Some(Tok::Colon) | Some(Tok::Comma) => {
                    sliced = true;
                    p.pos += 1;
                }
                None => return raise("SyntaxError", "'[' was never closed"),
                _ => {
                    let v = self.expr(p)?;
                    if single.is_some() {
                        sliced = true;
                    }
                    single = Some(v);
                }
            }
        }
    }

    fn items(&mut self, p: &mut Parser, close: char) -> Res<Vec<Value>> {
        let mut out = Vec::new();
        loop {
            match p.peek() {
                Some(Tok::Close(c)) if *c == close => {
                    p.pos += 1;
                    return Ok(out);
                }
                None => return raise("SyntaxError", format!("'{close}' was never closed")),
                _ => {}
            }
            // keyword arguments: evaluate the value, drop the name
            if let (Some(Tok::Ident(_)), Some(Tok::Op(eq))) = (p.peek(), p.toks.get(p.pos + 1)) {
                if eq == "=" {
                    p.pos += 2;
                }
            }
            out.push(self.expr(p)?);
            match p.peek() {
                Some(Tok::Comma) => p.pos += 1,
                Some(Tok::Close(c)) if *c == close => {}
                _ => return raise("SyntaxError", "invalid syntax"),
            }
        }
    }

    fn primary(&mut self, p: &mut Parser) -> Res<Value> {
        match p.next().cloned() {
            Some(Tok::Int(i)) => Ok(Value::Int(i)),
            Some(Tok::Float(x)) => Ok(Value::Float(x)),
            Some(Tok::Str(s)) => Ok(Value::Str(s)),
            Some(Tok::Ident(name)) => self.lookup(&name),
            Some(Tok::Open('(')) => {
                let items = self.items(p, ')')?;
                Ok(match items.len() {
                    1 => items.into_iter().next().unwrap_or(Value::None),
                    _ => Value::List(items),
                })
            }
            Some(Tok::Open('[')) => Ok(Value::List(self.items(p, ']')?)),
            _ => raise("SyntaxError", "invalid syntax"),
        }
    }

    fn call(&mut self, f: Value, args: Vec<Value>) -> Res<Value> {
        match f {
            Value::Builtin(name) => self.builtin(name, args),
            Value::Opaque(d) if d == "plt.show" => {
                self.renders += 1;
                Ok(Value::None)
            }
            Value::Opaque(d) => Ok(Value::Opaque(format!("{d}()"))),
            other => raise("TypeError", format!("'{}' object is not callable", type_name(&other))),
        }
    }

    fn builtin(&mut self, name: &str, args: Vec<Value>) -> Res<Value> {
        let one = |args: &[Value]| -> Res<Value> {
            match args {
                [v] => Ok(v.clone()),
                _ => raise("TypeError", format!("{name}() takes exactly one argument ({} given)", args.len())),
            }
        };
        match name {
            "print" => {
                let line: Vec<String> = args.iter().map(Value::to_string).collect();
                self.stdout.push_str(&line.join(" "));
                self.stdout.push('\n');
                Ok(Value::None)
            }
            "len" => match one(&args)? {
                Value::Str(s) => Ok(Value::Int(s.chars().count() as i64)),
                Value::List(v) => Ok(Value::Int(v.len() as i64)),
                Value::Video(n) => Ok(Value::Int(n as i64)),
                other => raise("TypeError", format!("object of type '{}' has no len()", type_name(&other))),
            },
            "range" => {
                let ints = args
                    .iter()
                    .map(|a| match a {
                        Value::Int(i) => Ok(*i),
                        other => raise("TypeError", format!("'{}' object cannot be interpreted as an integer", type_name(other))),
                    })
                    .collect::<Res<Vec<i64>>>()?;
                let (start, stop, step) = match ints[..] {
                    [stop] => (0, stop, 1),
                    [start, stop] => (start, stop, 1),
                    [start, stop, step] if step != 0 => (start, stop, step),
                    _ => return raise("ValueError", "range() arguments"),
                };
                let n = if step > 0 {
                    (stop - start).max(0) as u64 / step as u64
                } else {
                    (start - stop).max(0) as u64 / (-step) as u64
                };
                if n as usize > MAX_LOOP_ITERS {
                    return Err(Exit::Hang);
                }
                let mut out = Vec::new();
                let mut i = start;
                while (step > 0 && i < stop) || (step < 0 && i > stop) {
                    out.push(Value::Int(i));
                    i += step;
                }
                Ok(Value::List(out))
            }
            "str" => Ok(Value::Str(one(&args)?.to_string())),
            "int" => match one(&args)? {
                Value::Int(i) => Ok(Value::Int(i)),
                Value::Float(x) => Ok(Value::Int(x.trunc() as i64)),
                Value::Bool(b) => Ok(Value::Int(b as i64)),
                Value::Str(s) => match s.trim().parse() {
                    Ok(i) => Ok(Value::Int(i)),
                    Err(_) => raise("ValueError", format!("invalid literal for int() with base 10: '{s}'")),
                },
                other => raise("TypeError", format!("int() argument must be a string or a number, not '{}'", type_name(&other))),
            },
            "float" => match one(&args)? {
                Value::Int(i) => Ok(Value::Float(i as f64)),
                Value::Float(x) => Ok(Value::Float(x)),
                Value::Str(s) => match s.trim().parse() {
                    Ok(x) => Ok(Value::Float(x)),
                    Err(_) => raise("ValueError", format!("could not convert string to float: '{s}'")),
                },
                other => raise("TypeError", format!("float() argument must be a string or a number, not '{}'", type_name(&other))),
            },
            "abs" => match one(&args)? {
                Value::Int(i) => Ok(Value::Int(i.abs())),
                Value::Float(x) => Ok(Value::Float(x.abs())),
                other => raise("TypeError", format!("bad operand type for abs(): '{}'", type_name(&other))),
            },
            "round" => match &args[..] {
                [Value::Float(x)] => Ok(Value::Int(x.round() as i64)),
                [Value::Int(i)] => Ok(Value::Int(*i)),
                [Value::Float(x), Value::Int(d)] => {
                    let k = 10f64.powi(*d as i32);
                    Ok(Value::Float((x * k).round() / k))
                }
                _ => raise("TypeError", "round() arguments"),
            },
            "min" | "max" | "sum" => {
                let items = match &args[..] {
                    [Value::List(v)] => v.clone(),
                    _ => args,
                };
                if name == "sum" {
                    return items.into_iter().try_fold(Value::Int(0), |a, b| binop("+", a, b));
                }
                let mut it = items.into_iter();
                let Some(mut best) = it.next() else {
                    return raise("ValueError", format!("{name}() arg is an empty sequence"));
                };
                for v in it {
                    let take = compare(if name == "min" { "<" } else { ">" }, &v, &best)?;
                    if take == Value::Bool(true) {
                        best = v;
                    }
                }
                Ok(best)
            }
            _ => raise("NameError", format!("name '{name}' is not defined")),
        }
    }
}

fn builtin_name(name: &str) -> &'static str {
    const NAMES: [&str; 11] = [
        "print", "len", "range", "str", "int", "float", "abs", "min", "max", "round", "sum",
    ];
    NAMES.iter().find(|n| **n == name).copied().unwrap_or("print")
}

fn attribute(v: Value, attr: &str) -> Value {
    match v {
        Value::Module(m) => Value::Opaque(format!("{m}.{attr}")),
        Value::Video(_) => Value::Opaque(format!("video.{attr}")),
        Value::Opaque(d) => Value::Opaque(format!("{d}.{attr}")),
        other => Value::Opaque(format!("{}.{attr}", type_name(&other))),
    }
}

fn index(v: Value, idx: Option<Value>) -> Res<Value> {
    match (v, idx) {
        (Value::List(items), Some(Value::Int(i))) => {
            let n = items.len() as i64;
            let j = if i < 0 { n + i } else { i };
            if (0..n).contains(&j) {
                Ok(items[j as usize].clone())
            } else {
                raise("IndexError", "list index out of range")
            }
        }
        (Value::Str(s), Some(Value::Int(i))) => {
            let chars: Vec<char> = s.chars().collect();
            let n = chars.len() as i64;
            let j = if i < 0 { n + i } else { i };
            if (0..n).contains(&j) {
                Ok(Value::Str(chars[j as usize].to_string()))
            } else {
                raise("IndexError", "string index out of range")
            }
        }
        (Value::Video(n), Some(Value::Int(i))) => {
            if i < 0 || i as u64 >= n {
                raise("IndexError", format!("frame index {i} out of range"))
            } else {
                Ok(Value::Opaque(format!("frame {i}")))
            }
        }
        (Value::List(items), None) => Ok(Value::List(items)),
        (Value::Opaque(d), _) => Ok(Value::Opaque(format!("{d}[...]"))),
        (Value::Module(m), _) => Ok(Value::Opaque(format!("{m}[...]"))),
        (Value::Video(_), _) => Ok(Value::Opaque("frames".into())),
        (other, _) => raise("TypeError", format!("'{}' object is not subscriptable", type_name(&other))),
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::None => "NoneType",
        Value::Bool(_) => "bool",
        Value::Int(_) => "int",
        Value::Float(_) => "float",
        Value::Str(_) => "str",
        Value::List(_) => "list",
        Value::Module(_) => "module",
        Value::Video(_) => "VideoReader",
        Value::Opaque(_) => "object",
        Value::Builtin(_) => "builtin_function_or_method",
    }
}

fn truthy(v: &Value) -> bool {
    match v {
        Value::None => false,
        Value::Bool(b) => *b,
        Value::Int(i) => *i != 0,
        Value::Float(x) => *x != 0.0,
        Value::Str(s) => !s.is_empty(),
        Value::List(v) => !v.is_empty(),
        _ => true,
    }
}

fn num(v: &Value) -> Option<f64> {
    match v {
        Value::Int(i) => Some(*i as f64),
        Value::Float(x) => Some(*x),
        Value::Bool(b) => Some(*b as i64 as f64),
        _ => None,
    }
}

fn binop(op: &str, a: Value, b: Value) -> Res<Value> {
    use Value::*;
    match (op, &a, &b) {
        (_, Opaque(d), _) | (_, _, Opaque(d)) => Ok(Opaque(d.clone())),
        ("+", Str(x), Str(y)) => Ok(Str(format!("{x}{y}"))),
        ("+", List(x), List(y)) => Ok(List(x.iter().chain(y).cloned().collect())),
        ("*", Str(s), Int(n)) | ("*", Int(n), Str(s)) => Ok(Str(s.repeat((*n).max(0) as usize))),
        (_, Int(x), Int(y)) => {
            let (x, y) = (*x, *y);
            match op {
                "+" => Ok(Int(x.wrapping_add(y))),
                "-" => Ok(Int(x.wrapping_sub(y))),
                "*" => Ok(Int(x.wrapping_mul(y))),
                "/" if y == 0 => raise("ZeroDivisionError", "division by zero"),
                "/" => Ok(Float(x as f64 / y as f64)),
                "//" | "%" if y == 0 => raise("ZeroDivisionError", "integer division or modulo by zero"),
                "//" => Ok(Int(x.div_euclid(y) - if y < 0 && x.rem_euclid(y) != 0 { 1 } else { 0 })),
                "%" => Ok(Int(((x % y) + y) % y)),
                _ => raise("SyntaxError", "invalid syntax"),
            }
        }
        _ => match (num(&a), num(&b)) {
            (Some(x), Some(y)) => match op {
                "+" => Ok(Float(x + y)),
                "-" => Ok(Float(x - y)),
                "*" => Ok(Float(x * y)),
                "/" | "//" | "%" if y == 0.0 => raise("ZeroDivisionError", "float division by zero"),
                "/" => Ok(Float(x / y)),
                "//" => Ok(Float((x / y).floor())),
                "%" => Ok(Float(x - y * (x / y).floor())),
                _ => raise("SyntaxError", "invalid syntax"),
            },
            _ => raise(
                "TypeError",
                format!(
                    "unsupported operand type(s) for {op}: '{}' and '{}'",
                    type_name(&a),
                    type_name(&b)
                ),
            ),
        },
    }
}

fn compare(op: &str, a: &Value, b: &Value) -> Res<Value> {
    if let (Value::Opaque(d), _) | (_, Value::Opaque(d)) = (a, b) {
        return Ok(Value::Opaque(format!("{d} {op} ...")));
    }
    let ord = match (num(a), num(b)) {
        (Some(x), Some(y)) => x.partial_cmp(&y),
        _ => match (a, b) {
            (Value::Str(x), Value::Str(y)) => Some(x.cmp(y)),
            _ if op == "==" => return Ok(Value::Bool(a == b)),
            _ if op == "!=" => return Ok(Value::Bool(a != b)),
            _ => {
                return raise(
                    "TypeError",
                    format!("'{op}' not supported between '{}' and '{}'", type_name(a), type_name(b)),
                )
            }
        },
    };
    use std::cmp::Ordering::*;
    let r = match (op, ord) {
        (_, None) => op == "!=",
        ("==", Some(o)) => o == Equal,
        ("!=", Some(o)) => o != Equal,
        ("<", Some(o)) => o == Less,
        (">", Some(o)) => o == Greater,
        ("<=", Some(o)) => o != Greater,
        (">=", Some(o)) => o != Less,
        _ => false,
    };
    Ok(Value::Bool(r))
}

/// `while cond: stmt` and friends written on one line.
fn inline_compound(stmt: &str) -> Option<(&str, &str)> {
    if !["while ", "for ", "if "].iter().any(|k| stmt.starts_with(k)) {
        return None;
    }
    let mut depth = 0i32;
    let mut quote: Option<char> = None;
    for (i, c) in stmt.char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None => match c {
                '\'' | '"' => quote = Some(c),
                '(' | '[' | '{' => depth += 1,
                ')' | ']' | '}' => depth -= 1,
                ':' if depth == 0 => {
                    let body = stmt[i + 1..].trim();
                    return (!body.is_empty()).then(|| (&stmt[..i], body));
                }
                _ => {}
            },
        }
    }
    None
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_')
        && chars.all(|c| c.is_alphanumeric() || c == '_')
}

fn strip_comment(line: &str) -> &str {
    let mut quote: Option<char> = None;
    for (i, c) in line.char_indices() {
        match (quote, c) {
            (None, '#') => return &line[..i],
            (None, '\'' | '"') => quote = Some(c),
            (Some(q), c) if c == q => quote = None,
            _ => {}
        }
    }
    line
}

/// Splits `a = b` at a top-level single `=`, ignoring `==`, `<=` etc. and
/// keyword arguments inside brackets.
fn split_assignment(stmt: &str) -> Option<(&str, &str)> {
    let bytes = stmt.as_bytes();
    let mut depth = 0i32;
    let mut quote: Option<u8> = None;
    for (i, &c) in bytes.iter().enumerate() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None => match c {
                b'\'' | b'"' => quote = Some(c),
                b'(' | b'[' | b'{' => depth += 1,
                b')' | b']' | b'}' => depth -= 1,
                b'=' if depth == 0 => {
                    let prev = i.checked_sub(1).map(|j| bytes[j]);
                    let next = bytes.get(i + 1).copied();
                    if next == Some(b'=') || matches!(prev, Some(b'=' | b'!' | b'<' | b'>')) {
                        continue;
                    }
                    if matches!(prev, Some(b'+' | b'-' | b'*' | b'/' | b'%')) {
                        // augmented assignment: keep the subset simple
                        return None;
                    }
                    return Some((stmt[..i].trim(), stmt[i + 1..].trim()));
                }
                _ => {}
            },
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Int(i64),
    Float(f64),
    Str(String),
    Ident(String),
    Op(String),
    Open(char),
    Close(char),
    Comma,
    Colon,
    Dot,
}

struct Parser<'t> {
    toks: &'t [Tok],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }
    fn next(&mut self) -> Option<&Tok> {
        let t = self.toks.get(self.pos);
        self.pos += 1;
        t
    }
}

fn tokenize(src: &str) -> Res<Vec<Tok>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.' || chars[i] == '_') {
                i += 1;
            }
            let text: String = chars[start..i].iter().filter(|c| **c != '_').collect();
            if text.contains('.') {
                match text.parse() {
                    Ok(x) => out.push(Tok::Float(x)),
                    Err(_) => return raise("SyntaxError", "invalid decimal literal"),
                }
            } else {
                match text.parse() {
                    Ok(x) => out.push(Tok::Int(x)),
                    Err(_) => out.push(Tok::Float(text.parse().unwrap_or(f64::INFINITY))),
                }
            }
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            // f-strings and raw strings are treated as plain strings
            if matches!(word.as_str(), "f" | "r" | "b") && i < chars.len() && matches!(chars[i], '\'' | '"') {
                continue;
            }
            out.push(Tok::Ident(word));
        } else if c == '\'' || c == '"' {
            let q = c;
            i += 1;
            let mut s = String::new();
            while i < chars.len() && chars[i] != q {
                if chars[i] == '\\' && i + 1 < chars.len() {
                    i += 1;
                    s.push(match chars[i] {
                        'n' => '\n',
                        't' => '\t',
                        other => other,
                    });
                } else {
                    s.push(chars[i]);
                }
                i += 1;
            }
            if i >= chars.len() {
                return raise("SyntaxError", "unterminated string literal");
            }
            i += 1;
            out.push(Tok::Str(s));
        } else {
            let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
            if matches!(two.as_str(), "//" | "==" | "!=" | "<=" | ">=" | "**") {
                out.push(Tok::Op(two));
                i += 2;
                continue;
            }
            out.push(match c {
                '(' | '[' | '{' => Tok::Open(if c == '{' { '(' } else { c }),
                ')' | ']' | '}' => Tok::Close(if c == '}' { ')' } else { c }),
                ',' => Tok::Comma,
                ':' => Tok::Colon,
                '.' => Tok::Dot,
                '+' | '-' | '*' | '/' | '%' | '<' | '>' | '=' => Tok::Op(c.to_string()),
                _ => return raise("SyntaxError", format!("invalid character '{c}'")),
            });
            i += 1;
        }
    }
    Ok(out)
}
