//! Plain-text circuit serialization.
//!
//! ```text
//! fairpc-circuit v1
//! var <id> <arity> <name>
//! L <id> I <varid> <value>          indicator leaf
//! L <id> C <varid> <p0> <p1> ...    categorical leaf
//! P <id> <child> <child> ...        product
//! S <id> <child>:<logweight> ...    sum (natural-log weights, "-inf" = 0)
//! root <id>
//! ```
//!
//! Variable lines precede node lines; node ids are ascending with children
//! before parents; `#` starts a comment. Floats are written in Rust's
//! shortest round-trip form, so saving and reloading reproduces parameters
//! bit for bit.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Circuit, CircuitBuilder, LeafKind, Node, NodeId, VarId, Variable};
use crate::error::{Error, Result};

pub const FORMAT_HEADER: &str = "fairpc-circuit v1";

impl Circuit {
    pub fn write_format<W: Write>(&self, w: &mut W, trailing_comments: &[String]) -> Result<()> {
        writeln!(w, "{FORMAT_HEADER}")?;
        for v in self.vars() {
            writeln!(w, "var {} {} {}", v.id.0, v.arity, v.name)?;
        }
        for (i, node) in self.nodes().iter().enumerate() {
            match node {
                Node::Leaf { var, kind } => match kind {
                    LeafKind::Indicator(value) => writeln!(w, "L {i} I {} {value}", var.0)?,
                    LeafKind::Categorical(pmf) => {
                        write!(w, "L {i} C {}", var.0)?;
                        for p in pmf {
                            write!(w, " {p}")?;
                        }
                        writeln!(w)?;
                    }
                },
                Node::Product { children } => {
                    write!(w, "P {i}")?;
                    for c in children {
                        write!(w, " {}", c.0)?;
                    }
                    writeln!(w)?;
                }
                Node::Sum {
                    children,
                    log_weights,
                } => {
                    write!(w, "S {i}")?;
                    for (c, lw) in children.iter().zip(log_weights) {
                        write!(w, " {}:{lw}", c.0)?;
                    }
                    writeln!(w)?;
                }
            }
        }
        writeln!(w, "root {}", self.root().0)?;
        for c in trailing_comments {
            writeln!(w, "# {c}")?;
        }
        Ok(())
    }

    pub fn to_format_string(&self) -> String {
        self.format_string_with(&[])
    }

    pub fn format_string_with(&self, comments: &[String]) -> String {
        let mut out = Vec::new();
        self.write_format(&mut out, comments)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(out).expect("format output is UTF-8")
    }

    /// Parse a circuit, rejecting files that violate normalization.
    /// Returns the circuit and any comment lines (without the `#`).
    pub fn read_format<R: BufRead>(r: R) -> Result<(Circuit, Vec<String>)> {
        let (circuit, comments) = Self::read_format_lenient(r)?;
        let violations = circuit.validate();
        if let Some(v) = violations.first() {
            return Err(Error::Structure(format!("invalid circuit file: {v}")));
        }
        Ok((circuit, comments))
    }

    /// Parse without enforcing weight or PMF normalization, so audits can
    /// load a damaged file and report which node violates which invariant.
    pub fn read_format_lenient<R: BufRead>(r: R) -> Result<(Circuit, Vec<String>)> {
        Parser::new().run(r)
    }

    pub fn save(&self, path: impl AsRef<Path>, comments: &[String]) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_format(&mut w, comments)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Circuit, Vec<String>)> {
        Self::read_format(BufReader::new(File::open(path)?))
    }

    pub fn from_format_str(s: &str) -> Result<Circuit> {
        Ok(Self::read_format(io::Cursor::new(s))?.0)
    }
}

struct Parser {
    vars: Vec<Variable>,
    nodes: Vec<Node>,
    /// File node id -> dense index.
    ids: HashMap<usize, NodeId>,
    last_id: Option<usize>,
    root: Option<NodeId>,
    comments: Vec<String>,
    saw_header: bool,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

impl Parser {
    fn new() -> Self {
        Parser {
            vars: Vec::new(),
            nodes: Vec::new(),
            ids: HashMap::new(),
            last_id: None,
            root: None,
            comments: Vec::new(),
            saw_header: false,
        }
    }

    fn run<R: BufRead>(mut self, r: R) -> Result<(Circuit, Vec<String>)> {
        let mut line_no = 0;
        for line in r.lines() {
            line_no += 1;
            let line = line?;
            let text = line.trim();
            if text.is_empty() {
                continue;
            }
            if let Some(comment) = text.strip_prefix('#') {
                self.comments.push(comment.trim().to_string());
                continue;
            }
            if !self.saw_header {
                if text != FORMAT_HEADER {
                    return Err(parse_err(
                        line_no,
                        format!("expected header {FORMAT_HEADER:?}, found {text:?}"),
                    ));
                }
                self.saw_header = true;
                continue;
            }
            if self.root.is_some() {
                return Err(parse_err(line_no, "content after root line"));
            }
            let mut tokens = text.split_whitespace();
            let tag = tokens.next().expect("non-empty line has a first token");
            let rest: Vec<&str> = tokens.collect();
            match tag {
                "var" => self.var_line(line_no, &rest)?,
                "L" => self.leaf_line(line_no, &rest)?,
                "P" => self.product_line(line_no, &rest)?,
                "S" => self.sum_line(line_no, &rest)?,
                "root" => self.root_line(line_no, &rest)?,
                other => {
                    return Err(parse_err(line_no, format!("unknown line tag {other:?}")))
                }
            }
        }
        if !self.saw_header {
            return Err(parse_err(1, format!("missing header {FORMAT_HEADER:?}")));
        }
        let root = self
            .root
            .ok_or_else(|| parse_err(line_no + 1, "missing root line"))?;
        let mut builder = CircuitBuilder::new(self.vars)
            .map_err(|e| parse_err(line_no, e.to_string()))?;
        for node in self.nodes {
            builder.push_unchecked(node);
        }
        let circuit = builder
            .finish(root)
            .map_err(|e| parse_err(line_no, e.to_string()))?;
        Ok((circuit, self.comments))
    }

    fn number<T: std::str::FromStr>(&self, line: usize, token: &str, what: &str) -> Result<T> {
        token
            .parse()
            .map_err(|_| parse_err(line, format!("invalid {what}: {token:?}")))
    }

    fn var_line(&mut self, line: usize, rest: &[&str]) -> Result<()> {
        if !self.nodes.is_empty() {
            return Err(parse_err(line, "var lines must precede node lines"));
        }
        if rest.len() != 3 {
            return Err(parse_err(line, "expected: var <id> <arity> <name>"));
        }
        let id: usize = self.number(line, rest[0], "variable id")?;
        let arity: usize = self.number(line, rest[1], "arity")?;
        if id != self.vars.len() {
            return Err(parse_err(
                line,
                format!("variable ids must be dense and ascending; expected {}", self.vars.len()),
            ));
        }
        let var = Variable::new(VarId(id), arity, rest[2])
            .map_err(|e| parse_err(line, e.to_string()))?;
        self.vars.push(var);
        Ok(())
    }

    fn node_id(&mut self, line: usize, token: &str) -> Result<()> {
        let id: usize = self.number(line, token, "node id")?;
        if let Some(last) = self.last_id {
            if id <= last {
                return Err(parse_err(
                    line,
                    format!("node ids must be ascending; {id} follows {last}"),
                ));
            }
        }
        self.last_id = Some(id);
        self.ids.insert(id, NodeId(self.nodes.len()));
        Ok(())
    }

    fn child(&self, line: usize, token: &str) -> Result<NodeId> {
        let id: usize = self.number(line, token, "child id")?;
        self.ids.get(&id).copied().ok_or_else(|| {
            parse_err(
                line,
                format!("child {id} is undefined here; children must precede parents"),
            )
        })
    }

    fn check_var(&self, line: usize, var: usize) -> Result<VarId> {
        if var >= self.vars.len() {
            return Err(parse_err(line, format!("unknown variable id {var}")));
        }
        Ok(VarId(var))
    }

    fn leaf_line(&mut self, line: usize, rest: &[&str]) -> Result<()> {
        if rest.len() < 3 {
            return Err(parse_err(line, "expected: L <id> <I|C> <varid> ..."));
        }
        self.node_id(line, rest[0])?;
        let var = self.check_var(line, self.number(line, rest[2], "variable id")?)?;
        let arity = self.vars[var.0].arity;
        let kind = match rest[1] {
            "I" => {
                if rest.len() != 4 {
                    return Err(parse_err(line, "expected: L <id> I <varid> <value>"));
                }
                let value: usize = self.number(line, rest[3], "indicator value")?;
                if value >= arity {
                    return Err(parse_err(
                        line,
                        format!("indicator value {value} out of range for arity {arity}"),
                    ));
                }
                LeafKind::Indicator(value)
            }
            "C" => {
                let pmf: Vec<f64> = rest[3..]
                    .iter()
                    .map(|&t| self.number(line, t, "probability"))
                    .collect::<Result<_>>()?;
                if pmf.len() != arity {
                    return Err(parse_err(
                        line,
                        format!("expected {arity} probabilities, found {}", pmf.len()),
                    ));
                }
                if pmf.iter().any(|p| p.is_nan()) {
                    return Err(parse_err(line, "probabilities must not be NaN"));
                }
                LeafKind::Categorical(pmf)
            }
            other => return Err(parse_err(line, format!("unknown leaf kind {other:?}"))),
        };
        self.nodes.push(Node::Leaf { var, kind });
        Ok(())
    }

    fn product_line(&mut self, line: usize, rest: &[&str]) -> Result<()> {
        if rest.len() < 3 {
            return Err(parse_err(
                line,
                "products need an id and at least two children",
            ));
        }
        self.node_id(line, rest[0])?;
        let children = rest[1..]
            .iter()
            .map(|&t| self.child(line, t))
            .collect::<Result<Vec<_>>>()?;
        self.nodes.push(Node::Product { children });
        Ok(())
    }

    fn sum_line(&mut self, line: usize, rest: &[&str]) -> Result<()> {
        if rest.len() < 2 {
            return Err(parse_err(line, "sums need an id and at least one child"));
        }
        self.node_id(line, rest[0])?;
        let mut children = Vec::new();
        let mut log_weights = Vec::new();
        for token in &rest[1..] {
            let (c, w) = token.split_once(':').ok_or_else(|| {
                parse_err(line, format!("expected <child>:<logweight>, found {token:?}"))
            })?;
            children.push(self.child(line, c)?);
            let lw: f64 = self.number(line, w, "log weight")?;
            if lw.is_nan() || lw == f64::INFINITY {
                return Err(parse_err(line, "log weights must be finite or -inf"));
            }
            log_weights.push(lw);
        }
        self.nodes.push(Node::Sum {
            children,
            log_weights,
        });
        Ok(())
    }

    fn root_line(&mut self, line: usize, rest: &[&str]) -> Result<()> {
        if rest.len() != 1 {
            return Err(parse_err(line, "expected: root <id>"));
        }
        self.root = Some(self.child(line, rest[0])?);
        Ok(())
    }
}
