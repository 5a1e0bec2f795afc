//! Recursive-descent parser for the infix expression grammar.
//!
//! Precedence, loosest first: `+ -`, then `* /`, then unary minus, then
//! function application and parentheses. Binary operators are
//! left-associative. Numeric literals (including scientific notation) become
//! frozen constants; the token `C` becomes an open constant slot. A unary
//! minus in front of a literal is folded into the literal; in front of
//! anything else it desugars to `(0 - expr)`.

use super::{BinaryOp, ExprError, ExpressionTree, Node, NodeKind, UnaryOp};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    /// Next token plus its starting byte offset; `None` at end of input.
    fn next(&mut self) -> Result<Option<(Tok, usize)>, ExprError> {
        self.skip_ws();
        if self.pos >= self.src.len() {
            return Ok(None);
        }
        let start = self.pos;
        let c = self.src[self.pos];
        let tok = match c {
            b'+' => {
                self.pos += 1;
                Tok::Plus
            }
            b'-' => {
                self.pos += 1;
                Tok::Minus
            }
            b'*' => {
                self.pos += 1;
                Tok::Star
            }
            b'/' => {
                self.pos += 1;
                Tok::Slash
            }
            b'(' => {
                self.pos += 1;
                Tok::LParen
            }
            b')' => {
                self.pos += 1;
                Tok::RParen
            }
            b'0'..=b'9' | b'.' => {
                let mut end = self.pos;
                while end < self.src.len() && (self.src[end].is_ascii_digit() || self.src[end] == b'.') {
                    end += 1;
                }
                if end < self.src.len() && (self.src[end] == b'e' || self.src[end] == b'E') {
                    let mut exp = end + 1;
                    if exp < self.src.len() && (self.src[exp] == b'+' || self.src[exp] == b'-') {
                        exp += 1;
                    }
                    if exp < self.src.len() && self.src[exp].is_ascii_digit() {
                        end = exp;
                        while end < self.src.len() && self.src[end].is_ascii_digit() {
                            end += 1;
                        }
                    }
                }
                let text = std::str::from_utf8(&self.src[self.pos..end]).unwrap();
                let value: f64 = text.parse().map_err(|_| ExprError::Syntax {
                    pos: start,
                    message: format!("invalid number `{text}`"),
                })?;
                self.pos = end;
                Tok::Num(value)
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let mut end = self.pos;
                while end < self.src.len()
                    && (self.src[end].is_ascii_alphanumeric() || self.src[end] == b'_')
                {
                    end += 1;
                }
                let text = std::str::from_utf8(&self.src[self.pos..end]).unwrap();
                self.pos = end;
                Tok::Ident(text.to_string())
            }
            other => {
                return Err(ExprError::Syntax {
                    pos: start,
                    message: format!("unexpected character `{}`", other as char),
                });
            }
        };
        Ok(Some((tok, start)))
    }
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    idx: usize,
    end_pos: usize,
    n_vars: usize,
}

impl Parser {
    fn peek(&self) -> Option<&(Tok, usize)> {
        self.toks.get(self.idx)
    }

    fn bump(&mut self) -> Option<(Tok, usize)> {
        let t = self.toks.get(self.idx).cloned();
        if t.is_some() {
            self.idx += 1;
        }
        t
    }

    fn here(&self) -> usize {
        self.peek().map(|(_, p)| *p).unwrap_or(self.end_pos)
    }

    fn err(&self, message: impl Into<String>) -> ExprError {
        ExprError::Syntax {
            pos: self.here(),
            message: message.into(),
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut node = self.term()?;
        while let Some((tok, _)) = self.peek() {
            let op = match tok {
                Tok::Plus => BinaryOp::Add,
                Tok::Minus => BinaryOp::Sub,
                _ => break,
            };
            self.bump();
            let rhs = self.term()?;
            node = Node::binary(op, node, rhs);
        }
        Ok(node)
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut node = self.factor()?;
        while let Some((tok, _)) = self.peek() {
            let op = match tok {
                Tok::Star => BinaryOp::Mul,
                Tok::Slash => BinaryOp::Div,
                _ => break,
            };
            self.bump();
            let rhs = self.factor()?;
            node = Node::binary(op, node, rhs);
        }
        Ok(node)
    }

    fn factor(&mut self) -> Result<Node, ExprError> {
        if matches!(self.peek(), Some((Tok::Minus, _))) {
            self.bump();
            let inner = self.factor()?;
            return Ok(match inner.kind {
                NodeKind::Literal(v) => Node::leaf(NodeKind::Literal(-v), false),
                _ => Node::binary(BinaryOp::Sub, Node::leaf(NodeKind::Literal(0.0), false), inner),
            });
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Node, ExprError> {
        let (tok, pos) = match self.bump() {
            Some(t) => t,
            None => return Err(self.err("unexpected end of input")),
        };
        match tok {
            Tok::Num(v) => Ok(Node::leaf(NodeKind::Literal(v), false)),
            Tok::LParen => {
                let node = self.expr()?;
                match self.peek() {
                    Some((Tok::RParen, _)) => {
                        self.bump();
                        Ok(node)
                    }
                    _ => Err(self.err("expected `)`")),
                }
            }
            Tok::Ident(name) => {
                if name == "C" {
                    return Ok(Node::leaf(NodeKind::OpenConst { slot: 0 }, true));
                }
                if let Some(rest) = name.strip_prefix('x') {
                    if let Ok(index) = rest.parse::<usize>() {
                        if index >= self.n_vars {
                            return Err(ExprError::VariableOutOfRange {
                                index,
                                n_vars: self.n_vars,
                                pos,
                            });
                        }
                        return Ok(Node::leaf(NodeKind::Variable(index), true));
                    }
                }
                if let Some(op) = UnaryOp::ALL.iter().find(|op| op.token() == name) {
                    match self.peek() {
                        Some((Tok::LParen, _)) => {
                            self.bump();
                        }
                        _ => {
                            return Err(self.err(format!("expected `(` after `{name}`")));
                        }
                    }
                    let arg = self.expr()?;
                    match self.peek() {
                        Some((Tok::RParen, _)) => {
                            self.bump();
                            Ok(Node::unary(*op, arg))
                        }
                        _ => Err(self.err(format!("expected `)` to close `{name}(`"))),
                    }
                } else {
                    Err(ExprError::Syntax {
                        pos,
                        message: format!("unknown identifier `{name}`"),
                    })
                }
            }
            _ => Err(ExprError::Syntax {
                pos,
                message: "expected a value".into(),
            }),
        }
    }
}

pub fn parse(text: &str, n_vars: usize) -> Result<ExpressionTree, ExprError> {
    let mut lexer = Lexer::new(text);
    let mut toks = Vec::new();
    while let Some(t) = lexer.next()? {
        toks.push(t);
    }
    let mut parser = Parser {
        toks,
        idx: 0,
        end_pos: text.len(),
        n_vars,
    };
    let root = parser.expr()?;
    if let Some((_, pos)) = parser.peek() {
        return Err(ExprError::Syntax {
            pos: *pos,
            message: "trailing input".into(),
        });
    }
    ExpressionTree::new(root, n_vars)
}
