//! Arithmetic evaluation for the built-in calculator and count tools.
//!
//! The calculator accepts infix expressions over f64 with `+ - * / ^`,
//! unary minus, parentheses, and the comparisons `< <= > >= == !=`.
//! Comparison results render as `True` / `False` so they can feed back into
//! later expressions as answer text.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CalcError {
    #[error("cannot parse expression: {0}")]
    Parse(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("arithmetic overflow")]
    Overflow,
}

/// Evaluation result: a number, or a truth value from a comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalcValue {
    Number(f64),
    Bool(bool),
}

impl fmt::Display for CalcValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalcValue::Number(x) => f.write_str(&render_number(*x)),
            CalcValue::Bool(true) => f.write_str("True"),
            CalcValue::Bool(false) => f.write_str("False"),
        }
    }
}

/// Evaluates an expression and renders the result as answer text.
pub fn calculator_eval(expr: &str) -> Result<String, CalcError> {
    Ok(evaluate(expr)?.to_string())
}

/// Evaluates an expression to a value.
pub fn evaluate(expr: &str) -> Result<CalcValue, CalcError> {
    let tokens = tokenize(expr)?;
    let mut parser = Parser { tokens, pos: 0 };
    let value = parser.comparison()?;
    if parser.pos != parser.tokens.len() {
        return Err(CalcError::Parse(format!(
            "unexpected trailing input in `{expr}`"
        )));
    }
    if let CalcValue::Number(x) = value {
        if !x.is_finite() {
            return Err(CalcError::Overflow);
        }
    }
    Ok(value)
}

/// Renders a float the way answers are written: integers without a decimal
/// point, everything else as a plain decimal expansion of ten significant
/// digits with trailing zeros trimmed.
pub fn render_number(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if x.fract() == 0.0 && x.abs() < 1e15 {
        return format!("{}", x as i64);
    }
    // Ten significant digits via exponent form, then expand to plain
    // decimal. {:.9e} yields e.g. "1.500000000e0" or "-2.748000000e-3".
    let sci = format!("{x:.9e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("exponent digits");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    // digits has exactly 10 significant figures; place the point after the
    // first digit shifted by exp.
    let point = 1 + exp;
    let mut out = String::new();
    if negative {
        out.push('-');
    }
    if point <= 0 {
        out.push_str("0.");
        for _ in 0..(-point) {
            out.push('0');
        }
        out.push_str(&digits);
    } else if (point as usize) >= digits.len() {
        out.push_str(&digits);
        for _ in 0..(point as usize - digits.len()) {
            out.push('0');
        }
    } else {
        out.push_str(&digits[..point as usize]);
        out.push('.');
        out.push_str(&digits[point as usize..]);
    }
    if out.contains('.') {
        let trimmed = out.trim_end_matches('0').trim_end_matches('.');
        out = trimmed.to_string();
    }
    out
}

/// Counts the elements of a rendered list: strips one surrounding bracket
/// pair if present, splits on commas, and counts non-empty items.
pub fn count_eval(list: &str) -> String {
    let trimmed = list.trim();
    let inner = trimmed
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .unwrap_or(trimmed);
    let count = inner
        .split(',')
        .filter(|item| !item.trim().is_empty())
        .count();
    count.to_string()
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Number(f64),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Lt,
    Le,
    Gt,
    Ge,
    EqEq,
    Ne,
}

fn tokenize(expr: &str) -> Result<Vec<Token>, CalcError> {
    let bytes = expr.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                tokens.push(Token::Plus);
                i += 1;
            }
            '-' => {
                tokens.push(Token::Minus);
                i += 1;
            }
            '*' => {
                tokens.push(Token::Star);
                i += 1;
            }
            '/' => {
                tokens.push(Token::Slash);
                i += 1;
            }
            '^' => {
                tokens.push(Token::Caret);
                i += 1;
            }
            '(' => {
                tokens.push(Token::LParen);
                i += 1;
            }
            ')' => {
                tokens.push(Token::RParen);
                i += 1;
            }
            '<' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    tokens.push(Token::Le);
                    i += 2;
                } else {
                    tokens.push(Token::Lt);
                    i += 1;
                }
            }
            '>' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    tokens.push(Token::Ge);
                    i += 2;
                } else {
                    tokens.push(Token::Gt);
                    i += 1;
                }
            }
            '=' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    tokens.push(Token::EqEq);
                    i += 2;
                } else {
                    return Err(CalcError::Parse(format!(
                        "single `=` in expression `{expr}`"
                    )));
                }
            }
            '!' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    tokens.push(Token::Ne);
                    i += 2;
                } else {
                    return Err(CalcError::Parse(format!("stray `!` in `{expr}`")));
                }
            }
            '0'..='9' | '.' => {
                let start = i;
                let mut seen_dot = false;
                while i < bytes.len() {
                    let b = bytes[i] as char;
                    if b.is_ascii_digit() {
                        i += 1;
                    } else if b == '.' && !seen_dot {
                        seen_dot = true;
                        i += 1;
                    } else {
                        break;
                    }
                }
                let text = &expr[start..i];
                if text == "." {
                    return Err(CalcError::Parse(format!("lone `.` in `{expr}`")));
                }
                let value: f64 = text
                    .parse()
                    .map_err(|_| CalcError::Parse(format!("bad number `{text}`")))?;
                tokens.push(Token::Number(value));
            }
            other => {
                return Err(CalcError::Parse(format!(
                    "unexpected character `{other}` in `{expr}`"
                )))
            }
        }
    }
    if tokens.is_empty() {
        return Err(CalcError::Parse("empty expression".to_string()));
    }
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    /// comparison := additive (cmp_op additive)?  (non-associative)
    fn comparison(&mut self) -> Result<CalcValue, CalcError> {
        let left = self.additive()?;
        let op = match self.peek() {
            Some(Token::Lt) => Some(Token::Lt),
            Some(Token::Le) => Some(Token::Le),
            Some(Token::Gt) => Some(Token::Gt),
            Some(Token::Ge) => Some(Token::Ge),
            Some(Token::EqEq) => Some(Token::EqEq),
            Some(Token::Ne) => Some(Token::Ne),
            _ => None,
        };
        let Some(op) = op else {
            return Ok(CalcValue::Number(left));
        };
        self.pos += 1;
        let right = self.additive()?;
        let truth = match op {
            Token::Lt => left < right,
            Token::Le => left <= right,
            Token::Gt => left > right,
            Token::Ge => left >= right,
            Token::EqEq => left == right,
            Token::Ne => left != right,
            _ => unreachable!(),
        };
        Ok(CalcValue::Bool(truth))
    }

    fn additive(&mut self) -> Result<f64, CalcError> {
        let mut acc = self.multiplicative()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.pos += 1;
                    acc += self.multiplicative()?;
                }
                Some(Token::Minus) => {
                    self.pos += 1;
                    acc -= self.multiplicative()?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn multiplicative(&mut self) -> Result<f64, CalcError> {
        let mut acc = self.unary()?;
        loop {
            match self.peek() {
                Some(Token::Star) => {
                    self.pos += 1;
                    acc *= self.unary()?;
                }
                Some(Token::Slash) => {
                    self.pos += 1;
                    let divisor = self.unary()?;
                    if divisor == 0.0 {
                        return Err(CalcError::DivisionByZero);
                    }
                    acc /= divisor;
                }
                _ => return Ok(acc),
            }
        }
    }

    /// Unary minus binds looser than `^` on the base (`-2^2` is `-(2^2)`)
    /// while the exponent position parses a fresh unary (`2^-1` works).
    fn unary(&mut self) -> Result<f64, CalcError> {
        if matches!(self.peek(), Some(Token::Minus)) {
            self.pos += 1;
            return Ok(-self.unary()?);
        }
        self.power()
    }

    fn power(&mut self) -> Result<f64, CalcError> {
        let base = self.atom()?;
        if matches!(self.peek(), Some(Token::Caret)) {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(base.powf(exponent));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<f64, CalcError> {
        match self.bump() {
            Some(Token::Number(x)) => Ok(x),
            Some(Token::LParen) => {
                let value = self.comparison()?;
                match self.bump() {
                    Some(Token::RParen) => match value {
                        CalcValue::Number(x) => Ok(x),
                        CalcValue::Bool(_) => Err(CalcError::Parse(
                            "comparison cannot nest inside arithmetic".to_string(),
                        )),
                    },
                    _ => Err(CalcError::Parse("missing closing parenthesis".to_string())),
                }
            }
            other => Err(CalcError::Parse(format!(
                "expected number or `(`, found {other:?}"
            ))),
        }
    }
}
