//! Line-oriented reader shared by the text serializers (maps, trajectories,
//! the experience store). Every parse failure reports the 1-based line number
//! so a broken file can be fixed by hand.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TextError {
    pub fn at(line: usize, msg: impl Into<String>) -> Self {
        TextError::Parse { line, msg: msg.into() }
    }
}

/// Cursor over the lines of a document. `next()` skips nothing: blank lines
/// are returned as-is so formats stay byte-exact.
pub struct LineCursor<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> LineCursor<'a> {
    pub fn new(text: &'a str) -> Self {
        LineCursor { lines: text.lines().collect(), pos: 0 }
    }

    /// 1-based number of the line most recently returned.
    pub fn line_no(&self) -> usize {
        self.pos
    }

    pub fn next(&mut self) -> Result<&'a str, TextError> {
        match self.lines.get(self.pos) {
            Some(l) => {
                self.pos += 1;
                Ok(l)
            }
            None => Err(TextError::at(self.pos + 1, "unexpected end of file")),
        }
    }

    pub fn peek(&self) -> Option<&'a str> {
        self.lines.get(self.pos).copied()
    }

    pub fn at_end(&self) -> bool {
        self.pos >= self.lines.len()
    }

    /// Consumes the next line and checks it equals `expected` verbatim.
    pub fn expect(&mut self, expected: &str) -> Result<(), TextError> {
        let line = self.next()?;
        if line != expected {
            return Err(TextError::at(self.line_no(), format!("expected `{expected}`, found `{line}`")));
        }
        Ok(())
    }

    /// Consumes the next line and strips a `<key> ` prefix, returning the rest.
    pub fn expect_key(&mut self, key: &str) -> Result<&'a str, TextError> {
        let line = self.next()?;
        if line == key {
            return Ok("");
        }
        match line.strip_prefix(key) {
            Some(rest) if rest.starts_with(' ') => Ok(&rest[1..]),
            _ => Err(TextError::at(self.line_no(), format!("expected `{key} ...`, found `{line}`"))),
        }
    }

    /// Parses one whitespace-separated value from the remainder of a line.
    pub fn parse_one<T: std::str::FromStr>(&self, token: &str, what: &str) -> Result<T, TextError> {
        token
            .parse()
            .map_err(|_| TextError::at(self.line_no(), format!("invalid {what}: `{token}`")))
    }
}

/// Splits a line remainder into whitespace-separated tokens.
pub fn tokens(rest: &str) -> Vec<&str> {
    rest.split_whitespace().collect()
}
