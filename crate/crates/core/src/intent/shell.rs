//! Just enough shell lexing to find launcher invocations in a script.
//!
//! Splits text into simple commands (on newlines, `;`, `&&`, `||`, `|`, `&`)
//! and each command into words with quotes removed. `$(...)` and backticks
//! stay inside the surrounding word verbatim. Redirection targets are dropped.

pub type Command = Vec<String>;

pub fn split_commands(text: &str) -> Vec<Command> {
    let mut lexer = Lexer {
        chars: text.chars().collect(),
        pos: 0,
        commands: Vec::new(),
        words: Vec::new(),
        word: String::new(),
        in_word: false,
        skip_next_word: false,
    };
    lexer.run();
    lexer.commands
}

struct Lexer {
    chars: Vec<char>,
    pos: usize,
    commands: Vec<Command>,
    words: Vec<String>,
    word: String,
    in_word: bool,
    skip_next_word: bool,
}

impl Lexer {
    fn peek(&self, offset: usize) -> Option<char> {
        self.chars.get(self.pos + offset).copied()
    }

    fn end_word(&mut self) {
        if self.in_word {
            let word = std::mem::take(&mut self.word);
            if self.skip_next_word {
                self.skip_next_word = false;
            } else {
                self.words.push(word);
            }
            self.in_word = false;
        }
    }

    fn end_command(&mut self) {
        self.end_word();
        self.skip_next_word = false;
        if !self.words.is_empty() {
            self.commands.push(std::mem::take(&mut self.words));
        }
    }

    fn run(&mut self) {
        while let Some(c) = self.peek(0) {
            match c {
                ' ' | '\t' | '\r' => {
                    self.end_word();
                    self.pos += 1;
                }
                '\n' | ';' => {
                    self.end_command();
                    self.pos += 1;
                }
                '&' | '|' => {
                    self.end_command();
                    self.pos += 1;
                    if self.peek(0) == Some(c) {
                        self.pos += 1;
                    }
                }
                '>' | '<' => {
                    // `2>` leaves a stray "2" word; harmless for our purposes.
                    self.end_word();
                    self.pos += 1;
                    while matches!(self.peek(0), Some('>' | '&')) {
                        self.pos += 1;
                    }
                    self.skip_next_word = true;
                }
                '#' if !self.in_word => {
                    while !matches!(self.peek(0), None | Some('\n')) {
                        self.pos += 1;
                    }
                }
                '\'' => {
                    self.in_word = true;
                    self.pos += 1;
                    while let Some(q) = self.peek(0) {
                        self.pos += 1;
                        if q == '\'' {
                            break;
                        }
                        self.word.push(q);
                    }
                }
                '"' => {
                    self.in_word = true;
                    self.pos += 1;
                    while let Some(q) = self.peek(0) {
                        self.pos += 1;
                        match q {
                            '"' => break,
                            '\\' if matches!(self.peek(0), Some('"' | '\\' | '$' | '`')) => {
                                self.word.push(self.chars[self.pos]);
                                self.pos += 1;
                            }
                            _ => self.word.push(q),
                        }
                    }
                }
                '\\' => {
                    self.pos += 1;
                    match self.peek(0) {
                        Some('\n') => self.pos += 1,
                        Some(next) => {
                            self.in_word = true;
                            self.word.push(next);
                            self.pos += 1;
                        }
                        None => {}
                    }
                }
                '$' if self.peek(1) == Some('(') => {
                    self.in_word = true;
                    self.copy_balanced('(', ')');
                }
                '`' => {
                    self.in_word = true;
                    self.word.push('`');
                    self.pos += 1;
                    while let Some(q) = self.peek(0) {
                        self.word.push(q);
                        self.pos += 1;
                        if q == '`' {
                            break;
                        }
                    }
                }
                _ => {
                    self.in_word = true;
                    self.word.push(c);
                    self.pos += 1;
                }
            }
        }
        self.end_command();
    }

    /// Copies `$(` ... `)` into the current word, honouring nesting and quotes.
    fn copy_balanced(&mut self, open: char, close: char) {
        let mut depth = 0usize;
        let mut quote: Option<char> = None;
        while let Some(c) = self.peek(0) {
            self.word.push(c);
            self.pos += 1;
            match quote {
                Some(q) if c == q => quote = None,
                Some(_) => {}
                None if c == '\'' || c == '"' => quote = Some(c),
                None if c == open => depth += 1,
                None if c == close => {
                    depth -= 1;
                    if depth == 0 {
                        return;
                    }
                }
                None => {}
            }
        }
    }
}

/// Joins words back into a command line, quoting words that need it.
pub fn join_words<S: AsRef<str>>(words: &[S]) -> String {
    words
        .iter()
        .map(|w| quote_word(w.as_ref()))
        .collect::<Vec<_>>()
        .join(" ")
}

fn quote_word(word: &str) -> String {
    let plain = !word.is_empty()
        && word.chars().all(|c| {
            c.is_ascii_alphanumeric() || "-_./=:,+@%~$".contains(c) || !c.is_ascii()
        });
    if plain || word.starts_with("$(") {
        word.to_string()
    } else {
        format!("'{}'", word.replace('\'', r"'\''"))
    }
}
