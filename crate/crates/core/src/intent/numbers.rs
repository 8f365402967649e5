//! Count words: "two", "twenty-four", "sixty four", "a single".

const UNITS: [&str; 20] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
    "nineteen",
];

const TENS: [(&str, u32); 5] = [
    ("twenty", 20),
    ("thirty", 30),
    ("forty", 40),
    ("fifty", 50),
    ("sixty", 60),
];

/// Largest count accepted in word form.
pub const MAX_WORD_COUNT: u32 = 64;

/// Parses a count given as digits or as an English number word up to
/// sixty-four. `single` and `a single` read as one.
pub fn parse_count(text: &str) -> Option<u32> {
    let t = text.trim().to_ascii_lowercase();
    if let Ok(n) = t.parse::<u32>() {
        return Some(n);
    }
    let t = t.strip_prefix("a ").unwrap_or(&t);
    if t == "single" {
        return Some(1);
    }
    if let Some(i) = UNITS.iter().position(|u| *u == t) {
        return Some(i as u32);
    }
    let (head, tail) = match t.split_once(['-', ' ']) {
        Some((h, r)) => (h, Some(r.trim())),
        None => (t, None),
    };
    let tens = TENS.iter().find(|(w, _)| *w == head)?.1;
    let n = match tail {
        None => tens,
        Some(unit) => {
            let u = UNITS[1..10].iter().position(|w| *w == unit)? as u32 + 1;
            tens + u
        }
    };
    (n <= MAX_WORD_COUNT).then_some(n)
}

/// Regex alternation matching every count word, longest forms first.
pub fn count_word_pattern() -> String {
    let mut words: Vec<String> = Vec::new();
    for (tens, _) in TENS.iter().rev() {
        words.push(format!("{tens}[- ](?:one|two|three|four|five|six|seven|eight|nine)"));
        words.push((*tens).to_string());
    }
    for unit in UNITS[1..].iter().rev() {
        words.push((*unit).to_string());
    }
    words.push("single".to_string());
    words.join("|")
}
