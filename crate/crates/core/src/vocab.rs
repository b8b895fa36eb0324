//! Nested subword vocabularies built by greedy pair merging.
//!
//! One merge list is learned up to the largest requested size; level `i`
//! uses its first `sizes[i] - |alphabet|` merges, so every smaller level is
//! a prefix of every larger one. The word separator is never merged, which
//! keeps word boundaries recoverable at every level.
//!
//! Token ids are 1-based (id 0 is the CTC blank): ids `1..=|alphabet|` are
//! the base symbols in alphabet order, followed by merged tokens in merge
//! order.
//!
//! # File format
//!
//! ```text
//! #vocab sizes=13,24,48 base=13 separator=|
//! a                 <- base symbols, one per line
//! ...
//! ab<TAB>a<TAB>b    <- merged token, then the pair it was merged from
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VocabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("character {0:?} is not in the base alphabet")]
    UnknownChar(char),
    #[error("token id {id} is invalid at level {level} (size {size})")]
    InvalidId { id: usize, level: usize, size: usize },
    #[error("no vocabulary level {0}")]
    NoSuchLevel(usize),
    #[error("malformed vocabulary file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// Base symbols plus the designated word separator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
    separator: char,
}

impl Alphabet {
    pub fn new(symbols: Vec<char>, separator: char) -> Result<Self, VocabError> {
        if !symbols.contains(&separator) {
            return Err(VocabError::Config(format!("separator {separator:?} not in alphabet")));
        }
        let mut seen = symbols.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != symbols.len() {
            return Err(VocabError::Config("alphabet has duplicate symbols".into()));
        }
        if let Some(c) = symbols.iter().find(|c| c.is_whitespace() || c.is_control()) {
            return Err(VocabError::Config(format!("alphabet symbol {c:?} is whitespace")));
        }
        Ok(Self { symbols, separator })
    }

    /// Builds an alphabet from a string of letters, appending `separator`.
    pub fn from_letters(letters: &str, separator: char) -> Result<Self, VocabError> {
        let mut symbols: Vec<char> = letters.chars().collect();
        symbols.push(separator);
        Self::new(symbols, separator)
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn separator(&self) -> char {
        self.separator
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    /// Split a base string into words on the separator, dropping empties.
    pub fn words<'a>(&self, text: &'a str) -> Vec<&'a str> {
        text.split(self.separator).filter(|w| !w.is_empty()).collect()
    }
}

/// A nested family of subword vocabularies.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabHierarchy {
    alphabet: Alphabet,
    sizes: Vec<usize>,
    /// All tokens, base symbols first. Index `i` holds id `i + 1`.
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    ids: HashMap<String, usize>,
}

impl VocabHierarchy {
    /// Learn merges on `corpus` until the largest of `sizes` is reached.
    pub fn build(alphabet: Alphabet, corpus: &[String], sizes: &[usize]) -> Result<Self, VocabError> {
        validate_sizes(&alphabet, sizes)?;
        let max = *sizes.last().expect("validated non-empty");
        let wanted = max - alphabet.len();

        // Word frequencies; BTreeMap keeps iteration order deterministic.
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for line in corpus {
            for c in line.chars() {
                if alphabet.index_of(c).is_none() {
                    return Err(VocabError::UnknownChar(c));
                }
            }
            for w in alphabet.words(line) {
                *freq.entry(w.to_string()).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, usize)> = freq
            .into_iter()
            .map(|(w, n)| (w.chars().map(String::from).collect(), n))
            .collect();

        let mut merges = Vec::with_capacity(wanted);
        while merges.len() < wanted {
            let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
            for (toks, n) in &words {
                for pair in toks.windows(2) {
                    *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += n;
                }
            }
            // Highest count, then lexicographically smallest pair.
            let best = counts
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
                .map(|((l, r), _)| (l.to_string(), r.to_string()));
            let Some((left, right)) = best else {
                return Err(VocabError::Config(format!(
                    "corpus supports only {} merges, {} requested",
                    merges.len(),
                    wanted
                )));
            };
            for (toks, _) in &mut words {
                apply_merge(toks, &left, &right);
            }
            merges.push((left, right));
        }
        Ok(Self::assemble(alphabet, sizes.to_vec(), merges))
    }

    fn assemble(alphabet: Alphabet, sizes: Vec<usize>, merges: Vec<(String, String)>) -> Self {
        let mut tokens: Vec<String> = alphabet.symbols.iter().map(|c| c.to_string()).collect();
        tokens.extend(merges.iter().map(|(l, r)| format!("{l}{r}")));
        let mut ids = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            // A merged string can repeat; the first id keeps it.
            ids.entry(t.clone()).or_insert(i + 1);
        }
        Self {
            alphabet,
            sizes,
            tokens,
            merges,
            ids,
        }
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_levels(&self) -> usize {
        self.sizes.len()
    }

    pub fn size(&self, level: usize) -> Result<usize, VocabError> {
        self.sizes.get(level).copied().ok_or(VocabError::NoSuchLevel(level))
    }

    pub fn merges(&self, level: usize) -> Result<&[(String, String)], VocabError> {
        Ok(&self.merges[..self.size(level)? - self.alphabet.len()])
    }

    /// Token string for `id` at `level`.
    pub fn token(&self, id: usize, level: usize) -> Result<&str, VocabError> {
        let size = self.size(level)?;
        if id == 0 || id > size {
            return Err(VocabError::InvalidId { id, level, size });
        }
        Ok(&self.tokens[id - 1])
    }

    pub fn encode(&self, text: &str, level: usize) -> Result<Vec<usize>, VocabError> {
        let merges = self.merges(level)?;
        let sep = self.alphabet.separator;
        let mut out = Vec::with_capacity(text.len());
        let mut word: Vec<String> = Vec::new();
        let flush = |word: &mut Vec<String>, out: &mut Vec<usize>| {
            for (l, r) in merges {
                if word.len() < 2 {
                    break;
                }
                apply_merge(word, l, r);
            }
            out.extend(word.drain(..).map(|t| self.ids[&t]));
        };
        for c in text.chars() {
            let idx = self.alphabet.index_of(c).ok_or(VocabError::UnknownChar(c))?;
            if c == sep {
                flush(&mut word, &mut out);
                out.push(idx + 1);
            } else {
                word.push(c.to_string());
            }
        }
        flush(&mut word, &mut out);
        Ok(out)
    }

    pub fn decode(&self, labels: &[usize], level: usize) -> Result<String, VocabError> {
        let mut s = String::new();
        for &id in labels {
            s.push_str(self.token(id, level)?);
        }
        Ok(s)
    }

    /// Serialize to the documented text format.
    pub fn to_text(&self) -> String {
        let sizes: Vec<String> = self.sizes.iter().map(usize::to_string).collect();
        let mut s = format!(
            "#vocab sizes={} base={} separator={}\n",
            sizes.join(","),
            self.alphabet.len(),
            self.alphabet.separator
        );
        for c in &self.alphabet.symbols {
            let _ = writeln!(s, "{c}");
        }
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l}{r}\t{l}\t{r}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| VocabError::Format("empty file".into()))?;
        let fields: HashMap<&str, &str> = header
            .strip_prefix("#vocab ")
            .ok_or_else(|| VocabError::Format("missing #vocab header".into()))?
            .split(' ')
            .filter_map(|kv| kv.split_once('='))
            .collect();
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| VocabError::Format(format!("header lacks {k}")));
        let sizes = get("sizes")?
            .split(',')
            .map(|s| s.parse::<usize>().map_err(|_| VocabError::Format(format!("bad size {s:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let base: usize = get("base")?.parse().map_err(|_| VocabError::Format("bad base".into()))?;
        let mut sep_chars = get("separator")?.chars();
        let separator = match (sep_chars.next(), sep_chars.next()) {
            (Some(c), None) => c,
            _ => return Err(VocabError::Format("separator must be one character".into())),
        };
        let mut symbols = Vec::with_capacity(base);
        let mut merges = Vec::new();
        for (n, line) in lines.enumerate() {
            if n < base {
                let mut cs = line.chars();
                match (cs.next(), cs.next()) {
                    (Some(c), None) => symbols.push(c),
                    _ => return Err(VocabError::Format(format!("base line {} is not one symbol", n + 2))),
                }
            } else {
                let parts: Vec<&str> = line.split('\t').collect();
                match parts.as_slice() {
                    [tok, l, r] if *tok == format!("{l}{r}") => merges.push((l.to_string(), r.to_string())),
                    _ => return Err(VocabError::Format(format!("merge line {} is malformed", n + 2))),
                }
            }
        }
        let alphabet = Alphabet::new(symbols, separator)?;
        validate_sizes(&alphabet, &sizes)?;
        if alphabet.len() + merges.len() != *sizes.last().unwrap() {
            return Err(VocabError::Format("token count does not match largest size".into()));
        }
        Ok(Self::assemble(alphabet, sizes, merges))
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, self.to_text()).map_err(|e| VocabError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path).map_err(|e| VocabError::Io(e.to_string()))?;
        Self::from_text(&text)
    }
}

fn validate_sizes(alphabet: &Alphabet, sizes: &[usize]) -> Result<(), VocabError> {
    if sizes.is_empty() {
        return Err(VocabError::Config("at least one level size is required".into()));
    }
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(VocabError::Config(format!("level sizes {sizes:?} must be non-decreasing")));
    }
    if sizes[0] < alphabet.len() {
        return Err(VocabError::Config(format!(
            "level size {} is smaller than the base alphabet ({})",
            sizes[0],
            alphabet.len()
        )));
    }
    Ok(())
}

/// Merge every non-overlapping occurrence of `(left, right)`, left to right.
fn apply_merge(tokens: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < tokens.len() {
        if tokens[i] == left && tokens[i + 1] == right {
            let r = tokens.remove(i + 1);
            tokens[i].push_str(&r);
        }
        i += 1;
    }
}
