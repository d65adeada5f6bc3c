use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One user-item interaction with ordered categorical side fields.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: u64,
    pub side_fields: Vec<(String, String)>,
}

impl InteractionRecord {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: u64) -> Self {
        InteractionRecord {
            user_id: user.into(),
            item_id: item.into(),
            timestamp,
            side_fields: Vec::new(),
        }
    }

    pub fn with_field(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.side_fields.push((name.into(), value.into()));
        self
    }

    fn field_names(&self) -> impl Iterator<Item = &str> {
        self.side_fields.iter().map(|(n, _)| n.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetFormat {
    #[serde(rename = "movielens-100k")]
    Movielens100k,
    #[serde(rename = "movielens-1m")]
    Movielens1m,
    #[serde(rename = "amazon-beauty")]
    AmazonBeauty,
    #[serde(rename = "canonical-tsv")]
    CanonicalTsv,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens-100k" => Ok(DatasetFormat::Movielens100k),
            "movielens-1m" => Ok(DatasetFormat::Movielens1m),
            "amazon-beauty" => Ok(DatasetFormat::AmazonBeauty),
            "canonical-tsv" => Ok(DatasetFormat::CanonicalTsv),
            other => Err(Error::Config(format!(
                "unknown dataset format `{other}` (expected movielens-100k, movielens-1m, amazon-beauty or canonical-tsv)"
            ))),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetFormat::Movielens100k => "movielens-100k",
            DatasetFormat::Movielens1m => "movielens-1m",
            DatasetFormat::AmazonBeauty => "amazon-beauty",
            DatasetFormat::CanonicalTsv => "canonical-tsv",
        })
    }
}

/// Parsed records plus line accounting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ingested {
    pub records: Vec<InteractionRecord>,
    /// Non-blank lines seen.
    pub lines: usize,
    pub malformed: usize,
}

/// Largest tolerated share of malformed lines.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

impl Ingested {
    fn finish(self, source: &str) -> Result<Self> {
        if self.lines == 0 {
            log::warn!("{source}: no interactions found");
        }
        if self.malformed > 0 {
            log::warn!("{source}: skipped {} malformed of {} lines", self.malformed, self.lines);
        }
        if self.lines > 0 && self.malformed as f64 > MAX_MALFORMED_FRACTION * self.lines as f64 {
            return Err(Error::Data(format!(
                "{source}: {} of {} lines are malformed (limit {:.0}%)",
                self.malformed,
                self.lines,
                MAX_MALFORMED_FRACTION * 100.0
            )));
        }
        Ok(self)
    }

    fn push(&mut self, parsed: Option<InteractionRecord>) {
        self.lines += 1;
        match parsed {
            Some(r) => {
                let consistent = self
                    .records
                    .first()
                    .is_none_or(|first| first.field_names().eq(r.field_names()));
                if consistent {
                    self.records.push(r);
                } else {
                    self.malformed += 1;
                }
            }
            None => self.malformed += 1,
        }
    }
}

/// Reads a dataset file in one of the supported layouts.
///
/// MovieLens paths may name the ratings file or its directory; a sibling
/// `u.item` / `movies.dat` adds the first listed genre as a side field.
/// Amazon reviews pick up a `category` from the review line or from a
/// sibling `meta_Beauty.json` (JSON lines with `asin` and `categories`).
pub fn ingest(path: &Path, format: DatasetFormat) -> Result<Ingested> {
    let source = path.display().to_string();
    match format {
        DatasetFormat::Movielens100k => {
            let ratings = resolve(path, "u.data");
            let genres = match sibling(&ratings, "u.item") {
                Some(p) => Some(ml100k_genres(&read_latin1(&p)?)),
                None => None,
            };
            parse_movielens(&read_latin1(&ratings)?, "\t", genres.as_ref()).finish(&source)
        }
        DatasetFormat::Movielens1m => {
            let ratings = resolve(path, "ratings.dat");
            let genres = match sibling(&ratings, "movies.dat") {
                Some(p) => Some(ml1m_genres(&read_latin1(&p)?)),
                None => None,
            };
            parse_movielens(&read_latin1(&ratings)?, "::", genres.as_ref()).finish(&source)
        }
        DatasetFormat::AmazonBeauty => {
            let text = read_utf8(path)?;
            let meta = match sibling(path, "meta_Beauty.json") {
                Some(p) => amazon_categories(&read_utf8(&p)?),
                None => HashMap::new(),
            };
            parse_amazon(&text, &meta).finish(&source)
        }
        DatasetFormat::CanonicalTsv => parse_canonical(&read_utf8(path)?).finish(&source),
    }
}

/// Parses records from in-memory text; side-information files are not consulted.
pub fn ingest_str(text: &str, format: DatasetFormat) -> Result<Ingested> {
    match format {
        DatasetFormat::Movielens100k => parse_movielens(text, "\t", None),
        DatasetFormat::Movielens1m => parse_movielens(text, "::", None),
        DatasetFormat::AmazonBeauty => parse_amazon(text, &HashMap::new()),
        DatasetFormat::CanonicalTsv => parse_canonical(text),
    }
    .finish("<memory>")
}

fn resolve(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    }
}

fn sibling(path: &Path, name: &str) -> Option<PathBuf> {
    let p = path.parent()?.join(name);
    p.is_file().then_some(p)
}

fn read_utf8(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// MovieLens files are Latin-1.
fn read_latin1(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes.iter().map(|&b| b as char).collect())
}

fn lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(|l| l.trim_end_matches('\r')).filter(|l| !l.trim().is_empty())
}

fn parse_movielens(text: &str, sep: &str, genres: Option<&HashMap<String, String>>) -> Ingested {
    let mut out = Ingested::default();
    for line in lines(text) {
        let parsed = (|| {
            let cols: Vec<&str> = line.split(sep).map(str::trim).collect();
            if cols.len() != 4 {
                return None;
            }
            let rating: u32 = cols[2].parse().ok()?;
            let ts: u64 = cols[3].parse().ok()?;
            if cols[0].is_empty() || cols[1].is_empty() {
                return None;
            }
            let mut r = InteractionRecord::new(cols[0], cols[1], ts).with_field("rating", rating.to_string());
            if let Some(g) = genres {
                let genre = g.get(cols[1]).map_or("unknown", String::as_str);
                r = r.with_field("genre", genre);
            }
            Some(r)
        })();
        out.push(parsed);
    }
    out
}

const ML100K_GENRES: [&str; 19] = [
    "unknown",
    "Action",
    "Adventure",
    "Animation",
    "Children's",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

/// `u.item`: `id|title|release|video release|url|19 genre flags`.
fn ml100k_genres(text: &str) -> HashMap<String, String> {
    lines(text)
        .filter_map(|line| {
            let cols: Vec<&str> = line.split('|').collect();
            if cols.len() < 5 + ML100K_GENRES.len() {
                return None;
            }
            let flags = &cols[cols.len() - ML100K_GENRES.len()..];
            let genre = flags
                .iter()
                .position(|f| f.trim() == "1")
                .map_or("unknown", |i| ML100K_GENRES[i]);
            Some((cols[0].trim().to_string(), genre.to_string()))
        })
        .collect()
}

/// `movies.dat`: `id::title::Genre1|Genre2`.
fn ml1m_genres(text: &str) -> HashMap<String, String> {
    lines(text)
        .filter_map(|line| {
            let cols: Vec<&str> = line.split("::").collect();
            let genre = cols.get(2)?.split('|').next()?.trim();
            Some((cols[0].trim().to_string(), genre.to_string()))
        })
        .collect()
}

fn category_of(value: &serde_json::Value) -> Option<String> {
    match value {
        serde_json::Value::String(s) => Some(s.clone()),
        // Either ["A", "B"] or [["A", "B"], ...]; the most specific level is last.
        serde_json::Value::Array(items) => items.first().and_then(|first| match first {
            serde_json::Value::Array(_) => category_of(first),
            _ => items.last().and_then(category_of),
        }),
        _ => None,
    }
}

fn amazon_categories(text: &str) -> HashMap<String, String> {
    let mut map = HashMap::new();
    let mut unreadable = 0usize;
    for line in lines(text) {
        match serde_json::from_str::<serde_json::Value>(line) {
            Ok(v) => {
                let asin = v.get("asin").and_then(|a| a.as_str());
                let cat = v.get("categories").or_else(|| v.get("category")).and_then(category_of);
                if let (Some(a), Some(c)) = (asin, cat) {
                    map.insert(a.to_string(), c);
                }
            }
            Err(_) => unreadable += 1,
        }
    }
    if unreadable > 0 {
        log::warn!("amazon metadata: {unreadable} lines are not JSON and were ignored");
    }
    map
}

fn parse_amazon(text: &str, meta: &HashMap<String, String>) -> Ingested {
    let mut out = Ingested::default();
    for line in lines(text) {
        let parsed = (|| {
            let v: serde_json::Value = serde_json::from_str(line).ok()?;
            let user = v.get("reviewerID")?.as_str()?;
            let item = v.get("asin")?.as_str()?;
            let ts = v.get("unixReviewTime")?.as_u64()?;
            let rating = v.get("overall")?.as_f64()?;
            let category = v
                .get("category")
                .and_then(category_of)
                .or_else(|| meta.get(item).cloned())
                .unwrap_or_else(|| "unknown".into());
            Some(
                InteractionRecord::new(user, item, ts)
                    .with_field("rating", format!("{}", rating.round() as i64))
                    .with_field("category", category),
            )
        })();
        out.push(parsed);
    }
    out
}

fn parse_canonical(text: &str) -> Ingested {
    let mut out = Ingested::default();
    for line in lines(text) {
        let parsed = (|| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 || cols[0].is_empty() || cols[1].is_empty() {
                return None;
            }
            let mut r = InteractionRecord::new(unescape(cols[0])?, unescape(cols[1])?, cols[2].parse().ok()?);
            if !cols[3].is_empty() {
                for pair in cols[3].split(',') {
                    let (name, value) = pair.split_once('=')?;
                    r = r.with_field(unescape(name)?, unescape(value)?);
                }
            }
            Some(r)
        })();
        out.push(parsed);
    }
    out
}

/// `user<TAB>item<TAB>timestamp<TAB>field=value[,field=value...]`, LF-terminated.
///
/// `%`, tab, newline, carriage return, `,` and `=` inside values are
/// percent-encoded so every record survives a round trip.
pub fn to_canonical_tsv(records: &[InteractionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let fields: Vec<String> = r
            .side_fields
            .iter()
            .map(|(n, v)| format!("{}={}", escape(n), escape(v)))
            .collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            escape(&r.user_id),
            escape(&r.item_id),
            r.timestamp,
            fields.join(",")
        ));
    }
    out
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '%' | '\t' | '\n' | '\r' | ',' | '=' => out.push_str(&format!("%{:02X}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '%' {
            let hex: String = chars.by_ref().take(2).collect();
            out.push(u8::from_str_radix(&hex, 16).ok()? as char);
        } else {
            out.push(c);
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn movielens_100k_line() {
        let got = ingest_str("196\t242\t3\t881250949\n", DatasetFormat::Movielens100k).unwrap();
        assert_eq!(
            got.records,
            vec![InteractionRecord::new("196", "242", 881250949).with_field("rating", "3")]
        );
    }

    #[test]
    fn movielens_1m_line() {
        let got = ingest_str("1::1193::5::978300760\n", DatasetFormat::Movielens1m).unwrap();
        assert_eq!(got.records[0].item_id, "1193");
        assert_eq!(got.records[0].timestamp, 978300760);
    }

    #[test]
    fn empty_input_is_an_empty_list() {
        let got = ingest_str("", DatasetFormat::CanonicalTsv).unwrap();
        assert!(got.records.is_empty());
        assert_eq!(got.lines, 0);
    }

    #[test]
    fn missing_column_counts_as_malformed() {
        let mut text = String::new();
        for i in 0..200 {
            text.push_str(&format!("u{i}\ti{i}\t{i}\trating=1\n"));
        }
        text.push_str("u9\ti9\t9\n");
        let got = ingest_str(&text, DatasetFormat::CanonicalTsv).unwrap();
        assert_eq!(got.malformed, 1);
        assert_eq!(got.records.len(), 200);
    }

    #[test]
    fn too_many_malformed_lines_is_a_data_error() {
        let text = "a\tb\t1\t\nbroken\n";
        assert!(matches!(ingest_str(text, DatasetFormat::CanonicalTsv), Err(Error::Data(_))));
    }

    #[test]
    fn inconsistent_field_schema_is_malformed() {
        let text = "a\tb\t1\trating=1\na\tc\t2\tgenre=x\n";
        let got = ingest_str(text, DatasetFormat::CanonicalTsv);
        assert!(got.is_err());
    }

    #[test]
    fn amazon_review_line() {
        let line = r#"{"reviewerID": "A1", "asin": "B00", "overall": 4.0, "unixReviewTime": 1400000000, "category": ["Beauty", "Skin Care"]}"#;
        let got = ingest_str(line, DatasetFormat::AmazonBeauty).unwrap();
        let r = &got.records[0];
        assert_eq!((r.user_id.as_str(), r.item_id.as_str(), r.timestamp), ("A1", "B00", 1400000000));
        assert_eq!(r.side_fields, vec![("rating".into(), "4".into()), ("category".into(), "Skin Care".into())]);
    }

    #[test]
    fn ml100k_genre_is_first_flag() {
        let item = "1|Toy Story (1995)|01-Jan-1995||http://x|0|0|0|1|1|1|0|0|0|0|0|0|0|0|0|0|0|0|0\n";
        let g = ml100k_genres(item);
        assert_eq!(g["1"], "Animation");
    }

    #[test]
    fn format_names_parse() {
        assert_eq!("movielens-100k".parse::<DatasetFormat>().unwrap(), DatasetFormat::Movielens100k);
        assert!(matches!("netflix".parse::<DatasetFormat>(), Err(Error::Config(_))));
    }

    fn record() -> impl Strategy<Value = InteractionRecord> {
        let text = "[a-zA-Z0-9 %,=:\t_-]{1,12}";
        (text, text, any::<u64>(), proptest::collection::vec(text, 0..3)).prop_map(|(u, i, ts, vals)| {
            let mut r = InteractionRecord::new(u, i, ts);
            for (k, v) in vals.into_iter().enumerate() {
                r = r.with_field(format!("f{k}"), v);
            }
            r
        })
    }

    proptest! {
        #[test]
        fn canonical_tsv_round_trips(r in record(), copies in 1usize..4) {
            let records = vec![r; copies];
            let text = to_canonical_tsv(&records);
            let back = ingest_str(&text, DatasetFormat::CanonicalTsv).unwrap();
            prop_assert_eq!(back.records, records);
        }
    }
}
