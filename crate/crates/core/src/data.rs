//! Interaction logs, chronological splits and windowed instances.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

/// Field delimiter of a ratings file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// Pick among the three below from the first non-blank line.
    Auto,
    Tsv,
    Csv,
    /// `user::item::rating::timestamp`, as in the MovieLens `.dat` files.
    MovielensDat,
}

impl Format {
    fn delimiter(self) -> &'static str {
        match self {
            Format::Tsv => "\t",
            Format::Csv => ",",
            Format::MovielensDat => "::",
            Format::Auto => unreachable!("auto must be resolved first"),
        }
    }

    fn detect(line: &str) -> Format {
        if line.contains("::") {
            Format::MovielensDat
        } else if line.contains('\t') {
            Format::Tsv
        } else {
            Format::Csv
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Format::Auto),
            "tsv" => Ok(Format::Tsv),
            "csv" => Ok(Format::Csv),
            "movielens-dat" | "dat" => Ok(Format::MovielensDat),
            other => Err(Error::Invalid(format!("unknown input format `{other}`"))),
        }
    }
}

/// All interactions with dense 0-based vocabularies. `sequences[u]` is user
/// `u`'s history sorted by (timestamp, file order).
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub sequences: Vec<Vec<Interaction>>,
}

impl InteractionLog {
    /// Builds a log from raw `(user, item, timestamp)` events in file order.
    /// Ids are assigned in order of first appearance.
    pub fn from_events<U, I>(events: impl IntoIterator<Item = (U, I, i64)>) -> Self
    where
        U: ToString,
        I: ToString,
    {
        let mut users: HashMap<String, usize> = HashMap::new();
        let mut items: HashMap<String, usize> = HashMap::new();
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut sequences: Vec<Vec<Interaction>> = Vec::new();
        for (u, i, timestamp) in events {
            let u = u.to_string();
            let i = i.to_string();
            let user = *users.entry(u.clone()).or_insert_with(|| {
                user_ids.push(u);
                sequences.push(Vec::new());
                user_ids.len() - 1
            });
            let item = *items.entry(i.clone()).or_insert_with(|| {
                item_ids.push(i);
                item_ids.len() - 1
            });
            sequences[user].push(Interaction {
                user,
                item,
                timestamp,
            });
        }
        // stable: ties keep file order
        for seq in &mut sequences {
            seq.sort_by_key(|x| x.timestamp);
        }
        InteractionLog {
            user_ids,
            item_ids,
            sequences,
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Drops items with fewer than `min_count` interactions and re-indexes.
    /// Users left without interactions are dropped as well.
    pub fn filter_min_item_count(&self, min_count: usize) -> InteractionLog {
        let mut counts = vec![0usize; self.num_items()];
        for x in self.sequences.iter().flatten() {
            counts[x.item] += 1;
        }
        let mut events = Vec::new();
        for seq in &self.sequences {
            for x in seq {
                if counts[x.item] >= min_count {
                    events.push((
                        self.user_ids[x.user].clone(),
                        self.item_ids[x.item].clone(),
                        x.timestamp,
                    ));
                }
            }
        }
        InteractionLog::from_events(events)
    }

    pub fn summary(&self) -> String {
        format!(
            "users={} items={} interactions={}",
            self.num_users(),
            self.num_items(),
            self.num_interactions()
        )
    }
}

pub fn parse_interactions(path: &Path, format: Format) -> Result<InteractionLog> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let log = read_interactions(file, format).map_err(|e| match e {
        Error::Io { cause, .. } => Error::io(path, cause),
        other => other,
    })?;
    if log.num_interactions() == 0 {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }
    Ok(log)
}

/// Reads `user, item, rating, timestamp` records. Every rating counts as a
/// positive interaction; blank lines are skipped.
pub fn read_interactions(reader: impl Read, format: Format) -> Result<InteractionLog> {
    let mut format = format;
    let mut events = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<input>", e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if format == Format::Auto {
            format = Format::detect(line);
        }
        let fields: Vec<&str> = line.split(format.delimiter()).map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty user or item field".into(),
            });
        }
        fields[2].parse::<f64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("rating `{}` is not a number", fields[2]),
        })?;
        let timestamp = fields[3].parse::<i64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("timestamp `{}` is not an integer", fields[3]),
        })?;
        events.push((fields[0].to_string(), fields[1].to_string(), timestamp));
    }
    Ok(InteractionLog::from_events(events))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl UserSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn full_sequence(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.train);
        out.extend_from_slice(&self.val);
        out.extend_from_slice(&self.test);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Val,
    Test,
}

impl std::str::FromStr for Segment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" | "valid" | "validation" => Ok(Segment::Val),
            "test" => Ok(Segment::Test),
            other => Err(Error::Invalid(format!("unknown segment `{other}`"))),
        }
    }
}

/// Per-user chronological train/val/test segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub num_items: usize,
    pub users: Vec<UserSplit>,
    /// Sorted distinct items of each user over all segments.
    history: Vec<Vec<usize>>,
}

fn ceil_count(ratio: f64, n: usize) -> usize {
    // tolerate representation error in products like 0.7 * 20
    let x = ratio * n as f64 - 1e-9;
    (x.ceil().max(0.0) as usize).min(n)
}

/// Splits every user's sequence at ⌈r₁·n⌉ and ⌈(r₁+r₂)·n⌉.
pub fn chronological_split(log: &InteractionLog, ratios: (f64, f64, f64)) -> Result<SplitDataset> {
    let (train, val, test) = ratios;
    if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r))
        || (train + val + test - 1.0).abs() > 1e-6
    {
        return Err(Error::Invalid(format!(
            "split ratios {train},{val},{test} must be in [0,1] and sum to 1"
        )));
    }
    let users = log
        .sequences
        .iter()
        .map(|seq| {
            let items: Vec<usize> = seq.iter().map(|x| x.item).collect();
            let n = items.len();
            let a = ceil_count(train, n);
            let b = ceil_count(train + val, n).max(a);
            UserSplit {
                train: items[..a].to_vec(),
                val: items[a..b].to_vec(),
                test: items[b..].to_vec(),
            }
        })
        .collect();
    Ok(SplitDataset::new(log.num_items(), users))
}

impl SplitDataset {
    pub fn new(num_items: usize, users: Vec<UserSplit>) -> Self {
        let history = users
            .iter()
            .map(|u| {
                let mut h = u.full_sequence();
                h.sort_unstable();
                h.dedup();
                h
            })
            .collect();
        SplitDataset {
            num_items,
            users,
            history,
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn history(&self, user: usize) -> &[usize] {
        &self.history[user]
    }

    /// Users whose train segment is too short to yield a training window.
    /// They still contribute to the graphs.
    pub fn degenerate_users(&self, context_len: usize, targets: usize) -> Vec<usize> {
        self.users
            .iter()
            .enumerate()
            .filter(|(_, u)| u.train.len() < context_len + targets)
            .map(|(i, _)| i)
            .collect()
    }

    /// Distinct items a scorer must not recommend when evaluating
    /// `segment`: everything the user saw before it, minus the targets.
    pub fn exclusions(&self, user: usize, segment: Segment, targets: &[usize]) -> Vec<usize> {
        let u = &self.users[user];
        let mut ex: Vec<usize> = match segment {
            Segment::Val => u.train.clone(),
            Segment::Test => u.train.iter().chain(&u.val).copied().collect(),
        };
        ex.sort_unstable();
        ex.dedup();
        ex.retain(|i| !targets.contains(i));
        ex
    }

    /// Number of train-segment occurrences of each item.
    pub fn train_popularity(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_items];
        for u in &self.users {
            for &i in &u.train {
                counts[i] += 1;
            }
        }
        counts
    }

    /// One line per user: `user \t train \t val \t test`, items comma-separated,
    /// preceded by a `# items=N` header.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# items={}\n", self.num_items);
        for (u, s) in self.users.iter().enumerate() {
            let _ = writeln!(
                out,
                "{u}\t{}\t{}\t{}",
                join(&s.train),
                join(&s.val),
                join(&s.test)
            );
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let num_items = match lines.next() {
            Some((_, header)) => header
                .strip_prefix("# items=")
                .and_then(|n| n.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::Parse {
                    line: 1,
                    message: "expected `# items=N` header".into(),
                })?,
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "empty split file".into(),
                })
            }
        };
        let mut users = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 4 fields, found {}", fields.len()),
                });
            }
            let user: usize = fields[0].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad user id `{}`", fields[0]),
            })?;
            if user != users.len() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("users out of order: expected {}, found {user}", users.len()),
                });
            }
            let parse = |s: &str| parse_id_list(s, num_items, line_no);
            users.push(UserSplit {
                train: parse(fields[1])?,
                val: parse(fields[2])?,
                test: parse(fields[3])?,
            });
        }
        Ok(SplitDataset::new(num_items, users))
    }
}

fn join(items: &[usize]) -> String {
    let mut s = String::new();
    for (i, x) in items.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{x}");
    }
    s
}

fn parse_id_list(s: &str, bound: usize, line: usize) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            let v: usize = t.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad id `{t}`"),
            })?;
            if v >= bound {
                return Err(Error::Parse {
                    line,
                    message: format!("id {v} out of range (< {bound})"),
                });
            }
            Ok(v)
        })
        .collect()
}

/// A user, `L` context items, the `T` items that follow and sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingInstance {
    pub user: usize,
    pub context: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl TrainingInstance {
    /// Positives followed by negatives.
    pub fn candidates(&self) -> Vec<usize> {
        self.positives
            .iter()
            .chain(&self.negatives)
            .copied()
            .collect()
    }
}

/// Every window of `context_len + targets` consecutive train items.
/// A train segment of length m yields max(0, m − L − T + 1) instances.
pub fn build_training_instances(
    split: &SplitDataset,
    context_len: usize,
    targets: usize,
) -> Vec<TrainingInstance> {
    assert!(context_len >= 1 && targets >= 1);
    let window = context_len + targets;
    let mut out = Vec::new();
    for (user, s) in split.users.iter().enumerate() {
        for w in s.train.windows(window) {
            out.push(TrainingInstance {
                user,
                context: w[..context_len].to_vec(),
                positives: w[context_len..].to_vec(),
                negatives: Vec::new(),
            });
        }
    }
    out
}

/// Windows over the full sequence whose targets all fall in `segment`.
/// Context may reach back into earlier segments.
pub fn build_eval_instances(
    split: &SplitDataset,
    segment: Segment,
    context_len: usize,
    targets: usize,
) -> Vec<TrainingInstance> {
    assert!(context_len >= 1 && targets >= 1);
    let mut out = Vec::new();
    for (user, s) in split.users.iter().enumerate() {
        let full = s.full_sequence();
        let (lo, hi) = match segment {
            Segment::Val => (s.train.len(), s.train.len() + s.val.len()),
            Segment::Test => (s.train.len() + s.val.len(), full.len()),
        };
        // target block [start, start + T) must lie in [lo, hi)
        let mut start = lo.max(context_len);
        while start + targets <= hi {
            out.push(TrainingInstance {
                user,
                context: full[start - context_len..start].to_vec(),
                positives: full[start..start + targets].to_vec(),
                negatives: Vec::new(),
            });
            start += 1;
        }
    }
    out
}

/// Draws `num_neg` distinct items uniformly from those outside `history`
/// (sorted, distinct).
pub fn sample_negatives<R: Rng + ?Sized>(
    instance: &TrainingInstance,
    history: &[usize],
    num_items: usize,
    num_neg: usize,
    rng: &mut R,
) -> Result<TrainingInstance> {
    let eligible = num_items.saturating_sub(history.len());
    if eligible == 0 {
        return Err(Error::CatalogueExhausted(instance.user));
    }
    if eligible < num_neg {
        return Err(Error::Invalid(format!(
            "user {} has only {eligible} non-interacted items, {num_neg} negatives requested",
            instance.user
        )));
    }
    let mut negatives = Vec::with_capacity(num_neg);
    if eligible >= 4 * num_neg && eligible * 2 >= num_items {
        while negatives.len() < num_neg {
            let v = rng.gen_range(0..num_items);
            if history.binary_search(&v).is_err() && !negatives.contains(&v) {
                negatives.push(v);
            }
        }
    } else {
        let pool: Vec<usize> = (0..num_items)
            .filter(|v| history.binary_search(v).is_err())
            .collect();
        negatives.extend(index::sample(rng, pool.len(), num_neg).into_iter().map(|i| pool[i]));
    }
    Ok(TrainingInstance {
        negatives,
        ..instance.clone()
    })
}

/// Debug dump: `user \t ctx,… \t pos,… \t neg,…` per line.
pub fn dump_instances(instances: &[TrainingInstance]) -> String {
    let mut out = String::new();
    for x in instances {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            x.user,
            join(&x.context),
            join(&x.positives),
            join(&x.negatives)
        );
    }
    out
}
