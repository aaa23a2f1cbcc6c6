//! Click logs: loading, writing, splitting and batching.
//!
//! Files are CSV with the header
//! `session_id,rank,query_doc_id,click[,label][,f0..f{n-1}]`, one row per
//! displayed document. Names ending in `.gz` are read and written through
//! gzip.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default upper bound on the number of displayed documents per session.
pub const MAX_POSITIONS: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub session_id: u64,
    /// Document at rank `k + 1`.
    pub query_doc_ids: Vec<u64>,
    pub clicks: Vec<bool>,
    /// Row-major `len() * feature_dim` values.
    pub features: Option<Vec<f64>>,
    pub labels: Option<Vec<i64>>,
}

impl SessionRecord {
    pub fn new(session_id: u64, query_doc_ids: Vec<u64>, clicks: Vec<bool>) -> Self {
        assert_eq!(query_doc_ids.len(), clicks.len());
        SessionRecord {
            session_id,
            query_doc_ids,
            clicks,
            features: None,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.query_doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_doc_ids.is_empty()
    }
}

/// Optional columns of a click log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Schema {
    pub labels: bool,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    pub sessions: Vec<SessionRecord>,
}

impl Dataset {
    pub fn new(schema: Schema, sessions: Vec<SessionRecord>) -> Self {
        Dataset { schema, sessions }
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn slot_count(&self) -> usize {
        self.sessions.iter().map(SessionRecord::len).sum()
    }

    pub fn max_positions(&self) -> usize {
        self.sessions.iter().map(SessionRecord::len).max().unwrap_or(0)
    }

    pub fn max_query_doc_id(&self) -> Option<u64> {
        self.sessions
            .iter()
            .flat_map(|s| s.query_doc_ids.iter().copied())
            .max()
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema,
            sessions: idx.iter().map(|&i| self.sessions[i].clone()).collect(),
        }
    }

    /// One batch holding every session, in order.
    pub fn full_batch(&self) -> SessionBatch {
        SessionBatch::from_sessions(self.schema, self.sessions.iter())
    }
}

/// Rectangular row-major storage, one row per session and one column per
/// rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Grid {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Grid { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

impl<T> std::ops::Index<(usize, usize)> for Grid<T> {
    type Output = T;

    fn index(&self, (i, k): (usize, usize)) -> &T {
        &self.data[i * self.cols + k]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Grid<T> {
    fn index_mut(&mut self, (i, k): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + k]
    }
}

/// Sessions padded to a common width. Padded slots carry position 0, id 0,
/// click 0 and `mask == false`.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionBatch {
    pub session_ids: Vec<u64>,
    /// 1-based ranks.
    pub positions: Grid<usize>,
    pub query_doc_ids: Grid<u64>,
    pub clicks: Grid<f64>,
    pub mask: Grid<bool>,
    pub feature_dim: usize,
    /// `batch_size * width * feature_dim` values when present.
    pub features: Option<Vec<f64>>,
    pub labels: Option<Grid<i64>>,
}

impl SessionBatch {
    pub fn from_sessions<'a>(
        schema: Schema,
        sessions: impl IntoIterator<Item = &'a SessionRecord>,
    ) -> Self {
        let sessions: Vec<&SessionRecord> = sessions.into_iter().collect();
        let n = sessions.len();
        let width = sessions.iter().map(|s| s.len()).max().unwrap_or(0);
        let dim = schema.feature_dim;
        let mut positions = Grid::filled(n, width, 0usize);
        let mut ids = Grid::filled(n, width, 0u64);
        let mut clicks = Grid::filled(n, width, 0.0);
        let mut mask = Grid::filled(n, width, false);
        let mut features = (dim > 0).then(|| vec![0.0; n * width * dim]);
        let mut labels = schema.labels.then(|| Grid::filled(n, width, 0i64));
        for (i, s) in sessions.iter().enumerate() {
            for k in 0..s.len() {
                positions[(i, k)] = k + 1;
                ids[(i, k)] = s.query_doc_ids[k];
                clicks[(i, k)] = if s.clicks[k] { 1.0 } else { 0.0 };
                mask[(i, k)] = true;
            }
            if let (Some(dst), Some(src)) = (features.as_mut(), s.features.as_ref()) {
                let off = i * width * dim;
                dst[off..off + src.len()].copy_from_slice(src);
            }
            if let (Some(dst), Some(src)) = (labels.as_mut(), s.labels.as_ref()) {
                for (k, &l) in src.iter().enumerate() {
                    dst[(i, k)] = l;
                }
            }
        }
        SessionBatch {
            session_ids: sessions.iter().map(|s| s.session_id).collect(),
            positions,
            query_doc_ids: ids,
            clicks,
            mask,
            feature_dim: dim,
            features,
            labels,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.mask.rows()
    }

    pub fn width(&self) -> usize {
        self.mask.cols()
    }

    /// Number of unmasked slots in row `i`; masks are left-aligned.
    pub fn session_len(&self, i: usize) -> usize {
        self.mask.row(i).iter().take_while(|&&m| m).count()
    }

    pub fn slot_count(&self) -> usize {
        self.mask.as_slice().iter().filter(|&&m| m).count()
    }

    pub fn clicked(&self, i: usize, k: usize) -> bool {
        self.clicks[(i, k)] > 0.5
    }

    pub fn slot_features(&self, i: usize, k: usize) -> Option<&[f64]> {
        let dim = self.feature_dim;
        self.features.as_ref().map(|f| {
            let off = (i * self.width() + k) * dim;
            &f[off..off + dim]
        })
    }
}

pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = SessionBatch;

    fn next(&mut self) -> Option<SessionBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        Some(SessionBatch::from_sessions(
            self.dataset.schema,
            idx.iter().map(|&i| &self.dataset.sessions[i]),
        ))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}

/// Batches of `batch_size` sessions, each padded to its own longest session.
pub fn batch_iterator(
    dataset: &Dataset,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<BatchIter<'_>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batch_iterator_with(dataset, batch_size, shuffle.then_some(&mut rng))
}

pub(crate) fn batch_iterator_with<'a>(
    dataset: &'a Dataset,
    batch_size: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(Error::usage("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    Ok(BatchIter {
        dataset,
        order,
        batch_size,
        cursor: 0,
    })
}

/// Seeded session-level split into train, validation and test sets.
pub fn split(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::usage(format!(
            "split fractions ({a}, {b}, {c}) must be in [0, 1] and sum to 1"
        )));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (((n as f64) * a).round() as usize).min(n);
    let n_val = (((n as f64) * b).round() as usize).min(n - n_train);
    let (train, rest) = order.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok((
        dataset.subset(train),
        dataset.subset(val),
        dataset.subset(test),
    ))
}

fn open_reader(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn open_writer(path: &Path) -> Result<Box<dyn Write>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let writer = BufWriter::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzEncoder::new(writer, Compression::default())))
    } else {
        Ok(Box::new(writer))
    }
}

struct Columns {
    session: usize,
    rank: usize,
    doc: usize,
    click: usize,
    label: Option<usize>,
    features: Vec<usize>,
}

fn resolve_columns(path: &Path, header: &csv::StringRecord) -> Result<Columns> {
    let find = |name: &str| header.iter().position(|h| h.trim() == name);
    let need = |name: &str| {
        find(name).ok_or_else(|| Error::Data {
            path: path.to_path_buf(),
            row: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let mut features = Vec::new();
    while let Some(i) = find(&format!("f{}", features.len())) {
        features.push(i);
    }
    Ok(Columns {
        session: need("session_id")?,
        rank: need("rank")?,
        doc: need("query_doc_id")?,
        click: need("click")?,
        label: find("label"),
        features,
    })
}

/// Reads a click log. When `expected` is given the header must carry exactly
/// those optional columns. Sessions are returned in order of first
/// appearance, each sorted by rank.
pub fn load_sessions(path: impl AsRef<Path>, expected: Option<Schema>) -> Result<Dataset> {
    load_sessions_with_limit(path, expected, MAX_POSITIONS)
}

pub fn load_sessions_with_limit(
    path: impl AsRef<Path>,
    expected: Option<Schema>,
    max_positions: usize,
) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(open_reader(path)?);
    let header = reader.headers()?.clone();
    let cols = resolve_columns(path, &header)?;
    let schema = Schema {
        labels: cols.label.is_some(),
        feature_dim: cols.features.len(),
    };
    if let Some(exp) = expected {
        if exp != schema {
            return Err(Error::Data {
                path: path.to_path_buf(),
                row: 1,
                message: format!("header has {schema:?}, expected {exp:?}"),
            });
        }
    }

    struct Row {
        rank: usize,
        doc: u64,
        click: bool,
        label: Option<i64>,
        features: Vec<f64>,
        line: usize,
    }

    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut groups: Vec<(u64, Vec<Row>)> = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let line = n + 2;
        let record = record?;
        let bad = |message: String| Error::Data {
            path: path.to_path_buf(),
            row: line,
            message,
        };
        let field = |i: usize| record.get(i).map(str::trim).unwrap_or("");
        let int = |i: usize, name: &str| -> Result<u64> {
            field(i)
                .parse::<u64>()
                .map_err(|_| bad(format!("`{name}` is not a non-negative integer: {:?}", field(i))))
        };
        let session = int(cols.session, "session_id")?;
        let rank = int(cols.rank, "rank")? as usize;
        let doc = int(cols.doc, "query_doc_id")?;
        let click = match field(cols.click) {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("click must be 0 or 1, got {other:?}"))),
        };
        let label = match cols.label {
            Some(i) => Some(
                field(i)
                    .parse::<i64>()
                    .map_err(|_| bad(format!("label is not an integer: {:?}", field(i))))?,
            ),
            None => None,
        };
        let features = cols
            .features
            .iter()
            .map(|&i| {
                field(i)
                    .parse::<f64>()
                    .map_err(|_| bad(format!("feature is not a number: {:?}", field(i))))
            })
            .collect::<Result<Vec<_>>>()?;
        let g = *index.entry(session).or_insert_with(|| {
            groups.push((session, Vec::new()));
            groups.len() - 1
        });
        if groups[g].1.iter().any(|r| r.rank == rank) {
            return Err(bad(format!("duplicate rank {rank} in session {session}")));
        }
        groups[g].1.push(Row {
            rank,
            doc,
            click,
            label,
            features,
            line,
        });
    }

    let mut sessions = Vec::with_capacity(groups.len());
    for (session_id, mut rows) in groups {
        rows.sort_by_key(|r| r.rank);
        for (k, r) in rows.iter().enumerate() {
            if r.rank != k + 1 {
                return Err(Error::Data {
                    path: path.to_path_buf(),
                    row: r.line,
                    message: format!("rank gap at session {session_id}: expected rank {}, found {}", k + 1, r.rank),
                });
            }
        }
        if rows.len() > max_positions {
            return Err(Error::Data {
                path: path.to_path_buf(),
                row: rows[max_positions].line,
                message: format!(
                    "session {session_id} has {} documents, limit is {max_positions}",
                    rows.len()
                ),
            });
        }
        sessions.push(SessionRecord {
            session_id,
            query_doc_ids: rows.iter().map(|r| r.doc).collect(),
            clicks: rows.iter().map(|r| r.click).collect(),
            features: (schema.feature_dim > 0)
                .then(|| rows.iter().flat_map(|r| r.features.iter().copied()).collect()),
            labels: schema
                .labels
                .then(|| rows.iter().map(|r| r.label.unwrap_or(0)).collect()),
        });
    }
    Ok(Dataset { schema, sessions })
}

pub fn session_header(schema: Schema) -> Vec<String> {
    let mut header: Vec<String> = ["session_id", "rank", "query_doc_id", "click"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if schema.labels {
        header.push("label".into());
    }
    header.extend((0..schema.feature_dim).map(|i| format!("f{i}")));
    header
}

pub fn write_sessions(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::WriterBuilder::new().from_writer(open_writer(path)?);
    let schema = dataset.schema;
    writer.write_record(session_header(schema))?;
    let dim = schema.feature_dim;
    for s in &dataset.sessions {
        for k in 0..s.len() {
            let mut row = vec![
                s.session_id.to_string(),
                (k + 1).to_string(),
                s.query_doc_ids[k].to_string(),
                u8::from(s.clicks[k]).to_string(),
            ];
            if schema.labels {
                row.push(s.labels.as_ref().map_or(0, |l| l[k]).to_string());
            }
            if let Some(f) = &s.features {
                row.extend(f[k * dim..(k + 1) * dim].iter().map(|v| format!("{v}")));
            }
            writer.write_record(&row)?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
