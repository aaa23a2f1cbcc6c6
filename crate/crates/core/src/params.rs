//! Parameter storage and the providers that turn batch fields into logits.
//!
//! All trainable values live in one [`ParameterStore`], grouped into named
//! tables. Providers ([`EmbeddingTable`], [`LinearModel`], [`PositionTable`])
//! hold [`TableHandle`]s into the store, so two models that are given the same
//! provider share its parameters.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::autodiff::{NodeId, ParamId, Tape};
use crate::data::SessionBatch;
use crate::error::{Error, Result};
use crate::logspace::logit;

/// Default initial probability of every Bernoulli parameter.
pub const DEFAULT_INIT_PROB: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableHandle {
    offset: usize,
    len: usize,
}

impl TableHandle {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn param(&self, row: usize) -> ParamId {
        assert!(row < self.len, "row {row} out of range for table of {}", self.len);
        ParamId(self.offset + row)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> {
        (self.offset..self.offset + self.len).map(ParamId)
    }
}

#[derive(Debug, Clone)]
struct TableInfo {
    name: String,
    handle: TableHandle,
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    values: Vec<f64>,
    trainable: Vec<bool>,
    tables: Vec<TableInfo>,
    by_name: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_table(&mut self, name: &str, len: usize, init: f64) -> Result<TableHandle> {
        if self.by_name.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter table `{name}`")));
        }
        if len == 0 {
            return Err(Error::config(format!("parameter table `{name}` has no rows")));
        }
        let handle = TableHandle {
            offset: self.values.len(),
            len,
        };
        self.values.resize(self.values.len() + len, init);
        self.trainable.resize(self.values.len(), true);
        self.by_name.insert(name.to_string(), self.tables.len());
        self.tables.push(TableInfo {
            name: name.to_string(),
            handle,
        });
        Ok(handle)
    }

    pub fn add_scalar(&mut self, name: &str, init: f64) -> Result<ParamId> {
        Ok(self.add_table(name, 1, init)?.param(0))
    }

    pub fn table(&self, name: &str) -> Option<TableHandle> {
        self.by_name.get(name).map(|&i| self.tables[i].handle)
    }

    pub fn table_names(&self) -> impl Iterator<Item = &str> {
        self.tables.iter().map(|t| t.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> f64 {
        self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: f64) {
        self.values[id.0] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn freeze(&mut self, handle: TableHandle) {
        for p in handle.params() {
            self.trainable[p.0] = false;
        }
    }

    /// Records a leaf for `id` holding its current value.
    pub fn leaf(&self, tape: &mut Tape, id: ParamId) -> NodeId {
        tape.parameter(id, self.values[id.0])
    }

    pub fn snapshot(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn restore(&mut self, snapshot: &[f64]) -> Result<()> {
        if snapshot.len() != self.values.len() {
            return Err(Error::usage(format!(
                "snapshot has {} values, store has {}",
                snapshot.len(),
                self.values.len()
            )));
        }
        self.values.copy_from_slice(snapshot);
        Ok(())
    }

    /// Writes `table,row,value` rows with 17 significant digits.
    pub fn write_dump(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "table,row,value")?;
        for t in &self.tables {
            for (row, p) in t.handle.params().enumerate() {
                writeln!(out, "{},{},{:.16e}", t.name, row, self.values[p.0])?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_dump(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Overwrites values from a dump. Every table named in the dump must
    /// exist with a matching row range.
    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        self.read_dump(BufReader::new(file), path)
    }

    pub fn read_dump(&mut self, input: impl BufRead, path: &Path) -> Result<()> {
        let bad = |row: usize, message: String| Error::Data {
            path: path.to_path_buf(),
            row,
            message,
        };
        for (n, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if n == 0 {
                if line.trim() != "table,row,value" {
                    return Err(bad(1, "expected header `table,row,value`".into()));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.rsplitn(3, ',');
            let (value, row, table) = match (parts.next(), parts.next(), parts.next()) {
                (Some(v), Some(r), Some(t)) => (v, r, t),
                _ => return Err(bad(n + 1, "expected three fields".into())),
            };
            let handle = self
                .table(table)
                .ok_or_else(|| bad(n + 1, format!("unknown table `{table}`")))?;
            let row: usize = row
                .parse()
                .map_err(|_| bad(n + 1, format!("bad row {row:?}")))?;
            if row >= handle.len() {
                return Err(bad(n + 1, format!("row {row} out of range for `{table}`")));
            }
            let value: f64 = value
                .parse()
                .map_err(|_| bad(n + 1, format!("bad value {value:?}")))?;
            self.values[handle.param(row).0] = value;
        }
        Ok(())
    }
}

/// FNV-1a 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET_BASIS: u64 = 14_695_981_039_346_656_037;
    const PRIME: u64 = 1_099_511_628_211;
    bytes.iter().fold(OFFSET_BASIS, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// Row for `id` in a hashed table of `physical_rows` rows.
pub fn hash_index(id: u64, physical_rows: usize, seed: u64) -> usize {
    assert!(physical_rows >= 1);
    (fnv1a64(&(id ^ seed).to_le_bytes()) % physical_rows as u64) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Compression {
    #[default]
    None,
    /// `ceil(size / ratio)` rows addressed by [`hash_index`].
    Hashing { ratio: usize, seed: u64 },
    /// Sum of a quotient row `id / remainder_size` and a remainder row
    /// `id % remainder_size`.
    QuotientRemainder { remainder_size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingConfig {
    /// Declared number of ids.
    pub size: u64,
    pub compression: Compression,
    pub baseline: bool,
}

impl EmbeddingConfig {
    pub fn new(size: u64) -> Self {
        EmbeddingConfig {
            size,
            compression: Compression::None,
            baseline: false,
        }
    }

    pub fn with_compression(mut self, compression: Compression) -> Self {
        self.compression = compression;
        self
    }

    pub fn with_baseline(mut self, baseline: bool) -> Self {
        self.baseline = baseline;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Storage {
    Full(TableHandle),
    Hashed { table: TableHandle, seed: u64 },
    QuotientRemainder {
        quotient: TableHandle,
        remainder: TableHandle,
        remainder_size: usize,
    },
}

/// One logit per id, optionally compressed and optionally offset by a shared
/// baseline logit.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    size: u64,
    storage: Storage,
    baseline: Option<ParamId>,
}

/// Parameters whose sum is the logit of one id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowParams {
    pub baseline: Option<ParamId>,
    pub primary: ParamId,
    pub secondary: Option<ParamId>,
}

impl EmbeddingTable {
    /// Allocates the physical tables under `name` so that every logit starts
    /// at `init_logit`.
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        config: EmbeddingConfig,
        init_logit: f64,
    ) -> Result<Self> {
        if config.size == 0 {
            return Err(Error::config(format!("embedding `{name}` has size 0")));
        }
        let (row_init, baseline) = if config.baseline {
            (0.0, Some(store.add_scalar(&format!("{name}.baseline"), init_logit)?))
        } else {
            (init_logit, None)
        };
        let size = usize::try_from(config.size)
            .map_err(|_| Error::config(format!("embedding `{name}` is too large")))?;
        let storage = match config.compression {
            Compression::None => Storage::Full(store.add_table(name, size, row_init)?),
            Compression::Hashing { ratio, seed } => {
                if ratio == 0 {
                    return Err(Error::config("hashing ratio must be at least 1"));
                }
                let rows = size.div_ceil(ratio);
                Storage::Hashed {
                    table: store.add_table(name, rows, row_init)?,
                    seed,
                }
            }
            Compression::QuotientRemainder { remainder_size } => {
                if remainder_size == 0 {
                    return Err(Error::config("remainder_size must be at least 1"));
                }
                let half = row_init / 2.0;
                Storage::QuotientRemainder {
                    quotient: store.add_table(
                        &format!("{name}.quotient"),
                        size.div_ceil(remainder_size),
                        half,
                    )?,
                    remainder: store.add_table(&format!("{name}.remainder"), remainder_size, half)?,
                    remainder_size,
                }
            }
        };
        Ok(EmbeddingTable {
            size: config.size,
            storage,
            baseline,
        })
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn has_baseline(&self) -> bool {
        self.baseline.is_some()
    }

    /// Number of stored logits, excluding the baseline.
    pub fn physical_rows(&self) -> usize {
        match self.storage {
            Storage::Full(t) | Storage::Hashed { table: t, .. } => t.len(),
            Storage::QuotientRemainder {
                quotient, remainder, ..
            } => quotient.len() + remainder.len(),
        }
    }

    pub fn row_params(&self, id: u64) -> Result<RowParams> {
        let check = || {
            if id >= self.size {
                Err(Error::usage(format!(
                    "id {id} out of range for embedding of size {}",
                    self.size
                )))
            } else {
                Ok(())
            }
        };
        let (primary, secondary) = match self.storage {
            Storage::Full(t) => {
                check()?;
                (t.param(id as usize), None)
            }
            Storage::Hashed { table, seed } => (table.param(hash_index(id, table.len(), seed)), None),
            Storage::QuotientRemainder {
                quotient,
                remainder,
                remainder_size,
            } => {
                check()?;
                let r = remainder_size as u64;
                (
                    quotient.param((id / r) as usize),
                    Some(remainder.param((id % r) as usize)),
                )
            }
        };
        Ok(RowParams {
            baseline: self.baseline,
            primary,
            secondary,
        })
    }

    pub fn lookup_logit(&self, store: &ParameterStore, tape: &mut Tape, id: u64) -> Result<NodeId> {
        let rp = self.row_params(id)?;
        let mut row = store.leaf(tape, rp.primary);
        if let Some(r) = rp.secondary {
            let rem = store.leaf(tape, r);
            row = tape.add2(row, rem);
        }
        Ok(match rp.baseline {
            Some(b) => {
                let base = store.leaf(tape, b);
                tape.add2(base, row)
            }
            None => row,
        })
    }

    pub fn logit_value(&self, store: &ParameterStore, id: u64) -> Result<f64> {
        let rp = self.row_params(id)?;
        let mut row = store.value(rp.primary);
        if let Some(r) = rp.secondary {
            row += store.value(r);
        }
        Ok(match rp.baseline {
            Some(b) => store.value(b) + row,
            None => row,
        })
    }
}

/// `bias + sum(w_i * f_i)` over per-slot feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    weights: TableHandle,
    bias: ParamId,
}

impl LinearModel {
    /// Zero weights and `init_logit` bias.
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize, init_logit: f64) -> Result<Self> {
        Ok(LinearModel {
            weights: store.add_table(&format!("{name}.weights"), dim, 0.0)?,
            bias: store.add_scalar(&format!("{name}.bias"), init_logit)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, i: usize) -> ParamId {
        self.weights.param(i)
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    fn check(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.dim() {
            return Err(Error::usage(format!(
                "feature vector has {} values, linear model expects {}",
                features.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn linear_logit(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        features: &[f64],
    ) -> Result<NodeId> {
        self.check(features)?;
        let mut terms = Vec::with_capacity(features.len() + 1);
        terms.push(store.leaf(tape, self.bias));
        for (i, &f) in features.iter().enumerate() {
            let w = store.leaf(tape, self.weights.param(i));
            terms.push(tape.scale(w, f));
        }
        Ok(tape.add(&terms))
    }

    pub fn logit_value(&self, store: &ParameterStore, features: &[f64]) -> Result<f64> {
        self.check(features)?;
        Ok(store.value(self.bias)
            + features
                .iter()
                .enumerate()
                .map(|(i, f)| store.value(self.weights.param(i)) * f)
                .sum::<f64>())
    }
}

/// Source of one logit per (session, slot).
#[derive(Debug, Clone, PartialEq)]
pub enum LogitProvider {
    Embedding(EmbeddingTable),
    Linear(LinearModel),
}

impl From<EmbeddingTable> for LogitProvider {
    fn from(t: EmbeddingTable) -> Self {
        LogitProvider::Embedding(t)
    }
}

impl From<LinearModel> for LogitProvider {
    fn from(m: LinearModel) -> Self {
        LogitProvider::Linear(m)
    }
}

impl LogitProvider {
    fn features(batch: &SessionBatch, i: usize, k: usize) -> Result<&[f64]> {
        batch
            .slot_features(i, k)
            .ok_or_else(|| Error::usage("linear parameter requires feature columns"))
    }

    pub fn logit(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        batch: &SessionBatch,
        i: usize,
        k: usize,
    ) -> Result<NodeId> {
        match self {
            LogitProvider::Embedding(t) => t.lookup_logit(store, tape, batch.query_doc_ids[(i, k)]),
            LogitProvider::Linear(m) => m.linear_logit(store, tape, Self::features(batch, i, k)?),
        }
    }

    pub fn logit_value(
        &self,
        store: &ParameterStore,
        batch: &SessionBatch,
        i: usize,
        k: usize,
    ) -> Result<f64> {
        match self {
            LogitProvider::Embedding(t) => t.logit_value(store, batch.query_doc_ids[(i, k)]),
            LogitProvider::Linear(m) => m.logit_value(store, Self::features(batch, i, k)?),
        }
    }
}

/// Rank-indexed logits. In last-click mode the table is `K x K`, indexed by
/// rank and by the rank of the last click before it (0 when there was none).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionTable {
    table: TableHandle,
    positions: usize,
    last_click: bool,
}

impl PositionTable {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        positions: usize,
        last_click: bool,
        init_logit: f64,
    ) -> Result<Self> {
        if positions == 0 {
            return Err(Error::config("positions must be at least 1"));
        }
        let len = if last_click { positions * positions } else { positions };
        Ok(PositionTable {
            table: store.add_table(name, len, init_logit)?,
            positions,
            last_click,
        })
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn handle(&self) -> TableHandle {
        self.table
    }

    /// Parameter for 1-based `rank`.
    pub fn param(&self, rank: usize) -> ParamId {
        debug_assert!(!self.last_click);
        self.table.param(rank - 1)
    }

    /// Parameter for 1-based `rank` given the last clicked rank `last < rank`.
    pub fn param_after(&self, rank: usize, last: usize) -> ParamId {
        debug_assert!(self.last_click && last < rank);
        self.table.param((rank - 1) * self.positions + last)
    }
}

pub fn default_init_logit() -> f64 {
    logit(DEFAULT_INIT_PROB)
}
