//! Tabular data: schemas with roles and vocabularies, CSV ingestion with
//! missing cells, discretization, resampling, and MCAR corruption.
//!
//! Tables are immutable after construction and row-major; a missing cell is
//! an internal sentinel, surfaced as `Option`. Circuits read rows through
//! [`RowView`], which maps variable `i` to column `i`, so a circuit over a
//! prefix of the schema's columns evaluates rows directly and any columns
//! past its variable count are simply never queried.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::{Assignment, VarId, VarSet, Variable};
use crate::error::{Error, Result};

const MISSING: u32 = u32::MAX;

/// What a column means to the fairness pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Feature,
    Sensitive,
    Label,
    /// Declared in the schema but normally absent from data files.
    Latent,
}

/// One column: variable identity plus ingestion metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub arity: usize,
    pub role: Role,
    /// Category string per index, in frozen order.
    pub vocabulary: Vec<String>,
    /// Numeric cut points recorded by discretization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin_edges: Option<Vec<f64>>,
}

impl ColumnDef {
    pub fn new(name: impl Into<String>, vocabulary: Vec<String>, role: Role) -> Self {
        ColumnDef {
            name: name.into(),
            arity: vocabulary.len(),
            role,
            vocabulary,
            bin_edges: None,
        }
    }

    /// Binary column with vocabulary `["0", "1"]`.
    pub fn binary(name: impl Into<String>, role: Role) -> Self {
        ColumnDef::new(name, vec!["0".to_string(), "1".to_string()], role)
    }

    fn index_of(&self, value: &str) -> Option<usize> {
        self.vocabulary.iter().position(|v| v == value)
    }
}

/// Ordered columns; the single source of truth for variable ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnDef>,
}

impl Schema {
    pub fn new(columns: Vec<ColumnDef>) -> Result<Self> {
        let s = Schema { columns };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        for (i, c) in self.columns.iter().enumerate() {
            if c.vocabulary.len() != c.arity {
                return Err(Error::SchemaMismatch(format!(
                    "column {}: vocabulary size {} != arity {}",
                    c.name,
                    c.vocabulary.len(),
                    c.arity
                )));
            }
            Variable::new(VarId(i), c.arity, &c.name)?;
            if self.columns[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::SchemaMismatch(format!("duplicate column {}", c.name)));
            }
        }
        for role in [Role::Sensitive, Role::Label] {
            if self.columns.iter().filter(|c| c.role == role).count() > 1 {
                return Err(Error::SchemaMismatch(format!(
                    "more than one {role:?} column"
                )));
            }
        }
        Ok(())
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Index of the unique column with the given role.
    pub fn role_col(&self, role: Role) -> Option<usize> {
        self.columns.iter().position(|c| c.role == role)
    }

    /// Columns as circuit variables, ids by position.
    pub fn variables(&self) -> Vec<Variable> {
        self.columns
            .iter()
            .enumerate()
            .map(|(i, c)| {
                Variable::new(VarId(i), c.arity, &c.name).expect("schema validated on construction")
            })
            .collect()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)
            .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let s: Schema = serde_json::from_reader(r)
            .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
        s.check()?;
        Ok(s)
    }
}

/// Immutable weighted table of optional category indices.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    schema: Schema,
    cells: Vec<u32>,
    n_rows: usize,
    weights: Vec<f64>,
}

/// One row as seen by a circuit: variable `i` is column `i`; columns beyond
/// the slice and columns hidden by the visibility set read as unobserved.
#[derive(Debug, Clone, Copy)]
pub struct RowView<'a> {
    cells: &'a [u32],
    visible: Option<&'a VarSet>,
}

impl Assignment for RowView<'_> {
    fn value(&self, var: VarId) -> Option<usize> {
        if let Some(v) = self.visible {
            if !v.contains(var) {
                return None;
            }
        }
        match self.cells.get(var.0) {
            Some(&x) if x != MISSING => Some(x as usize),
            _ => None,
        }
    }
}

impl DataTable {
    pub fn empty(schema: Schema) -> Self {
        DataTable {
            schema,
            cells: Vec::new(),
            n_rows: 0,
            weights: Vec::new(),
        }
    }

    pub fn from_rows(schema: Schema, rows: &[Vec<Option<usize>>]) -> Result<Self> {
        let mut t = DataTable::empty(schema);
        for row in rows {
            t.push_row(row)?;
        }
        Ok(t)
    }

    pub fn push_row(&mut self, row: &[Option<usize>]) -> Result<()> {
        if row.len() != self.schema.n_cols() {
            return Err(Error::LengthMismatch(self.schema.n_cols(), row.len()));
        }
        for (c, v) in row.iter().enumerate() {
            if let Some(x) = v {
                if *x >= self.schema.columns[c].arity {
                    return Err(Error::UnknownCategory {
                        row: self.n_rows,
                        column: self.schema.columns[c].name.clone(),
                        value: x.to_string(),
                    });
                }
            }
        }
        self.cells
            .extend(row.iter().map(|v| v.map_or(MISSING, |x| x as u32)));
        self.weights.push(1.0);
        self.n_rows += 1;
        Ok(())
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.schema.n_cols()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<usize> {
        let x = self.cells[row * self.n_cols() + col];
        (x != MISSING).then_some(x as usize)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.n_rows {
            return Err(Error::LengthMismatch(self.n_rows, weights.len()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter(
                "row weights must be finite and nonnegative".to_string(),
            ));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn row(&self, r: usize) -> RowView<'_> {
        let w = self.n_cols();
        RowView {
            cells: &self.cells[r * w..(r + 1) * w],
            visible: None,
        }
    }

    /// Row with observations restricted to `visible` columns.
    pub fn row_masked<'a>(&'a self, r: usize, visible: &'a VarSet) -> RowView<'a> {
        RowView {
            visible: Some(visible),
            ..self.row(r)
        }
    }

    pub fn rows(&self) -> Vec<RowView<'_>> {
        (0..self.n_rows).map(|r| self.row(r)).collect()
    }

    pub fn rows_masked<'a>(&'a self, visible: &'a VarSet) -> Vec<RowView<'a>> {
        (0..self.n_rows).map(|r| self.row_masked(r, visible)).collect()
    }

    /// True when some cell of the given columns is missing.
    pub fn has_missing_in(&self, cols: &[usize]) -> bool {
        (0..self.n_rows).any(|r| cols.iter().any(|c| self.get(r, *c).is_none()))
    }

    /// New table keeping `rows` in the given order, weights included.
    pub fn select_rows(&self, rows: &[usize]) -> DataTable {
        let w = self.n_cols();
        let mut cells = Vec::with_capacity(rows.len() * w);
        let mut weights = Vec::with_capacity(rows.len());
        for &r in rows {
            cells.extend_from_slice(&self.cells[r * w..(r + 1) * w]);
            weights.push(self.weights[r]);
        }
        DataTable {
            schema: self.schema.clone(),
            cells,
            n_rows: rows.len(),
            weights,
        }
    }

    /// New table keeping `cols` in the given order, with variable ids
    /// rebased to 0..cols.len().
    pub fn project(&self, cols: &[usize]) -> Result<DataTable> {
        let columns = cols
            .iter()
            .map(|&c| {
                self.schema
                    .columns
                    .get(c)
                    .cloned()
                    .ok_or_else(|| Error::SchemaMismatch(format!("no column {c}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let schema = Schema::new(columns)?;
        let w = self.n_cols();
        let mut cells = Vec::with_capacity(self.n_rows * cols.len());
        for r in 0..self.n_rows {
            for &c in cols {
                cells.push(self.cells[r * w + c]);
            }
        }
        Ok(DataTable {
            schema,
            cells,
            n_rows: self.n_rows,
            weights: self.weights.clone(),
        })
    }
}

/// Ingestion knobs for schema inference.
#[derive(Debug, Clone)]
pub struct CsvOptions {
    /// Inferred categories seen fewer times than this merge into an
    /// `__other__` bucket; 0 or 1 disables merging. Ignored when a schema
    /// is supplied.
    pub min_category_count: usize,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            min_category_count: 10,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: Option<&Schema>) -> Result<DataTable> {
    load_csv_opts(path, schema, &CsvOptions::default())
}

/// Load a comma-separated UTF-8 file with a header row. `?` and the empty
/// string are missing cells. With a schema, columns are matched to it by
/// header name (schema columns absent from the file load as all-missing);
/// without one, a schema is inferred with vocabularies in first-seen order
/// and every column a feature.
pub fn load_csv_opts(
    path: impl AsRef<Path>,
    schema: Option<&Schema>,
    opts: &CsvOptions,
) -> Result<DataTable> {
    let reader = BufReader::new(File::open(&path)?);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file; header row required".to_string(),
            })
        }
    };
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut raw: Vec<Vec<String>> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if cells.len() != names.len() {
            return Err(Error::Parse {
                line: i + 2,
                msg: format!("expected {} cells, found {}", names.len(), cells.len()),
            });
        }
        raw.push(cells);
    }
    match schema {
        Some(s) => table_under_schema(s, &names, &raw),
        None => table_inferred(&names, &raw, opts),
    }
}

fn table_under_schema(schema: &Schema, names: &[String], raw: &[Vec<String>]) -> Result<DataTable> {
    let mut col_map = Vec::with_capacity(names.len());
    for n in names {
        let idx = schema
            .find(n)
            .ok_or_else(|| Error::SchemaMismatch(format!("file column {n} not in schema")))?;
        col_map.push(idx);
    }
    let mut t = DataTable::empty(schema.clone());
    let mut row = vec![None; schema.n_cols()];
    for (r, cells) in raw.iter().enumerate() {
        row.iter_mut().for_each(|v| *v = None);
        for (f, cell) in cells.iter().enumerate() {
            if is_missing(cell) {
                continue;
            }
            let c = col_map[f];
            let idx = schema.columns[c].index_of(cell).ok_or_else(|| {
                Error::UnknownCategory {
                    row: r,
                    column: schema.columns[c].name.clone(),
                    value: cell.clone(),
                }
            })?;
            row[c] = Some(idx);
        }
        t.push_row(&row)?;
    }
    Ok(t)
}

fn table_inferred(names: &[String], raw: &[Vec<String>], opts: &CsvOptions) -> Result<DataTable> {
    let n_cols = names.len();
    let mut vocabs: Vec<Vec<String>> = vec![Vec::new(); n_cols];
    let mut counts: Vec<Vec<usize>> = vec![Vec::new(); n_cols];
    for cells in raw {
        for (c, cell) in cells.iter().enumerate() {
            if is_missing(cell) {
                continue;
            }
            match vocabs[c].iter().position(|v| v == cell) {
                Some(i) => counts[c][i] += 1,
                None => {
                    vocabs[c].push(cell.clone());
                    counts[c].push(1);
                }
            }
        }
    }
    let mut columns = Vec::with_capacity(n_cols);
    let mut remaps: Vec<Vec<Option<usize>>> = Vec::with_capacity(n_cols);
    for c in 0..n_cols {
        let (vocab, remap) = merged_vocab(&vocabs[c], &counts[c], opts.min_category_count);
        if vocab.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "column {} has fewer than two distinct values; supply a schema to load it",
                names[c]
            )));
        }
        columns.push(ColumnDef::new(
            names[c].replace(char::is_whitespace, "_"),
            vocab,
            Role::Feature,
        ));
        remaps.push(remap);
    }
    let schema = Schema::new(columns)?;
    let mut t = DataTable::empty(schema);
    let mut row = vec![None; n_cols];
    for cells in raw {
        for (c, cell) in cells.iter().enumerate() {
            row[c] = if is_missing(cell) {
                None
            } else {
                let orig = vocabs[c].iter().position(|v| v == cell).expect("counted");
                remaps[c][orig]
            };
        }
        t.push_row(&row)?;
    }
    Ok(t)
}

/// Surviving vocabulary plus a map from original category index to final
/// index. Categories under the threshold share a final `__other__` bucket.
fn merged_vocab(vocab: &[String], counts: &[usize], min_count: usize) -> (Vec<String>, Vec<Option<usize>>) {
    let keep: Vec<bool> = counts.iter().map(|&c| c >= min_count.max(1)).collect();
    let any_merged = keep.iter().any(|k| !k);
    let mut out = Vec::new();
    let mut remap = vec![None; vocab.len()];
    for (i, v) in vocab.iter().enumerate() {
        if keep[i] {
            remap[i] = Some(out.len());
            out.push(v.clone());
        }
    }
    if any_merged {
        let other = out.len();
        out.push("__other__".to_string());
        for (i, r) in remap.iter_mut().enumerate() {
            if !keep[i] {
                *r = Some(other);
            }
        }
    }
    (out, remap)
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell == "?"
}

/// Write the table as CSV, skipping `exclude` columns. Missing cells are
/// `?`; values are vocabulary strings, so save-then-load round-trips.
pub fn save_csv(table: &DataTable, path: impl AsRef<Path>, exclude: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let cols: Vec<usize> = (0..table.n_cols()).filter(|c| !exclude.contains(c)).collect();
    let mut line = String::new();
    for (i, &c) in cols.iter().enumerate() {
        if i > 0 {
            line.push(',');
        }
        line.push_str(&table.schema().columns[c].name);
    }
    writeln!(w, "{line}")?;
    for r in 0..table.n_rows() {
        line.clear();
        for (i, &c) in cols.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            match table.get(r, c) {
                Some(x) => {
                    let _ = write!(line, "{}", table.schema().columns[c].vocabulary[x]);
                }
                None => line.push('?'),
            }
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    idx
}

/// Seeded holdout split; the test side gets `round(n * test_fraction)` rows.
/// Row order within each side follows the original table.
pub fn split_holdout(table: &DataTable, test_fraction: f64, seed: u64) -> Result<(DataTable, DataTable)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "test_fraction must be in (0,1), got {test_fraction}"
        )));
    }
    let n = table.n_rows();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let idx = shuffled_indices(n, seed);
    let mut test: Vec<usize> = idx[..n_test].to_vec();
    let mut train: Vec<usize> = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((table.select_rows(&train), table.select_rows(&test)))
}

/// Seeded k-fold split: the shuffled rows are cut into k nearly equal test
/// blocks; each pair's train side is everything else.
pub fn kfold(table: &DataTable, k: usize, seed: u64) -> Result<Vec<(DataTable, DataTable)>> {
    let n = table.n_rows();
    if k < 2 {
        return Err(Error::InvalidParameter(format!("k must be at least 2, got {k}")));
    }
    if k > n {
        return Err(Error::InsufficientData(format!("{k} folds over {n} rows")));
    }
    let idx = shuffled_indices(n, seed);
    let mut out = Vec::with_capacity(k);
    for f in 0..k {
        let lo = f * n / k;
        let hi = (f + 1) * n / k;
        let mut test: Vec<usize> = idx[lo..hi].to_vec();
        let mut train: Vec<usize> = idx[..lo].iter().chain(&idx[hi..]).copied().collect();
        test.sort_unstable();
        train.sort_unstable();
        out.push((table.select_rows(&train), table.select_rows(&test)));
    }
    Ok(out)
}

/// Erase each observed cell outside `protected` columns independently with
/// probability `fraction` (missing completely at random).
pub fn mcar_corrupt(
    table: &DataTable,
    fraction: f64,
    seed: u64,
    protected: &[usize],
) -> Result<DataTable> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidParameter(format!(
            "missing fraction must be in [0,1), got {fraction}"
        )));
    }
    let mut out = table.clone();
    if fraction == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = table.n_cols();
    for r in 0..table.n_rows() {
        for c in 0..w {
            if protected.contains(&c) || out.cells[r * w + c] == MISSING {
                continue;
            }
            if rng.random::<f64>() < fraction {
                out.cells[r * w + c] = MISSING;
            }
        }
    }
    Ok(out)
}

/// Discretization rule for a numeric column.
#[derive(Debug, Clone)]
pub enum Discretize {
    /// Bins holding equal row shares, split at value midpoints.
    EqualFrequency(usize),
    /// Explicit ascending cut points; bin `i` is `[t_{i-1}, t_i)`.
    Thresholds(Vec<f64>),
}

/// Replace a column's values with bin indices. The column's current
/// vocabulary must parse as numbers; edges are recorded in the schema and
/// missing cells stay missing.
pub fn discretize(table: &DataTable, col: usize, how: &Discretize) -> Result<DataTable> {
    let def = table
        .schema()
        .columns
        .get(col)
        .ok_or_else(|| Error::SchemaMismatch(format!("no column {col}")))?;
    let numeric: Vec<f64> = def
        .vocabulary
        .iter()
        .map(|v| {
            v.parse::<f64>()
                .map_err(|_| Error::Binning(format!("column {}: value {v:?} is not numeric", def.name)))
        })
        .collect::<Result<_>>()?;
    let edges = match how {
        Discretize::EqualFrequency(k) => equal_frequency_edges(table, col, &numeric, *k)?,
        Discretize::Thresholds(t) => {
            if t.is_empty() || t.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Binning(
                    "thresholds must be nonempty and strictly ascending".to_string(),
                ));
            }
            t.clone()
        }
    };
    let labels = bin_labels(&edges);
    let mut def_new = ColumnDef::new(def.name.clone(), labels, def.role);
    def_new.bin_edges = Some(edges.clone());
    let mut schema = table.schema().clone();
    schema.columns[col] = def_new;
    let schema = Schema::new(schema.columns)?;

    let w = table.n_cols();
    let mut out = DataTable {
        schema,
        cells: table.cells.clone(),
        n_rows: table.n_rows,
        weights: table.weights.clone(),
    };
    for r in 0..out.n_rows {
        let cell = &mut out.cells[r * w + col];
        if *cell != MISSING {
            let value = numeric[*cell as usize];
            *cell = edges.iter().take_while(|e| value >= **e).count() as u32;
        }
    }
    Ok(out)
}

fn equal_frequency_edges(table: &DataTable, col: usize, numeric: &[f64], k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::Binning(format!("need at least 2 bins, got {k}")));
    }
    let mut values: Vec<f64> = (0..table.n_rows())
        .filter_map(|r| table.get(r, col))
        .map(|x| numeric[x])
        .collect();
    values.sort_by(f64::total_cmp);
    let mut distinct = values.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::Binning(format!(
            "{k} bins over {} distinct values",
            distinct.len()
        )));
    }
    let n = values.len();
    let mut edges = Vec::with_capacity(k - 1);
    for i in 1..k {
        let cut = i * n / k;
        let edge = (values[cut - 1] + values[cut]) / 2.0;
        if edges.last().is_some_and(|e| *e >= edge) {
            return Err(Error::Binning(
                "quantiles collide; too few distinct values for the requested bins".to_string(),
            ));
        }
        edges.push(edge);
    }
    Ok(edges)
}

fn bin_labels(edges: &[f64]) -> Vec<String> {
    let mut labels = Vec::with_capacity(edges.len() + 1);
    labels.push(format!("<{}", edges[0]));
    for w in edges.windows(2) {
        labels.push(format!("[{},{})", w[0], w[1]));
    }
    labels.push(format!(">={}", edges[edges.len() - 1]));
    labels
}
