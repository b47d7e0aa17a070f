//! Fixed-population data model: the finite population is the ground truth,
//! immutable after construction and shared by reference everywhere else.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{kahan_sum, KahanSum};

/// One population unit as it appears in a CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub id: u64,
    pub y: f64,
    pub x: Vec<f64>,
    pub stratum: Option<i64>,
}

/// A finite population of `N` units with responses `y`, feature rows `x`
/// (dense, row-major) and optional stratum labels normalized to 0-based
/// consecutive integers.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    ids: Vec<u64>,
    ys: Vec<f64>,
    xs: Vec<f64>,
    p: usize,
    strata: Option<Vec<usize>>,
    n_strata: usize,
}

impl Population {
    pub fn from_records(records: Vec<UnitRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Invalid("population must contain at least one unit".into()));
        }
        let p = records[0].x.len();
        let has_stratum = records[0].stratum.is_some();
        let n = records.len();

        let mut seen: HashMap<u64, usize> = HashMap::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        let mut xs = Vec::with_capacity(n * p);
        let mut raw_strata = Vec::with_capacity(if has_stratum { n } else { 0 });

        for (row0, r) in records.iter().enumerate() {
            let row = row0 + 1;
            if r.x.len() != p {
                return Err(Error::BadRow {
                    row,
                    message: format!("feature vector has length {} but expected {}", r.x.len(), p),
                });
            }
            if !r.y.is_finite() {
                return Err(Error::BadRow {
                    row,
                    message: format!("non-finite y value {}", r.y),
                });
            }
            if let Some(bad) = r.x.iter().find(|v| !v.is_finite()) {
                return Err(Error::BadRow {
                    row,
                    message: format!("non-finite feature value {bad}"),
                });
            }
            if r.stratum.is_some() != has_stratum {
                return Err(Error::BadRow {
                    row,
                    message: "stratum label present for some units but not all".into(),
                });
            }
            if let Some(prev) = seen.insert(r.id, row) {
                let _ = prev;
                return Err(Error::DuplicateId { row, id: r.id });
            }
            ids.push(r.id);
            ys.push(r.y);
            xs.extend_from_slice(&r.x);
            if let Some(s) = r.stratum {
                raw_strata.push(s);
            }
        }

        let (strata, n_strata) = if has_stratum {
            // Normalize labels to 0..K-1 by sorted original value, so the
            // mapping is stable under row permutation.
            let mut labels: Vec<i64> = raw_strata.clone();
            labels.sort_unstable();
            labels.dedup();
            let lookup: HashMap<i64, usize> =
                labels.iter().enumerate().map(|(k, l)| (*l, k)).collect();
            let norm: Vec<usize> = raw_strata.iter().map(|l| lookup[l]).collect();
            let k = labels.len();
            (Some(norm), k)
        } else {
            (None, 0)
        };

        Ok(Population {
            ids,
            ys,
            xs,
            p,
            strata,
            n_strata,
        })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    /// Feature dimension p.
    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn id(&self, pos: usize) -> u64 {
        self.ids[pos]
    }

    pub fn y(&self, pos: usize) -> f64 {
        self.ys[pos]
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn x(&self, pos: usize) -> &[f64] {
        &self.xs[pos * self.p..(pos + 1) * self.p]
    }

    pub fn stratum(&self, pos: usize) -> Option<usize> {
        self.strata.as_ref().map(|s| s[pos])
    }

    pub fn strata(&self) -> Option<&[usize]> {
        self.strata.as_deref()
    }

    pub fn n_strata(&self) -> usize {
        self.n_strata
    }

    /// Number of units in each stratum, indexed by normalized label.
    pub fn stratum_sizes(&self) -> Result<Vec<usize>> {
        let strata = self
            .strata
            .as_ref()
            .ok_or_else(|| Error::InvalidDesign("population has no stratum labels".into()))?;
        let mut sizes = vec![0usize; self.n_strata];
        for &h in strata {
            sizes[h] += 1;
        }
        Ok(sizes)
    }

    /// Population totals (Y, X) with compensated summation.
    pub fn totals(&self) -> (f64, Vec<f64>) {
        let y_total = kahan_sum(self.ys.iter().copied());
        let mut x_totals = vec![KahanSum::new(); self.p];
        for pos in 0..self.n() {
            for (acc, v) in x_totals.iter_mut().zip(self.x(pos)) {
                acc.add(*v);
            }
        }
        (y_total, x_totals.iter().map(|a| a.value()).collect())
    }

    pub fn y_total(&self) -> f64 {
        kahan_sum(self.ys.iter().copied())
    }

    pub fn y_mean(&self) -> f64 {
        self.y_total() / self.n() as f64
    }
}

/// Column mapping for population CSV files. Features are `x1..xp` under
/// the configured prefix, contiguous starting at 1.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub id: String,
    pub y: String,
    pub x_prefix: String,
    pub stratum: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            id: "id".into(),
            y: "y".into(),
            x_prefix: "x".into(),
            stratum: "stratum".into(),
        }
    }
}

fn parse_cell<T: std::str::FromStr>(raw: &str, row: usize, column: &str) -> Result<T> {
    raw.trim().parse::<T>().map_err(|_| Error::NonNumeric {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    })
}

/// Load a population from CSV with header `id[,stratum],y,x1,...,xp`.
/// Row order is preserved; the first data row is row 1 in error messages.
pub fn load_population<P: AsRef<Path>>(path: P, schema: &CsvSchema) -> Result<Population> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);

    let id_col = col(&schema.id).ok_or_else(|| Error::MissingColumn(schema.id.clone()))?;
    let y_col = col(&schema.y).ok_or_else(|| Error::MissingColumn(schema.y.clone()))?;
    let stratum_col = col(&schema.stratum);

    let mut x_cols = Vec::new();
    loop {
        let name = format!("{}{}", schema.x_prefix, x_cols.len() + 1);
        match col(&name) {
            Some(c) => x_cols.push((c, name)),
            None => break,
        }
    }
    if x_cols.is_empty() {
        return Err(Error::MissingColumn(format!("{}1", schema.x_prefix)));
    }

    let mut records = Vec::new();
    for (row0, rec) in reader.records().enumerate() {
        let row = row0 + 1;
        let rec = rec?;
        let get = |c: usize, name: &str| -> Result<&str> {
            rec.get(c).ok_or_else(|| Error::BadRow {
                row,
                message: format!("missing value in column `{name}`"),
            })
        };
        let id: u64 = parse_cell(get(id_col, &schema.id)?, row, &schema.id)?;
        let y: f64 = parse_cell(get(y_col, &schema.y)?, row, &schema.y)?;
        if !y.is_finite() {
            return Err(Error::NonNumeric {
                row,
                column: schema.y.clone(),
                value: y.to_string(),
            });
        }
        let mut x = Vec::with_capacity(x_cols.len());
        for (c, name) in &x_cols {
            let v: f64 = parse_cell(get(*c, name)?, row, name)?;
            if !v.is_finite() {
                return Err(Error::NonNumeric {
                    row,
                    column: name.clone(),
                    value: v.to_string(),
                });
            }
            x.push(v);
        }
        let stratum = match stratum_col {
            Some(c) => {
                let raw = get(c, &schema.stratum)?;
                if raw.is_empty() {
                    None
                } else {
                    Some(parse_cell(raw, row, &schema.stratum)?)
                }
            }
            None => None,
        };
        records.push(UnitRecord { id, y, x, stratum });
    }
    Population::from_records(records)
}

/// Write a population in the canonical CSV layout. Floats are printed in
/// shortest round-trip form, so `load(save(pop)) == pop` bit-exactly.
pub fn save_population<P: AsRef<Path>>(pop: &Population, path: P) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["id".to_string()];
    if pop.strata().is_some() {
        header.push("stratum".into());
    }
    header.push("y".into());
    for j in 1..=pop.dim() {
        header.push(format!("x{j}"));
    }
    writer.write_record(&header)?;
    for pos in 0..pop.n() {
        let mut row = vec![pop.id(pos).to_string()];
        if let Some(h) = pop.stratum(pos) {
            row.push(h.to_string());
        }
        row.push(pop.y(pos).to_string());
        for v in pop.x(pos) {
            row.push(v.to_string());
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}
