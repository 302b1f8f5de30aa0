//! CSV ingestion and design encoding for the analyze command.
//!
//! The encoding is deterministic: categorical levels are sorted, columns
//! keep their header order, and every derived quantity (reference levels,
//! standardization constants) is reported back for reproducibility.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use postsel::error::{Error, Result};
use postsel::model::{Dataset, GroupStructure};
use postsel::pipeline::Labels;

/// Raw CSV contents: a header row and string cells.
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn read_table(path: &Path) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: empty header row",
            path.display()
        )));
    }
    let mut seen = BTreeSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(Error::InvalidInput(format!(
                "duplicate column name '{h}' in {}",
                path.display()
            )));
        }
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| Error::InvalidInput(format!("data row {}: {e}", i + 1)))?;
        rows.push(record.iter().map(str::to_string).collect());
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} contains a header but no data rows",
            path.display()
        )));
    }
    Ok(RawTable { headers, rows })
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty()
        || matches!(
            cell.to_ascii_lowercase().as_str(),
            "na" | "n/a" | "nan" | "null"
        )
}

/// How to turn the raw table into a numeric design.
pub struct EncodeOptions {
    pub response: String,
    pub categorical: Vec<String>,
    /// Named groups of continuous columns: (label, column names).
    pub groups: Vec<(String, Vec<String>)>,
    pub full_one_hot: bool,
    pub standardize: bool,
}

/// Standardization constants of one continuous column, recorded so
/// estimates can be mapped back to the original scale.
#[derive(Debug, Clone, Serialize)]
pub struct StandardizedColumn {
    pub column: String,
    pub mean: f64,
    pub sd: f64,
}

/// Reference (dropped) level of a one-hot encoded categorical column.
#[derive(Debug, Clone, Serialize)]
pub struct ReferenceLevel {
    pub column: String,
    pub reference: String,
}

/// Membership of one encoded group.
#[derive(Debug, Clone, Serialize)]
pub struct GroupEcho {
    pub name: String,
    pub columns: Vec<String>,
}

/// Fully encoded dataset plus everything needed to describe the encoding.
pub struct Encoded {
    pub ds: Dataset,
    pub groups: GroupStructure,
    pub labels: Labels,
    pub group_members: Vec<GroupEcho>,
    pub standardized: Vec<StandardizedColumn>,
    pub references: Vec<ReferenceLevel>,
}

fn find_column(headers: &[String], name: &str) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| {
        Error::InvalidInput(format!(
            "column '{name}' not found; available columns: {}",
            headers.join(", ")
        ))
    })
}

/// Formats per-column row lists like "column 'age' rows 3, 7, 11".
fn describe_rows(mut per_column: Vec<(String, Vec<usize>)>) -> String {
    per_column.sort_by(|a, b| a.0.cmp(&b.0));
    let parts: Vec<String> = per_column
        .into_iter()
        .map(|(col, rows)| {
            let shown: Vec<String> = rows.iter().take(10).map(|r| r.to_string()).collect();
            let suffix = if rows.len() > 10 {
                format!(" and {} more", rows.len() - 10)
            } else {
                String::new()
            };
            format!("column '{col}' rows {}{suffix}", shown.join(", "))
        })
        .collect();
    parts.join("; ")
}

fn parse_numeric_column(
    table: &RawTable,
    idx: usize,
    what: &str,
) -> Result<Vec<f64>> {
    let mut values = Vec::with_capacity(table.rows.len());
    let mut bad = Vec::new();
    for (i, row) in table.rows.iter().enumerate() {
        match row[idx].parse::<f64>() {
            Ok(v) if v.is_finite() => values.push(v),
            _ => bad.push(i + 1),
        }
    }
    if !bad.is_empty() {
        let name = &table.headers[idx];
        return Err(Error::InvalidInput(format!(
            "{what} column '{name}' has non-numeric values: {}",
            describe_rows(vec![(name.clone(), bad)])
        )));
    }
    Ok(values)
}

/// Encodes the table: categoricals are one-hot encoded (first level as
/// reference unless `full_one_hot`), continuous columns are optionally
/// standardized, and a group structure is assembled. Rows with missing
/// values are an error; nothing is imputed.
pub fn encode(table: &RawTable, opts: &EncodeOptions) -> Result<Encoded> {
    let response_idx = find_column(&table.headers, &opts.response)?;
    for row in &table.rows {
        if row.len() != table.headers.len() {
            return Err(Error::InvalidInput(
                "ragged CSV: a data row has the wrong number of fields".into(),
            ));
        }
    }

    // Every column is used (response or predictor), so scan all of them.
    let mut missing: Vec<(String, Vec<usize>)> = Vec::new();
    for (j, name) in table.headers.iter().enumerate() {
        let rows: Vec<usize> = table
            .rows
            .iter()
            .enumerate()
            .filter(|(_, row)| is_missing(&row[j]))
            .map(|(i, _)| i + 1)
            .collect();
        if !rows.is_empty() {
            missing.push((name.clone(), rows));
        }
    }
    if !missing.is_empty() {
        return Err(Error::InvalidInput(format!(
            "missing values (no imputation is performed): {}",
            describe_rows(missing)
        )));
    }

    for name in &opts.categorical {
        let idx = find_column(&table.headers, name)?;
        if idx == response_idx {
            return Err(Error::InvalidInput(format!(
                "response column '{name}' cannot also be categorical"
            )));
        }
    }
    let mut assigned: Vec<Option<String>> = vec![None; table.headers.len()];
    for (label, cols) in &opts.groups {
        for name in cols {
            let idx = find_column(&table.headers, name)?;
            if idx == response_idx {
                return Err(Error::InvalidInput(format!(
                    "response column '{name}' cannot be part of group '{label}'"
                )));
            }
            if opts.categorical.contains(name) {
                return Err(Error::InvalidInput(format!(
                    "column '{name}' is categorical and cannot join group '{label}'; \
                     categorical columns form their own groups"
                )));
            }
            if let Some(other) = &assigned[idx] {
                return Err(Error::InvalidInput(format!(
                    "column '{name}' appears in groups '{other}' and '{label}'; \
                     groups must partition the columns"
                )));
            }
            assigned[idx] = Some(label.clone());
        }
    }

    let n = table.rows.len();
    let y = DVector::from_vec(parse_numeric_column(table, response_idx, "response")?);

    // Encoded columns in header order, each source column expanding in place.
    let mut columns: Vec<DVector<f64>> = Vec::new();
    let mut column_names: Vec<String> = Vec::new();
    // Encoded column indices per source column.
    let mut encoded_of: Vec<Vec<usize>> = vec![Vec::new(); table.headers.len()];
    let mut standardized = Vec::new();
    let mut references = Vec::new();

    for (j, name) in table.headers.iter().enumerate() {
        if j == response_idx {
            continue;
        }
        if opts.categorical.contains(name) {
            let levels: Vec<String> = table
                .rows
                .iter()
                .map(|row| row[j].clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if levels.len() < 2 {
                return Err(Error::InvalidInput(format!(
                    "categorical column '{name}' has a single level '{}'",
                    levels[0]
                )));
            }
            let encoded_levels: &[String] = if opts.full_one_hot {
                &levels
            } else {
                references.push(ReferenceLevel {
                    column: name.clone(),
                    reference: levels[0].clone(),
                });
                &levels[1..]
            };
            for level in encoded_levels {
                let v = DVector::from_fn(n, |i, _| {
                    if table.rows[i][j] == *level {
                        1.0
                    } else {
                        0.0
                    }
                });
                encoded_of[j].push(columns.len());
                columns.push(v);
                column_names.push(format!("{name}={level}"));
            }
        } else {
            let raw = parse_numeric_column(table, j, "continuous")?;
            let v = if opts.standardize {
                let mean = raw.iter().sum::<f64>() / n as f64;
                let sd = (raw.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                    / (n - 1).max(1) as f64)
                    .sqrt();
                if sd <= 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "continuous column '{name}' is constant and cannot be standardized; \
                         drop it or rerun with --no-standardize"
                    )));
                }
                standardized.push(StandardizedColumn {
                    column: name.clone(),
                    mean,
                    sd,
                });
                DVector::from_fn(n, |i, _| (raw[i] - mean) / sd)
            } else {
                DVector::from_vec(raw)
            };
            encoded_of[j].push(columns.len());
            columns.push(v);
            column_names.push(name.clone());
        }
    }

    let p = columns.len();
    if p == 0 {
        return Err(Error::InvalidInput(
            "no predictor columns remain after removing the response".into(),
        ));
    }
    let mut x = DMatrix::zeros(n, p);
    for (c, v) in columns.iter().enumerate() {
        x.set_column(c, v);
    }

    // Groups: one per categorical column, the named continuous groups, and a
    // singleton per remaining continuous column; ordered by first encoded
    // column for a stable layout.
    let mut built: Vec<(String, Vec<usize>)> = Vec::new();
    for (j, name) in table.headers.iter().enumerate() {
        if j == response_idx || !opts.categorical.contains(name) {
            continue;
        }
        built.push((name.clone(), encoded_of[j].clone()));
    }
    for (label, cols) in &opts.groups {
        let mut enc = Vec::new();
        for name in cols {
            let idx = find_column(&table.headers, name)?;
            enc.extend(encoded_of[idx].iter().copied());
        }
        if enc.is_empty() {
            return Err(Error::InvalidInput(format!("group '{label}' is empty")));
        }
        built.push((label.clone(), enc));
    }
    for (j, name) in table.headers.iter().enumerate() {
        if j == response_idx || opts.categorical.contains(name) || assigned[j].is_some() {
            continue;
        }
        built.push((name.clone(), encoded_of[j].clone()));
    }
    built.sort_by_key(|(_, cols)| cols.iter().copied().min().unwrap_or(usize::MAX));

    let group_names: Vec<String> = built.iter().map(|(name, _)| name.clone()).collect();
    let group_members = built
        .iter()
        .map(|(name, cols)| GroupEcho {
            name: name.clone(),
            columns: cols.iter().map(|&c| column_names[c].clone()).collect(),
        })
        .collect();
    let groups = GroupStructure::new(built.into_iter().map(|(_, cols)| cols).collect(), p)?;
    let ds = Dataset::new(x, y)?;
    let labels = Labels {
        columns: column_names,
        groups: group_names,
    };
    Ok(Encoded {
        ds,
        groups,
        labels,
        group_members,
        standardized,
        references,
    })
}

/// Reads a headerless numeric matrix, for explicit randomization
/// covariances.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::InvalidInput(format!("row {}: {e}", i + 1)))?;
        let row: Vec<f64> = record
            .iter()
            .map(|cell| {
                cell.parse::<f64>().map_err(|_| {
                    Error::InvalidInput(format!(
                        "{} row {}: non-numeric entry '{cell}'",
                        path.display(),
                        i + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::InvalidInput(format!(
                    "{} row {}: expected {} entries, found {}",
                    path.display(),
                    i + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!("{} is empty", path.display())));
    }
    let (nr, nc) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}
