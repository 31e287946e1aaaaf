//! Term lists and design matrices.
//!
//! A term list is comma separated. Each term is a product (`:`) of factors,
//! and a numeric factor may carry a power (`dose^2`). Categorical factors are
//! treatment coded against their alphabetically first level; when a
//! categorical is crossed with numeric factors whose main effect is absent,
//! every level gets its own slope.

use ptw_core::estfun::{EstFunError, PtwModel};
use ptw_core::numcore::DenseMatrix;
use thiserror::Error;

use crate::data::{Column, DataError, DatasetTable};

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("invalid term {term:?}: {message}")]
    Term { term: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("offset column {column:?} has a non-positive value at row {row}, cannot take its log")]
    Offset { column: String, row: usize },
    #[error("design matrix is rank deficient (rank {rank} of {cols} columns); drop aliased terms")]
    RankDeficient { rank: usize, cols: usize },
    #[error(transparent)]
    Model(EstFunError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Factor {
    pub column: String,
    pub power: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    pub factors: Vec<Factor>,
}

impl Term {
    fn label(&self) -> String {
        self.factors
            .iter()
            .map(|f| if f.power == 1 { f.column.clone() } else { format!("{}^{}", f.column, f.power) })
            .collect::<Vec<_>>()
            .join(":")
    }
}

pub fn parse_terms(spec: &str) -> Result<Vec<Term>, DesignError> {
    let spec = spec.trim();
    if spec.is_empty() || spec == "1" {
        return Ok(Vec::new());
    }
    spec.split(',')
        .map(|raw| {
            let raw = raw.trim();
            let bad = |message: &str| DesignError::Term {
                term: raw.to_string(),
                message: message.to_string(),
            };
            if raw.is_empty() {
                return Err(bad("empty term"));
            }
            let factors = raw
                .split(':')
                .map(|f| {
                    let f = f.trim();
                    let (column, power) = match f.split_once('^') {
                        Some((c, k)) => (c.trim(), k.trim().parse::<u32>().map_err(|_| bad("power must be a positive integer"))?),
                        None => (f, 1),
                    };
                    if column.is_empty() || power == 0 {
                        return Err(bad("empty column name or zero power"));
                    }
                    Ok(Factor {
                        column: column.to_string(),
                        power,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Term { factors })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetSpec {
    pub column: String,
    /// Take the natural log of the column before use.
    pub log: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpecConfig {
    pub response: String,
    pub terms: Vec<Term>,
    pub offset: Option<OffsetSpec>,
}

impl ModelSpecConfig {
    pub fn new(response: &str, terms: &str) -> Result<Self, DesignError> {
        Ok(Self {
            response: response.to_string(),
            terms: parse_terms(terms)?,
            offset: None,
        })
    }
}

/// Design matrix and its column names, intercept first.
#[derive(Debug, Clone)]
pub struct Design {
    pub model: PtwModel,
    pub column_names: Vec<String>,
}

/// Columns contributed by one term: `(label, values)`.
fn term_columns(table: &DatasetTable, term: &Term, all_terms: &[Term]) -> Result<Vec<(String, Vec<f64>)>, DesignError> {
    let n = table.rows();
    let mut numeric = vec![1.0; n];
    let mut numeric_label: Vec<String> = Vec::new();
    let mut categorical: Vec<(&Factor, Vec<String>, Vec<String>)> = Vec::new();
    for f in &term.factors {
        match table.column(&f.column)? {
            Column::Categorical(v) => {
                if f.power != 1 {
                    return Err(DesignError::Term {
                        term: term.label(),
                        message: format!("categorical column {:?} cannot be raised to a power", f.column),
                    });
                }
                let levels = table.column(&f.column)?.levels().unwrap_or_default();
                categorical.push((f, v.clone(), levels));
            }
            col => {
                let v = col.as_f64().expect("numeric column");
                for (acc, x) in numeric.iter_mut().zip(&v) {
                    *acc *= x.powi(f.power as i32);
                }
                numeric_label.push(if f.power == 1 { f.column.clone() } else { format!("{}^{}", f.column, f.power) });
            }
        }
    }
    // a crossed factor keeps its baseline when the numeric part has no main effect
    let numeric_part: Vec<&Factor> = term
        .factors
        .iter()
        .filter(|f| !categorical.iter().any(|(c, _, _)| c.column == f.column))
        .collect();
    let full_levels = !numeric_part.is_empty()
        && !all_terms.iter().any(|t| {
            t.factors.len() == numeric_part.len() && t.factors.iter().zip(&numeric_part).all(|(a, b)| a == *b)
        });

    let mut columns = vec![(numeric_label.join(":"), numeric)];
    for (f, values, levels) in categorical {
        let used: Vec<&String> = if full_levels { levels.iter().collect() } else { levels.iter().skip(1).collect() };
        let mut next = Vec::new();
        for (label, base) in &columns {
            for level in &used {
                let col: Vec<f64> = base
                    .iter()
                    .zip(&values)
                    .map(|(b, v)| if v == *level { *b } else { 0.0 })
                    .collect();
                let name = format!("{}{}", f.column, level);
                let label = if label.is_empty() { name } else { format!("{name}:{label}") };
                next.push((label, col));
            }
        }
        columns = next;
    }
    Ok(columns)
}

pub fn build_design(table: &DatasetTable, spec: &ModelSpecConfig) -> Result<Design, DesignError> {
    let y = table.counts(&spec.response)?;
    let n = table.rows();
    let mut names = vec!["(Intercept)".to_string()];
    let mut cols = vec![vec![1.0; n]];
    for term in &spec.terms {
        for (label, values) in term_columns(table, term, &spec.terms)? {
            names.push(label);
            cols.push(values);
        }
    }
    let offset = match &spec.offset {
        None => None,
        Some(o) => {
            let v = table.column(&o.column)?.as_f64().ok_or_else(|| DesignError::Term {
                term: o.column.clone(),
                message: "offset must be numeric".into(),
            })?;
            if o.log {
                if let Some(row) = v.iter().position(|&x| !(x > 0.0)) {
                    return Err(DesignError::Offset {
                        column: o.column.clone(),
                        row: row + 1,
                    });
                }
                Some(v.iter().map(|x| x.ln()).collect())
            } else {
                Some(v)
            }
        }
    };
    let q = cols.len();
    let data: Vec<f64> = (0..n).flat_map(|i| cols.iter().map(move |c| c[i])).collect();
    let x = DenseMatrix::new(n, q, data).map_err(|e| DesignError::Model(e.into()))?;
    let model = PtwModel::new(x, y, offset).map_err(DesignError::Model)?;
    match model.check_rank() {
        Ok(()) => {}
        Err(EstFunError::RankDeficient { rank, cols }) => return Err(DesignError::RankDeficient { rank, cols }),
        Err(e) => return Err(DesignError::Model(e)),
    }
    Ok(Design { model, column_names: names })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{dicentrics, parse_csv, SchemaHints};

    #[test]
    fn quadratic_dose_design() {
        let d = build_design(&dicentrics(), &ModelSpecConfig::new("y", "dose,dose^2").unwrap()).unwrap();
        assert_eq!(d.column_names, ["(Intercept)", "dose", "dose^2"]);
        assert_eq!(d.model.q(), 3);
        assert_eq!(d.model.x().row(0), [1.0, 0.1, 0.1 * 0.1]);
    }

    #[test]
    fn intercept_only() {
        for spec in ["", "1"] {
            let d = build_design(&dicentrics(), &ModelSpecConfig::new("y", spec).unwrap()).unwrap();
            assert_eq!(d.model.q(), 1);
            assert!(d.model.x().as_slice().iter().all(|&v| v == 1.0));
        }
    }

    fn cotton_like() -> DatasetTable {
        let mut text = String::from("stage,defol,y\n");
        for (s, stage) in ["vegetative", "bud", "flower", "boll", "max"].iter().enumerate() {
            for k in 0..5 {
                text.push_str(&format!("{stage},{},{}\n", k as f64 * 0.25, (s + k) % 7));
            }
        }
        parse_csv(text.as_bytes(), &SchemaHints::default()).unwrap()
    }

    #[test]
    fn factor_by_covariate_nesting() {
        let spec = ModelSpecConfig::new("y", "stage:defol,stage:defol^2").unwrap();
        let d = build_design(&cotton_like(), &spec).unwrap();
        assert_eq!(d.model.q(), 11);
        assert_eq!(d.column_names[1], "stageboll:defol");
    }

    #[test]
    fn factor_main_effect_drops_baseline() {
        let spec = ModelSpecConfig::new("y", "stage,defol,stage:defol").unwrap();
        let d = build_design(&cotton_like(), &spec).unwrap();
        assert_eq!(d.model.q(), 1 + 4 + 1 + 4);
    }

    #[test]
    fn unknown_column_and_rank() {
        let err = build_design(&dicentrics(), &ModelSpecConfig::new("y", "dosage").unwrap()).unwrap_err();
        assert!(err.to_string().contains("dosage"));
        let err = build_design(&dicentrics(), &ModelSpecConfig::new("y", "dose,dose").unwrap()).unwrap_err();
        assert!(matches!(err, DesignError::RankDeficient { rank: 2, cols: 3 }));
    }

    #[test]
    fn log_offset() {
        let t = parse_csv("pop,y\n10,1\n100,4\n1000,9\n".as_bytes(), &SchemaHints::default()).unwrap();
        let mut spec = ModelSpecConfig::new("y", "").unwrap();
        spec.offset = Some(OffsetSpec {
            column: "pop".into(),
            log: true,
        });
        let d = build_design(&t, &spec).unwrap();
        assert!((d.model.offset()[1] - 100f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn malformed_terms() {
        assert!(parse_terms("dose,,x").is_err());
        assert!(parse_terms("dose^x").is_err());
        assert!(parse_terms("dose^0").is_err());
    }
}
