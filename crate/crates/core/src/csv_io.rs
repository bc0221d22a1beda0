//! CSV interchange.
//!
//! Stacked data: header `id,y,g:<model>...,f:<meta-feature>...`, one row per
//! example. `y` may be omitted where targets are not needed (prediction,
//! new-column files). Coefficients: `model,feature,v_ij` in canonical
//! column order.

use std::fs;
use std::path::Path;

use crate::design::{BlendCoefficients, DesignMapping, StackedDataset, Standardizer};
use crate::error::{FwlsError, Result};
use crate::store::NewColumn;

/// Parsed stacked CSV before any constant injection.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedTable {
    pub ids: Vec<String>,
    pub targets: Option<Vec<f64>>,
    pub model_names: Vec<String>,
    /// row-major, `rows × model_names.len()`
    pub model_preds: Vec<f64>,
    pub feature_names: Vec<String>,
    /// row-major, `rows × feature_names.len()`
    pub meta_feats: Vec<f64>,
}

#[derive(Clone, Copy)]
enum Col {
    Id,
    Y,
    G(usize),
    F(usize),
}

fn parse_err(path: &str, line: u64, message: impl Into<String>) -> FwlsError {
    FwlsError::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

fn parse_value(path: &str, line: u64, column: &str, cell: &str) -> Result<f64> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Err(parse_err(path, line, format!("missing value in column `{column}`")));
    }
    let v: f64 = cell
        .parse()
        .map_err(|_| parse_err(path, line, format!("column `{column}`: `{cell}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("column `{column}`: non-finite value `{cell}`")));
    }
    Ok(v)
}

impl StackedTable {
    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| FwlsError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses CSV text; `source` names the input in error messages.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_reader(text.as_bytes());
        let headers = rd
            .headers()
            .map_err(|e| parse_err(source, 1, e.to_string()))?
            .clone();
        let mut cols = Vec::with_capacity(headers.len());
        let mut model_names = Vec::new();
        let mut feature_names = Vec::new();
        let mut has_id = false;
        let mut has_y = false;
        for h in headers.iter() {
            let h = h.trim();
            let col = if h == "id" {
                if has_id {
                    return Err(parse_err(source, 1, "duplicate `id` column"));
                }
                has_id = true;
                Col::Id
            } else if h == "y" {
                if has_y {
                    return Err(parse_err(source, 1, "duplicate `y` column"));
                }
                has_y = true;
                Col::Y
            } else if let Some(name) = h.strip_prefix("g:") {
                model_names.push(name.to_string());
                Col::G(model_names.len() - 1)
            } else if let Some(name) = h.strip_prefix("f:") {
                feature_names.push(name.to_string());
                Col::F(feature_names.len() - 1)
            } else {
                return Err(parse_err(
                    source,
                    1,
                    format!("unrecognized column `{h}` (expected id, y, g:<name> or f:<name>)"),
                ));
            };
            cols.push(col);
        }
        if !has_id {
            return Err(parse_err(source, 1, "missing `id` column"));
        }
        let (l, m) = (model_names.len(), feature_names.len());
        let mut ids = Vec::new();
        let mut targets = Vec::new();
        let mut model_preds = Vec::new();
        let mut meta_feats = Vec::new();
        let mut g = vec![0.0; l];
        let mut f = vec![0.0; m];
        for rec in rd.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(source, line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let mut y = 0.0;
            let mut id = String::new();
            for (cell, (col, name)) in rec.iter().zip(cols.iter().zip(headers.iter())) {
                match *col {
                    Col::Id => {
                        if cell.trim().is_empty() {
                            return Err(parse_err(source, line, "empty id"));
                        }
                        id = cell.trim().to_string();
                    }
                    Col::Y => y = parse_value(source, line, name, cell)?,
                    Col::G(i) => g[i] = parse_value(source, line, name, cell)?,
                    Col::F(j) => f[j] = parse_value(source, line, name, cell)?,
                }
            }
            ids.push(id);
            targets.push(y);
            model_preds.extend_from_slice(&g);
            meta_feats.extend_from_slice(&f);
        }
        if ids.is_empty() {
            return Err(parse_err(source, 2, "no data rows"));
        }
        Ok(Self {
            ids,
            targets: has_y.then_some(targets),
            model_names,
            model_preds,
            feature_names,
            meta_feats,
        })
    }

    /// Builds the stacking dataset, optionally prepending the constant
    /// meta-feature (`add_f0`) and constant model (`add_g0`). Tables without
    /// a `y` column get zero targets.
    pub fn into_dataset(self, add_f0: bool, add_g0: bool) -> Result<StackedDataset> {
        let n = self.ids.len();
        let l = self.model_names.len();
        let m = self.feature_names.len();
        if l == 0 && !add_g0 {
            return Err(FwlsError::InvalidArgument("input has no `g:` model columns".into()));
        }
        if m == 0 && !add_f0 {
            return Err(FwlsError::InvalidArgument(
                "input has no `f:` meta-feature columns and the constant meta-feature is disabled".into(),
            ));
        }
        let targets = self.targets.unwrap_or_else(|| vec![0.0; n]);
        let width_l = l + usize::from(add_g0);
        let width_m = m + usize::from(add_f0);
        let mut g = Vec::with_capacity(n * width_l);
        let mut f = Vec::with_capacity(n * width_m);
        for r in 0..n {
            if add_g0 {
                g.push(1.0);
            }
            g.extend_from_slice(&self.model_preds[r * l..(r + 1) * l]);
            if add_f0 {
                f.push(1.0);
            }
            f.extend_from_slice(&self.meta_feats[r * m..(r + 1) * m]);
        }
        let mut model_names = Vec::with_capacity(width_l);
        if add_g0 {
            model_names.push(crate::design::CONSTANT_NAME.to_string());
        }
        model_names.extend(self.model_names);
        let mut feature_names = Vec::with_capacity(width_m);
        if add_f0 {
            feature_names.push(crate::design::CONSTANT_NAME.to_string());
        }
        feature_names.extend(self.feature_names);
        StackedDataset::new(targets, g, width_l, f, width_m)?
            .with_row_ids(self.ids)?
            .with_names(model_names, feature_names)
    }

    /// Interprets a single-value file (`id,g:<name>` or `id,f:<name>`) as a
    /// new column. Returns the column and whether it is a model.
    pub fn into_new_column(self) -> Result<(NewColumn, bool)> {
        match (self.model_names.len(), self.feature_names.len()) {
            (1, 0) => {
                let name = self.model_names[0].clone();
                Ok((NewColumn::new(name, self.model_preds).with_row_ids(self.ids), true))
            }
            (0, 1) => {
                let name = self.feature_names[0].clone();
                Ok((NewColumn::new(name, self.meta_feats).with_row_ids(self.ids), false))
            }
            (l, m) => Err(FwlsError::InvalidArgument(format!(
                "a new-column file needs exactly one g: or f: column (found {l} g:, {m} f:)"
            ))),
        }
    }
}

/// `model,feature,v_ij` rows in canonical order.
pub fn coefficients_to_csv(coeffs: &BlendCoefficients, model_names: &[String], feature_names: &[String]) -> String {
    let map = coeffs.mapping();
    let mut s = String::from("model,feature,v_ij\n");
    for (c, v) in coeffs.as_slice().iter().enumerate() {
        let (i, j) = map.model_feature(c).expect("column in range");
        s.push_str(&format!("{},{},{}\n", model_names[i], feature_names[j], v));
    }
    s
}

/// Coefficients with the model and meta-feature names they were fit on.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedCoefficients {
    pub coeffs: BlendCoefficients,
    pub model_names: Vec<String>,
    pub feature_names: Vec<String>,
}

pub fn parse_coefficients(text: &str, source: &str, lambda: f64) -> Result<NamedCoefficients> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let headers = rd.headers().map_err(|e| parse_err(source, 1, e.to_string()))?;
    if headers.iter().map(str::trim).collect::<Vec<_>>() != ["model", "feature", "v_ij"] {
        return Err(parse_err(source, 1, "expected header `model,feature,v_ij`"));
    }
    let mut entries = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| parse_err(source, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let v = parse_value(source, line, "v_ij", &rec[2])?;
        entries.push((rec[0].trim().to_string(), rec[1].trim().to_string(), v, line));
    }
    if entries.is_empty() {
        return Err(parse_err(source, 2, "no coefficients"));
    }
    let mut model_names: Vec<String> = Vec::new();
    for (mdl, feat, _, _) in &entries {
        if feat != &entries[0].1 {
            break;
        }
        model_names.push(mdl.clone());
    }
    let l = model_names.len();
    if entries.len() % l != 0 {
        return Err(parse_err(source, 2, "coefficient count is not a multiple of the model count"));
    }
    let feature_names: Vec<String> = entries.iter().step_by(l).map(|e| e.1.clone()).collect();
    for (k, (mdl, feat, _, line)) in entries.iter().enumerate() {
        if mdl != &model_names[k % l] || feat != &feature_names[k / l] {
            return Err(parse_err(source, *line, "rows are not in canonical (feature-major, model-minor) order"));
        }
    }
    let mapping = DesignMapping::new(l, feature_names.len())?;
    let coeffs = BlendCoefficients::new(mapping, entries.into_iter().map(|e| e.2).collect(), lambda)?;
    Ok(NamedCoefficients {
        coeffs,
        model_names,
        feature_names,
    })
}

pub fn read_coefficients(path: impl AsRef<Path>) -> Result<NamedCoefficients> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| FwlsError::io(path, e))?;
    parse_coefficients(&text, &path.display().to_string(), 0.0)
}

/// `feature,mean,scale` rows.
pub fn standardizer_to_csv(s: &Standardizer, feature_names: &[String]) -> String {
    let mut out = String::from("feature,mean,scale\n");
    for ((name, mean), scale) in feature_names.iter().zip(&s.means).zip(&s.scales) {
        out.push_str(&format!("{name},{mean},{scale}\n"));
    }
    out
}

pub fn parse_standardizer(text: &str, source: &str) -> Result<(Vec<String>, Standardizer)> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let mut names = Vec::new();
    let mut means = Vec::new();
    let mut scales = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| parse_err(source, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        names.push(rec[0].trim().to_string());
        means.push(parse_value(source, line, "mean", &rec[1])?);
        let s = parse_value(source, line, "scale", &rec[2])?;
        if s <= 0.0 {
            return Err(parse_err(source, line, "scale must be positive"));
        }
        scales.push(s);
    }
    Ok((names, Standardizer { means, scales }))
}

/// `id,prediction` rows.
pub fn predictions_to_csv(ids: &[String], preds: &[f64]) -> String {
    let mut s = String::from("id,prediction\n");
    for (id, p) in ids.iter().zip(preds) {
        s.push_str(&format!("{id},{p}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "id,y,g:svd,g:knn,f:usupp\na,3,2.9,3.2,1.5\nb,4,4.1,3.8,0.2\n";

    #[test]
    fn parses_and_injects_constant() {
        let t = StackedTable::parse(SAMPLE, "s").unwrap();
        assert_eq!(t.model_names, vec!["svd", "knn"]);
        assert_eq!(t.feature_names, vec!["usupp"]);
        let ds = t.into_dataset(true, false).unwrap();
        assert_eq!((ds.n_models(), ds.n_features()), (2, 2));
        assert_eq!(ds.meta_row(1), &[1.0, 0.2]);
        assert_eq!(ds.feature_names()[0], "const");
        assert_eq!(ds.row_ids().unwrap(), &["a".to_string(), "b".to_string()]);
        assert_eq!(ds.targets(), &[3.0, 4.0]);
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let err = StackedTable::parse("id,y,g:a\nr1,1,2\nr2,1,\n", "x.csv").unwrap_err();
        match err {
            FwlsError::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("missing"), "{message}");
            }
            e => panic!("{e}"),
        }
        let err = StackedTable::parse("id,y,g:a\nr1,1,NaN\n", "x.csv").unwrap_err();
        assert!(matches!(err, FwlsError::Parse { line: 2, .. }));
        let err = StackedTable::parse("id,y,g:a\nr1,1,inf\n", "x.csv").unwrap_err();
        assert!(err.to_string().contains("non-finite"));
        assert!(StackedTable::parse("id,y,q:a\nr1,1,1\n", "x").is_err());
        assert!(StackedTable::parse("y,g:a\n1,1\n", "x").is_err());
        assert!(StackedTable::parse("id,y,g:a\nr1,1\n", "x").is_err());
        assert!(StackedTable::parse("id,y,g:a\n", "x").is_err());
    }

    #[test]
    fn coefficient_csv_round_trip() {
        let map = DesignMapping::new(2, 2).unwrap();
        let c = BlendCoefficients::new(map, vec![0.5, -1.25, 1e-7, 3.0], 0.0).unwrap();
        let names_m = vec!["a".to_string(), "b".to_string()];
        let names_f = vec!["const".to_string(), "s".to_string()];
        let text = coefficients_to_csv(&c, &names_m, &names_f);
        assert!(text.starts_with("model,feature,v_ij\na,const,0.5\nb,const,-1.25\na,s,"));
        let back = parse_coefficients(&text, "c", 0.0).unwrap();
        assert_eq!(back.coeffs, c);
        assert_eq!(back.model_names, names_m);
        assert_eq!(back.feature_names, names_f);
        let bad = "model,feature,v_ij\na,const,1\na,s,2\nb,const,3\nb,s,4\n";
        assert!(parse_coefficients(bad, "c", 0.0).is_err());
    }

    #[test]
    fn new_column_files() {
        let t = StackedTable::parse("id,g:new\na,1\nb,2\n", "n").unwrap();
        let (col, is_model) = t.into_new_column().unwrap();
        assert!(is_model);
        assert_eq!(col.values, vec![1.0, 2.0]);
        let t = StackedTable::parse("id,f:x\na,1\n", "n").unwrap();
        assert!(!t.into_new_column().unwrap().1);
        let t = StackedTable::parse("id,g:a,g:b\na,1,2\n", "n").unwrap();
        assert!(t.into_new_column().is_err());
    }
}
