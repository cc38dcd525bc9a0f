//! File formats: TOML model configuration, CSV datasets, JSON fit reports and
//! CSV assignment tables.
//!
//! Labels written to files are 1-based; everything in memory is 0-based.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::em::FitControls;
use crate::error::{Error, Result};
use crate::likelihood::{Group, ResponseDataset, Student};
use crate::model::{ItemBank, ModelSpec, Parameterization};
use crate::selection::Assignment;

pub const MISSING_TOKEN: &str = "NA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Numeric,
    Categorical,
}

/// A covariate column. Categorical columns become one indicator per level
/// other than the reference (the first listed level unless given).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateDecl {
    pub name: String,
    pub kind: CovariateKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl CovariateDecl {
    pub fn numeric(name: &str) -> Self {
        Self {
            name: name.into(),
            kind: CovariateKind::Numeric,
            levels: vec![],
            reference: None,
        }
    }

    fn reference_level(&self) -> &str {
        self.reference.as_deref().unwrap_or(&self.levels[0])
    }

    /// Levels that receive an indicator column, in declaration order.
    pub fn indicator_levels(&self) -> Vec<&str> {
        let r = self.reference_level();
        self.levels.iter().map(String::as_str).filter(|l| *l != r).collect()
    }

    /// Names of the design-matrix columns this covariate expands to.
    pub fn column_names(&self) -> Vec<String> {
        match self.kind {
            CovariateKind::Numeric => vec![self.name.clone()],
            CovariateKind::Categorical => self
                .indicator_levels()
                .iter()
                .map(|l| format!("{}={}", self.name, l))
                .collect(),
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.kind == CovariateKind::Categorical {
            let distinct: HashSet<&String> = self.levels.iter().collect();
            if self.levels.len() < 2 || distinct.len() != self.levels.len() {
                return Err(format!("covariate '{}' needs at least two distinct levels", self.name));
            }
            if let Some(r) = &self.reference {
                if !self.levels.contains(r) {
                    return Err(format!("reference level '{r}' of '{}' is not among its levels", self.name));
                }
            }
        }
        Ok(())
    }

    fn expand(&self, token: &str, out: &mut Vec<f64>) -> std::result::Result<(), String> {
        match self.kind {
            CovariateKind::Numeric => {
                let x: f64 = token
                    .trim()
                    .parse()
                    .map_err(|_| format!("'{token}' is not a number"))?;
                if !x.is_finite() {
                    return Err(format!("'{token}' is not finite"));
                }
                out.push(x);
            }
            CovariateKind::Categorical => {
                let token = token.trim();
                if !self.levels.iter().any(|l| l == token) {
                    return Err(format!("level '{token}' is not declared for '{}'", self.name));
                }
                out.extend(
                    self.indicator_levels()
                        .iter()
                        .map(|l| f64::from(u8::from(*l == token))),
                );
            }
        }
        Ok(())
    }
}

/// Optional overrides of [`FitControls`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsConfig {
    pub max_iter: Option<usize>,
    pub tol_loglik: Option<f64>,
    pub tol_param: Option<f64>,
    pub newton_max_iter: Option<usize>,
    pub newton_tol: Option<f64>,
    pub starts: Option<usize>,
    pub seed: Option<u64>,
}

impl ControlsConfig {
    pub fn apply(&self, c: &mut FitControls) {
        if let Some(v) = self.max_iter {
            c.max_iter = v;
        }
        if let Some(v) = self.tol_loglik {
            c.tol_loglik = v;
        }
        if let Some(v) = self.tol_param {
            c.tol_param = v;
        }
        if let Some(v) = self.newton_max_iter {
            c.newton_max_iter = v;
        }
        if let Some(v) = self.newton_tol {
            c.newton_tol = v;
        }
        if let Some(v) = self.starts {
            c.n_starts = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
    }
}

/// Model configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub classes: usize,
    #[serde(default = "one")]
    pub types: usize,
    pub parameterization: Parameterization,
    /// Item count; may be omitted when `dimensions` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<usize>,
    /// 1-based dimension of every item; all items load on dimension 1 if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimensions: Option<Vec<usize>>,
    /// 1-based reference item per dimension; the first item of each
    /// dimension if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_items: Option<Vec<usize>>,
    #[serde(default)]
    pub student_covariates: Vec<CovariateDecl>,
    #[serde(default)]
    pub school_covariates: Vec<CovariateDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controls: Option<ControlsConfig>,
}

fn one() -> usize {
    1
}

impl ModelConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config {
            path: path.display().to_string(),
            message: e.message().to_string(),
        })?;
        cfg.model_spec().map_err(|e| Error::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn student_columns(&self) -> Vec<String> {
        self.student_covariates.iter().flat_map(CovariateDecl::column_names).collect()
    }

    pub fn school_columns(&self) -> Vec<String> {
        self.school_covariates.iter().flat_map(CovariateDecl::column_names).collect()
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let bad = |m: String| Error::InvalidSpec(vec![m]);
        let dims: Vec<usize> = match (&self.dimensions, self.items) {
            (Some(d), items) => {
                if items.is_some_and(|r| r != d.len()) {
                    return Err(bad(format!(
                        "items = {} but {} dimension entries",
                        items.unwrap_or(0),
                        d.len()
                    )));
                }
                if d.contains(&0) {
                    return Err(bad("dimension labels are 1-based".into()));
                }
                d.iter().map(|x| x - 1).collect()
            }
            (None, Some(r)) => vec![0; r],
            (None, None) => return Err(bad("either 'items' or 'dimensions' is required".into())),
        };
        let n_dims = dims.iter().max().map_or(0, |m| m + 1);
        let items = match &self.reference_items {
            None => ItemBank::with_first_references(dims, n_dims)?,
            Some(refs) => {
                if refs.contains(&0) {
                    return Err(bad("reference items are 1-based".into()));
                }
                ItemBank::new(dims, refs.iter().map(|j| j - 1).collect())
            }
        };
        for c in self.student_covariates.iter().chain(&self.school_covariates) {
            c.check().map_err(bad)?;
        }
        let spec = ModelSpec {
            items,
            n_classes: self.classes,
            n_types: self.types,
            parameterization: self.parameterization,
            n_student_covariates: self.student_columns().len(),
            n_school_covariates: self.school_columns().len(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn controls(&self) -> FitControls {
        let mut c = FitControls::default();
        if let Some(o) = &self.controls {
            o.apply(&mut c);
        }
        c
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

pub(crate) fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => io_error(path, io),
            other => Error::Io {
                path: path.display().to_string(),
                message: format!("{other:?}"),
            },
        })
}

struct Table {
    file: String,
    header: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let file = path.display().to_string();
        let mut rdr = csv_reader(path)?;
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| parse_err(&file, 1, "-", e.to_string()))?
            .iter()
            .map(String::from)
            .collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(&file, line, "-", e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Self { file, header, rows })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(&self.file, 1, name, format!("missing column '{name}'")))
    }
}

fn parse_err(file: &str, line: u64, column: &str, message: String) -> Error {
    Error::Parse {
        file: file.into(),
        line,
        column: column.into(),
        message,
    }
}

/// Reads the students and schools files described by `config`.
///
/// The students file has columns `school_id`, `student_id`, one column per
/// item (`0`, `1` or `NA`) and then the declared student covariates; the
/// schools file has `school_id` and the declared school covariates. Groups
/// follow the order of the schools file; schools without students are dropped.
pub fn load_dataset(students: &Path, schools: &Path, config: &ModelConfig) -> Result<ResponseDataset> {
    let spec = config.model_spec()?;
    let r = spec.n_items();

    let sch = Table::read(schools)?;
    let sid = sch.column("school_id")?;
    let w_cols: Vec<usize> = config
        .school_covariates
        .iter()
        .map(|c| sch.column(&c.name))
        .collect::<Result<_>>()?;
    let mut groups: Vec<Group> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (line, rec) in &sch.rows {
        let id = rec[sid].to_string();
        if index.contains_key(&id) {
            return Err(parse_err(&sch.file, *line, "school_id", format!("duplicate school '{id}'")));
        }
        let mut w = Vec::new();
        for (decl, &col) in config.school_covariates.iter().zip(&w_cols) {
            decl.expand(&rec[col], &mut w)
                .map_err(|m| parse_err(&sch.file, *line, &decl.name, m))?;
        }
        index.insert(id.clone(), groups.len());
        groups.push(Group {
            id,
            covariates: w,
            students: vec![],
        });
    }

    let st = Table::read(students)?;
    let h_col = st.column("school_id")?;
    let i_col = st.column("student_id")?;
    let first_item = i_col.max(h_col) + 1;
    if st.header.len() < first_item + r {
        return Err(parse_err(
            &st.file,
            1,
            "-",
            format!("expected {r} item columns after student_id, found {}", st.header.len().saturating_sub(first_item)),
        ));
    }
    let x_cols: Vec<usize> = config
        .student_covariates
        .iter()
        .map(|c| st.column(&c.name))
        .collect::<Result<_>>()?;
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (line, rec) in &st.rows {
        let h = rec[h_col].to_string();
        let Some(&g) = index.get(&h) else {
            return Err(parse_err(&st.file, *line, "school_id", format!("unknown school '{h}'")));
        };
        let id = rec[i_col].to_string();
        if !seen.insert((h.clone(), id.clone())) {
            return Err(parse_err(&st.file, *line, "student_id", format!("duplicate student '{id}' in school '{h}'")));
        }
        let mut responses = Vec::with_capacity(r);
        for c in first_item..first_item + r {
            responses.push(match &rec[c] {
                "0" => Some(false),
                "1" => Some(true),
                MISSING_TOKEN => None,
                other => {
                    return Err(parse_err(
                        &st.file,
                        *line,
                        &st.header[c],
                        format!("response '{other}' is not 0, 1 or {MISSING_TOKEN}"),
                    ))
                }
            });
        }
        let mut x = Vec::new();
        for (decl, &col) in config.student_covariates.iter().zip(&x_cols) {
            decl.expand(&rec[col], &mut x)
                .map_err(|m| parse_err(&st.file, *line, &decl.name, m))?;
        }
        groups[g].students.push(Student {
            id,
            covariates: x,
            responses,
        });
    }
    groups.retain(|g| !g.students.is_empty());
    let data = ResponseDataset { groups };
    data.check(&spec)?;
    Ok(data)
}

/// Writes a dataset whose covariates are all numeric columns named as in
/// `config` (categorical declarations are not supported here).
pub fn write_dataset(data: &ResponseDataset, config: &ModelConfig, students: &Path, schools: &Path) -> Result<()> {
    if config
        .student_covariates
        .iter()
        .chain(&config.school_covariates)
        .any(|c| c.kind != CovariateKind::Numeric)
    {
        return Err(Error::InvalidDesign("only numeric covariates can be written".into()));
    }
    let r = config.model_spec()?.n_items();
    let mut w = csv_writer(schools)?;
    let mut header = vec!["school_id".to_string()];
    header.extend(config.school_columns());
    write_row(&mut w, schools, &header)?;
    for g in &data.groups {
        let mut row = vec![g.id.clone()];
        row.extend(g.covariates.iter().map(|x| x.to_string()));
        write_row(&mut w, schools, &row)?;
    }
    flush(w, schools)?;

    let mut w = csv_writer(students)?;
    let mut header = vec!["school_id".to_string(), "student_id".to_string()];
    header.extend((1..=r).map(|j| format!("item_{j}")));
    header.extend(config.student_columns());
    write_row(&mut w, students, &header)?;
    for g in &data.groups {
        for s in &g.students {
            let mut row = vec![g.id.clone(), s.id.clone()];
            row.extend(s.responses.iter().map(|y| match y {
                Some(true) => "1".to_string(),
                Some(false) => "0".to_string(),
                None => MISSING_TOKEN.to_string(),
            }));
            row.extend(s.covariates.iter().map(|x| x.to_string()));
            write_row(&mut w, students, &row)?;
        }
    }
    flush(w, students)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| io_error(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn write_row(w: &mut csv::Writer<fs::File>, path: &Path, row: &[String]) -> Result<()> {
    w.write_record(row).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn flush(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| io_error(path, e))
}

/// Writes per-student class and per-school type assignments.
pub fn write_assignments(
    data: &ResponseDataset,
    students: &[Vec<Assignment>],
    schools: &[Assignment],
    student_path: &Path,
    school_path: &Path,
) -> Result<()> {
    let mut w = csv_writer(student_path)?;
    write_row(&mut w, student_path, &["school_id", "student_id", "class", "posterior"].map(String::from))?;
    for (g, rows) in data.groups.iter().zip(students) {
        for (s, a) in g.students.iter().zip(rows) {
            let row = [g.id.clone(), s.id.clone(), (a.label + 1).to_string(), fmt_sig(a.posterior)];
            write_row(&mut w, student_path, &row)?;
        }
    }
    flush(w, student_path)?;
    let mut w = csv_writer(school_path)?;
    write_row(&mut w, school_path, &["school_id", "type", "posterior"].map(String::from))?;
    for (g, a) in data.groups.iter().zip(schools) {
        write_row(&mut w, school_path, &[g.id.clone(), (a.label + 1).to_string(), fmt_sig(a.posterior)])?;
    }
    flush(w, school_path)
}

/// Rounds to 12 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().expect("formatted float parses")
}

fn fmt_sig(x: f64) -> String {
    round_sig(x).to_string()
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = round_sig(n.as_f64().expect("f64 number"));
            *v = serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number);
        }
        Value::Array(a) => a.iter_mut().for_each(round_value),
        Value::Object(o) => o.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Serializes `value` as pretty JSON with every float rounded to 12
/// significant digits.
pub fn to_json_rounded<T: Serialize>(value: &T) -> String {
    let mut v = serde_json::to_value(value).expect("report serializes");
    round_value(&mut v);
    let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, to_json_rounded(value)).map_err(|e| io_error(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| {
        parse_err(&path.display().to_string(), e.line() as u64, &e.column().to_string(), e.to_string())
    })
}
