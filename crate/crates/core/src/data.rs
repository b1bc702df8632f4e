//! Survey microdata, the census cell table and their validation.
//!
//! All category codes are 1-based: income 1..=5, age 1..=4, ethnicity 1..=4
//! (white, black, hispanic, other) and state 1..=51 (see [`crate::states`]).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::states::N_STATES;

pub const N_INCOME: usize = 5;
pub const N_AGE: usize = 4;
pub const N_ETHNICITY: usize = 4;
pub const N_CELLS: usize = N_INCOME * N_AGE * N_ETHNICITY * N_STATES;

pub const WHITE: u8 = 1;

/// The four demographic/geographic factors of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Income,
    Age,
    Ethnicity,
    State,
}

impl Factor {
    pub const ALL: [Factor; 4] = [Factor::Income, Factor::Age, Factor::Ethnicity, Factor::State];

    pub fn cardinality(self) -> usize {
        match self {
            Factor::Income => N_INCOME,
            Factor::Age => N_AGE,
            Factor::Ethnicity => N_ETHNICITY,
            Factor::State => N_STATES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Factor::Income => "income",
            Factor::Age => "age",
            Factor::Ethnicity => "ethnicity",
            Factor::State => "state",
        }
    }
}

impl std::fmt::Display for Factor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One poststratification cell, identified by its 1-based category codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub income: u8,
    pub age: u8,
    pub ethnicity: u8,
    pub state: u8,
}

impl CellKey {
    pub fn new(income: u8, age: u8, ethnicity: u8, state: u8) -> Self {
        CellKey {
            income,
            age,
            ethnicity,
            state,
        }
    }

    pub fn level(&self, factor: Factor) -> u8 {
        match factor {
            Factor::Income => self.income,
            Factor::Age => self.age,
            Factor::Ethnicity => self.ethnicity,
            Factor::State => self.state,
        }
    }

    /// Returns the first factor whose code is outside its range.
    pub fn out_of_range(&self) -> Option<(Factor, u8)> {
        Factor::ALL.into_iter().find_map(|f| {
            let v = self.level(f);
            (v == 0 || v as usize > f.cardinality()).then_some((f, v))
        })
    }

    /// Position in the canonical (state, ethnicity, age, income) ordering.
    pub fn canonical_index(&self) -> usize {
        let s = self.state as usize - 1;
        let e = self.ethnicity as usize - 1;
        let a = self.age as usize - 1;
        let i = self.income as usize - 1;
        ((s * N_ETHNICITY + e) * N_AGE + a) * N_INCOME + i
    }

    pub fn from_canonical_index(idx: usize) -> Self {
        debug_assert!(idx < N_CELLS);
        let i = idx % N_INCOME;
        let rest = idx / N_INCOME;
        let a = rest % N_AGE;
        let rest = rest / N_AGE;
        let e = rest % N_ETHNICITY;
        let s = rest / N_ETHNICITY;
        CellKey::new(i as u8 + 1, a as u8 + 1, e as u8 + 1, s as u8 + 1)
    }

    pub fn all() -> impl Iterator<Item = CellKey> {
        (0..N_CELLS).map(CellKey::from_canonical_index)
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(income={}, age={}, ethnicity={}, state={})",
            self.income, self.age, self.ethnicity, self.state
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurveyResponse {
    /// 1 = Republican candidate, 0 = Democratic candidate.
    pub vote: u8,
    pub income: u8,
    pub age: u8,
    pub ethnicity: u8,
    pub state: u8,
    pub survey_id: String,
}

impl SurveyResponse {
    pub fn key(&self) -> CellKey {
        CellKey::new(self.income, self.age, self.ethnicity, self.state)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub survey_name: String,
    #[serde(default)]
    pub field_dates: Option<String>,
    #[serde(default)]
    pub provenance: Option<String>,
    /// Undecided or other-preference respondents excluded at ingest.
    #[serde(default)]
    pub dropped_undecided: usize,
    /// Malformed rows skipped under [`BadRowPolicy::Drop`].
    #[serde(default)]
    pub dropped_malformed: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurveyDataset {
    responses: Vec<SurveyResponse>,
    pub source_meta: SourceMeta,
}

impl SurveyDataset {
    /// Validates the dataset invariants: non-empty, in-range codes, binary
    /// votes and at least two distinct states.
    pub fn new(responses: Vec<SurveyResponse>, source_meta: SourceMeta) -> Result<Self> {
        if responses.is_empty() {
            return Err(Error::Dataset("no responses after exclusions".into()));
        }
        for (i, r) in responses.iter().enumerate() {
            if r.vote > 1 {
                return Err(Error::Row {
                    row: i + 1,
                    message: format!("vote must be 0 or 1, got {}", r.vote),
                });
            }
            if let Some((f, v)) = r.key().out_of_range() {
                return Err(Error::Row {
                    row: i + 1,
                    message: format!("{f} code {v} out of range 1..={}", f.cardinality()),
                });
            }
        }
        let states: BTreeSet<u8> = responses.iter().map(|r| r.state).collect();
        if states.len() < 2 {
            return Err(Error::Dataset(
                "at least 2 distinct states are required for the hierarchical model".into(),
            ));
        }
        Ok(SurveyDataset {
            responses,
            source_meta,
        })
    }

    pub fn responses(&self) -> &[SurveyResponse] {
        &self.responses
    }

    pub fn n(&self) -> usize {
        self.responses.len()
    }

    /// Successes and trials per cell, in canonical cell order, for cells
    /// with at least one respondent.
    pub fn cell_counts(&self) -> Vec<(CellKey, u64, u64)> {
        let mut counts = vec![(0u64, 0u64); N_CELLS];
        for r in &self.responses {
            let c = &mut counts[r.key().canonical_index()];
            c.0 += r.vote as u64;
            c.1 += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(i, (y, n))| (CellKey::from_canonical_index(i), y, n))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BadRowPolicy {
    #[default]
    Fail,
    Drop,
}

/// Column mapping for survey files, loaded from JSON.
///
/// `columns` maps canonical names (vote, income, age, ethnicity, state,
/// survey_id) to the header used in the source file. `recode` maps raw codes
/// to canonical 1-based codes per factor; factors without a recode table are
/// read as canonical integers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaConfig {
    pub columns: BTreeMap<String, String>,
    pub republican_codes: Vec<String>,
    pub democrat_codes: Vec<String>,
    pub undecided_codes: Vec<String>,
    pub recode: BTreeMap<String, BTreeMap<String, u8>>,
    pub on_bad_row: BadRowPolicy,
    pub survey_name: Option<String>,
    pub field_dates: Option<String>,
    pub provenance: Option<String>,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        SchemaConfig {
            columns: BTreeMap::new(),
            republican_codes: vec!["1".into()],
            democrat_codes: vec!["0".into()],
            undecided_codes: vec!["2".into(), "9".into(), "NA".into(), "".into()],
            recode: BTreeMap::new(),
            on_bad_row: BadRowPolicy::Fail,
            survey_name: None,
            field_dates: None,
            provenance: None,
        }
    }
}

impl SchemaConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn column<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.columns
            .get(canonical)
            .map(String::as_str)
            .unwrap_or(canonical)
    }
}

const REQUIRED_SURVEY_COLUMNS: [&str; 5] = ["vote", "income", "age", "ethnicity", "state"];

fn header_positions(headers: &csv::StringRecord) -> HashMap<&str, usize> {
    headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect()
}

fn parse_code(raw: &str, factor: Factor, schema: &SchemaConfig) -> std::result::Result<u8, String> {
    let raw = raw.trim();
    let code = match schema.recode.get(factor.name()) {
        Some(table) => *table
            .get(raw)
            .ok_or_else(|| format!("{factor} code \"{raw}\" has no recode entry"))?,
        None => raw
            .parse::<u8>()
            .map_err(|_| format!("{factor} code \"{raw}\" is not an integer"))?,
    };
    if code == 0 || code as usize > factor.cardinality() {
        return Err(format!(
            "{factor} code {code} out of range 1..={}",
            factor.cardinality()
        ));
    }
    Ok(code)
}

/// Loads a survey CSV, excluding undecided/other respondents.
pub fn load_survey(path: &Path, schema: &SchemaConfig) -> Result<SurveyDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_survey(file, schema, &default_survey_name(path))
}

fn default_survey_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "survey".into())
}

pub fn read_survey<R: std::io::Read>(
    reader: R,
    schema: &SchemaConfig,
    default_name: &str,
) -> Result<SurveyDataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let pos = header_positions(&headers);
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(REQUIRED_SURVEY_COLUMNS) {
        *slot = *pos
            .get(schema.column(name))
            .ok_or_else(|| Error::Schema(name.to_string()))?;
    }
    let id_col = pos.get(schema.column("survey_id")).copied();
    let survey_name = schema
        .survey_name
        .clone()
        .unwrap_or_else(|| default_name.to_string());

    let mut meta = SourceMeta {
        survey_name: survey_name.clone(),
        field_dates: schema.field_dates.clone(),
        provenance: schema.provenance.clone(),
        ..SourceMeta::default()
    };
    let mut responses = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let vote_raw = record.get(cols[0]).unwrap_or("").trim();
        if schema.undecided_codes.iter().any(|c| c == vote_raw) {
            meta.dropped_undecided += 1;
            continue;
        }
        let parsed = parse_response(&record, &cols, id_col, vote_raw, schema, &survey_name);
        match parsed {
            Ok(r) => responses.push(r),
            Err(message) => match schema.on_bad_row {
                BadRowPolicy::Fail => return Err(Error::Row { row, message }),
                BadRowPolicy::Drop => meta.dropped_malformed += 1,
            },
        }
    }
    SurveyDataset::new(responses, meta)
}

fn parse_response(
    record: &csv::StringRecord,
    cols: &[usize; 5],
    id_col: Option<usize>,
    vote_raw: &str,
    schema: &SchemaConfig,
    survey_name: &str,
) -> std::result::Result<SurveyResponse, String> {
    let vote = if schema.republican_codes.iter().any(|c| c == vote_raw) {
        1
    } else if schema.democrat_codes.iter().any(|c| c == vote_raw) {
        0
    } else {
        return Err(format!("unrecognized vote code \"{vote_raw}\""));
    };
    let field = |c: usize| record.get(c).unwrap_or("");
    Ok(SurveyResponse {
        vote,
        income: parse_code(field(cols[1]), Factor::Income, schema)?,
        age: parse_code(field(cols[2]), Factor::Age, schema)?,
        ethnicity: parse_code(field(cols[3]), Factor::Ethnicity, schema)?,
        state: parse_code(field(cols[4]), Factor::State, schema)?,
        survey_id: id_col
            .and_then(|c| record.get(c))
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| survey_name.to_string()),
    })
}

/// Writes the canonical survey CSV (vote,income,age,ethnicity,state,survey_id).
pub fn write_survey_csv(data: &SurveyDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["vote", "income", "age", "ethnicity", "state", "survey_id"])?;
    for r in data.responses() {
        w.write_record([
            r.vote.to_string(),
            r.income.to_string(),
            r.age.to_string(),
            r.ethnicity.to_string(),
            r.state.to_string(),
            r.survey_id.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub key: CellKey,
    /// Census population N_j.
    pub population: f64,
    /// Previous-election Republican two-party share in the cell's state.
    pub state_predictor: f64,
}

/// The dense 5 × 4 × 4 × 51 poststratification grid, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct CellTable {
    cells: Vec<CellRecord>,
    state_predictor: [f64; N_STATES],
    state_total: [f64; N_STATES],
}

impl CellTable {
    /// Builds a table from records in any order, enforcing every invariant.
    pub fn new(records: Vec<CellRecord>) -> Result<Self> {
        let mut slots: Vec<Option<CellRecord>> = vec![None; N_CELLS];
        for rec in records {
            if let Some((f, v)) = rec.key.out_of_range() {
                return Err(Error::CellTable(format!(
                    "{f} code {v} out of range in cell {}",
                    rec.key
                )));
            }
            if !rec.population.is_finite() || rec.population < 0.0 {
                return Err(Error::CellTable(format!(
                    "population must be a nonnegative number, got {} for cell {}",
                    rec.population, rec.key
                )));
            }
            if !(0.0..=1.0).contains(&rec.state_predictor) {
                return Err(Error::CellTable(format!(
                    "state_predictor must lie in [0, 1], got {} for cell {}",
                    rec.state_predictor, rec.key
                )));
            }
            let slot = &mut slots[rec.key.canonical_index()];
            if slot.is_some() {
                return Err(Error::CellTable(format!("duplicate cell {}", rec.key)));
            }
            *slot = Some(rec);
        }
        let mut cells = Vec::with_capacity(N_CELLS);
        for (i, slot) in slots.into_iter().enumerate() {
            match slot {
                Some(rec) => cells.push(rec),
                None => {
                    return Err(Error::CellTable(format!(
                        "missing cell {}",
                        CellKey::from_canonical_index(i)
                    )))
                }
            }
        }

        let mut state_predictor = [f64::NAN; N_STATES];
        let mut state_total = [0.0; N_STATES];
        for rec in &cells {
            let s = rec.key.state as usize - 1;
            if state_predictor[s].is_nan() {
                state_predictor[s] = rec.state_predictor;
            } else if state_predictor[s] != rec.state_predictor {
                return Err(Error::CellTable(format!(
                    "state_predictor inconsistent within state {}: {} vs {}",
                    rec.key.state, state_predictor[s], rec.state_predictor
                )));
            }
            state_total[s] += rec.population;
        }
        if let Some(s) = state_total.iter().position(|&t| t <= 0.0) {
            return Err(Error::CellTable(format!(
                "state {} has zero total population",
                s + 1
            )));
        }
        Ok(CellTable {
            cells,
            state_predictor,
            state_total,
        })
    }

    pub fn cells(&self) -> &[CellRecord] {
        &self.cells
    }

    pub fn get(&self, key: CellKey) -> &CellRecord {
        &self.cells[key.canonical_index()]
    }

    pub fn state_predictor(&self, state: u8) -> f64 {
        self.state_predictor[state as usize - 1]
    }

    pub fn state_predictors(&self) -> &[f64; N_STATES] {
        &self.state_predictor
    }

    pub fn state_total(&self, state: u8) -> f64 {
        self.state_total[state as usize - 1]
    }

    pub fn total_population(&self) -> f64 {
        self.cells.iter().map(|c| c.population).sum()
    }
}

const CELL_COLUMNS: [&str; 6] = ["income", "age", "ethnicity", "state", "N", "state_predictor"];

pub fn load_cell_table(path: &Path) -> Result<CellTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_cell_table(file)
}

pub fn read_cell_table<R: std::io::Read>(reader: R) -> Result<CellTable> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let pos = header_positions(&headers);
    let mut cols = [0usize; 6];
    for (slot, name) in cols.iter_mut().zip(CELL_COLUMNS) {
        *slot = *pos.get(name).ok_or_else(|| Error::Schema(name.to_string()))?;
    }
    let mut records = Vec::with_capacity(N_CELLS);
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let field = |c: usize| record.get(cols[c]).unwrap_or("").trim();
        let code = |c: usize| {
            field(c).parse::<u8>().map_err(|_| Error::Row {
                row,
                message: format!("{} code \"{}\" is not an integer", CELL_COLUMNS[c], field(c)),
            })
        };
        let real = |c: usize| {
            field(c).parse::<f64>().map_err(|_| Error::Row {
                row,
                message: format!("{} value \"{}\" is not a number", CELL_COLUMNS[c], field(c)),
            })
        };
        let key = CellKey::new(code(0)?, code(1)?, code(2)?, code(3)?);
        let population = real(4)?;
        if population < 0.0 {
            return Err(Error::Row {
                row,
                message: format!("negative population {population} for cell {key}"),
            });
        }
        records.push(CellRecord {
            key,
            population,
            state_predictor: real(5)?,
        });
    }
    CellTable::new(records)
}

pub fn write_cell_table_csv(table: &CellTable, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(CELL_COLUMNS)?;
    for c in table.cells() {
        w.write_record([
            c.key.income.to_string(),
            c.key.age.to_string(),
            c.key.ethnicity.to_string(),
            c.key.state.to_string(),
            c.population.to_string(),
            c.state_predictor.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompatStatus {
    Pass,
    Warn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorCoverage {
    pub factor: Factor,
    /// Levels with respondents but zero census population.
    pub surveyed_without_census: Vec<u8>,
    /// Levels with census population but no respondents.
    pub census_without_survey: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityReport {
    pub status: CompatStatus,
    pub factors: Vec<FactorCoverage>,
    /// Cells holding respondents while their census count is zero.
    pub surveyed_cells_without_census: Vec<CellKey>,
    /// Census population per state, index 0 = state 1.
    pub state_totals: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Cross-checks survey coverage against census mass. Never fails; any
/// surveyed category without census population produces a warning.
pub fn validate_compatibility(data: &SurveyDataset, table: &CellTable) -> CompatibilityReport {
    let mut warnings = Vec::new();
    let mut factors = Vec::new();
    for factor in Factor::ALL {
        let k = factor.cardinality();
        let mut surveyed = vec![0usize; k];
        let mut census = vec![0.0f64; k];
        for r in data.responses() {
            surveyed[r.key().level(factor) as usize - 1] += 1;
        }
        for c in table.cells() {
            census[c.key.level(factor) as usize - 1] += c.population;
        }
        let mut cov = FactorCoverage {
            factor,
            surveyed_without_census: Vec::new(),
            census_without_survey: Vec::new(),
        };
        for level in 0..k {
            let code = level as u8 + 1;
            if surveyed[level] > 0 && census[level] <= 0.0 {
                cov.surveyed_without_census.push(code);
                warnings.push(format!(
                    "{factor} {code} has respondents but zero census population"
                ));
            }
            if surveyed[level] == 0 && census[level] > 0.0 {
                cov.census_without_survey.push(code);
                warnings.push(format!(
                    "{factor} {code} unobserved; estimate will be prior/pooling-driven"
                ));
            }
        }
        factors.push(cov);
    }

    let mut cells_without_census = Vec::new();
    for (key, _, _) in data.cell_counts() {
        if table.get(key).population <= 0.0 {
            cells_without_census.push(key);
            warnings.push(format!("cell {key} has respondents but census N = 0"));
        }
    }

    let state_totals = (1..=N_STATES as u8).map(|s| table.state_total(s)).collect();
    CompatibilityReport {
        status: if warnings.is_empty() {
            CompatStatus::Pass
        } else {
            CompatStatus::Warn
        },
        factors,
        surveyed_cells_without_census: cells_without_census,
        state_totals,
        warnings,
    }
}
