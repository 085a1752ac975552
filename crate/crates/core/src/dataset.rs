//! Lattice-indexed observations `(Y_i, X_i, U_i)`.
//!
//! Sites are 1-based integer coordinates inside a rectangular grid. An
//! observation whose covariate or regime vector holds a non-finite value is
//! kept in the dataset but is not *usable*; neighbour augmentation relies on
//! this to mask border sites without losing them.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Name given to the constant covariate column when an intercept is requested.
pub const INTERCEPT: &str = "(intercept)";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("two rows share site {0:?}")]
    DuplicateSite(Vec<usize>),
    #[error("no usable rows")]
    EmptyDataset,
    #[error("site {site:?} lies outside grid shape {shape:?}")]
    OutOfBounds { site: Vec<usize>, shape: Vec<usize> },
    #[error("row {row}: invalid coordinate `{value}` in column `{column}`")]
    BadCoordinate { row: usize, column: String, value: String },
    #[error("schema must name at least one {0} column")]
    IncompleteSchema(&'static str),
    #[error("neighbour augmentation requires a planar (N = 2) grid, got N = {0}")]
    NotPlanar(usize),
    #[error("unknown direction `{0}`")]
    UnknownDirection(String),
    #[error("observation has {got} {what} values, expected {expected}")]
    Arity { what: &'static str, expected: usize, got: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Lattice coordinates `(i_1, …, i_N)`, each starting at one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site(pub Vec<usize>);

impl Site {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Rescaled location `s = (i_1 / n_1, …, i_N / n_N)`.
    pub fn rescaled(&self, shape: &[usize]) -> Vec<f64> {
        self.0.iter().zip(shape).map(|(&i, &n)| i as f64 / n as f64).collect()
    }

    fn in_bounds(&self, shape: &[usize]) -> bool {
        self.0.len() == shape.len() && self.0.iter().zip(shape).all(|(&i, &n)| i >= 1 && i <= n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub site: Site,
    pub y: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

impl Observation {
    pub fn is_usable(&self) -> bool {
        self.y.is_finite() && self.x.iter().all(|v| v.is_finite()) && self.u.iter().all(|v| v.is_finite())
    }
}

/// Which CSV columns play which role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub coords: Vec<String>,
    pub y: String,
    pub x: Vec<String>,
    pub u: Vec<String>,
    /// Prepend a constant-one covariate.
    pub intercept: bool,
}

impl ColumnSchema {
    pub fn new(coords: &[&str], y: &str, x: &[&str], u: &[&str]) -> Self {
        ColumnSchema {
            coords: coords.iter().map(|s| s.to_string()).collect(),
            y: y.to_string(),
            x: x.iter().map(|s| s.to_string()).collect(),
            u: u.iter().map(|s| s.to_string()).collect(),
            intercept: true,
        }
    }

    pub fn without_intercept(mut self) -> Self {
        self.intercept = false;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    West,
    East,
    North,
    South,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::West, Direction::East, Direction::North, Direction::South];

    fn offset(self) -> (i64, i64) {
        match self {
            Direction::West => (-1, 0),
            Direction::East => (1, 0),
            Direction::North => (0, 1),
            Direction::South => (0, -1),
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            Direction::West => "w",
            Direction::East => "e",
            Direction::North => "n",
            Direction::South => "s",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "w" | "west" => Ok(Direction::West),
            "e" | "east" => Ok(Direction::East),
            "n" | "north" => Ok(Direction::North),
            "s" | "south" => Ok(Direction::South),
            other => Err(DatasetError::UnknownDirection(other.to_string())),
        }
    }
}

/// Immutable collection of observations on a rectangular lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialDataset {
    shape: Vec<usize>,
    coord_names: Vec<String>,
    y_name: String,
    x_names: Vec<String>,
    u_names: Vec<String>,
    intercept: bool,
    observations: Vec<Observation>,
    dropped_rows: usize,
}

impl SpatialDataset {
    /// Builds a dataset from in-memory observations.
    ///
    /// When `intercept` is set, `x_names[0]` must be [`INTERCEPT`] and every
    /// observation must carry `x[0] = 1`. Observations are stored in
    /// lexicographic site order.
    pub fn new(
        shape: Vec<usize>,
        coord_names: Vec<String>,
        y_name: String,
        x_names: Vec<String>,
        u_names: Vec<String>,
        intercept: bool,
        mut observations: Vec<Observation>,
    ) -> Result<Self, DatasetError> {
        if x_names.is_empty() {
            return Err(DatasetError::IncompleteSchema("covariate"));
        }
        if u_names.is_empty() {
            return Err(DatasetError::IncompleteSchema("regime"));
        }
        for obs in &observations {
            if !obs.site.in_bounds(&shape) {
                return Err(DatasetError::OutOfBounds { site: obs.site.0.clone(), shape: shape.clone() });
            }
            if obs.x.len() != x_names.len() {
                return Err(DatasetError::Arity { what: "covariate", expected: x_names.len(), got: obs.x.len() });
            }
            if obs.u.len() != u_names.len() {
                return Err(DatasetError::Arity { what: "regime", expected: u_names.len(), got: obs.u.len() });
            }
        }
        observations.sort_by(|a, b| a.site.cmp(&b.site));
        if let Some(w) = observations.windows(2).find(|w| w[0].site == w[1].site) {
            return Err(DatasetError::DuplicateSite(w[0].site.0.clone()));
        }
        if !observations.iter().any(Observation::is_usable) {
            return Err(DatasetError::EmptyDataset);
        }
        Ok(SpatialDataset {
            shape,
            coord_names,
            y_name,
            x_names,
            u_names,
            intercept,
            observations,
            dropped_rows: 0,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn coord_names(&self) -> &[String] {
        &self.coord_names
    }
    pub fn y_name(&self) -> &str {
        &self.y_name
    }
    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }
    pub fn u_names(&self) -> &[String] {
        &self.u_names
    }
    pub fn has_intercept(&self) -> bool {
        self.intercept
    }
    /// Number of covariates `d` (including the intercept column).
    pub fn x_dim(&self) -> usize {
        self.x_names.len()
    }
    /// Regime dimension `k`.
    pub fn u_dim(&self) -> usize {
        self.u_names.len()
    }
    /// Rows discarded at load time for non-finite values.
    pub fn dropped_rows(&self) -> usize {
        self.dropped_rows
    }
    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }
    pub fn usable(&self) -> impl Iterator<Item = &Observation> {
        self.observations.iter().filter(|o| o.is_usable())
    }
    pub fn usable_indices(&self) -> Vec<usize> {
        (0..self.observations.len()).filter(|&i| self.observations[i].is_usable()).collect()
    }
    /// Effective sample size `ñ`.
    pub fn n_usable(&self) -> usize {
        self.usable().count()
    }
    pub fn grid_size(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn x_index(&self, name: &str) -> Option<usize> {
        self.x_names.iter().position(|n| n == name)
    }

    /// Site → observation index.
    pub fn site_index(&self) -> HashMap<&Site, usize> {
        self.observations.iter().enumerate().map(|(i, o)| (&o.site, i)).collect()
    }

    /// Values of a named column (`y`, any covariate or any regime variable).
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        if name == self.y_name {
            return Some(self.observations.iter().map(|o| o.y).collect());
        }
        if let Some(j) = self.x_index(name) {
            return Some(self.observations.iter().map(|o| o.x[j]).collect());
        }
        let j = self.u_names.iter().position(|n| n == name)?;
        Some(self.observations.iter().map(|o| o.u[j]).collect())
    }

    /// Same sites and metadata with new observation values.
    pub(crate) fn with_observations(&self, observations: Vec<Observation>) -> Self {
        SpatialDataset { observations, ..self.clone() }
    }

    /// Returns a copy with responses replaced (same order as [`observations`](Self::observations)).
    pub fn with_responses(&self, y: &[f64]) -> Self {
        let obs = self
            .observations
            .iter()
            .zip(y)
            .map(|(o, &y)| Observation { y, ..o.clone() })
            .collect();
        self.with_observations(obs)
    }

    /// Removes covariate columns by name; the intercept cannot be dropped.
    pub fn drop_columns(&self, names: &[&str]) -> Result<Self, DatasetError> {
        let mut keep = Vec::new();
        for (j, n) in self.x_names.iter().enumerate() {
            if !names.contains(&n.as_str()) || (self.intercept && j == 0) {
                keep.push(j);
            }
        }
        for name in names {
            if self.x_index(name).is_none() {
                return Err(DatasetError::MissingColumn(name.to_string()));
            }
        }
        let mut out = self.clone();
        out.x_names = keep.iter().map(|&j| self.x_names[j].clone()).collect();
        for o in &mut out.observations {
            o.x = keep.iter().map(|&j| o.x[j]).collect();
        }
        Ok(out)
    }

    /// Appends, for each direction, a covariate holding `source` at the adjacent site.
    ///
    /// West and east step along the first axis, north and south along the
    /// second. Where the neighbour is off-grid, absent or itself non-finite the
    /// new value is NaN, which makes the observation unusable for fitting.
    pub fn augment_neighbors(&self, source: &str, directions: &[Direction]) -> Result<Self, DatasetError> {
        if self.shape.len() != 2 {
            return Err(DatasetError::NotPlanar(self.shape.len()));
        }
        let values = self.column(source).ok_or_else(|| DatasetError::MissingColumn(source.to_string()))?;
        if directions.is_empty() {
            return Ok(self.clone());
        }
        let index = self.site_index();
        let mut out = self.clone();
        for &dir in directions {
            let (di, dj) = dir.offset();
            out.x_names.push(format!("{source}_{}", dir.suffix()));
            for (o, obs) in out.observations.iter_mut().zip(&self.observations) {
                let i = obs.site.0[0] as i64 + di;
                let j = obs.site.0[1] as i64 + dj;
                let v = if i >= 1 && j >= 1 {
                    index
                        .get(&Site(vec![i as usize, j as usize]))
                        .map(|&k| values[k])
                        .unwrap_or(f64::NAN)
                } else {
                    f64::NAN
                };
                o.x.push(if v.is_finite() { v } else { f64::NAN });
            }
        }
        Ok(out)
    }

    pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnSchema, shape: Option<&[usize]>) -> Result<Self, DatasetError> {
        let file = File::open(path)?;
        Self::from_csv_reader(file, schema, shape)
    }

    /// Parses CSV with a header row; empty fields and `NA` are missing values.
    pub fn from_csv_reader<R: Read>(reader: R, schema: &ColumnSchema, shape: Option<&[usize]>) -> Result<Self, DatasetError> {
        if schema.x.is_empty() && !schema.intercept {
            return Err(DatasetError::IncompleteSchema("covariate"));
        }
        if schema.u.is_empty() {
            return Err(DatasetError::IncompleteSchema("regime"));
        }
        if schema.coords.is_empty() {
            return Err(DatasetError::IncompleteSchema("coordinate"));
        }
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
        };
        let coord_cols = schema.coords.iter().map(|c| find(c)).collect::<Result<Vec<_>, _>>()?;
        let y_col = find(&schema.y)?;
        let x_cols = schema.x.iter().map(|c| find(c)).collect::<Result<Vec<_>, _>>()?;
        let u_cols = schema.u.iter().map(|c| find(c)).collect::<Result<Vec<_>, _>>()?;

        let mut observations = Vec::new();
        let mut dropped = 0;
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let mut coords = Vec::with_capacity(coord_cols.len());
            for (&c, name) in coord_cols.iter().zip(&schema.coords) {
                let raw = record.get(c).unwrap_or("");
                let v: usize = raw.parse().ok().filter(|&v| v >= 1).ok_or_else(|| DatasetError::BadCoordinate {
                    row: row + 1,
                    column: name.clone(),
                    value: raw.to_string(),
                })?;
                coords.push(v);
            }
            let field = |c: usize| parse_value(record.get(c).unwrap_or(""));
            let y = field(y_col);
            let mut x = Vec::with_capacity(x_cols.len() + 1);
            if schema.intercept {
                x.push(1.0);
            }
            x.extend(x_cols.iter().map(|&c| field(c)));
            let u: Vec<f64> = u_cols.iter().map(|&c| field(c)).collect();
            let obs = Observation { site: Site(coords), y, x, u };
            if obs.is_usable() {
                observations.push(obs);
            } else {
                dropped += 1;
            }
        }
        if observations.is_empty() {
            return Err(DatasetError::EmptyDataset);
        }
        let shape = match shape {
            Some(s) => s.to_vec(),
            None => (0..coord_cols.len())
                .map(|l| observations.iter().map(|o| o.site.0[l]).max().unwrap_or(1))
                .collect(),
        };
        let mut x_names = Vec::new();
        if schema.intercept {
            x_names.push(INTERCEPT.to_string());
        }
        x_names.extend(schema.x.iter().cloned());
        let mut ds = SpatialDataset::new(
            shape,
            schema.coords.clone(),
            schema.y.clone(),
            x_names,
            schema.u.clone(),
            schema.intercept,
            observations,
        )?;
        ds.dropped_rows = dropped;
        Ok(ds)
    }

    /// Writes every observation with full round-trip precision; NaN becomes `NA`.
    /// The intercept column is not written.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(writer);
        let skip = usize::from(self.intercept);
        let mut header: Vec<&str> = self.coord_names.iter().map(String::as_str).collect();
        header.push(&self.y_name);
        header.extend(self.x_names[skip..].iter().map(String::as_str));
        header.extend(self.u_names.iter().map(String::as_str));
        w.write_record(&header)?;
        for o in &self.observations {
            let mut rec: Vec<String> = o.site.0.iter().map(|c| c.to_string()).collect();
            rec.push(format_value(o.y));
            rec.extend(o.x[skip..].iter().map(|&v| format_value(v)));
            rec.extend(o.u.iter().map(|&v| format_value(v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Schema that reloads the output of [`write_csv`](Self::write_csv).
    pub fn schema(&self) -> ColumnSchema {
        let skip = usize::from(self.intercept);
        ColumnSchema {
            coords: self.coord_names.clone(),
            y: self.y_name.clone(),
            x: self.x_names[skip..].to_vec(),
            u: self.u_names.clone(),
            intercept: self.intercept,
        }
    }
}

fn parse_value(raw: &str) -> f64 {
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
        return f64::NAN;
    }
    raw.parse().unwrap_or(f64::NAN)
}

/// Shortest representation that parses back to the same bits.
pub fn format_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        "NA".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema() -> ColumnSchema {
        ColumnSchema::new(&["row", "col"], "y", &["x1"], &["u1"])
    }

    const FOUR: &str = "row,col,y,x1,u1\n1,1,1.0,0.5,0.1\n1,2,2.0,0.6,0.2\n2,1,3.0,0.7,0.3\n2,2,4.0,0.8,0.4\n";

    #[test]
    fn parses_small_grid() {
        let ds = SpatialDataset::from_csv_reader(FOUR.as_bytes(), &schema(), None).unwrap();
        assert_eq!(ds.shape(), &[2, 2]);
        assert_eq!(ds.observations().len(), 4);
        assert_eq!(ds.x_names(), &[INTERCEPT.to_string(), "x1".to_string()]);
        assert!(ds.usable().all(|o| o.x[0] == 1.0));
    }

    #[test]
    fn duplicate_site_rejected() {
        let csv = format!("{FOUR}1,1,9.0,0.5,0.1\n");
        let err = SpatialDataset::from_csv_reader(csv.as_bytes(), &schema(), None).unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateSite(ref s) if s == &vec![1, 1]));
    }

    #[test]
    fn nan_rows_are_dropped() {
        let csv = FOUR.replace("2,2,4.0", "2,2,NaN");
        let ds = SpatialDataset::from_csv_reader(csv.as_bytes(), &schema(), None).unwrap();
        assert_eq!(ds.observations().len(), 3);
        assert_eq!(ds.dropped_rows(), 1);
        let csv = FOUR.replace("2,2,4.0", "2,2,NA");
        assert_eq!(SpatialDataset::from_csv_reader(csv.as_bytes(), &schema(), None).unwrap().dropped_rows(), 1);
        let csv = FOUR.replace("2,2,4.0", "2,2,");
        assert_eq!(SpatialDataset::from_csv_reader(csv.as_bytes(), &schema(), None).unwrap().dropped_rows(), 1);
    }

    #[test]
    fn missing_column_and_empty() {
        let mut s = schema();
        s.u = vec!["nope".into()];
        assert!(matches!(
            SpatialDataset::from_csv_reader(FOUR.as_bytes(), &s, None),
            Err(DatasetError::MissingColumn(c)) if c == "nope"
        ));
        let empty = "row,col,y,x1,u1\n1,1,NA,0.5,0.1\n";
        assert!(matches!(
            SpatialDataset::from_csv_reader(empty.as_bytes(), &schema(), None),
            Err(DatasetError::EmptyDataset)
        ));
    }

    #[test]
    fn explicit_shape_bounds_checked() {
        let err = SpatialDataset::from_csv_reader(FOUR.as_bytes(), &schema(), Some(&[1, 2])).unwrap_err();
        assert!(matches!(err, DatasetError::OutOfBounds { .. }));
        let ds = SpatialDataset::from_csv_reader(FOUR.as_bytes(), &schema(), Some(&[5, 5])).unwrap();
        assert_eq!(ds.grid_size(), 25);
    }

    fn line_dataset(values: &[f64]) -> SpatialDataset {
        let obs = values
            .iter()
            .enumerate()
            .map(|(i, &y)| Observation { site: Site(vec![i + 1, 1]), y, x: vec![1.0], u: vec![0.0] })
            .collect();
        SpatialDataset::new(
            vec![values.len(), 1],
            vec!["row".into(), "col".into()],
            "y".into(),
            vec![INTERCEPT.into()],
            vec!["u".into()],
            true,
            obs,
        )
        .unwrap()
    }

    #[test]
    fn west_neighbor_shift() {
        let ds = line_dataset(&[1.0, 2.0, 3.0]);
        let aug = ds.augment_neighbors("y", &[Direction::West]).unwrap();
        let col = aug.column("y_w").unwrap();
        assert!(col[0].is_nan());
        assert_eq!(&col[1..], &[1.0, 2.0]);
        assert_eq!(aug.n_usable(), 2);
    }

    #[test]
    fn augmentation_masks_border() {
        let mut obs = Vec::new();
        for i in 1..=25 {
            for j in 1..=10 {
                obs.push(Observation { site: Site(vec![i, j]), y: (i * j) as f64, x: vec![1.0], u: vec![0.5] });
            }
        }
        let ds = SpatialDataset::new(
            vec![25, 10],
            vec!["row".into(), "col".into()],
            "y".into(),
            vec![INTERCEPT.into()],
            vec!["u".into()],
            true,
            obs,
        )
        .unwrap();
        let aug = ds.augment_neighbors("y", &Direction::ALL).unwrap();
        assert_eq!(aug.n_usable(), 23 * 8);
        assert_eq!(aug.x_dim(), 5);
        let unchanged = ds.augment_neighbors("y", &[]).unwrap();
        assert_eq!(unchanged, ds);
        let dropped = aug.drop_columns(&["y_w", "y_e", "y_n", "y_s"]).unwrap();
        assert_eq!(dropped.usable_indices(), ds.usable_indices());
    }

    #[test]
    fn augmentation_requires_plane() {
        let csv = "t,y,x1,u1\n1,1.0,0.5,0.1\n2,2.0,0.6,0.2\n";
        let s = ColumnSchema::new(&["t"], "y", &["x1"], &["u1"]);
        let ds = SpatialDataset::from_csv_reader(csv.as_bytes(), &s, None).unwrap();
        assert!(matches!(ds.augment_neighbors("y", &[Direction::East]), Err(DatasetError::NotPlanar(1))));
    }

    #[test]
    fn load_is_deterministic() {
        let a = SpatialDataset::from_csv_reader(FOUR.as_bytes(), &schema(), None).unwrap();
        let b = SpatialDataset::from_csv_reader(FOUR.as_bytes(), &schema(), None).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_exact(values in proptest::collection::vec(
            (any::<f64>().prop_filter("finite", |v| v.is_finite()),
             any::<f64>().prop_filter("finite", |v| v.is_finite()),
             -1e6f64..1e6), 1..20)
        ) {
            let obs: Vec<Observation> = values.iter().enumerate().map(|(i, &(y, x, u))| Observation {
                site: Site(vec![i + 1, 1]), y, x: vec![1.0, x], u: vec![u],
            }).collect();
            let ds = SpatialDataset::new(
                vec![values.len(), 1],
                vec!["row".into(), "col".into()],
                "y".into(),
                vec![INTERCEPT.into(), "x1".into()],
                vec!["u1".into()],
                true,
                obs,
            ).unwrap();
            let mut buf = Vec::new();
            ds.write_csv(&mut buf).unwrap();
            let back = SpatialDataset::from_csv_reader(&buf[..], &ds.schema(), Some(ds.shape())).unwrap();
            for (a, b) in ds.observations().iter().zip(back.observations()) {
                prop_assert_eq!(a.y.to_bits(), b.y.to_bits());
                prop_assert_eq!(a.x[1].to_bits(), b.x[1].to_bits());
                prop_assert_eq!(a.u[0].to_bits(), b.u[0].to_bits());
            }
        }
    }
}
