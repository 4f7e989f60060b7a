//! Spatial data model: per-location features, hazard priors, building
//! footprints and surface-change observations, plus the active-node masks
//! used for pruning.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_FEATURES: usize = 7;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "vs30",
    "slope",
    "landcover",
    "dem",
    "cti",
    "water_dist",
    "lithology",
];

pub const FEAT_SLOPE: usize = 1;
pub const FEAT_LANDCOVER: usize = 2;
pub const FEAT_CTI: usize = 4;
pub const FEAT_WATER: usize = 5;
pub const FEAT_LITHOLOGY: usize = 6;

pub const DEFAULT_DPM_FLOOR: f64 = 1e-4;

/// The three latent hazard/impact nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Node {
    Landslide = 0,
    Liquefaction = 1,
    BuildingDamage = 2,
}

impl Node {
    pub const ALL: [Node; 3] = [Node::Landslide, Node::Liquefaction, Node::BuildingDamage];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short(self) -> &'static str {
        match self {
            Node::Landslide => "ls",
            Node::Liquefaction => "lf",
            Node::BuildingDamage => "bd",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Location {
    pub id: usize,
    pub lon: f64,
    pub lat: f64,
    pub gf: [f64; N_FEATURES],
    pub prior_ls: f64,
    pub prior_lf: f64,
    pub has_building: bool,
    pub dpm: Option<f64>,
}

impl Location {
    /// `log y`, with non-positive observations clamped to `floor` first.
    pub fn log_dpm(&self, floor: f64) -> Option<f64> {
        self.dpm.map(|y| y.max(floor).ln())
    }

    pub fn prior(&self, node: Node) -> f64 {
        match node {
            Node::Landslide => self.prior_ls,
            Node::Liquefaction => self.prior_lf,
            Node::BuildingDamage => 0.5,
        }
    }
}

/// Per-feature affine transform `z = (x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
}

impl FeatureStats {
    pub fn identity() -> Self {
        FeatureStats {
            mean: [0.0; N_FEATURES],
            std: [1.0; N_FEATURES],
        }
    }

    pub fn apply(&self, raw: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        let mut out = [0.0; N_FEATURES];
        for j in 0..N_FEATURES {
            out[j] = (raw[j] - self.mean[j]) / self.std[j];
        }
        out
    }

    pub fn invert(&self, z: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        let mut out = [0.0; N_FEATURES];
        for j in 0..N_FEATURES {
            out[j] = z[j] * self.std[j] + self.mean[j];
        }
        out
    }
}

/// How categorical codes (land cover, lithology) enter the feature space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureEncoding {
    /// Categorical codes are treated like any other standardized column.
    #[default]
    Codes,
    /// Categorical codes are expanded into 0/1 indicator columns.
    OneHot,
}

/// Column names for each field of the input CSV.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnSchema {
    pub id: String,
    pub lon: String,
    pub lat: String,
    pub features: [String; N_FEATURES],
    pub prior_ls: String,
    pub prior_lf: String,
    pub has_building: String,
    pub dpm: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            id: "id".into(),
            lon: "lon".into(),
            lat: "lat".into(),
            features: FEATURE_NAMES.map(String::from),
            prior_ls: "prior_ls".into(),
            prior_lf: "prior_lf".into(),
            has_building: "has_building".into(),
            dpm: "dpm".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridDataset {
    pub locations: Vec<Location>,
    /// Transform applied to `gf`; `None` while features are raw.
    pub feature_stats: Option<FeatureStats>,
    /// One mask per latent node, indexed by [`Node::index`].
    pub active_mask: [Vec<bool>; 3],
    pub dpm_floor: f64,
}

impl GridDataset {
    /// Builds a dataset from raw locations with every node active except
    /// building damage where no footprint exists.
    pub fn new(locations: Vec<Location>) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::Invalid("grid has no locations".into()));
        }
        for (i, loc) in locations.iter().enumerate() {
            if loc.id != i {
                return Err(Error::Validation {
                    row: i,
                    message: format!("location ids must be contiguous 0..N-1, found {}", loc.id),
                });
            }
            validate_location(loc, i)?;
        }
        let mut grid = GridDataset {
            active_mask: [vec![], vec![], vec![]],
            locations,
            feature_stats: None,
            dpm_floor: DEFAULT_DPM_FLOOR,
        };
        grid.compute_active_masks(0.0);
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn is_standardized(&self) -> bool {
        self.feature_stats.is_some()
    }

    /// Ids of locations whose observation cell was empty.
    pub fn missing_dpm(&self) -> Vec<usize> {
        self.locations
            .iter()
            .filter(|l| l.dpm.is_none())
            .map(|l| l.id)
            .collect()
    }

    pub fn is_active(&self, node: Node, loc: usize) -> bool {
        self.active_mask[node.index()][loc]
    }

    /// A location participates in the objective when any node there is active.
    pub fn location_active(&self, loc: usize) -> bool {
        Node::ALL.iter().any(|&n| self.active_mask[n.index()][loc])
    }

    pub fn active_locations(&self) -> Vec<usize> {
        (0..self.len()).filter(|&l| self.location_active(l)).collect()
    }

    /// Standardizes every feature to population mean 0 and standard
    /// deviation 1. Re-standardizing composes with the stored transform so
    /// the inverse always recovers the raw values.
    pub fn standardize_features(&mut self) -> Result<()> {
        let n = self.len();
        if n < 2 {
            return Err(Error::Invalid(
                "standardization needs at least two locations".into(),
            ));
        }
        let mut stats = FeatureStats::identity();
        for j in 0..N_FEATURES {
            let mut mean = 0.0;
            for loc in &self.locations {
                if !loc.gf[j].is_finite() {
                    return Err(Error::NonFinite(format!(
                        "feature `{}` at location {}",
                        FEATURE_NAMES[j], loc.id
                    )));
                }
                mean += loc.gf[j];
            }
            mean /= n as f64;
            let var = self
                .locations
                .iter()
                .map(|l| (l.gf[j] - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let std = var.sqrt();
            if !(std > 0.0) || std <= 1e-12 * mean.abs().max(1.0) {
                return Err(Error::DegenerateScale(FEATURE_NAMES[j].into()));
            }
            stats.mean[j] = mean;
            stats.std[j] = std;
        }
        for loc in &mut self.locations {
            loc.gf = stats.apply(&loc.gf);
        }
        self.feature_stats = Some(match self.feature_stats.take() {
            None => stats,
            Some(prev) => {
                let mut composed = prev.clone();
                for j in 0..N_FEATURES {
                    composed.mean[j] = prev.mean[j] + prev.std[j] * stats.mean[j];
                    composed.std[j] = prev.std[j] * stats.std[j];
                }
                composed
            }
        });
        Ok(())
    }

    /// Applies a transform computed on another dataset (e.g. the training grid).
    pub fn apply_feature_stats(&mut self, stats: &FeatureStats) -> Result<()> {
        if self.feature_stats.is_some() {
            return Err(Error::Invalid("grid is already standardized".into()));
        }
        for loc in &mut self.locations {
            loc.gf = stats.apply(&loc.gf);
        }
        self.feature_stats = Some(stats.clone());
        Ok(())
    }

    /// Raw (unstandardized) features of a location.
    pub fn raw_features(&self, loc: usize) -> [f64; N_FEATURES] {
        match &self.feature_stats {
            Some(s) => s.invert(&self.locations[loc].gf),
            None => self.locations[loc].gf,
        }
    }

    /// Recomputes the pruning masks.
    ///
    /// BD is active iff the location has a building footprint; LS and LF are
    /// active iff their prior reaches `prior_floor`.
    pub fn compute_active_masks(&mut self, prior_floor: f64) {
        let n = self.len();
        let mut masks = [vec![false; n], vec![false; n], vec![false; n]];
        for (i, loc) in self.locations.iter().enumerate() {
            masks[Node::Landslide.index()][i] = loc.prior_ls >= prior_floor;
            masks[Node::Liquefaction.index()][i] = loc.prior_lf >= prior_floor;
            masks[Node::BuildingDamage.index()][i] = loc.has_building;
        }
        self.active_mask = masks;
    }

    /// Feature matrix (N x D) used by the kernels and mean networks.
    pub fn design_matrix(&self, encoding: FeatureEncoding) -> DMatrix<f64> {
        match encoding {
            FeatureEncoding::Codes => DMatrix::from_fn(self.len(), N_FEATURES, |i, j| {
                self.locations[i].gf[j]
            }),
            FeatureEncoding::OneHot => {
                let codes = |feat: usize| -> BTreeSet<i64> {
                    (0..self.len())
                        .map(|i| self.raw_features(i)[feat].round() as i64)
                        .collect()
                };
                let lc: Vec<i64> = codes(FEAT_LANDCOVER).into_iter().collect();
                let li: Vec<i64> = codes(FEAT_LITHOLOGY).into_iter().collect();
                let continuous: Vec<usize> = (0..N_FEATURES)
                    .filter(|&j| j != FEAT_LANDCOVER && j != FEAT_LITHOLOGY)
                    .collect();
                let d = continuous.len() + lc.len() + li.len();
                let mut m = DMatrix::zeros(self.len(), d);
                for i in 0..self.len() {
                    let raw = self.raw_features(i);
                    for (c, &j) in continuous.iter().enumerate() {
                        m[(i, c)] = self.locations[i].gf[j];
                    }
                    let a = lc.binary_search(&(raw[FEAT_LANDCOVER].round() as i64)).unwrap();
                    m[(i, continuous.len() + a)] = 1.0;
                    let b = li.binary_search(&(raw[FEAT_LITHOLOGY].round() as i64)).unwrap();
                    m[(i, continuous.len() + lc.len() + b)] = 1.0;
                }
                m
            }
        }
    }
}

fn validate_location(loc: &Location, row: usize) -> Result<()> {
    for (name, p) in [("prior_ls", loc.prior_ls), ("prior_lf", loc.prior_lf)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Validation {
                row,
                message: format!("{name} = {p} outside [0, 1]"),
            });
        }
    }
    if let Some(j) = loc.gf.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation {
            row,
            message: format!("feature `{}` is not finite", FEATURE_NAMES[j]),
        });
    }
    Ok(())
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn parse_f64(rec: &csv::StringRecord, idx: usize, row: usize, name: &str) -> Result<f64> {
    let cell = rec.get(idx).unwrap_or("").trim();
    cell.parse::<f64>().map_err(|e| Error::Parse {
        row,
        column: name.to_string(),
        message: format!("`{cell}`: {e}"),
    })
}

/// Loads a grid CSV. Features are left raw; masks are computed with the
/// floor disabled.
pub fn load_grid(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<GridDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_grid(file, schema)
}

pub fn read_grid<R: std::io::Read>(reader: R, schema: &ColumnSchema) -> Result<GridDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let c_id = column(&headers, &schema.id)?;
    let c_lon = column(&headers, &schema.lon)?;
    let c_lat = column(&headers, &schema.lat)?;
    let c_feat = schema
        .features
        .iter()
        .map(|f| column(&headers, f))
        .collect::<Result<Vec<_>>>()?;
    let c_pls = column(&headers, &schema.prior_ls)?;
    let c_plf = column(&headers, &schema.prior_lf)?;
    let c_bld = column(&headers, &schema.has_building)?;
    let c_dpm = column(&headers, &schema.dpm)?;

    let mut locations = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id_raw = parse_f64(&rec, c_id, row, &schema.id)?;
        if id_raw < 0.0 || id_raw.fract() != 0.0 {
            return Err(Error::Parse {
                row,
                column: schema.id.clone(),
                message: format!("id `{id_raw}` is not a non-negative integer"),
            });
        }
        let mut gf = [0.0; N_FEATURES];
        for (j, &c) in c_feat.iter().enumerate() {
            gf[j] = parse_f64(&rec, c, row, &schema.features[j])?;
        }
        let has_building = match rec.get(c_bld).unwrap_or("").trim() {
            "1" | "1.0" | "true" => true,
            "0" | "0.0" | "false" => false,
            other => {
                return Err(Error::Parse {
                    row,
                    column: schema.has_building.clone(),
                    message: format!("`{other}` is not 0 or 1"),
                })
            }
        };
        let dpm_cell = rec.get(c_dpm).unwrap_or("").trim();
        let dpm = if dpm_cell.is_empty() {
            None
        } else {
            Some(parse_f64(&rec, c_dpm, row, &schema.dpm)?)
        };
        let loc = Location {
            id: id_raw as usize,
            lon: parse_f64(&rec, c_lon, row, &schema.lon)?,
            lat: parse_f64(&rec, c_lat, row, &schema.lat)?,
            gf,
            prior_ls: parse_f64(&rec, c_pls, row, &schema.prior_ls)?,
            prior_lf: parse_f64(&rec, c_plf, row, &schema.prior_lf)?,
            has_building,
            dpm,
        };
        validate_location(&loc, row)?;
        locations.push(loc);
    }
    if locations.is_empty() {
        return Err(Error::Invalid("grid file has no data rows".into()));
    }
    locations.sort_by_key(|l| l.id);
    GridDataset::new(locations)
}

pub const GRID_HEADER: [&str; 14] = [
    "id",
    "lon",
    "lat",
    "vs30",
    "slope",
    "landcover",
    "dem",
    "cti",
    "water_dist",
    "lithology",
    "prior_ls",
    "prior_lf",
    "has_building",
    "dpm",
];

/// Writes the grid in the input CSV format, using raw feature values.
pub fn write_grid<W: std::io::Write>(grid: &GridDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(GRID_HEADER)?;
    for (i, loc) in grid.locations.iter().enumerate() {
        let raw = grid.raw_features(i);
        let mut rec: Vec<String> = vec![loc.id.to_string(), loc.lon.to_string(), loc.lat.to_string()];
        rec.extend(raw.iter().map(|v| v.to_string()));
        rec.push(loc.prior_ls.to_string());
        rec.push(loc.prior_lf.to_string());
        rec.push(if loc.has_building { "1" } else { "0" }.into());
        rec.push(loc.dpm.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<grid writer>", e))?;
    Ok(())
}
