//! PDFF, ROI statistics, regression fits and error metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GridShape, ParameterMaps};

/// `|F| / (|W| + |F|)`, zero where both vanish.
pub fn pdff_map(maps: &ParameterMaps) -> Vec<f64> {
    maps.water.iter().zip(&maps.fat).map(|(w, f)| pdff(w.norm(), f.norm())).collect()
}

fn pdff(w: f64, f: f64) -> f64 {
    let total = w + f;
    if total > 0.0 {
        (f / total).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMap {
    Pdff,
    Field,
    R2star,
}

impl TargetMap {
    pub const ALL: [TargetMap; 3] = [TargetMap::Pdff, TargetMap::Field, TargetMap::R2star];

    pub fn name(self) -> &'static str {
        match self {
            TargetMap::Pdff => "pdff",
            TargetMap::Field => "field",
            TargetMap::R2star => "r2star",
        }
    }

    pub fn extract(self, maps: &ParameterMaps) -> Vec<f64> {
        match self {
            TargetMap::Pdff => pdff_map(maps),
            TargetMap::Field => maps.field_hz.clone(),
            TargetMap::R2star => maps.r2star.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiRegion {
    /// Flat voxel indices.
    Indices(Vec<usize>),
    /// Half-open row and column ranges on one slice.
    Rect { rows: [usize; 2], cols: [usize; 2], #[serde(default)] slice: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub label: String,
    pub region: RoiRegion,
    /// Maps to measure; empty means all three.
    #[serde(default)]
    pub targets: Vec<TargetMap>,
}

impl RoiSpec {
    pub fn indices(label: impl Into<String>, voxels: Vec<usize>) -> Self {
        Self { label: label.into(), region: RoiRegion::Indices(voxels), targets: Vec::new() }
    }

    pub fn rect(label: impl Into<String>, rows: [usize; 2], cols: [usize; 2]) -> Self {
        Self { label: label.into(), region: RoiRegion::Rect { rows, cols, slice: 0 }, targets: Vec::new() }
    }

    pub fn targets(&self) -> Vec<TargetMap> {
        if self.targets.is_empty() {
            TargetMap::ALL.to_vec()
        } else {
            self.targets.clone()
        }
    }

    /// Voxel indices, checked against `grid`.
    pub fn voxels(&self, grid: GridShape) -> Result<Vec<usize>> {
        let out = match &self.region {
            RoiRegion::Indices(v) => {
                if let Some(&bad) = v.iter().find(|&&i| i >= grid.voxels()) {
                    return Err(Error::InvalidInput(format!("ROI {}: voxel {bad} out of bounds", self.label)));
                }
                v.clone()
            }
            &RoiRegion::Rect { rows, cols, slice } => {
                if rows[1] > grid.rows || cols[1] > grid.cols || slice >= grid.slices {
                    return Err(Error::InvalidInput(format!("ROI {}: rectangle outside the grid", self.label)));
                }
                let mut v = Vec::new();
                for r in rows[0]..rows[1] {
                    for c in cols[0]..cols[1] {
                        v.push(grid.index(r, c, slice));
                    }
                }
                v
            }
        };
        if out.is_empty() {
            return Err(Error::InvalidInput(format!("ROI {} is empty", self.label)));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiStat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

/// Mean and standard deviation of `map` inside each ROI.
pub fn roi_stats(map: &[f64], grid: GridShape, rois: &[RoiSpec]) -> Result<Vec<RoiStat>> {
    if map.len() != grid.voxels() {
        return Err(Error::Geometry(format!("map has {} voxels, grid {}", map.len(), grid.voxels())));
    }
    rois.iter()
        .map(|roi| {
            let v = roi.voxels(grid)?;
            let n = v.len() as f64;
            let mean = v.iter().map(|&i| map[i]).sum::<f64>() / n;
            let var = v.iter().map(|&i| (map[i] - mean).powi(2)).sum::<f64>() / n;
            Ok(RoiStat { mean, std: var.sqrt(), count: v.len() })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn correlate(x: &[f64], y: &[f64]) -> Result<Fit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidInput(format!("need two equal-length lists of ≥ 2 points, got {} and {}", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx <= f64::EPSILON * mx.abs().max(1.0) * n {
        return Err(Error::InvalidInput("x is constant".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - (slope * a + intercept)).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(Fit { slope, intercept, r2 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorReport {
    pub voxels: usize,
    pub water_rmse: f64,
    pub fat_rmse: f64,
    pub field_rmse: f64,
    pub r2star_rmse: f64,
    pub pdff_rmse: f64,
    pub max_abs_field_error: f64,
    pub max_abs_pdff_error: f64,
    pub max_abs_r2star_error: f64,
}

impl ErrorReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in [
            ("voxels", self.voxels as f64),
            ("water_rmse", self.water_rmse),
            ("fat_rmse", self.fat_rmse),
            ("field_rmse", self.field_rmse),
            ("r2star_rmse", self.r2star_rmse),
            ("pdff_rmse", self.pdff_rmse),
            ("max_abs_field_error", self.max_abs_field_error),
            ("max_abs_pdff_error", self.max_abs_pdff_error),
            ("max_abs_r2star_error", self.max_abs_r2star_error),
        ] {
            writeln!(s, "{k},{v:e}").expect("string write");
        }
        s
    }
}

/// Masked error metrics of `pred` against `truth`. Complex channels use the
/// modulus of the difference.
pub fn error_report(pred: &ParameterMaps, truth: &ParameterMaps, mask: &[bool]) -> Result<ErrorReport> {
    pred.check_grid(truth.grid)?;
    if mask.len() != truth.grid.voxels() {
        return Err(Error::Geometry(format!("mask has {} voxels, maps {}", mask.len(), truth.grid.voxels())));
    }
    let (pp, pt) = (pdff_map(pred), pdff_map(truth));
    let idx: Vec<usize> = (0..mask.len()).filter(|&v| mask[v]).collect();
    if idx.is_empty() {
        return Err(Error::InvalidInput("mask selects no voxels".into()));
    }
    let rms = |e: &dyn Fn(usize) -> f64| (idx.iter().map(|&v| e(v).powi(2)).sum::<f64>() / idx.len() as f64).sqrt();
    let max = |e: &dyn Fn(usize) -> f64| idx.iter().map(|&v| e(v).abs()).fold(0.0, f64::max);
    let field = |v: usize| pred.field_hz[v] - truth.field_hz[v];
    let r2 = |v: usize| pred.r2star[v] - truth.r2star[v];
    let pd = |v: usize| pp[v] - pt[v];
    Ok(ErrorReport {
        voxels: idx.len(),
        water_rmse: rms(&|v| (pred.water[v] - truth.water[v]).norm()),
        fat_rmse: rms(&|v| (pred.fat[v] - truth.fat[v]).norm()),
        field_rmse: rms(&field),
        r2star_rmse: rms(&r2),
        pdff_rmse: rms(&pd),
        max_abs_field_error: max(&field),
        max_abs_pdff_error: max(&pd),
        max_abs_r2star_error: max(&r2),
    })
}

/// ROI means of two reconstructions per target map, plus a fit of `b` on `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    /// (roi label, map, mean in a, mean in b)
    pub rows: Vec<(String, TargetMap, f64, f64)>,
    pub fits: Vec<(TargetMap, Fit)>,
}

pub fn compare(a: &ParameterMaps, b: &ParameterMaps, rois: &[RoiSpec]) -> Result<Comparison> {
    a.check_grid(b.grid)?;
    let grid = a.grid;
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for target in TargetMap::ALL {
        let chosen: Vec<RoiSpec> = rois.iter().filter(|r| r.targets().contains(&target)).cloned().collect();
        if chosen.is_empty() {
            continue;
        }
        let sa = roi_stats(&target.extract(a), grid, &chosen)?;
        let sb = roi_stats(&target.extract(b), grid, &chosen)?;
        for (roi, (x, y)) in chosen.iter().zip(sa.iter().zip(&sb)) {
            rows.push((roi.label.clone(), target, x.mean, y.mean));
        }
        if chosen.len() >= 2 {
            let xs: Vec<f64> = sa.iter().map(|s| s.mean).collect();
            let ys: Vec<f64> = sb.iter().map(|s| s.mean).collect();
            fits.push((target, correlate(&xs, &ys)?));
        }
    }
    Ok(Comparison { rows, fits })
}

impl Comparison {
    pub fn fit(&self, target: TargetMap) -> Option<Fit> {
        self.fits.iter().find(|(t, _)| *t == target).map(|(_, f)| *f)
    }

    pub fn stats_csv(&self) -> String {
        let mut s = String::from("roi,map,mean_a,mean_b\n");
        for (label, t, a, b) in &self.rows {
            writeln!(s, "{label},{},{a:e},{b:e}", t.name()).expect("string write");
        }
        s
    }

    pub fn fit_csv(&self) -> String {
        let mut s = String::from("map,slope,intercept,r2\n");
        for (t, f) in &self.fits {
            writeln!(s, "{},{:e},{:e},{:e}", t.name(), f.slope, f.intercept, f.r2).expect("string write");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("stats.csv"), self.stats_csv())?;
        fs::write(dir.join("fit.csv"), self.fit_csv())?;
        Ok(())
    }
}

pub fn read_rois(path: &Path) -> Result<Vec<RoiSpec>> {
    let text = crate::error::read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
