//! Synthetic piecewise-constant phantoms with known ground truth.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_model_volume, AcquisitionParams, GridShape, MultiEchoSignal, ParameterMaps};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionShape {
    /// Every voxel of the grid.
    Full,
    /// Half-open row/column (and optional slice) ranges.
    Rect {
        rows: [usize; 2],
        cols: [usize; 2],
        #[serde(default)]
        slices: Option<[usize; 2]>,
    },
    /// In-plane disk through all slices; center in (row, col) voxel units.
    Disk { center: [f64; 2], radius: f64 },
}

impl RegionShape {
    fn contains(&self, row: usize, col: usize, slice: usize) -> bool {
        match self {
            RegionShape::Full => true,
            RegionShape::Rect { rows, cols, slices } => {
                let in_slices = slices.map_or(true, |s| slice >= s[0] && slice < s[1]);
                row >= rows[0] && row < rows[1] && col >= cols[0] && col < cols[1] && in_slices
            }
            RegionShape::Disk { center, radius } => {
                let dr = row as f64 - center[0];
                let dc = col as f64 - center[1];
                dr * dr + dc * dc <= radius * radius
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(default)]
    pub label: Option<String>,
    pub shape: RegionShape,
    pub water: f64,
    pub fat: f64,
    pub field_hz: f64,
    pub r2star: f64,
}

impl Region {
    pub fn rect(rows: [usize; 2], cols: [usize; 2], water: f64, fat: f64, field_hz: f64, r2star: f64) -> Self {
        Self {
            label: None,
            shape: RegionShape::Rect { rows, cols, slices: None },
            water,
            fat,
            field_hz,
            r2star,
        }
    }

    pub fn labeled(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn pdff(&self) -> f64 {
        let total = self.water + self.fat;
        if total == 0.0 {
            0.0
        } else {
            self.fat / total
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub regions: Vec<Region>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        for (i, r) in self.regions.iter().enumerate() {
            let ok = [r.water, r.fat, r.field_hz, r.r2star].iter().all(|x| x.is_finite())
                && r.water >= 0.0
                && r.fat >= 0.0
                && r.r2star >= 0.0;
            if !ok {
                return Err(Error::InvalidInput(format!("region {i} has invalid tissue values")));
            }
            if let RegionShape::Disk { radius, .. } = r.shape {
                if !(radius > 0.0) {
                    return Err(Error::InvalidInput(format!("region {i} has non-positive radius")));
                }
            }
        }
        Ok(())
    }
}

/// Ground truth, simulated data and per-voxel region labels.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub truth: ParameterMaps,
    pub signal: MultiEchoSignal,
    /// Index into `PhantomSpec::regions` of the region owning each voxel.
    pub region_map: Vec<Option<usize>>,
    /// Set when two regions claimed the same voxel; the later region wins.
    pub overlapping: bool,
}

impl Phantom {
    /// Voxel indices owned by region `r`.
    pub fn region_voxels(&self, r: usize) -> Vec<usize> {
        self.region_map
            .iter()
            .enumerate()
            .filter_map(|(v, owner)| (*owner == Some(r)).then_some(v))
            .collect()
    }
}

pub fn make_phantom(spec: &PhantomSpec, params: &AcquisitionParams) -> Result<Phantom> {
    spec.validate()?;
    params.validate()?;
    let g = params.grid;
    let mut truth = ParameterMaps::zeros(g);
    let mut region_map = vec![None; g.voxels()];
    let mut overlapping = false;
    for (idx, region) in spec.regions.iter().enumerate() {
        for r in 0..g.rows {
            for c in 0..g.cols {
                for s in 0..g.slices {
                    if !region.shape.contains(r, c, s) {
                        continue;
                    }
                    let v = g.index(r, c, s);
                    overlapping |= region_map[v].is_some();
                    region_map[v] = Some(idx);
                    truth.water[v] = Complex64::new(region.water, 0.0);
                    truth.fat[v] = Complex64::new(region.fat, 0.0);
                    truth.field_hz[v] = region.field_hz;
                    truth.r2star[v] = region.r2star;
                }
            }
        }
    }
    let mut signal = forward_model_volume(&truth, params)?;
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
        for z in signal.data.iter_mut() {
            z.re += normal.sample(&mut rng);
            z.im += normal.sample(&mut rng);
        }
    }
    Ok(Phantom { truth, signal, region_map, overlapping })
}

/// `n × n` tiles of `tile × tile` voxels covering the whole plane. Tile `k`
/// (row-major) gets PDFF `pdffs[k % len]`, and field and R2* spread linearly
/// across their ranges in an interleaved order so that neighbouring tiles differ.
pub fn tiled_spec(
    tiles: usize,
    tile: usize,
    pdffs: &[f64],
    field_range: (f64, f64),
    r2_range: (f64, f64),
) -> PhantomSpec {
    let count = tiles * tiles;
    let spread = |k: usize, step: usize, lo: f64, hi: f64| {
        if count == 1 {
            return lo;
        }
        let pos = (k * step) % count;
        lo + (hi - lo) * pos as f64 / (count - 1) as f64
    };
    // steps coprime with the tile count permute the tiles
    let coprime = |mut s: usize| {
        while gcd(s, count) != 1 {
            s += 1;
        }
        s
    };
    let field_step = coprime(3);
    let r2_step = coprime(field_step + 2);
    let mut regions = Vec::with_capacity(count);
    for k in 0..count {
        let (tr, tc) = (k / tiles, k % tiles);
        let pdff = pdffs[k % pdffs.len()];
        regions.push(
            Region::rect(
                [tr * tile, (tr + 1) * tile],
                [tc * tile, (tc + 1) * tile],
                1.0 - pdff,
                pdff,
                spread(k, field_step, field_range.0, field_range.1),
                spread(k, r2_step, r2_range.0, r2_range.1),
            )
            .labeled(format!("tile{k}")),
        );
    }
    PhantomSpec { regions, noise_sigma: 0.0, seed: 0 }
}

/// Tissue of the swap-prone phantom as (PDFF, field Hz, R2* 1/s), one entry
/// per 8×8 tile of a 32×32 plane. Tile 0 sits at 190 Hz; several tiles sit
/// near ±100 Hz or at R2* = 300 1/s, where a zero start converges to the
/// wrong local minimum.
pub const SWAP_PRONE_TISSUE: [(f64, f64, f64); 16] = [
    (0.2, 190.0, 50.0),
    (0.1, 90.0, 40.0),
    (0.3, 100.0, 60.0),
    (0.0, -95.0, 50.0),
    (0.4, 0.0, 300.0),
    (0.1, 20.0, 300.0),
    (0.6, 85.0, 80.0),
    (0.2, -105.0, 30.0),
    (0.0, 0.0, 30.0),
    (0.5, 10.0, 60.0),
    (0.9, -20.0, 100.0),
    (0.3, 40.0, 150.0),
    (0.7, -40.0, 80.0),
    (0.05, 105.0, 100.0),
    (0.8, 30.0, 300.0),
    (0.15, -60.0, 200.0),
];

/// 32×32 phantom on which the IDEAL result depends on the starting point.
pub fn swap_prone_spec() -> PhantomSpec {
    let regions = SWAP_PRONE_TISSUE
        .iter()
        .enumerate()
        .map(|(k, &(pdff, field, r2))| {
            let (r, c) = (k / 4, k % 4);
            Region::rect([r * 8, r * 8 + 8], [c * 8, c * 8 + 8], 1.0 - pdff, pdff, field, r2).labeled(format!("tile{k}"))
        })
        .collect();
    PhantomSpec { regions, noise_sigma: 0.0, seed: 0 }
}

/// One ROI per labelled region, named after the region.
pub fn region_rois(spec: &PhantomSpec, phantom: &Phantom) -> Vec<crate::eval::RoiSpec> {
    spec.regions
        .iter()
        .enumerate()
        .filter_map(|(k, r)| {
            let voxels = phantom.region_voxels(k);
            (!voxels.is_empty()).then(|| crate::eval::RoiSpec::indices(r.label.clone().unwrap_or(format!("region{k}")), voxels))
        })
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Random slice for network training corpora: a background disk of tissue with
/// a few rectangles and disks of other tissue on top, plus a zero-signal rim.
pub fn random_slice_spec(size: usize, rng: &mut impl Rng, field_range: (f64, f64), noise_sigma: f64) -> PhantomSpec {
    let tissue = |rng: &mut dyn rand::RngCore| {
        let pdff: f64 = if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..0.95) };
        let amp: f64 = rng.gen_range(0.6..1.0);
        (amp * (1.0 - pdff), amp * pdff, rng.gen_range(field_range.0..field_range.1), rng.gen_range(20.0..200.0))
    };
    let half = size as f64 / 2.0;
    let mut regions = Vec::new();
    let (w, f, fh, r2) = tissue(rng);
    regions.push(Region {
        label: Some("body".into()),
        shape: RegionShape::Disk { center: [half - 0.5, half - 0.5], radius: half * rng.gen_range(0.8..0.98) },
        water: w,
        fat: f,
        field_hz: fh,
        r2star: r2,
    });
    let inner = rng.gen_range(2..=4);
    for k in 0..inner {
        let (w, f, fh, r2) = tissue(rng);
        let shape = if rng.gen_bool(0.5) {
            let h = rng.gen_range(size / 6..=size / 3).max(2);
            let wd = rng.gen_range(size / 6..=size / 3).max(2);
            let r0 = rng.gen_range(size / 6..size - size / 6 - h + 1);
            let c0 = rng.gen_range(size / 6..size - size / 6 - wd + 1);
            RegionShape::Rect { rows: [r0, r0 + h], cols: [c0, c0 + wd], slices: None }
        } else {
            RegionShape::Disk {
                center: [rng.gen_range(half * 0.6..half * 1.4), rng.gen_range(half * 0.6..half * 1.4)],
                radius: rng.gen_range(size as f64 / 10.0..size as f64 / 5.0),
            }
        };
        regions.push(Region { label: Some(format!("inner{k}")), shape, water: w, fat: f, field_hz: fh, r2star: r2 });
    }
    PhantomSpec { regions, noise_sigma, seed: rng.gen() }
}

/// A reproducible corpus of random 2D phantom slices.
pub fn random_corpus(
    count: usize,
    size: usize,
    seed: u64,
    params: &AcquisitionParams,
    field_range: (f64, f64),
    noise_sigma: f64,
) -> Result<Vec<Phantom>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = params.with_grid(GridShape::plane(size, size));
    (0..count)
        .map(|_| make_phantom(&random_slice_spec(size, &mut rng, field_range, noise_sigma), &params))
        .collect()
}
