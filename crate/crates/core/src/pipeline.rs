//! Zero-start IDEAL, in-phase-start IDEAL and an untrained network fitted to
//! the same swap-prone phantom.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::eval::pdff_map;
use crate::ideal::{init_in_phase, init_zeros, t2star_ideal, IdealConfig, IdealResult};
use crate::model::{AcquisitionParams, GridShape};
use crate::network::{ntd_reconstruct, NtdResult, TrainConfig, UNetConfig};
use crate::phantom::{make_phantom, swap_prone_spec, Phantom, PhantomSpec};
use crate::wfv;

pub const METHODS: [&str; 3] = ["zero_init", "inphase_init", "ntd"];

#[derive(Clone, Debug)]
pub struct InitStudy {
    pub spec: PhantomSpec,
    pub phantom: Phantom,
    pub zero: IdealResult,
    pub inphase: IdealResult,
    pub ntd: NtdResult,
}

pub fn swap_prone_phantom() -> Result<(PhantomSpec, Phantom)> {
    let spec = swap_prone_spec();
    let params = AcquisitionParams::default_protocol(GridShape::plane(32, 32));
    let phantom = make_phantom(&spec, &params)?;
    Ok((spec, phantom))
}

pub fn run_init_study(ideal: &IdealConfig, ntd: &TrainConfig, net: &UNetConfig) -> Result<InitStudy> {
    let (spec, phantom) = swap_prone_phantom()?;
    let signal = &phantom.signal;
    let zero = t2star_ideal(signal, &init_zeros(&signal.params), ideal)?;
    let inphase = t2star_ideal(signal, &init_in_phase(signal)?, ideal)?;
    let ntd = ntd_reconstruct(signal, net, ntd, None, |_, _| {})?;
    Ok(InitStudy { spec, phantom, zero, inphase, ntd })
}

impl InitStudy {
    pub fn costs(&self) -> [&[f64]; 3] {
        [&self.zero.cost_history, &self.inphase.cost_history, &self.ntd.cost_history]
    }

    pub fn final_costs(&self) -> [f64; 3] {
        [self.zero.final_cost(), self.inphase.final_cost(), self.ntd.final_cost]
    }

    /// `method,iteration,cost`; NTD iterations are epochs.
    pub fn cost_csv(&self) -> String {
        let mut s = String::from("method,iteration,cost\n");
        for (m, costs) in METHODS.iter().zip(self.costs()) {
            for (i, c) in costs.iter().enumerate() {
                writeln!(s, "{m},{},{c:e}", i + 1).expect("string write");
            }
        }
        s
    }

    /// Mean absolute PDFF error per region and method.
    pub fn region_errors(&self) -> Vec<(String, [f64; 3])> {
        let truth = pdff_map(&self.phantom.truth);
        let maps = [pdff_map(&self.zero.maps), pdff_map(&self.inphase.maps), pdff_map(&self.ntd.maps)];
        self.spec
            .regions
            .iter()
            .enumerate()
            .map(|(k, r)| {
                let vs = self.phantom.region_voxels(k);
                let err = |m: &[f64]| vs.iter().map(|&v| (m[v] - truth[v]).abs()).sum::<f64>() / vs.len().max(1) as f64;
                (r.label.clone().unwrap_or(format!("region{k}")), [err(&maps[0]), err(&maps[1]), err(&maps[2])])
            })
            .collect()
    }

    pub fn region_error_csv(&self) -> String {
        let mut s = format!("region,{}\n", METHODS.join(","));
        for (label, e) in self.region_errors() {
            writeln!(s, "{label},{:e},{:e},{:e}", e[0], e[1], e[2]).expect("string write");
        }
        s
    }

    /// `truth/`, one map directory per method, `signal.wfv`, the cost curves
    /// and the per-region PDFF errors.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let params = &self.phantom.signal.params;
        fs::create_dir_all(dir)?;
        wfv::write_signal(&dir.join("signal.wfv"), &self.phantom.signal)?;
        wfv::write_maps(&dir.join("truth"), &self.phantom.truth, params)?;
        let maps = [&self.zero.maps, &self.inphase.maps, &self.ntd.maps];
        for (m, maps) in METHODS.iter().zip(maps) {
            wfv::write_maps(&dir.join(m), maps, params)?;
        }
        fs::write(dir.join("cost_curves.csv"), self.cost_csv())?;
        fs::write(dir.join("pdff_error.csv"), self.region_error_csv())?;
        Ok(())
    }
}
