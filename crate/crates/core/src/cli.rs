//! Command-line front end.
//!
//! Each command resolves its parameters from built-in defaults, then the
//! command's section of the `--config` JSON file (`{"train": {"epochs": 50}}`),
//! then flags. The resolved set is written to `run.json` beside the outputs
//! and `rerun` feeds it back.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::gradcheck::{registry, run_gradcheck, DEFAULT_TOLERANCE, DEFAULT_TRIALS};
use crate::error::{read_text, Error, Result};
use crate::eval::{compare, pdff_map, read_rois};
use crate::ideal::{init_in_phase, init_zeros, t2star_ideal, GnJacobian, IdealConfig, InitMaps};
use crate::manifest::RunManifest;
use crate::model::{
    AcquisitionParams, GridShape, MultiEchoSignal, ParameterMaps, DEFAULT_ECHO_SPACING_S, DEFAULT_FAT_SHIFT_HZ,
    DEFAULT_MASK_THRESHOLD, DEFAULT_NUM_ECHOES,
};
use crate::network::checkpoint;
use crate::network::train::write_curves;
use crate::network::{
    ntd_reconstruct, predict, train_with, Dataset, InputEncoding, Mode, NetworkWeights, TrainConfig, UNetConfig,
};
use crate::phantom::{make_phantom, random_corpus, region_rois, swap_prone_spec, tiled_spec, PhantomSpec};
use crate::pipeline::run_init_study;
use crate::{pgm, wfv};

#[derive(Parser, Debug)]
#[command(name = "wfsep", version, about = "Water/fat separation for multi-echo gradient-echo MRI")]
pub struct Cli {
    /// Worker threads for voxelwise stages [default: all cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON file with per-command parameter sections
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate truth maps and a multi-echo signal from a phantom
    Simulate(SimulateFlags),
    /// T2*-IDEAL reconstruction of a .wfv signal
    Ideal(IdealFlags),
    /// Train a network on a simulated or reference-labelled volume
    Train(TrainFlags),
    /// Fit an untrained network to one slice
    Ntd(NtdFlags),
    /// Apply trained weights to a signal
    Predict(PredictFlags),
    /// ROI means and regression fits between two map directories
    Eval(EvalFlags),
    /// Write one map as a 16-bit PGM image
    ExportPgm(ExportPgmFlags),
    /// Finite-difference check of every differentiable primitive
    Gradcheck(GradcheckFlags),
    /// Zero-start IDEAL, in-phase IDEAL and NTD on the swap-prone phantom
    InitStudy(InitStudyFlags),
    /// Execute the run recorded in a run.json again
    Rerun(RerunFlags),
}

macro_rules! flags {
    ($(#[$m:meta])* $name:ident { $($(#[$fm:meta])* $field:ident : $ty:ty),* $(,)? }) => {
        $(#[$m])*
        #[derive(Args, Debug, Default, Serialize)]
        pub struct $name {
            $($(#[$fm])* #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")] pub $field: Option<$ty>,)*
        }
    };
}

flags!(SimulateFlags {
    /// Phantom description (JSON)
    spec: PathBuf,
    /// Built-in phantom: swap_prone or tiled
    preset: String,
    /// Number of random slices to generate instead of one phantom
    corpus: usize,
    rows: usize,
    cols: usize,
    slices: usize,
    /// Field range for random and tiled phantoms (Hz)
    field_min: f64,
    field_max: f64,
    /// Complex Gaussian noise std per channel; overrides the phantom file
    noise: f64,
    /// Overrides the phantom file seed
    seed: u64,
    echoes: usize,
    /// Echo spacing (s)
    echo_spacing: f64,
    /// First echo time (s) [default: the echo spacing]
    first_echo: f64,
    /// Fat shift (Hz)
    fat_shift: f64,
    mask_threshold: f64,
    /// Output directory
    out: PathBuf,
});

flags!(IdealFlags {
    /// Input signal (.wfv)
    signal: PathBuf,
    /// zeros, inphase or file:<map directory>
    init: String,
    max_iters: usize,
    /// Stop when the relative cost decrease falls below this
    tol: f64,
    /// Initial Levenberg damping
    damping: f64,
    r2_max: f64,
    /// projected or fixed
    jacobian: String,
    /// Output directory
    out: PathBuf,
});

flags!(TrainFlags {
    /// std or utd
    mode: String,
    /// Directory with signal.wfv and, for std, truth/
    data: PathBuf,
    epochs: usize,
    batch: usize,
    /// [default: 1e-3 for std, 1e-4 for utd]
    lr: f64,
    seed: u64,
    /// Share of slices used for training; the rest validate
    train_fraction: f64,
    /// mag_phase or real_imag
    encoding: String,
    depth: usize,
    base_channels: usize,
    /// Weights file (.wts)
    out: PathBuf,
    /// Loss curves (.csv)
    curves: PathBuf,
});

flags!(NtdFlags {
    /// Single-slice input signal (.wfv)
    signal: PathBuf,
    epochs: usize,
    lr: f64,
    seed: u64,
    /// mag_phase or real_imag
    encoding: String,
    depth: usize,
    base_channels: usize,
    /// Start from these weights instead of a random init
    init_weights: PathBuf,
    /// Output directory
    out: PathBuf,
});

flags!(PredictFlags {
    /// Weights file (.wts)
    model: PathBuf,
    signal: PathBuf,
    out: PathBuf,
});

flags!(EvalFlags {
    /// First map directory
    a: PathBuf,
    /// Second map directory
    b: PathBuf,
    /// ROI list (JSON)
    rois: PathBuf,
    out: PathBuf,
});

flags!(ExportPgmFlags {
    /// Map directory
    maps: PathBuf,
    /// pdff, field, r2star, water or fat
    map: String,
    slice: usize,
    /// Window minimum [default: map minimum]
    min: f64,
    /// Window maximum [default: map maximum]
    max: f64,
    /// Output image (.pgm)
    out: PathBuf,
});

flags!(GradcheckFlags {
    trials: usize,
    seed: u64,
    tol: f64,
    /// Directory for the report and run.json
    out: PathBuf,
});

flags!(InitStudyFlags {
    epochs: usize,
    lr: f64,
    seed: u64,
    max_iters: usize,
    out: PathBuf,
});

#[derive(Args, Debug)]
pub struct RerunFlags {
    /// run.json of the original run
    pub manifest: PathBuf,
    /// Write outputs here instead of the original locations
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fail unless every output is byte-identical to the recorded one
    #[arg(long)]
    pub check: bool,
}

/// What a command read and wrote.
#[derive(Default)]
pub struct Record {
    pub manifest_dir: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seeds: Vec<u64>,
}

trait Step: Serialize + DeserializeOwned + Default {
    const NAME: &'static str;
    fn execute(&self) -> Result<Record>;
    /// Moves every output into `dir`.
    fn relocate(&mut self, dir: &Path);
    /// Fills defaults that depend on other parameters.
    fn complete(&mut self) -> Result<()> {
        Ok(())
    }
}

fn need<'a>(p: &'a Path, flag: &str) -> Result<&'a Path> {
    if p.as_os_str().is_empty() {
        return Err(Error::Config(format!("--{flag} is required")));
    }
    Ok(p)
}

fn in_dir(dir: &Path, p: &Path) -> PathBuf {
    dir.join(p.file_name().unwrap_or(p.as_os_str()))
}

fn parent(p: &Path) -> PathBuf {
    p.parent().filter(|d| !d.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn enum_value<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(Value::String(s.into())).map_err(|_| Error::Config(format!("unknown {what} {s:?}")))
}

fn net_config(encoding: &str, depth: usize, base_channels: usize) -> Result<UNetConfig> {
    let cfg = UNetConfig {
        depth,
        base_channels,
        input_encoding: enum_value::<InputEncoding>("encoding", encoding)?,
        ..UNetConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateParams {
    pub spec: Option<PathBuf>,
    pub preset: Option<String>,
    pub corpus: Option<usize>,
    pub rows: usize,
    pub cols: usize,
    pub slices: usize,
    pub field_min: f64,
    pub field_max: f64,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
    pub echoes: usize,
    pub echo_spacing: f64,
    pub first_echo: Option<f64>,
    pub fat_shift: f64,
    pub mask_threshold: f64,
    pub out: PathBuf,
}

impl Default for SimulateParams {
    fn default() -> Self {
        Self {
            spec: None,
            preset: None,
            corpus: None,
            rows: 64,
            cols: 64,
            slices: 1,
            field_min: -60.0,
            field_max: 60.0,
            noise: None,
            seed: None,
            echoes: DEFAULT_NUM_ECHOES,
            echo_spacing: DEFAULT_ECHO_SPACING_S,
            first_echo: None,
            fat_shift: DEFAULT_FAT_SHIFT_HZ,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            out: PathBuf::new(),
        }
    }
}

impl SimulateParams {
    fn protocol(&self) -> Result<AcquisitionParams> {
        let first = self.first_echo.unwrap_or(self.echo_spacing);
        let times = (0..self.echoes).map(|j| first + j as f64 * self.echo_spacing).collect();
        AcquisitionParams::new(times, self.fat_shift, GridShape::new(self.rows, self.cols, self.slices))
    }

    fn phantom_spec(&self) -> Result<PhantomSpec> {
        let mut spec = match (&self.spec, self.preset.as_deref()) {
            (Some(path), None) => {
                let text = read_text(path)?;
                serde_json::from_str(&text).map_err(|e| Error::format(format!("phantom spec: {e}")).at(path))?
            }
            (None, Some("swap_prone")) => swap_prone_spec(),
            (None, Some("tiled")) => {
                if self.rows != self.cols || self.rows % 8 != 0 {
                    return Err(Error::Config("the tiled preset needs a square grid divisible by 8".into()));
                }
                let pdffs: Vec<f64> = (0..10).map(|k| k as f64 / 10.0).collect();
                tiled_spec(self.rows / 8, 8, &pdffs, (self.field_min, self.field_max), (20.0, 200.0))
            }
            (None, Some(other)) => return Err(Error::Config(format!("unknown preset {other:?}"))),
            _ => return Err(Error::Config("give exactly one of --spec, --preset or --corpus".into())),
        };
        if let Some(n) = self.noise {
            spec.noise_sigma = n;
        }
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        Ok(spec)
    }
}

impl Step for SimulateParams {
    const NAME: &'static str = "simulate";

    fn execute(&self) -> Result<Record> {
        let out = need(&self.out, "out")?;
        let params = self.protocol()?;
        let mut rec = Record { manifest_dir: Some(out.to_path_buf()), ..Record::default() };
        let (mut signal, truth, rois) = if let Some(count) = self.corpus {
            if self.spec.is_some() || self.preset.is_some() {
                return Err(Error::Config("give exactly one of --spec, --preset or --corpus".into()));
            }
            if self.rows != self.cols {
                return Err(Error::Config("corpus slices are square; set --rows equal to --cols".into()));
            }
            let seed = self.seed.unwrap_or(0);
            rec.seeds.push(seed);
            let range = (self.field_min, self.field_max);
            let slices = random_corpus(count, self.rows, seed, &params, range, self.noise.unwrap_or(0.0))?;
            let signals: Vec<MultiEchoSignal> = slices.iter().map(|p| p.signal.clone()).collect();
            let maps: Vec<ParameterMaps> = slices.into_iter().map(|p| p.truth).collect();
            (MultiEchoSignal::stack(&signals)?, ParameterMaps::stack(&maps)?, None)
        } else {
            let spec = self.phantom_spec()?;
            if let Some(path) = &self.spec {
                rec.inputs.push(path.clone());
            }
            rec.seeds.push(spec.seed);
            let ph = make_phantom(&spec, &params)?;
            let rois = region_rois(&spec, &ph);
            (ph.signal, ph.truth, Some(rois))
        };
        signal.mask_threshold = self.mask_threshold;
        fs::create_dir_all(out)?;
        wfv::write_signal(&out.join("signal.wfv"), &signal)?;
        wfv::write_maps(&out.join("truth"), &truth, &signal.params)?;
        rec.outputs.extend([out.join("signal.wfv"), out.join("truth")]);
        if let Some(rois) = rois {
            fs::write(out.join("rois.json"), serde_json::to_string_pretty(&rois)?)?;
            rec.outputs.push(out.join("rois.json"));
        }
        let g = signal.grid();
        println!("simulated {}x{}x{} voxels, {} echoes -> {}", g.rows, g.cols, g.slices, signal.num_echoes(), out.display());
        Ok(rec)
    }

    fn relocate(&mut self, dir: &Path) {
        self.out = dir.to_path_buf();
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdealParams {
    pub signal: PathBuf,
    pub init: String,
    pub max_iters: usize,
    pub tol: f64,
    pub damping: f64,
    pub r2_max: f64,
    pub jacobian: String,
    pub out: PathBuf,
}

impl Default for IdealParams {
    fn default() -> Self {
        let d = IdealConfig::default();
        Self {
            signal: PathBuf::new(),
            init: "inphase".into(),
            max_iters: d.max_outer_iters,
            tol: d.tol_rel_cost,
            damping: d.gn_damping,
            r2_max: d.r2_max,
            jacobian: "projected".into(),
            out: PathBuf::new(),
        }
    }
}

impl Step for IdealParams {
    const NAME: &'static str = "ideal";

    fn execute(&self) -> Result<Record> {
        let out = need(&self.out, "out")?;
        let path = need(&self.signal, "signal")?;
        let signal = wfv::read_signal(path)?;
        let mut inputs = vec![path.to_path_buf()];
        let init = match self.init.as_str() {
            "zeros" => init_zeros(&signal.params),
            "inphase" => init_in_phase(&signal)?,
            other => match other.strip_prefix("file:") {
                Some(dir) => {
                    let (maps, _) = wfv::read_maps(Path::new(dir))?;
                    inputs.push(PathBuf::from(dir));
                    InitMaps::external(signal.grid(), maps.field_hz, maps.r2star)?
                }
                None => return Err(Error::Config(format!("unknown init {other:?}; use zeros, inphase or file:<dir>"))),
            },
        };
        let cfg = IdealConfig {
            max_outer_iters: self.max_iters,
            gn_damping: self.damping,
            tol_rel_cost: self.tol,
            r2_max: self.r2_max,
            jacobian: enum_value::<GnJacobian>("jacobian", &self.jacobian)?,
        };
        let res = t2star_ideal(&signal, &init, &cfg)?;
        wfv::write_maps(out, &res.maps, &signal.params)?;
        let mut csv = String::from("iteration,cost\n");
        for (i, c) in res.cost_history.iter().enumerate() {
            csv.push_str(&format!("{},{c:e}\n", i + 1));
        }
        fs::write(out.join("cost_history.csv"), csv)?;
        println!("{} iterations, final cost {:e} -> {}", res.cost_history.len(), res.final_cost(), out.display());
        Ok(Record {
            manifest_dir: Some(out.to_path_buf()),
            inputs,
            outputs: vec![out.to_path_buf()],
            seeds: Vec::new(),
        })
    }

    fn relocate(&mut self, dir: &Path) {
        self.out = dir.to_path_buf();
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub mode: String,
    pub data: PathBuf,
    pub epochs: usize,
    pub batch: usize,
    pub lr: Option<f64>,
    pub seed: u64,
    pub train_fraction: f64,
    pub encoding: String,
    pub depth: usize,
    pub base_channels: usize,
    pub out: PathBuf,
    pub curves: PathBuf,
}

impl Default for TrainParams {
    fn default() -> Self {
        let net = UNetConfig::default();
        Self {
            mode: "std".into(),
            data: PathBuf::new(),
            epochs: TrainConfig::std_defaults().epochs,
            batch: TrainConfig::std_defaults().batch_size,
            lr: None,
            seed: 0,
            train_fraction: 0.8,
            encoding: "mag_phase".into(),
            depth: net.depth,
            base_channels: net.base_channels,
            out: PathBuf::from("model.wts"),
            curves: PathBuf::from("curves.csv"),
        }
    }
}

fn train_mode(mode: &str) -> Result<(Mode, TrainConfig)> {
    let mode = enum_value::<Mode>("mode", mode)?;
    let defaults = match mode {
        Mode::Std => TrainConfig::std_defaults(),
        Mode::Utd => TrainConfig::utd_defaults(),
        Mode::Ntd => return Err(Error::Config("use the ntd command for single-dataset fitting".into())),
    };
    Ok((mode, defaults))
}

impl Step for TrainParams {
    const NAME: &'static str = "train";

    fn complete(&mut self) -> Result<()> {
        let (_, defaults) = train_mode(&self.mode)?;
        self.lr.get_or_insert(defaults.lr);
        Ok(())
    }

    fn execute(&self) -> Result<Record> {
        let (mode, defaults) = train_mode(&self.mode)?;
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr.unwrap_or(defaults.lr),
            seed: self.seed,
            mode,
        };
        let net = net_config(&self.encoding, self.depth, self.base_channels)?;
        let dir = need(&self.data, "data")?;
        let signal = wfv::read_signal(&dir.join("signal.wfv"))?;
        let mut inputs = vec![dir.join("signal.wfv")];
        let truth = if mode == Mode::Std {
            inputs.push(dir.join("truth"));
            Some(wfv::read_maps(&dir.join("truth"))?.0)
        } else {
            None
        };
        let data = Dataset::from_volume(&signal, truth.as_ref())?.split_fraction(self.train_fraction)?;
        let outcome = train_with(&data, &net, &cfg, None, |row| {
            if row.epoch == 1 || row.epoch % 100 == 0 || row.epoch == cfg.epochs {
                match row.val_loss {
                    Some(v) => eprintln!("epoch {} train {:e} val {v:e}", row.epoch, row.train_loss),
                    None => eprintln!("epoch {} train {:e}", row.epoch, row.train_loss),
                }
            }
        })?;
        fs::create_dir_all(parent(&self.out))?;
        fs::create_dir_all(parent(&self.curves))?;
        checkpoint::save(&self.out, &outcome.weights)?;
        write_curves(&self.curves, &outcome.curves)?;
        println!("kept epoch {} -> {}", outcome.best_epoch, self.out.display());
        Ok(Record {
            manifest_dir: Some(parent(&self.out)),
            inputs,
            outputs: vec![self.out.clone(), self.curves.clone()],
            seeds: vec![self.seed],
        })
    }

    fn relocate(&mut self, dir: &Path) {
        self.out = in_dir(dir, &self.out);
        self.curves = in_dir(dir, &self.curves);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NtdParams {
    pub signal: PathBuf,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub encoding: String,
    pub depth: usize,
    pub base_channels: usize,
    pub init_weights: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for NtdParams {
    fn default() -> Self {
        let d = TrainConfig::ntd_defaults();
        let net = UNetConfig::default();
        Self {
            signal: PathBuf::new(),
            epochs: d.epochs,
            lr: d.lr,
            seed: d.seed,
            encoding: "mag_phase".into(),
            depth: net.depth,
            base_channels: net.base_channels,
            init_weights: None,
            out: PathBuf::new(),
        }
    }
}

impl Step for NtdParams {
    const NAME: &'static str = "ntd";

    fn execute(&self) -> Result<Record> {
        let out = need(&self.out, "out")?;
        let path = need(&self.signal, "signal")?;
        let signal = wfv::read_signal(path)?;
        let net = net_config(&self.encoding, self.depth, self.base_channels)?;
        let mut inputs = vec![path.to_path_buf()];
        let init = match &self.init_weights {
            Some(w) => {
                inputs.push(w.clone());
                Some(checkpoint::load(w)?)
            }
            None => None,
        };
        let cfg = TrainConfig { epochs: self.epochs, lr: self.lr, seed: self.seed, ..TrainConfig::ntd_defaults() };
        let every = (self.epochs / 20).max(1);
        let res = ntd_reconstruct(&signal, &net, &cfg, init, |e, c| {
            if e == 1 || e % every == 0 {
                eprintln!("epoch {e} cost {c:e}");
            }
        })?;
        wfv::write_maps(out, &res.maps, &signal.params)?;
        let mut csv = String::from("epoch,cost\n");
        for (i, c) in res.cost_history.iter().enumerate() {
            csv.push_str(&format!("{},{c:e}\n", i + 1));
        }
        fs::write(out.join("cost_history.csv"), csv)?;
        checkpoint::save(&out.join("model.wts"), &res.weights)?;
        println!("final cost {:e} -> {}", res.final_cost, out.display());
        Ok(Record { manifest_dir: Some(out.to_path_buf()), inputs, outputs: vec![out.to_path_buf()], seeds: vec![self.seed] })
    }

    fn relocate(&mut self, dir: &Path) {
        self.out = dir.to_path_buf();
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictParams {
    pub model: PathBuf,
    pub signal: PathBuf,
    pub out: PathBuf,
}

impl Step for PredictParams {
    const NAME: &'static str = "predict";

    fn execute(&self) -> Result<Record> {
        let out = need(&self.out, "out")?;
        let weights: NetworkWeights = checkpoint::load(need(&self.model, "model")?)?;
        let signal = wfv::read_signal(need(&self.signal, "signal")?)?;
        let maps = predict(&signal, &weights)?;
        wfv::write_maps(out, &maps, &signal.params)?;
        println!("maps -> {}", out.display());
        Ok(Record {
            manifest_dir: Some(out.to_path_buf()),
            inputs: vec![self.model.clone(), self.signal.clone()],
            outputs: vec![out.to_path_buf()],
            seeds: Vec::new(),
        })
    }

    fn relocate(&mut self, dir: &Path) {
        self.out = dir.to_path_buf();
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub a: PathBuf,
    pub b: PathBuf,
    pub rois: PathBuf,
    pub out: PathBuf,
}

impl Step for EvalParams {
    const NAME: &'static str = "eval";

    fn execute(&self) -> Result<Record> {
        let out = need(&self.out, "out")?;
        let (a, _) = wfv::read_maps(need(&self.a, "a")?)?;
        let (b, _) = wfv::read_maps(need(&self.b, "b")?)?;
        let rois = read_rois(need(&self.rois, "rois")?)?;
        let c = compare(&a, &b, &rois)?;
        c.write(out)?;
        for (t, f) in &c.fits {
            println!("{:<7} slope {:.4} intercept {:.4} r2 {:.4}", t.name(), f.slope, f.intercept, f.r2);
        }
        Ok(Record {
            manifest_dir: Some(out.to_path_buf()),
            inputs: vec![self.a.clone(), self.b.clone(), self.rois.clone()],
            outputs: vec![out.join("stats.csv"), out.join("fit.csv")],
            seeds: Vec::new(),
        })
    }

    fn relocate(&mut self, dir: &Path) {
        self.out = dir.to_path_buf();
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportPgmParams {
    pub maps: PathBuf,
    pub map: String,
    pub slice: usize,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub out: PathBuf,
}

impl Default for ExportPgmParams {
    fn default() -> Self {
        Self { maps: PathBuf::new(), map: "pdff".into(), slice: 0, min: None, max: None, out: PathBuf::new() }
    }
}

impl Step for ExportPgmParams {
    const NAME: &'static str = "export-pgm";

    fn execute(&self) -> Result<Record> {
        let out = need(&self.out, "out")?;
        let (maps, _) = wfv::read_maps(need(&self.maps, "maps")?)?;
        let g = maps.grid;
        if self.slice >= g.slices {
            return Err(Error::Config(format!("slice {} out of range 0..{}", self.slice, g.slices)));
        }
        let values: Vec<f64> = match self.map.as_str() {
            "pdff" => pdff_map(&maps),
            "field" => maps.field_hz.clone(),
            "r2star" => maps.r2star.clone(),
            "water" => maps.water.iter().map(|z| z.norm()).collect(),
            "fat" => maps.fat.iter().map(|z| z.norm()).collect(),
            other => return Err(Error::Config(format!("unknown map {other:?}"))),
        };
        let plane: Vec<f64> =
            (0..g.rows * g.cols).map(|v| values[g.index(v / g.cols, v % g.cols, self.slice)]).collect();
        let auto = pgm::Window::auto(&plane)?;
        let window = pgm::Window { min: self.min.unwrap_or(auto.min), max: self.max.unwrap_or(auto.max) };
        fs::create_dir_all(parent(out))?;
        pgm::write(out, &plane, g.rows, g.cols, window)?;
        println!("{} window [{}, {}] -> {}", self.map, window.min, window.max, out.display());
        Ok(Record {
            manifest_dir: Some(parent(out)),
            inputs: vec![self.maps.clone()],
            outputs: vec![out.to_path_buf(), pgm::window_path(out)],
            seeds: Vec::new(),
        })
    }

    fn relocate(&mut self, dir: &Path) {
        self.out = in_dir(dir, &self.out);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckParams {
    pub trials: usize,
    pub seed: u64,
    pub tol: f64,
    pub out: Option<PathBuf>,
}

impl Default for GradcheckParams {
    fn default() -> Self {
        Self { trials: DEFAULT_TRIALS, seed: 0, tol: DEFAULT_TOLERANCE, out: None }
    }
}

impl Step for GradcheckParams {
    const NAME: &'static str = "gradcheck";

    fn execute(&self) -> Result<Record> {
        let report = run_gradcheck(&registry(), self.trials, self.seed, self.tol);
        print!("{report}");
        let mut rec = Record { seeds: vec![self.seed], ..Record::default() };
        if let Some(dir) = &self.out {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("gradcheck.txt"), report.to_string())?;
            rec.manifest_dir = Some(dir.clone());
            rec.outputs.push(dir.join("gradcheck.txt"));
        }
        if !report.passed() {
            return Err(Error::Numerical(format!("gradient check failed (max relative error {:e})", report.max_rel_error())));
        }
        Ok(rec)
    }

    fn relocate(&mut self, dir: &Path) {
        self.out = Some(dir.to_path_buf());
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitStudyParams {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub max_iters: usize,
    pub out: PathBuf,
}

impl Default for InitStudyParams {
    fn default() -> Self {
        let d = TrainConfig::ntd_defaults();
        Self { epochs: d.epochs, lr: d.lr, seed: d.seed, max_iters: IdealConfig::default().max_outer_iters, out: PathBuf::new() }
    }
}

impl Step for InitStudyParams {
    const NAME: &'static str = "init-study";

    fn execute(&self) -> Result<Record> {
        let out = need(&self.out, "out")?;
        let ideal = IdealConfig { max_outer_iters: self.max_iters, ..IdealConfig::default() };
        let ntd = TrainConfig { epochs: self.epochs, lr: self.lr, seed: self.seed, ..TrainConfig::ntd_defaults() };
        let study = run_init_study(&ideal, &ntd, &UNetConfig::default())?;
        study.write(out)?;
        let [z, i, n] = study.final_costs();
        println!("final cost: zero init {z:e}, in-phase init {i:e}, ntd {n:e}");
        Ok(Record { manifest_dir: Some(out.to_path_buf()), inputs: Vec::new(), outputs: vec![out.to_path_buf()], seeds: vec![self.seed] })
    }

    fn relocate(&mut self, dir: &Path) {
        self.out = dir.to_path_buf();
    }
}

fn merge(base: &mut Value, over: &Value) {
    if let (Value::Object(b), Value::Object(o)) = (base, over) {
        for (k, v) in o {
            b.insert(k.clone(), v.clone());
        }
    }
}

fn resolve<P: Step>(config: Option<&Value>, flags: &impl Serialize) -> Result<P> {
    let mut v = serde_json::to_value(P::default())?;
    if let Some(section) = config.and_then(|c| c.get(P::NAME)) {
        if !section.is_object() {
            return Err(Error::Config(format!("config section {:?} must be an object", P::NAME)));
        }
        merge(&mut v, section);
    }
    merge(&mut v, &serde_json::to_value(flags)?);
    let mut p: P = serde_json::from_value(v).map_err(|e| Error::Config(format!("{}: {e}", P::NAME)))?;
    p.complete()?;
    Ok(p)
}

/// Runs `params` and writes its manifest. Returns the manifest.
fn run_step<P: Step>(params: &P) -> Result<Option<RunManifest>> {
    let start = Instant::now();
    let rec = params.execute()?;
    let Some(dir) = rec.manifest_dir else { return Ok(None) };
    let mut m = RunManifest::new(P::NAME, serde_json::to_value(params)?);
    m.seeds = rec.seeds;
    m.inputs = RunManifest::hash_all(&rec.inputs)?;
    m.outputs = RunManifest::hash_all(&rec.outputs)?;
    m.wall_time_s = start.elapsed().as_secs_f64();
    m.write(&dir)?;
    Ok(Some(m))
}

fn rerun_step<P: Step>(old: &RunManifest, out: Option<&Path>) -> Result<Option<RunManifest>> {
    let mut params: P = serde_json::from_value(old.params.clone())
        .map_err(|e| Error::Config(format!("recorded {} parameters: {e}", P::NAME)))?;
    if let Some(dir) = out {
        params.relocate(dir);
    }
    run_step(&params)
}

/// Output hashes keyed by file name within the run, for comparing a rerun
/// against its original.
fn output_digests(m: &RunManifest) -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = m
        .outputs
        .iter()
        .map(|h| (h.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(), h.sha256.clone()))
        .collect();
    v.sort();
    v
}

/// Re-executes a recorded run. Returns whether every output matched.
pub fn rerun(flags: &RerunFlags) -> Result<bool> {
    let old = RunManifest::read(&flags.manifest)?;
    let changed = old.changed_inputs()?;
    if !changed.is_empty() {
        return Err(Error::InvalidInput(format!("inputs changed since the recorded run: {changed:?}")));
    }
    let out = flags.out.as_deref();
    let new = match old.subcommand.as_str() {
        SimulateParams::NAME => rerun_step::<SimulateParams>(&old, out)?,
        IdealParams::NAME => rerun_step::<IdealParams>(&old, out)?,
        TrainParams::NAME => rerun_step::<TrainParams>(&old, out)?,
        NtdParams::NAME => rerun_step::<NtdParams>(&old, out)?,
        PredictParams::NAME => rerun_step::<PredictParams>(&old, out)?,
        EvalParams::NAME => rerun_step::<EvalParams>(&old, out)?,
        ExportPgmParams::NAME => rerun_step::<ExportPgmParams>(&old, out)?,
        GradcheckParams::NAME => rerun_step::<GradcheckParams>(&old, out)?,
        InitStudyParams::NAME => rerun_step::<InitStudyParams>(&old, out)?,
        other => return Err(Error::Config(format!("unknown subcommand {other:?} in {}", flags.manifest.display()))),
    };
    let same = new.is_some_and(|n| output_digests(&n) == output_digests(&old));
    println!("outputs {} the recorded run", if same { "match" } else { "differ from" });
    if flags.check && !same {
        return Err(Error::Numerical("rerun outputs differ from the recorded run".into()));
    }
    Ok(same)
}

fn load_config(path: Option<&Path>) -> Result<Option<Value>> {
    let Some(path) = path else { return Ok(None) };
    let text = read_text(path)?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
    }
    Ok(Some(v))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    let c = config.as_ref();
    match &cli.command {
        Command::Simulate(f) => run_step(&resolve::<SimulateParams>(c, f)?).map(drop),
        Command::Ideal(f) => run_step(&resolve::<IdealParams>(c, f)?).map(drop),
        Command::Train(f) => run_step(&resolve::<TrainParams>(c, f)?).map(drop),
        Command::Ntd(f) => run_step(&resolve::<NtdParams>(c, f)?).map(drop),
        Command::Predict(f) => run_step(&resolve::<PredictParams>(c, f)?).map(drop),
        Command::Eval(f) => run_step(&resolve::<EvalParams>(c, f)?).map(drop),
        Command::ExportPgm(f) => run_step(&resolve::<ExportPgmParams>(c, f)?).map(drop),
        Command::Gradcheck(f) => run_step(&resolve::<GradcheckParams>(c, f)?).map(drop),
        Command::InitStudy(f) => run_step(&resolve::<InitStudyParams>(c, f)?).map(drop),
        Command::Rerun(f) => rerun(f).map(drop),
    }
}

/// Runs a parsed command line inside a thread pool of the requested size.
pub fn run(cli: &Cli) -> Result<()> {
    let threads = cli.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli))
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
