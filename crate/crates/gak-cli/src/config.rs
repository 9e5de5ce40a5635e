//! Run configuration: a TOML (or JSON) file of experiment parameters, with
//! command-line flags layered on top and the merged result echoed into the
//! output directory so every run records exactly what it executed.

use std::path::{Path, PathBuf};

use gak_core::diffusion::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T};
use gak_core::mesh::DEFAULT_OFFSET_CLAMP;
use gak_core::rectify::{
    RegressorSpec, DEFAULT_ANCHOR_VIEWS, DEFAULT_LOG_SCALE_BOUND, DEFAULT_RENDER_VIEWS,
};
use gak_core::rectify::{DEFAULT_LAMBDA_MASK, DEFAULT_LAMBDA_RGB};
use gak_core::sampler::{DEFAULT_ANCHOR_COUNT, DEFAULT_T_RESUME};
use gak_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Default fixture rendering resolution. Full-scale runs use 512 behind the
/// `--full-res` flag; the smaller default keeps fixture runs CPU-friendly.
pub const DEFAULT_RESOLUTION: u32 = 128;
pub const FULL_RESOLUTION: u32 = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in asset used when no mesh paths are given: "icosphere",
    /// "torus", or "cylinder" (a bending cylinder for animation runs).
    pub fixture: String,
    /// Mesh sequence (OBJ with label sidecars); overrides `fixture`.
    pub meshes: Vec<PathBuf>,
    /// Camera rig JSON; empty means an orbit rig around the fixture.
    pub cameras: Option<PathBuf>,
    /// Gaussian set for `render`.
    pub gaussians: Option<PathBuf>,
    /// Directory of target PNGs: `view{V}.png` for fits, or
    /// `frame{F}_view{V}.png` for oracle-driven sampling runs.
    pub targets: Option<PathBuf>,
    pub output: PathBuf,
    pub seed: u64,

    // Noise schedule.
    pub t_total: u32,
    pub beta_start: f64,
    pub beta_end: f64,

    // Step plan. `rectify_count = 0` builds a plain denoise-only plan.
    pub steps: u32,
    pub rectify_count: u32,
    pub t_split: u32,
    pub eta: f64,

    // Rectifier geometry.
    pub anchor_views: usize,
    pub render_views: usize,
    pub anchor_count: usize,
    pub offset_clamp: f64,
    pub log_scale_bound: f64,
    pub stage1: Option<RegressorSpec>,
    pub stage2: Option<RegressorSpec>,

    // Fitting.
    pub iters: u32,
    pub learning_rate: f64,
    pub lambda_rgb: f64,
    pub lambda_mask: f64,
    /// Leading views used for fitting; the rest of the rig is held out for
    /// the PSNR report. 0 means anchor_views.
    pub train_views: usize,

    // Sampling.
    pub denoiser: String,
    pub amplitude: f64,
    pub frames: usize,
    pub t_resume: u32,

    // Fixture appearance.
    pub resolution: u32,
    pub checker_frequency: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fixture: "icosphere".to_string(),
            meshes: Vec::new(),
            cameras: None,
            gaussians: None,
            targets: None,
            output: PathBuf::from("out"),
            seed: 0,
            t_total: DEFAULT_T,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            steps: 20,
            rectify_count: 2,
            t_split: 300,
            eta: 0.0,
            anchor_views: DEFAULT_ANCHOR_VIEWS,
            render_views: DEFAULT_RENDER_VIEWS,
            anchor_count: DEFAULT_ANCHOR_COUNT,
            offset_clamp: DEFAULT_OFFSET_CLAMP,
            log_scale_bound: DEFAULT_LOG_SCALE_BOUND,
            stage1: None,
            stage2: None,
            iters: 200,
            learning_rate: 20.0,
            lambda_rgb: DEFAULT_LAMBDA_RGB,
            lambda_mask: DEFAULT_LAMBDA_MASK,
            train_views: 0,
            denoiser: "oracle".to_string(),
            amplitude: 0.05,
            frames: 3,
            t_resume: DEFAULT_T_RESUME,
            resolution: DEFAULT_RESOLUTION,
            checker_frequency: 1.0,
        }
    }
}

impl RunConfig {
    /// Loads TOML or JSON depending on the file extension. The two formats
    /// describe the same structure field for field.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            serde_json::from_str(&body).map_err(|e| Error::malformed(path, e.line(), e.to_string()))
        } else {
            toml::from_str(&body)
                .map_err(|e| Error::malformed(path, 0, e.message().to_string()))
        }
    }

    /// Rejects parameter combinations no command could run with. Command
    /// specific requirements (a gaussian file for `render`, targets for a
    /// file-based fit) are checked by the command itself.
    pub fn validate(&self) -> Result<()> {
        if self.meshes.is_empty()
            && !matches!(self.fixture.as_str(), "icosphere" | "torus" | "cylinder")
        {
            return Err(Error::validation(format!(
                "unknown fixture '{}': expected icosphere, torus, or cylinder",
                self.fixture
            )));
        }
        for m in &self.meshes {
            require_exists(m, "mesh")?;
        }
        if let Some(c) = &self.cameras {
            require_exists(c, "camera rig")?;
        }
        if let Some(g) = &self.gaussians {
            require_exists(g, "gaussian set")?;
        }
        if let Some(t) = &self.targets {
            require_exists(t, "target directory")?;
        }
        if self.t_total == 0 {
            return Err(Error::validation("t_total must be positive"));
        }
        if !(self.beta_start > 0.0 && self.beta_end < 1.0 && self.beta_start <= self.beta_end) {
            return Err(Error::validation("beta range must satisfy 0 < start <= end < 1"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::validation("eta must lie in [0, 1]"));
        }
        if self.anchor_views == 0 || self.render_views == 0 {
            return Err(Error::validation("view counts must be at least 1"));
        }
        if self.anchor_count == 0 {
            return Err(Error::validation("anchor_count must be positive"));
        }
        if !(self.offset_clamp > 0.0) || !(self.log_scale_bound > 0.0) {
            return Err(Error::validation("offset bounds must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if !(self.lambda_rgb >= 0.0) || !(self.lambda_mask >= 0.0) {
            return Err(Error::validation("loss weights must be non-negative"));
        }
        if !matches!(self.denoiser.as_str(), "oracle" | "shrink" | "noisy-oracle") {
            return Err(Error::validation(format!(
                "unknown denoiser '{}': expected oracle, shrink, or noisy-oracle",
                self.denoiser
            )));
        }
        if !(self.amplitude >= 0.0) {
            return Err(Error::validation("amplitude must be non-negative"));
        }
        if self.frames == 0 {
            return Err(Error::validation("frames must be at least 1"));
        }
        if self.t_resume == 0 || self.t_resume >= self.t_total {
            return Err(Error::validation("t_resume must lie strictly between 0 and t_total"));
        }
        if self.resolution == 0 {
            return Err(Error::validation("resolution must be positive"));
        }
        if !(self.checker_frequency > 0.0) {
            return Err(Error::validation("checker_frequency must be positive"));
        }
        if let Some(s) = &self.stage1 {
            s.build()?;
        }
        if let Some(s) = &self.stage2 {
            s.build()?;
        }
        Ok(())
    }

    /// Writes the merged configuration into the output directory.
    pub fn echo(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let body = toml::to_string_pretty(self)
            .map_err(|e| Error::validation(format!("config serialization failed: {e}")))?;
        let path = out_dir.join("effective_config.toml");
        std::fs::write(&path, body).map_err(|e| Error::io(path, e))
    }
}

pub fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::validation(format!("{what} not found: {}", path.display())))
    }
}
