//! The six subcommands. Each validates its inputs, echoes the effective
//! configuration into the output directory, runs the core entry points, and
//! writes artifacts with stable names so reruns are byte-comparable.

use std::path::Path;

use gak_core::diffusion::{build_step_plan, denoise_only_plan, make_schedule, PlanAction, StepPlan};
use gak_core::imgbuf::{psnr, ImageBuffer};
use gak_core::rectify::{fit_gaussians, write_fit_trace_csv, RectifyConfig, RegressorSpec};
use gak_core::sampler::{
    make_stub_denoiser, median_interframe_delta, sample_frame, sample_frames_independent,
    sample_video, save_frame_outputs, SampleConfig,
};
use gak_core::splat::{render, render_bruteforce, GaussianSet};
use gak_core::{Error, Result};

use crate::config::{require_exists, RunConfig};
use crate::fixture::{load_cameras, load_meshes, oracle_targets, reference_scene, reference_targets};

/// Renders a Gaussian set at every rig view. With `oracle` set, each view is
/// re-rendered with the exhaustive per-pixel compositor and the maximum
/// per-channel deviation is printed.
pub fn cmd_render(cfg: &RunConfig, oracle: bool) -> Result<()> {
    let path = cfg
        .gaussians
        .as_ref()
        .ok_or_else(|| Error::validation("render needs a gaussian set (--gaussians)"))?;
    let set = GaussianSet::load(path)?;
    let cams = match &cfg.cameras {
        Some(rig) => {
            let cams = gak_core::camera::load_rig(rig)?;
            if cams.is_empty() {
                return Err(Error::validation(format!("empty camera rig: {}", rig.display())));
            }
            cams
        }
        None => {
            let mesh = load_meshes(cfg, 1)?.remove(0);
            load_cameras(cfg, &mesh, cfg.render_views)?
        }
    };
    cfg.echo(&cfg.output)?;

    let mut worst: f64 = 0.0;
    for (v, cam) in cams.iter().enumerate() {
        let img = render(&set, cam)?;
        img.save_png(cfg.output.join(format!("view{v}.png")))?;
        if oracle {
            let exact = render_bruteforce(&set, cam)?;
            let diff = img.max_abs_diff(&exact)?;
            worst = worst.max(diff);
            println!("view {v}: max abs diff vs exhaustive {diff:.3e}");
        }
    }
    if oracle {
        println!("overall max abs diff {worst:.3e}");
    }
    println!("wrote {} views to {}", cams.len(), cfg.output.display());
    Ok(())
}

fn build_plan(cfg: &RunConfig) -> Result<StepPlan> {
    let sched = make_schedule(cfg.t_total, cfg.beta_start, cfg.beta_end)?;
    let mut plan = if cfg.rectify_count == 0 {
        denoise_only_plan(cfg.steps, &sched)?
    } else {
        build_step_plan(cfg.steps, cfg.rectify_count, cfg.t_split, &sched)?
    };
    plan.eta = cfg.eta;
    plan.validate()?;
    Ok(plan)
}

/// Builds the step plan and writes it as JSON. `explain` prints the action
/// timeline in execution order.
pub fn cmd_plan(cfg: &RunConfig, explain: bool) -> Result<()> {
    let plan = build_plan(cfg)?;
    cfg.echo(&cfg.output)?;
    plan.save_json(cfg.output.join("plan.json"))?;
    println!(
        "plan: {} 2D steps, {} 3D steps, t_split {}, eta {}, T {}",
        plan.steps_2d, plan.rectify_count, plan.t_split, plan.eta, plan.t_total
    );
    if explain {
        for (i, action) in plan.actions.iter().enumerate() {
            match action {
                PlanAction::Denoise2D { t_from, t_to } => {
                    println!("{:3}. denoise {t_from} -> {t_to}", i + 1)
                }
                PlanAction::Rectify3D { t } => println!("{:3}. rectify at {t}", i + 1),
            }
        }
    }
    println!("wrote {}", cfg.output.join("plan.json").display());
    Ok(())
}

/// Loads `view{V}.png` targets for consecutive views, stopping at the first
/// missing index.
fn load_view_targets(dir: &Path, max: usize) -> Result<Vec<ImageBuffer>> {
    let mut targets = Vec::new();
    for v in 0..max {
        let path = dir.join(format!("view{v}.png"));
        if !path.exists() {
            break;
        }
        targets.push(ImageBuffer::load_png(&path)?);
    }
    if targets.is_empty() {
        return Err(Error::validation(format!(
            "no view0.png style targets under {}",
            dir.display()
        )));
    }
    Ok(targets)
}

/// Fits anchored Gaussian colors and opacities to target views, then reports
/// PSNR on the held-out remainder of the rig. Writes the fitted set, the
/// loss curve, and the PSNR table.
pub fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    let mesh = load_meshes(cfg, 1)?.remove(0);
    let cams = load_cameras(cfg, &mesh, cfg.anchor_views + cfg.render_views)?;
    let (targets, anchors) = match &cfg.targets {
        Some(dir) => {
            use rand::RngCore;
            let targets = load_view_targets(dir, cams.len())?;
            let seed = gak_core::rng::substream(cfg.seed, "fixture-scene", 0).next_u64();
            (targets, gak_core::mesh::sample_surface(&mesh, cfg.anchor_count, seed)?)
        }
        None => {
            let (scene, anchors) = reference_scene(cfg, &mesh)?;
            (reference_targets(&scene, &cams)?, anchors)
        }
    };
    let train = if cfg.train_views == 0 { cfg.anchor_views } else { cfg.train_views };
    if train > targets.len() {
        return Err(Error::validation(format!(
            "{train} training views requested, {} targets available",
            targets.len()
        )));
    }
    cfg.echo(&cfg.output)?;

    let (set, trace) = fit_gaussians(
        &targets[..train],
        &mesh,
        &cams[..train],
        &anchors,
        cfg.iters,
        cfg.learning_rate,
        cfg.lambda_rgb,
        cfg.lambda_mask,
    )?;
    set.save(cfg.output.join("fit.gset"))?;
    write_fit_trace_csv(&trace, cfg.output.join("loss.csv"))?;

    // Held-out views are the targets past the training split; when every
    // target was used for training the report covers the training views.
    let eval_from = if train < targets.len() { train } else { 0 };
    let mut rows = String::from("view,psnr\n");
    let mut sum = 0.0;
    let evaluated = &targets[eval_from..];
    for (i, target) in evaluated.iter().enumerate() {
        let v = eval_from + i;
        let img = render(&set, &cams[v])?;
        let value = psnr(&img, target)?;
        sum += value;
        rows.push_str(&format!("{v},{value}\n"));
    }
    let mean = sum / evaluated.len() as f64;
    rows.push_str(&format!("mean,{mean}\n"));
    let report = cfg.output.join("psnr.csv");
    std::fs::write(&report, rows).map_err(|e| Error::io(&report, e))?;
    println!(
        "fit {} gaussians, {} iterations, final loss {:.6}",
        set.len(),
        trace.last().map_or(0, |r| r.iteration),
        trace.last().map_or(f64::NAN, |r| r.l3d)
    );
    println!("held-out mean psnr {mean:.2} dB over {} views", evaluated.len());
    Ok(())
}

struct SampleSetup {
    meshes: Vec<gak_core::mesh::TriMesh>,
    cams: Vec<gak_core::camera::Camera>,
    den: Box<dyn gak_core::sampler::Denoiser2D>,
    scfg: SampleConfig,
    sched: gak_core::diffusion::NoiseSchedule,
    plan: StepPlan,
}

fn sample_setup(cfg: &RunConfig, frames: usize) -> Result<SampleSetup> {
    let meshes = load_meshes(cfg, frames)?;
    let n_cams = cfg.anchor_views + cfg.render_views;
    let cams = load_cameras(cfg, &meshes[0], n_cams)?;
    if cams.len() != n_cams {
        return Err(Error::validation(format!(
            "rig has {} cameras, run needs anchor_views + render_views = {n_cams}",
            cams.len()
        )));
    }
    let sched = make_schedule(cfg.t_total, cfg.beta_start, cfg.beta_end)?;
    let plan = build_plan(cfg)?;
    let targets = if cfg.denoiser == "shrink" {
        Vec::new()
    } else {
        oracle_targets(cfg, &meshes, &cams[..cfg.anchor_views])?
    };
    let den = make_stub_denoiser(&cfg.denoiser, targets, cfg.amplitude, cfg.seed, &sched)?;
    let rectify = RectifyConfig {
        anchor_views: cfg.anchor_views,
        render_views: cfg.render_views,
        offset_clamp: cfg.offset_clamp,
        log_scale_bound: cfg.log_scale_bound,
        stage1: cfg.stage1.clone().unwrap_or(RegressorSpec::Zero { out_dim: 4 }),
        stage2: cfg
            .stage2
            .clone()
            .unwrap_or(RegressorSpec::CopyColor { views: cfg.anchor_views, channels: 4 }),
    };
    let scfg = SampleConfig { rectify, anchor_count: cfg.anchor_count };
    scfg.validate()?;
    Ok(SampleSetup { meshes, cams, den, scfg, sched, plan })
}

/// Runs the sampling chain for a single frame and saves its images, Gaussian
/// set, and per-step trace.
pub fn cmd_sample(cfg: &RunConfig) -> Result<()> {
    let s = sample_setup(cfg, 1)?;
    cfg.echo(&cfg.output)?;
    let result = sample_frame(
        &s.plan,
        &s.meshes[0],
        &s.cams,
        s.den.as_ref(),
        &s.scfg,
        &s.sched,
        cfg.seed,
    )?;
    save_frame_outputs(&cfg.output, 0, &result)?;
    println!(
        "frame 0: {} views, {} gaussians, {} steps traced",
        result.images.len(),
        result.gaussians.as_ref().map_or(0, GaussianSet::len),
        result.trace.len()
    );
    Ok(())
}

/// Samples a frame sequence. The default mode carries the previous frame's
/// Gaussians forward and resumes denoising at t_resume; `independent` runs
/// the full chain per frame for temporal comparisons.
pub fn cmd_animate(cfg: &RunConfig, independent: bool) -> Result<()> {
    let s = sample_setup(cfg, cfg.frames)?;
    cfg.echo(&cfg.output)?;
    let frames = if independent {
        sample_frames_independent(
            &s.meshes, &s.cams, s.den.as_ref(), &s.scfg, &s.sched, &s.plan, cfg.seed,
        )?
    } else {
        sample_video(
            &s.meshes,
            &s.cams,
            s.den.as_ref(),
            &s.scfg,
            &s.sched,
            &s.plan,
            cfg.t_resume,
            cfg.seed,
        )?
    };
    for (f, frame) in frames.iter().enumerate() {
        save_frame_outputs(&cfg.output, f, frame)?;
    }
    let mode = if independent { "independent" } else { "consistent" };
    println!("{} frames sampled ({mode} mode)", frames.len());
    if frames.len() > 1 {
        let delta = median_interframe_delta(&frames, cfg.anchor_views)?;
        println!("median inter-frame mean abs delta {delta:.6}");
    }
    Ok(())
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    require_exists(dir, "image directory")?;
    let mut names = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Compares two directories of equally named PNGs and prints per-image and
/// mean PSNR as CSV. Identical images report infinite PSNR.
pub fn cmd_metrics(a_dir: &Path, b_dir: &Path) -> Result<()> {
    let names = png_names(a_dir)?;
    let b_names = png_names(b_dir)?;
    if names != b_names {
        return Err(Error::validation(format!(
            "directories hold different images: {} vs {}",
            names.len(),
            b_names.len()
        )));
    }
    if names.is_empty() {
        return Err(Error::validation("no png files to compare"));
    }
    println!("image,psnr");
    let mut sum = 0.0;
    for name in &names {
        let a = ImageBuffer::load_png(a_dir.join(name))?;
        let b = ImageBuffer::load_png(b_dir.join(name))?;
        let value = psnr(&a, &b)?;
        sum += value;
        println!("{name},{value}");
    }
    println!("mean,{}", sum / names.len() as f64);
    Ok(())
}
