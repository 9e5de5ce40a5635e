//! Noise schedules, forward noising, DDIM updates, and the interleaved
//! 2D/3D step plan.
//!
//! Images are noised and denoised channel-wise on RGB; the alpha channel
//! rides along untouched (it carries coverage, not signal). All algebra runs
//! on the cumulative products `alpha_bar`, with `alpha_bar[0] = 1` exactly so
//! a final step to t = 0 returns the clean estimate unchanged.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgbuf::ImageBuffer;

pub const DEFAULT_T: u32 = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Variance schedule plus its derived cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// beta[i] is the step variance at t = i + 1.
    beta: Vec<f64>,
    /// alpha_bar[t] for t = 0..=T; alpha_bar[0] = 1 exactly.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step variances.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid_input("schedule needs at least one step"));
        }
        for (i, &b) in beta.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid_input(format!(
                    "beta[{}] = {b} outside (0, 1)",
                    i + 1
                )));
            }
            if i > 0 && b < beta[i - 1] {
                return Err(Error::invalid_input(format!(
                    "beta must be nondecreasing, beta[{}] = {b} < beta[{}] = {}",
                    i + 1,
                    i,
                    beta[i - 1]
                )));
            }
        }
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for &b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule { beta, alpha_bar })
    }

    pub fn t_max(&self) -> u32 {
        self.beta.len() as u32
    }

    /// Step variance at t, 1 <= t <= T.
    pub fn beta(&self, t: u32) -> f64 {
        assert!(t >= 1 && t <= self.t_max(), "beta index {t} out of range");
        self.beta[(t - 1) as usize]
    }

    pub fn alpha(&self, t: u32) -> f64 {
        1.0 - self.beta(t)
    }

    /// Cumulative product at t, 0 <= t <= T.
    pub fn alpha_bar(&self, t: u32) -> f64 {
        assert!(t <= self.t_max(), "alpha_bar index {t} out of range");
        self.alpha_bar[t as usize]
    }
}

/// Linear variance schedule over t = 1..=T.
pub fn make_schedule(t_total: u32, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_total < 1 {
        return Err(Error::invalid_input("schedule needs T >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid_input(format!(
            "require 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let beta = (1..=t_total)
        .map(|t| {
            if t_total == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (t - 1) as f64 / (t_total - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

fn check_views(name: &str, a: &[ImageBuffer], b: &[ImageBuffer]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid_input(format!(
            "{name}: got {} views against {}",
            b.len(),
            a.len()
        )));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if !x.same_shape(y) {
            return Err(Error::invalid_input(format!(
                "{name}: view {i} is {}x{} against {}x{}",
                y.width, y.height, x.width, x.height
            )));
        }
    }
    Ok(())
}

/// Forward noising: x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps,
/// applied identically to every view. Alpha channels pass through from `x0`.
pub fn q_sample(
    x0: &[ImageBuffer],
    t: u32,
    eps: &[ImageBuffer],
    sched: &NoiseSchedule,
) -> Result<Vec<ImageBuffer>> {
    if t > sched.t_max() {
        return Err(Error::invalid_input(format!(
            "t = {t} beyond schedule length {}",
            sched.t_max()
        )));
    }
    check_views("q_sample noise", x0, eps)?;
    let a = sched.alpha_bar(t);
    let (ca, cb) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(img, e)| {
            let mut out = img.clone();
            for (o, n) in out.rgb.iter_mut().zip(&e.rgb) {
                *o = ca * *o + cb * *n;
            }
            out
        })
        .collect())
}

/// Noise implied by a clean estimate:
/// eps = (x_t - sqrt(alpha_bar_t) x0_hat) / sqrt(1 - alpha_bar_t).
/// Exact inverse of [`q_sample`] when the estimate is the true image. The
/// result is pure noise, so its alpha channels are zero.
pub fn predict_eps(
    xt: &[ImageBuffer],
    x0_hat: &[ImageBuffer],
    t: u32,
    sched: &NoiseSchedule,
) -> Result<Vec<ImageBuffer>> {
    if t < 1 || t > sched.t_max() {
        return Err(Error::invalid_input(format!(
            "noise prediction needs 1 <= t <= {}, got {t}",
            sched.t_max()
        )));
    }
    check_views("predict_eps", xt, x0_hat)?;
    let a = sched.alpha_bar(t);
    let (ca, inv) = (a.sqrt(), 1.0 / (1.0 - a).sqrt());
    Ok(xt
        .iter()
        .zip(x0_hat)
        .map(|(x, h)| {
            let mut out = ImageBuffer::zeros(x.width, x.height);
            for ((o, xv), hv) in out.rgb.iter_mut().zip(&x.rgb).zip(&h.rgb) {
                *o = (*xv - ca * *hv) * inv;
            }
            out
        })
        .collect())
}

/// One DDIM update from t to t_prev:
/// x_{t_prev} = sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev - sigma^2) eps_hat
///            + sigma eps_draw.
/// With sigma = 0 the update is deterministic; t_prev = 0 returns the clean
/// estimate exactly. Alpha channels pass through from `x0_hat`.
pub fn ddim_step(
    xt: &[ImageBuffer],
    x0_hat: &[ImageBuffer],
    t: u32,
    t_prev: u32,
    sigma: f64,
    eps_draw: Option<&[ImageBuffer]>,
    sched: &NoiseSchedule,
) -> Result<Vec<ImageBuffer>> {
    if !(t_prev < t && t <= sched.t_max()) {
        return Err(Error::invalid_input(format!(
            "require 0 <= t_prev < t <= {}, got t = {t}, t_prev = {t_prev}",
            sched.t_max()
        )));
    }
    check_views("ddim_step estimate", xt, x0_hat)?;
    let ab_prev = sched.alpha_bar(t_prev);
    if sigma * sigma > 1.0 - ab_prev {
        return Err(Error::invalid_input(format!(
            "sigma^2 = {} exceeds 1 - alpha_bar_prev = {}",
            sigma * sigma,
            1.0 - ab_prev
        )));
    }
    let noise = if sigma != 0.0 {
        let draw = eps_draw.ok_or_else(|| {
            Error::invalid_input("sigma > 0 requires a noise draw")
        })?;
        check_views("ddim_step noise", xt, draw)?;
        Some(draw)
    } else {
        None
    };
    let eps_hat = predict_eps(xt, x0_hat, t, sched)?;
    let c_dir = (1.0 - ab_prev - sigma * sigma).sqrt();
    let c_clean = ab_prev.sqrt();
    Ok(x0_hat
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let mut out = h.clone();
            for (k, o) in out.rgb.iter_mut().enumerate() {
                *o = c_clean * h.rgb[k] + c_dir * eps_hat[i].rgb[k];
                if let Some(draw) = noise {
                    *o += sigma * draw[i].rgb[k];
                }
            }
            out
        })
        .collect())
}

/// Stochasticity knob: eta = 0 is deterministic, eta = 1 is the standard
/// upper bound sqrt((1 - ab_prev)/(1 - ab_t)) * sqrt(1 - ab_t/ab_prev).
pub fn sigma_for(eta: f64, t: u32, t_prev: u32, sched: &NoiseSchedule) -> f64 {
    assert!(t_prev < t && t <= sched.t_max());
    if eta == 0.0 {
        return 0.0;
    }
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt()
}

/// One action of a sampling plan. A 2D step denoises from `t_from` to `t_to`;
/// a 3D rectification re-projects the views currently sitting at noise level
/// `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanAction {
    Denoise2D { t_from: u32, t_to: u32 },
    Rectify3D { t: u32 },
}

/// Ordered action list plus the parameters it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub actions: Vec<PlanAction>,
    pub steps_2d: u32,
    pub rectify_count: u32,
    pub t_split: u32,
    /// Stochasticity passed to [`sigma_for`] when the plan is executed.
    pub eta: f64,
    pub t_total: u32,
}

/// 2D timesteps tau_j = round(T (1 - j/S)) for j = 0..S, with tau_S = 0.
fn grid(t_total: u32, s: u32) -> Vec<u32> {
    (0..=s)
        .map(|j| {
            if j == s {
                0
            } else {
                (t_total as f64 * (1.0 - j as f64 / s as f64)).round() as u32
            }
        })
        .collect()
}

/// Builds the interleaved plan: S 2D steps over the uniform grid, a 3D step
/// after the first 2D step and after the 2D step whose timestep is nearest
/// `t_split` (ties to the earlier step), and the remaining k - 2 3D steps at
/// evenly interpolated positions between those two, shifting off collisions
/// to the next free position.
pub fn build_step_plan(s: u32, k: u32, t_split: u32, sched: &NoiseSchedule) -> Result<StepPlan> {
    let t_total = sched.t_max();
    if s < 2 {
        return Err(Error::invalid_input(format!("need at least two 2D steps, got {s}")));
    }
    if k < 2 {
        return Err(Error::invalid_input(format!(
            "need at least two 3D steps, got {k}"
        )));
    }
    if !(t_split > 0 && t_split < t_total) {
        return Err(Error::invalid_input(format!(
            "t_split must lie strictly inside (0, {t_total}), got {t_split}"
        )));
    }
    let taus = grid(t_total, s);
    if t_split >= taus[0] {
        return Err(Error::invalid_input(format!(
            "t_split = {t_split} is not below the first step at {}",
            taus[0]
        )));
    }
    for j in 0..s as usize {
        if taus[j] <= taus[j + 1] {
            return Err(Error::invalid_input(format!(
                "{s} steps cannot be spread over {t_total} timesteps"
            )));
        }
    }

    // Second anchor: 2D step index whose timestep is nearest t_split.
    let mut j_b = 0u32;
    let mut best = u32::MAX;
    for j in 0..s {
        let d = taus[j as usize].abs_diff(t_split);
        if d < best {
            best = d;
            j_b = j;
        }
    }
    if j_b == 0 {
        return Err(Error::invalid_input(format!(
            "t_split = {t_split} selects the first step; the initial 3D step already sits there"
        )));
    }
    let slots = (j_b - 1) as i64;
    if (k - 2) as i64 > slots {
        return Err(Error::invalid_input(format!(
            "{} middle 3D steps do not fit between step 0 and step {j_b}",
            k - 2
        )));
    }

    let mut middles: Vec<i64> = Vec::new();
    for i in 1..=(k as i64 - 2) {
        let raw = (j_b as f64 * i as f64 / (k as f64 - 1.0)).round() as i64;
        let mut c = raw.clamp(1, j_b as i64 - 1);
        while c < j_b as i64 && middles.contains(&c) {
            c += 1;
        }
        if c >= j_b as i64 {
            c = raw.clamp(1, j_b as i64 - 1);
            while c >= 1 && middles.contains(&c) {
                c -= 1;
            }
            if c < 1 {
                return Err(Error::invalid_input(
                    "no free position left for a middle 3D step",
                ));
            }
        }
        middles.push(c);
    }

    let mut actions = Vec::with_capacity((s + k) as usize);
    for j in 0..s {
        actions.push(PlanAction::Denoise2D {
            t_from: taus[j as usize],
            t_to: taus[j as usize + 1],
        });
        if j == 0 || j == j_b || middles.contains(&(j as i64)) {
            actions.push(PlanAction::Rectify3D {
                t: taus[j as usize + 1],
            });
        }
    }
    let plan = StepPlan {
        actions,
        steps_2d: s,
        rectify_count: k,
        t_split,
        eta: 0.0,
        t_total,
    };
    plan.validate()?;
    Ok(plan)
}

/// Plan with no 3D steps at all: the plain DDIM baseline.
pub fn denoise_only_plan(s: u32, sched: &NoiseSchedule) -> Result<StepPlan> {
    let t_total = sched.t_max();
    if s < 2 {
        return Err(Error::invalid_input(format!("need at least two 2D steps, got {s}")));
    }
    let taus = grid(t_total, s);
    for j in 0..s as usize {
        if taus[j] <= taus[j + 1] {
            return Err(Error::invalid_input(format!(
                "{s} steps cannot be spread over {t_total} timesteps"
            )));
        }
    }
    let actions = (0..s as usize)
        .map(|j| PlanAction::Denoise2D {
            t_from: taus[j],
            t_to: taus[j + 1],
        })
        .collect();
    let plan = StepPlan {
        actions,
        steps_2d: s,
        rectify_count: 0,
        t_split: 0,
        eta: 0.0,
        t_total,
    };
    plan.validate()?;
    Ok(plan)
}

impl StepPlan {
    /// Structural checks: the 2D chain is strictly decreasing, contiguous, and
    /// ends at zero; 3D steps appear only directly after a 2D step, carry that
    /// step's target timestep, start right after the first 2D step, and stop
    /// once the plan passes its split point.
    pub fn validate(&self) -> Result<()> {
        let mut d2 = 0u32;
        let mut r3 = 0u32;
        let mut prev_to: Option<u32> = None;
        let mut last_was_r3 = false;
        for (i, a) in self.actions.iter().enumerate() {
            match *a {
                PlanAction::Denoise2D { t_from, t_to } => {
                    if t_from <= t_to {
                        return Err(Error::validation(format!(
                            "action {i}: 2D step does not descend ({t_from} -> {t_to})"
                        )));
                    }
                    match prev_to {
                        None => {
                            if t_from != self.t_total {
                                return Err(Error::validation(format!(
                                    "plan starts at {t_from}, schedule ends at {}",
                                    self.t_total
                                )));
                            }
                        }
                        Some(p) => {
                            if t_from != p {
                                return Err(Error::validation(format!(
                                    "action {i}: 2D chain broken ({t_from} after {p})"
                                )));
                            }
                        }
                    }
                    prev_to = Some(t_to);
                    d2 += 1;
                    last_was_r3 = false;
                }
                PlanAction::Rectify3D { t } => {
                    if last_was_r3 {
                        return Err(Error::validation(format!(
                            "action {i}: consecutive 3D steps"
                        )));
                    }
                    let Some(p) = prev_to else {
                        return Err(Error::validation("plan starts with a 3D step".to_string()));
                    };
                    if t != p {
                        return Err(Error::validation(format!(
                            "action {i}: 3D step at {t} does not match the preceding 2D target {p}"
                        )));
                    }
                    r3 += 1;
                    last_was_r3 = true;
                }
            }
        }
        if d2 != self.steps_2d {
            return Err(Error::validation(format!(
                "{d2} 2D steps recorded, header says {}",
                self.steps_2d
            )));
        }
        if r3 != self.rectify_count {
            return Err(Error::validation(format!(
                "{r3} 3D steps recorded, header says {}",
                self.rectify_count
            )));
        }
        if prev_to != Some(0) {
            return Err(Error::validation("final 2D step does not reach 0".to_string()));
        }
        if self.rectify_count > 0
            && (self.actions.len() < 2
                || !matches!(self.actions[1], PlanAction::Rectify3D { .. }))
        {
            return Err(Error::validation(
                "first 3D step must directly follow the first 2D step".to_string(),
            ));
        }
        if self.eta < 0.0 || !self.eta.is_finite() {
            return Err(Error::validation(format!("eta = {} invalid", self.eta)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(PlanJson::from(self)).expect("plan serializes")
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string_pretty(&PlanJson::from(self)).expect("plan serializes");
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<StepPlan> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let j: PlanJson = serde_json::from_str(&body)
            .map_err(|e| Error::malformed(path, e.line(), e.to_string()))?;
        StepPlan::try_from(j)
    }
}

#[derive(Serialize, Deserialize)]
struct ActionJson {
    op: String,
    t_from: u32,
    t_to: u32,
}

#[derive(Serialize, Deserialize)]
struct PlanJson {
    steps_2d: u32,
    rectify_count: u32,
    t_split: u32,
    eta: f64,
    t_total: u32,
    actions: Vec<ActionJson>,
}

impl From<&StepPlan> for PlanJson {
    fn from(p: &StepPlan) -> Self {
        let mut actions = Vec::with_capacity(p.actions.len());
        let mut cur_from = p.t_total;
        for a in &p.actions {
            match *a {
                PlanAction::Denoise2D { t_from, t_to } => {
                    cur_from = t_from;
                    actions.push(ActionJson { op: "d2".into(), t_from, t_to });
                }
                // A 3D step mirrors the 2D step it follows, which keeps every
                // record a (t_from, t_to) pair.
                PlanAction::Rectify3D { t } => {
                    actions.push(ActionJson { op: "r3".into(), t_from: cur_from, t_to: t });
                }
            }
        }
        PlanJson {
            steps_2d: p.steps_2d,
            rectify_count: p.rectify_count,
            t_split: p.t_split,
            eta: p.eta,
            t_total: p.t_total,
            actions,
        }
    }
}

impl TryFrom<PlanJson> for StepPlan {
    type Error = Error;

    fn try_from(j: PlanJson) -> Result<StepPlan> {
        let mut actions = Vec::with_capacity(j.actions.len());
        for a in &j.actions {
            match a.op.as_str() {
                "d2" => actions.push(PlanAction::Denoise2D { t_from: a.t_from, t_to: a.t_to }),
                "r3" => actions.push(PlanAction::Rectify3D { t: a.t_to }),
                other => {
                    return Err(Error::validation(format!("unknown plan op {other:?}")));
                }
            }
        }
        let plan = StepPlan {
            actions,
            steps_2d: j.steps_2d,
            rectify_count: j.rectify_count,
            t_split: j.t_split,
            eta: j.eta,
            t_total: j.t_total,
        };
        plan.validate()?;
        Ok(plan)
    }
}
