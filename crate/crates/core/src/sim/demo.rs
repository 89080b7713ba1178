use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gp::{fit_axis, FitOptions, FitReport, GpForceModel, GpForceModelData, GpHyper, MeanKind};
use crate::sim::env::total_contact_force;
use crate::sim::human::{human_force, SyntheticHuman};
use crate::sim::scenario::Scenario;
use crate::types::{Pose, Vec6, DOF};

#[derive(Clone, Debug, PartialEq)]
pub struct DemoSample {
    pub t: f64,
    pub x: [f64; DOF],
    /// Total external force felt at the tool [N].
    pub f: [f64; DOF],
}

/// One recorded demonstration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DemoLog {
    pub samples: Vec<DemoSample>,
}

fn demo_header() -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..DOF).map(|i| format!("x{i}")));
    h.extend((0..DOF).map(|i| format!("f{i}")));
    h
}

impl DemoLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(demo_header())?;
        for s in &self.samples {
            let rec: Vec<String> = std::iter::once(s.t).chain(s.x).chain(s.f).map(|v| v.to_string()).collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, name: &str) -> Result<DemoLog> {
        let csv_err = |msg: String| Error::Csv { path: name.to_string(), msg };
        let mut rd = csv::Reader::from_reader(input);
        let hdr: Vec<String> = rd.headers().map_err(|e| csv_err(e.to_string()))?.iter().map(String::from).collect();
        if hdr != demo_header() {
            return Err(csv_err(format!("expected columns {}", demo_header().join(","))));
        }
        let mut samples = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(e.to_string()))?;
            let mut vals = [0.0; 1 + 2 * DOF];
            for (i, v) in vals.iter_mut().enumerate() {
                *v = rec[i]
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| csv_err(format!("row {}: bad value `{}` in column {}", line + 2, &rec[i], hdr[i])))?;
            }
            let mut s = DemoSample { t: vals[0], x: [0.0; DOF], f: [0.0; DOF] };
            s.x.copy_from_slice(&vals[1..1 + DOF]);
            s.f.copy_from_slice(&vals[1 + DOF..]);
            samples.push(s);
        }
        if samples.is_empty() {
            return Err(csv_err("no samples".into()));
        }
        Ok(DemoLog { samples })
    }

    pub fn load(path: &Path) -> Result<DemoLog> {
        let file = std::fs::File::open(path)?;
        DemoLog::read_csv(file, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Period of the demonstrator's pressing effort while held at a wall [s].
const PRESS_PERIOD: f64 = 0.4;

/// Minimum-jerk-like cosine blend from 0 to 1.
fn blend(s: f64) -> (f64, f64) {
    let s = s.clamp(0.0, 1.0);
    (0.5 - 0.5 * (PI * s).cos(), 0.5 * PI * (PI * s).sin())
}

fn uniform3<R: Rng>(rng: &mut R, half: &[f64; 3]) -> [f64; 3] {
    let mut o = [0.0; 3];
    for i in 0..3 {
        if half[i] > 0.0 {
            o[i] = rng.random_range(-half[i]..=half[i]);
        }
    }
    o
}

/// Record guided sweeps toward goal `goal` of the scenario's human.
///
/// The tool follows a cosine-blended path through the configured waypoints
/// while the force sensor records the human's pull plus any contact.
pub fn generate_demos(sc: &Scenario, goal: usize, seed: u64) -> Result<Vec<DemoLog>> {
    sc.validate()?;
    if goal >= sc.human.goals.len() {
        return Err(Error::Config(format!("goal {goal} out of range ({} goals)", sc.human.goals.len())));
    }
    let cfg = &sc.gp.demos;
    if !(cfg.segment_time > 0.0 && cfg.dwell >= 0.0 && cfg.force_noise >= 0.0) {
        return Err(Error::Config("demo segment_time must be positive, dwell and force_noise non-negative".into()));
    }
    if cfg.max_contact_force.is_some_and(|c| !(c > 0.0)) {
        return Err(Error::Config("demo max_contact_force must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.force_noise).map_err(|e| Error::Config(e.to_string()))?;
    let ts = sc.robot.ts;
    let mut demos = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let walls: Vec<_> = sc.environment.walls.iter().map(|w| w.sample_episode(&mut rng)).collect();
        let start_off = uniform3(&mut rng, &cfg.start_jitter);
        let shift = uniform3(&mut rng, &cfg.task_jitter);
        let mut start = sc.robot.initial_pose;
        for i in 0..3 {
            start[i] += start_off[i];
        }
        let target = sc.human.goals[goal];
        let mut path: Vec<[f64; DOF]> = vec![start];
        for p in cfg.waypoints.iter().chain(std::iter::once(&target)) {
            let mut q = start;
            for i in 0..3 {
                q[i] = p[i] + shift[i];
            }
            path.push(q);
        }
        let human = SyntheticHuman {
            goals: vec![{
                let mut g = target;
                for i in 0..3 {
                    g[i] += shift[i];
                }
                g
            }],
            initial_goal: 0,
            switches: vec![],
            ..sc.human.clone()
        };
        let seg_steps = (cfg.segment_time / ts).round().max(1.0) as usize;
        let dwell_steps = (cfg.dwell / ts).round() as usize;
        let mut samples = Vec::new();
        let mut k = 0usize;
        let mut last = Vec6::from(start);
        for w in path.windows(2) {
            let (a, b) = (w[0], w[1]);
            for j in 0..seg_steps + dwell_steps {
                let (s, ds) = blend(j as f64 / seg_steps as f64);
                let moving = j < seg_steps;
                let mut x = Vec6::zeros();
                let mut v = Vec6::zeros();
                for i in 0..DOF {
                    x[i] = a[i] + s * (b[i] - a[i]);
                    if moving {
                        v[i] = ds * (b[i] - a[i]) / cfg.segment_time;
                    }
                }
                if let Some(cap) = cfg.max_contact_force {
                    // The demonstrator stops at the wall, pressing with an effort
                    // that swells between 60% and 100% of the cap.
                    let t = k as f64 * ts;
                    let effort = cap * (0.8 - 0.2 * (2.0 * PI * t / PRESS_PERIOD).cos());
                    for w in walls.iter().filter(|w| w.stiffness > 0.0) {
                        let limit = effort / w.stiffness;
                        if w.penetration(&x) > limit {
                            x[w.axis] = w.location + w.normal * limit;
                        }
                    }
                    v = (x - last) / ts;
                }
                last = x;
                let fc = total_contact_force(&walls, &x, &v).0;
                let mut f = fc;
                if cfg.include_human {
                    f += human_force(&human, &x, &v, 0.0).0;
                }
                let mut fa = [0.0; DOF];
                for i in 0..DOF {
                    fa[i] = f[i] + if i < 3 && cfg.force_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                }
                samples.push(DemoSample { t: k as f64 * ts, x: x.into(), f: fa });
                k += 1;
            }
        }
        demos.push(DemoLog { samples });
    }
    Ok(demos)
}

/// Evenly spaced subsample of at most `max_points` items.
fn subsample<T: Clone>(items: &[T], max_points: usize) -> Vec<T> {
    if items.len() <= max_points {
        return items.to_vec();
    }
    (0..max_points).map(|i| items[i * items.len() / max_points].clone()).collect()
}

/// Samples in order, with consecutive samples at an identical pose (a held
/// tool) merged into one carrying their mean force.
fn merge_repeated_poses(demos: &[DemoLog]) -> Vec<DemoSample> {
    let mut out: Vec<DemoSample> = Vec::new();
    for d in demos {
        let mut count = 0.0;
        for (i, s) in d.samples.iter().enumerate() {
            match out.last_mut() {
                Some(prev) if i > 0 && prev.x == s.x => {
                    count += 1.0;
                    for a in 0..DOF {
                        prev.f[a] += (s.f[a] - prev.f[a]) / count;
                    }
                }
                _ => {
                    out.push(s.clone());
                    count = 1.0;
                }
            }
        }
    }
    out
}

/// Fit one force model from demonstrations, with initial hyperparameters
/// scaled to the data on each axis.
/// Guided sweeps do not resolve structure finer than this [m]; shorter
/// length scales only chase disagreement between demonstrations.
const MIN_LENGTH_SCALE: f64 = 1e-3;

pub fn fit_from_demos(
    demos: &[DemoLog],
    mean: MeanKind,
    hinge_axes: &[usize],
    max_points: usize,
) -> Result<(GpForceModel, Vec<FitReport>)> {
    let all = merge_repeated_poses(demos);
    if all.is_empty() {
        return Err(Error::EmptyData("no demonstration samples".into()));
    }
    if max_points == 0 {
        return Err(Error::Config("max_points must be positive".into()));
    }
    let picked = subsample(&all, max_points);
    let poses: Vec<Pose> = picked.iter().map(|s| Pose::from_slice(&s.x)).collect();
    let mut axes = Vec::with_capacity(DOF);
    let mut reports = Vec::with_capacity(DOF);
    for axis in 0..DOF {
        let targets: Vec<f64> = picked.iter().map(|s| s.f[axis]).collect();
        let mu = targets.iter().sum::<f64>() / targets.len() as f64;
        let var = targets.iter().map(|t| (t - mu).powi(2)).sum::<f64>() / targets.len() as f64;
        let mut ls = [0.1; DOF];
        for (d, l) in ls.iter_mut().enumerate() {
            let (lo, hi) = poses.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[d]), hi.max(p[d])));
            if hi > lo {
                *l = (0.3 * (hi - lo)).clamp(1e-3, 1.0);
            }
        }
        let kind = match mean {
            MeanKind::Hinge if hinge_axes.is_empty() || hinge_axes.contains(&axis) => MeanKind::Hinge,
            _ => MeanKind::Zero,
        };
        let opts = FitOptions {
            init: GpHyper { signal_var: var.max(1e-2), noise_var: (0.01 * var).max(1e-3), length_scales: ls },
            length_scale_bounds: (MIN_LENGTH_SCALE, 10.0),
            ..FitOptions::default()
        };
        let (gp, rep) = fit_axis(&poses, &targets, axis, kind, &opts)?;
        axes.push(gp);
        reports.push(rep);
    }
    Ok((GpForceModel::new(axes)?, reports))
}

pub fn save_model(path: &Path, model: &GpForceModel, label: Option<String>) -> Result<()> {
    let text = serde_json::to_string_pretty(&model.to_data(label))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<GpForceModel> {
    let text = std::fs::read_to_string(path)?;
    let data: GpForceModelData = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    GpForceModel::from_data(&data)
}
