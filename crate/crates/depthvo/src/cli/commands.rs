use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use depthvo_core::evalkit::{self, DepthMetrics, DriftOptions};
use depthvo_core::features::{matching_cost_profile_features, FeatureExtractor, FeatureKind};
use depthvo_core::grid::{ImageGrid, ValidityMask};
use depthvo_core::losses::{self, InverseDepthGrid, LossBreakdown, LossWeights, PreparedInstance, DEPTH_EPS};
use depthvo_core::se3::{twist_to_transform, Twist};
use depthvo_core::solver::{self, DirectOptions, Predictors, TrainOptions, TrainingInstance};
use depthvo_core::synthetic::{render_frames, SyntheticScene};

use super::{EvalDepthArgs, EvalOdomArgs, MatchCompareArgs, OptimizeArgs, SynthArgs, TrainArgs};
use crate::dataio::sequence::{frame_name, load_sequence};
use crate::dataio::{load_checkpoint, load_kitti_poses, load_pfm, save_checkpoint, save_kitti_poses, save_pfm, write_sequence, Calibration};
use crate::error::{self, Error, Result};

const BREAKDOWN_HEADER: &str = "l_ir,l_fr,l_ds,total";

fn breakdown_row(b: &LossBreakdown) -> String {
    format!("{},{},{},{}", b.l_ir, b.l_fr, b.l_ds, b.total)
}

fn load_instances(dir: &Path) -> Result<Vec<TrainingInstance>> {
    let (manifest, frames) = load_sequence(dir)?;
    let c = manifest.calibration;
    Ok(solver::assemble_instances(&frames, c.intrinsics, c.baseline)?)
}

fn load_many(dirs: &[PathBuf]) -> Result<Vec<TrainingInstance>> {
    let mut all = Vec::new();
    for d in dirs {
        all.extend(load_instances(d)?);
    }
    Ok(all)
}

fn extractor(kind: FeatureKind, channels: usize, seed: u64) -> Result<FeatureExtractor> {
    Ok(FeatureExtractor::from_kind(kind, channels, seed)?)
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut scene = SyntheticScene::preset(a.preset, a.frames, a.run.seed)?;
    if (a.width, a.height) != (scene.width, scene.height) {
        let sx = a.width as f64 / scene.width as f64;
        let sy = a.height as f64 / scene.height as f64;
        scene.intrinsics = scene.intrinsics.scaled(sx, sy)?;
        scene.width = a.width;
        scene.height = a.height;
    }
    let frames = render_frames(&scene)?;
    write_sequence(&a.run.out, &frames, &Calibration::new(scene.intrinsics, scene.baseline)?)?;
    println!("wrote {} frames of preset {} to {}", frames.len(), a.preset.name(), a.run.out.display());
    Ok(())
}

/// Inverse depth of `s` times the depth encoded by `d_inv`.
fn co_scaled(d_inv: &InverseDepthGrid, s: f64) -> Result<InverseDepthGrid> {
    let g = d_inv.grid().map(|v| (1.0 / (s / (v + DEPTH_EPS)) - DEPTH_EPS).max(0.0))?;
    Ok(InverseDepthGrid::new(g)?)
}

fn scaled_twist(t: &Twist, s: f64) -> Result<Twist> {
    Ok(Twist::new(*t.u(), t.v() * s)?)
}

/// Loss of the solution under depth and translation co-scaling; flat in
/// monocular mode, where scale is unobservable.
fn scale_diagnostic(p: &PreparedInstance<'_>, d_inv: &InverseDepthGrid, twist: &Twist, w: &LossWeights, sup: losses::Supervision) -> Result<String> {
    let eval = |s: f64| -> Result<(f64, f64)> {
        let g = losses::total_loss_prepared(p, &co_scaled(d_inv, s)?, &scaled_twist(twist, s)?, w, sup)?;
        let b = g.breakdown;
        let temporal = w.lambda_ir * b.temporal.l_ir + w.lambda_fr * b.temporal.l_fr;
        Ok((temporal, b.total))
    };
    let (t1, total1) = eval(1.0)?;
    let mut csv = String::from("scale,temporal_reconstruction,total,temporal_rel_change,total_rel_change\n");
    for s in [0.5, 1.0, 2.0] {
        let (t, total) = eval(s)?;
        writeln!(csv, "{s},{t},{total},{},{}", (t - t1) / t1.abs().max(f64::MIN_POSITIVE), (total - total1) / total1.abs().max(f64::MIN_POSITIVE)).unwrap();
    }
    Ok(csv)
}

pub fn optimize(a: &OptimizeArgs) -> Result<()> {
    if !(a.init_depth > 0.0) {
        return Err(Error::Data(format!("init-depth must be positive, got {}", a.init_depth)));
    }
    let instances = load_instances(&a.sequence)?;
    let n = a.max_instances.unwrap_or(instances.len()).min(instances.len());
    if n == 0 {
        return Err(Error::Data("no instances to optimize".into()));
    }
    let e = extractor(a.loss.features, instances[0].ref_image.channels(), a.run.seed)?;
    let options = DirectOptions {
        weights: a.loss.weights()?,
        supervision: a.loss.mode,
        iterations: a.iterations,
        lr: a.lr,
        beta1: a.loss.beta1,
        beta2: a.loss.beta2,
        ..Default::default()
    };
    let out = &a.run.out;
    let mut history = format!("instance,iteration,{BREAKDOWN_HEADER}\n");
    let mut per_instance = String::from("instance,final_total,abs_rel\n");
    let mut relatives = Vec::with_capacity(n);
    let mut abs_rels = Vec::new();
    let mut diagnostic = String::new();
    for (k, inst) in instances.iter().take(n).enumerate() {
        let init = InverseDepthGrid::constant(inst.height(), inst.width(), 1.0 / a.init_depth)?;
        let report = solver::optimize_direct(inst, &init, &Twist::zero(), &e, &options, |it, b| {
            writeln!(history, "{k},{it},{}", breakdown_row(b)).unwrap();
        })?;
        let depth = report.d_inv.to_depth();
        save_pfm(&out.join("depth").join(format!("{}.pfm", frame_name(k))), &depth)?;
        relatives.push(twist_to_transform(&report.twist));
        let abs_rel = match &inst.ground_truth {
            Some(gt) => {
                let m = evalkit::depth_metrics(&depth, &gt.depth, a.cap, None)?;
                abs_rels.push(m.abs_rel);
                m.abs_rel.to_string()
            }
            None => "NA".into(),
        };
        let last = report.history.last().expect("at least one iteration");
        writeln!(per_instance, "{k},{},{abs_rel}", last.total).unwrap();
        log::info!("instance {k}/{n}: total {} abs_rel {abs_rel}", last.total);
        if k == 0 {
            let p = PreparedInstance::new(inst, &e)?;
            diagnostic = scale_diagnostic(&p, &report.d_inv, &report.twist, &options.weights, options.supervision)?;
        }
    }
    save_kitti_poses(&out.join("relative_poses.txt"), &relatives)?;
    save_kitti_poses(&out.join("trajectory.txt"), evalkit::integrate_trajectory(&relatives)?.poses())?;
    error::write(&out.join("history.csv"), history)?;
    error::write(&out.join("instances.csv"), per_instance)?;
    error::write(&out.join("scale_diagnostic.csv"), &diagnostic)?;
    let mut summary = format!("instances={n}\nmode={}\n", a.loss.mode.name());
    if !abs_rels.is_empty() {
        writeln!(summary, "mean_abs_rel={}", abs_rels.iter().sum::<f64>() / abs_rels.len() as f64).unwrap();
    }
    error::write(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    if a.loss.mode == losses::Supervision::Monocular {
        println!("scale diagnostic (depth and translation co-scaled):\n{diagnostic}");
    }
    Ok(())
}

/// Mean abs_rel and the median predicted/true depth ratio over instances with ground truth.
fn depth_quality(p: &mut Predictors, instances: &[TrainingInstance], cap: f64) -> Result<Option<(f64, f64)>> {
    let mut abs_rel = Vec::new();
    let mut ratios = Vec::new();
    for inst in instances {
        let Some(gt) = &inst.ground_truth else { continue };
        let (d_inv, _) = p.predict(inst)?;
        let depth = d_inv.to_depth();
        abs_rel.push(evalkit::depth_metrics(&depth, &gt.depth, cap, None)?.abs_rel);
        for (pred, g) in depth.data().iter().zip(gt.depth.data()) {
            if *g > 0.0 && *g <= cap {
                ratios.push(pred.clamp(evalkit::DEPTH_FLOOR, cap) / g);
            }
        }
    }
    if ratios.is_empty() {
        return Ok(None);
    }
    ratios.sort_by(f64::total_cmp);
    Ok(Some((abs_rel.iter().sum::<f64>() / abs_rel.len() as f64, ratios[ratios.len() / 2])))
}

struct RunOutcome {
    name: &'static str,
    lambda_fr: f64,
    heldout_initial: Option<f64>,
    heldout_final: Option<f64>,
    quality: Option<(f64, f64)>,
}

fn opt_str(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

fn train_run(a: &TrainArgs, name: &'static str, weights: LossWeights, out: &Path, train: &[PreparedInstance<'_>], heldout: &[PreparedInstance<'_>], eval_set: &[TrainingInstance]) -> Result<RunOutcome> {
    let mut p = match &a.resume {
        Some(path) => load_checkpoint(path)?,
        None => Predictors::new(a.run.seed, a.lr.unwrap_or(1e-3))?,
    };
    if let Some(lr) = a.lr {
        p.set_lr(lr);
    }
    for adam in [&mut p.depth_adam, &mut p.pose_adam] {
        adam.beta1 = a.loss.beta1;
        adam.beta2 = a.loss.beta2;
    }
    let sup = a.loss.mode;
    let checkpoint = out.join("checkpoint.txt");
    let heldout_loss = |p: &mut Predictors| -> Result<Option<f64>> {
        if heldout.is_empty() { Ok(None) } else { Ok(Some(solver::mean_loss(heldout, p, &weights, sup)?)) }
    };
    let heldout_initial = heldout_loss(&mut p)?;
    let mut curve = format!("epoch,instance,{BREAKDOWN_HEADER}\n");
    let mut epochs = String::from("epoch,lr,train_total,heldout_total\n");
    let options = TrainOptions { weights, supervision: sup, epochs: 1 };
    for _ in 0..a.epochs {
        let r = solver::train_predictors(train, &mut p, &options, |ep, i, b| {
            writeln!(curve, "{ep},{i},{}", breakdown_row(b)).unwrap();
        });
        let r = match r {
            Ok(r) => r,
            Err(e) => {
                save_checkpoint(&checkpoint, &p)?;
                error::write(&out.join("loss_curve.csv"), &curve)?;
                return Err(e.into());
            }
        };
        let h = heldout_loss(&mut p)?;
        log::info!("{name} epoch {}: train {} heldout {}", p.epoch - 1, r.epoch_losses[0], opt_str(h));
        writeln!(epochs, "{},{},{},{}", p.epoch - 1, p.depth_adam.lr, r.epoch_losses[0], opt_str(h)).unwrap();
    }
    save_checkpoint(&checkpoint, &p)?;
    error::write(&out.join("loss_curve.csv"), &curve)?;
    error::write(&out.join("epochs.csv"), &epochs)?;
    let heldout_final = heldout_loss(&mut p)?;
    let quality = depth_quality(&mut p, eval_set, a.cap)?;
    let mut summary = format!("epochs_completed={}\nlr={}\nlambda_fr={}\n", p.epoch, p.depth_adam.lr, weights.lambda_fr);
    writeln!(summary, "heldout_initial={}\nheldout_final={}", opt_str(heldout_initial), opt_str(heldout_final)).unwrap();
    if let (Some(i), Some(f)) = (heldout_initial, heldout_final) {
        writeln!(summary, "heldout_ratio={}", f / i).unwrap();
    }
    if let Some((abs_rel, median)) = quality {
        writeln!(summary, "abs_rel={abs_rel}\nmedian_depth_ratio={median}").unwrap();
    }
    error::write(&out.join("summary.txt"), &summary)?;
    Ok(RunOutcome { name, lambda_fr: weights.lambda_fr, heldout_initial, heldout_final, quality })
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let train = load_many(&a.sequence)?;
    let heldout = load_many(&a.heldout)?;
    if train.is_empty() {
        return Err(Error::Data("training sequences produced no instances".into()));
    }
    let e = extractor(a.loss.features, train[0].ref_image.channels(), a.run.seed)?;
    let tp = solver::prepare_all(&train, &e)?;
    let hp = solver::prepare_all(&heldout, &e)?;
    let mut weights = a.loss.weights()?;
    if a.no_feature_loss {
        weights.lambda_fr = 0.0;
    }
    let eval_set = if heldout.is_empty() { &train } else { &heldout };
    let out = &a.run.out;
    if !a.paired {
        train_run(a, "main", weights, out, &tp, &hp, eval_set)?;
        print!("{}", error::read_text(&out.join("summary.txt"))?);
        return Ok(());
    }
    let feature = LossWeights { lambda_fr: a.loss.lambda_fr, ..weights };
    let plain = LossWeights { lambda_fr: 0.0, ..weights };
    let runs = [
        train_run(a, "feature", feature, &out.join("feature"), &tp, &hp, eval_set)?,
        train_run(a, "no-feature", plain, &out.join("no-feature"), &tp, &hp, eval_set)?,
    ];
    let mut table = String::from("run,lambda_fr,heldout_initial,heldout_final,abs_rel,median_depth_ratio\n");
    for r in &runs {
        let (abs_rel, median) = (r.quality.map(|q| q.0), r.quality.map(|q| q.1));
        writeln!(table, "{},{},{},{},{},{}", r.name, r.lambda_fr, opt_str(r.heldout_initial), opt_str(r.heldout_final), opt_str(abs_rel), opt_str(median)).unwrap();
    }
    error::write(&out.join("paired.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn depth_pairs(pred: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if !gt.is_dir() {
        let name = gt.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        return Ok(vec![(name, pred.to_path_buf(), gt.to_path_buf())]);
    }
    let mut names: Vec<String> = std::fs::read_dir(gt)
        .map_err(|e| Error::Io { path: gt.to_path_buf(), source: e })?
        .filter_map(|entry| entry.ok())
        .map(|entry| entry.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pfm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Data(format!("no .pfm files in {}", gt.display())));
    }
    Ok(names.into_iter().map(|n| (n.clone(), pred.join(&n), gt.join(&n))).collect())
}

const METRIC_NAMES: [&str; 7] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"];

fn metric_values(m: &DepthMetrics) -> [f64; 7] {
    [m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3]
}

pub fn eval_depth(a: &EvalDepthArgs) -> Result<()> {
    let pairs = depth_pairs(&a.pred, &a.gt)?;
    let mask = match &a.mask {
        Some(path) => {
            let g = load_pfm(path)?;
            Some(ValidityMask::new(g.height(), g.width(), g.data().iter().map(|v| *v != 0.0).collect())?)
        }
        None => None,
    };
    let mut per_image = format!("file,cap,{},valid_count\n", METRIC_NAMES.join(","));
    let mut report = format!("images={}\n", pairs.len());
    let mut table = format!("{:>6} {}\n", "cap", METRIC_NAMES.iter().map(|n| format!("{n:>10}")).collect::<String>());
    for &cap in &a.cap {
        let mut sums = [0.0; 7];
        let mut valid = 0;
        for (name, pred, gt) in &pairs {
            let (p, g) = (load_pfm(pred)?, load_pfm(gt)?);
            let m = evalkit::depth_metrics(&first_channel(p), &first_channel(g), cap, mask.as_ref())?;
            let vals = metric_values(&m);
            let cols: Vec<String> = vals.iter().map(f64::to_string).collect();
            writeln!(per_image, "{name},{cap},{},{}", cols.join(","), m.valid_count).unwrap();
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
            valid += m.valid_count;
        }
        writeln!(report, "\ncap={cap}").unwrap();
        write!(table, "{cap:>6}").unwrap();
        for (n, s) in METRIC_NAMES.iter().zip(sums) {
            let mean = s / pairs.len() as f64;
            writeln!(report, "{n}={mean}").unwrap();
            write!(table, " {mean:>10.4}").unwrap();
        }
        writeln!(report, "valid_count={valid}").unwrap();
        table.push('\n');
    }
    error::write(&a.run.out.join("metrics.txt"), &report)?;
    error::write(&a.run.out.join("per_image.csv"), &per_image)?;
    print!("{table}");
    Ok(())
}

fn first_channel(g: ImageGrid) -> ImageGrid {
    if g.channels() == 1 { g } else { g.channel(0) }
}

pub fn eval_odom(a: &EvalOdomArgs) -> Result<()> {
    let pred = load_kitti_poses(&a.pred)?;
    let gt = load_kitti_poses(&a.gt)?;
    if pred.len() != gt.len() {
        return Err(Error::Data(format!("{} predicted poses for {} ground-truth poses", pred.len(), gt.len())));
    }
    let range = a.start_frame..usize::MAX;
    let (mut pred, gt) = (pred.restrict(range.clone()), gt.restrict(range));
    let mut report = String::new();
    if a.align_scale {
        let (s, scaled) = evalkit::align_scale(&pred, &gt)?;
        pred = scaled;
        writeln!(report, "scale={s}").unwrap();
    }
    let options = DriftOptions { lengths: a.lengths.clone(), stride: a.stride };
    let m = evalkit::odometry_drift(&pred, &gt, &options)?;
    writeln!(report, "t_err={}\nr_err={}\nsegments={}\nempty={}", m.t_err, m.r_err, m.segments, m.empty).unwrap();
    let mut bins = String::from("length,t_err,r_err,count\n");
    for b in &m.per_length {
        writeln!(bins, "{},{},{},{}", b.length, opt_str(b.t_err), opt_str(b.r_err), b.count).unwrap();
    }
    error::write(&a.run.out.join("odometry.txt"), &report)?;
    error::write(&a.run.out.join("per_length.csv"), &bins)?;
    println!("t_err {:.4} %   r_err {:.4} deg/100m   ({} segments)", m.t_err, m.r_err, m.segments);
    Ok(())
}

pub fn match_compare(a: &MatchCompareArgs) -> Result<()> {
    let (left, right) = match &a.sequence {
        Some(dir) => {
            let (_, mut frames) = load_sequence(dir)?;
            if a.frame >= frames.len() {
                return Err(Error::Data(format!("frame {} out of range", a.frame)));
            }
            let f = frames.swap_remove(a.frame);
            let right = f.right.ok_or_else(|| Error::Data(format!("frame {} has no right image", a.frame)))?;
            (f.left, right)
        }
        None => {
            let scene = SyntheticScene::preset(a.preset, a.frame + 1, a.run.seed)?;
            let f = render_frames(&scene)?.swap_remove(a.frame);
            (f.left, f.right)
        }
    };
    let row = a.row.unwrap_or(left.height() / 2);
    let col = a.col.unwrap_or(left.width() / 2);
    let range = a.min_disparity..=a.max_disparity;
    let photometric = matching_cost_profile_features(&left, &right, row, col, range.clone(), a.photometric_radius)?;
    let e = extractor(a.features, left.channels(), a.run.seed)?;
    let feature = matching_cost_profile_features(&e.extract(&left)?, &e.extract(&right)?, row, col, range, a.radius)?;
    let mut csv = String::from("disparity,photometric,feature\n");
    for ((d, p), f) in photometric.disparities.iter().zip(&photometric.costs).zip(&feature.costs) {
        writeln!(csv, "{d},{p},{f}").unwrap();
    }
    let argmin = |p: &depthvo_core::features::CostProfile| p.unique_argmin(1e-12).map_or_else(|| "none".into(), |d| d.to_string());
    let summary = format!(
        "row={row}\ncol={col}\nfeatures={}\nphotometric_flatness={}\nphotometric_argmin={}\nfeature_flatness={}\nfeature_argmin={}\ntruncated={}\n",
        a.features.name(),
        photometric.flatness(),
        argmin(&photometric),
        feature.flatness(),
        argmin(&feature),
        photometric.truncated
    );
    error::write(&a.run.out.join("curves.csv"), &csv)?;
    error::write(&a.run.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}
