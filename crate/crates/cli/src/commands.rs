use std::fs;
use std::path::{Path, PathBuf};

use epiflow::flow_field::{FlowField, PixelGrid};
use epiflow::flow_optimizer::{
    evaluate_model, OptimizerConfig, Triplet, TripletObjective, TripletOptimizer, DEFAULT_LATTICE_SPACING,
};
use epiflow::geometry::{fundamental_from_pose, sed, FundamentalMatrix, Vec2};
use epiflow::io;
use epiflow::matcher::{match_keypoints, KeypointSet, MatchSet};
use epiflow::metrics::{
    corner_correctness, flow_error_stats, mma, pose_angular_errors, DEFAULT_CORNER_EPS, DEFAULT_POSE_THRESHOLD_DEG,
};
use epiflow::model_fit::{
    fit_fundamental_ransac, fit_homography_ransac, pose_from_essential, Homography, PointPair, RansacConfig,
};
use epiflow::supervision::{loss_sed, LossConfig, LossReport, TERM_BIT, TERM_CYC, TERM_SED};
use epiflow::synth_transform::{TransformRanges, TransformSampler};
use epiflow::synthetic::{noisy_lattice, Occluder, Rect, SyntheticTriplet, TripletOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CliError;
use crate::manifest::Manifest;
use crate::{EvalArgs, FitArgs, MatchArgs, ModelKind, OptimizeArgs, SedEvalArgs, SynthArgs, WarpArgs};

const TRIPLET_FILES: [&str; 4] = ["b_from_a.flo", "a_from_b.flo", "bp_from_b.flo", "b_from_bp.flo"];

/// Output directory plus the manifest describing how it was produced.
struct Run {
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn new(subcommand: &str, out: &Path) -> Self {
        Self { out: out.to_path_buf(), manifest: Manifest::new(subcommand) }
    }

    fn read(&mut self, role: &str, path: &Path) -> Result<Vec<u8>, CliError> {
        if !path.is_file() {
            return Err(CliError::usage(format!("input file not found: {}", path.display())));
        }
        let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.manifest.input(role, path, &bytes);
        Ok(bytes)
    }

    fn read_text(&mut self, role: &str, path: &Path) -> Result<String, CliError> {
        let bytes = self.read(role, path)?;
        String::from_utf8(bytes).map_err(|_| CliError::input(path, "not valid UTF-8 text"))
    }

    fn read_flo(&mut self, role: &str, path: &Path) -> Result<FlowField, CliError> {
        let bytes = self.read(role, path)?;
        io::read_flo(&bytes).map_err(|e| CliError::input(path, e))
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        fs::create_dir_all(&self.out).map_err(|e| CliError::Io(format!("{}: {e}", self.out.display())))?;
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.manifest.output(name);
        Ok(())
    }

    fn finish(mut self) -> Result<(), CliError> {
        let text = self.manifest.render();
        self.write("manifest.txt", text.as_bytes())
    }
}

fn parse_with<T>(path: &Path, text: &str, f: impl FnOnce(&str) -> Result<T, io::IoError>) -> Result<T, CliError> {
    f(text).map_err(|e| CliError::input(path, e))
}

fn load_loss_config(run: &mut Run, path: Option<&Path>) -> Result<LossConfig, CliError> {
    let mut cfg = LossConfig::default();
    if let Some(p) = path {
        let text = run.read_text("config", p)?;
        for (k, v) in parse_with(p, &text, io::parse_key_values)? {
            if !cfg.set_key(&k, &v)? {
                return Err(CliError::input(p, format!("unknown config key '{k}'")));
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_fundamental(
    run: &mut Run,
    cams: Option<&Path>,
    pose: Option<&Path>,
    fmat: Option<&Path>,
) -> Result<FundamentalMatrix, CliError> {
    if let Some(p) = fmat {
        let text = run.read_text("fmat", p)?;
        return parse_with(p, &text, io::parse_fundamental);
    }
    let (Some(c), Some(p)) = (cams, pose) else {
        return Err(CliError::usage("either --fmat or both --cams and --pose are required"));
    };
    let ctext = run.read_text("cams", c)?;
    let (ka, kb) = parse_with(c, &ctext, io::parse_cameras)?;
    let ptext = run.read_text("pose", p)?;
    let pose = parse_with(p, &ptext, io::parse_pose)?;
    fundamental_from_pose(&ka, &kb, &pose).map_err(|e| CliError::usage(e.to_string()))
}

fn report_csv(report: &LossReport) -> String {
    let mut s = String::from("term,value,count\n");
    for (name, value) in &report.per_term {
        s += &format!("{name},{value},{}\n", report.term_count(name));
    }
    s += &format!("total,{},\n", report.total);
    s
}

pub fn sed_eval(args: &SedEvalArgs) -> Result<(), CliError> {
    let mut run = Run::new("sed-eval", &args.out);
    let flow = run.read_flo("flow", &args.flow)?;
    let f = load_fundamental(&mut run, args.cams.as_deref(), args.pose.as_deref(), args.fmat.as_deref())?;
    let cfg = load_loss_config(&mut run, args.config.as_deref())?;
    run.manifest.config_entries("", cfg.entries());

    let (report, _) = loss_sed(&flow, &f, &cfg)?;
    let grid = flow.grid();
    let map: Vec<Option<f64>> = (0..grid.len())
        .map(|i| {
            if !flow.is_valid(i) {
                return None;
            }
            let x = grid.point(i);
            sed(&f, &x, &(x + flow.vector_at(i))).ok()
        })
        .collect();

    println!("sed {} over {} pixels", report.term(TERM_SED), report.term_count(TERM_SED));
    run.write("loss.csv", report_csv(&report).as_bytes())?;
    run.write("sed_map.flo", &io::write_scalar_flo(grid, &map))?;
    run.finish()
}

/// Optimizer, loss and lattice settings read from one key=value file.
fn load_optimize_config(run: &mut Run, path: Option<&Path>) -> Result<(OptimizerConfig, LossConfig, usize), CliError> {
    let mut opt = OptimizerConfig::default();
    let mut loss = LossConfig::default();
    let mut spacing = DEFAULT_LATTICE_SPACING;
    if let Some(p) = path {
        let text = run.read_text("config", p)?;
        for (k, v) in parse_with(p, &text, io::parse_key_values)? {
            if k == "spacing" {
                spacing = v
                    .parse()
                    .ok()
                    .filter(|&s| s > 0)
                    .ok_or_else(|| CliError::input(p, format!("spacing must be a positive integer, got '{v}'")))?;
            } else if !(opt.set_key(&k, &v)? || loss.set_key(&k, &v)?) {
                return Err(CliError::input(p, format!("unknown config key '{k}'")));
            }
        }
    }
    opt.validate()?;
    loss.validate()?;
    Ok((opt, loss, spacing))
}

fn f64_field(v: f64) -> String {
    format!("{v}")
}

pub fn optimize(args: &OptimizeArgs) -> Result<(), CliError> {
    let mut run = Run::new("optimize", &args.out);
    let grid = PixelGrid::new(args.size.0, args.size.1).map_err(|e| CliError::usage(e.to_string()))?;
    let f = load_fundamental(&mut run, Some(&args.cams), Some(&args.pose), None)?;
    let ttext = run.read_text("transform", &args.transform)?;
    let transform = parse_with(&args.transform, &ttext, io::parse_transform)?;
    if transform.domain() != grid {
        return Err(CliError::usage(format!(
            "transform domain {}x{} does not match --size {}x{}",
            transform.domain().width,
            transform.domain().height,
            grid.width,
            grid.height
        )));
    }
    let (cfg, loss_cfg, spacing) = load_optimize_config(&mut run, args.config.as_deref())?;
    if !(args.init_noise >= 0.0 && args.init_noise.is_finite()) {
        return Err(CliError::usage(format!("--init-noise must be non-negative, got {}", args.init_noise)));
    }
    run.manifest.seed(args.seed);
    run.manifest.config("size", format!("{}x{}", grid.width, grid.height));
    run.manifest.config("spacing", spacing);
    run.manifest.config("init_noise", args.init_noise);
    run.manifest.config_entries("", cfg.entries());
    run.manifest.config_entries("", loss_cfg.entries());

    let mut fields = Vec::with_capacity(4);
    for name in TRIPLET_FILES {
        let field = match &args.init {
            Some(dir) => {
                let field = run.read_flo(&format!("init.{name}"), &dir.join(name))?;
                if field.grid() != grid {
                    return Err(CliError::usage(format!("{}: grid does not match --size", dir.join(name).display())));
                }
                field
            }
            None => FlowField::zeros(grid),
        };
        fields.push(field);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut models = fields.iter().map(|fl| noisy_lattice(fl, spacing, args.init_noise, &mut rng));
    let init = Triplet::from_fn(|_| models.next().expect("four flows"));

    let gt = match &args.gt {
        Some(dir) => Some(run.read_flo("gt.b_from_a.flo", &dir.join(TRIPLET_FILES[0]))?),
        None => None,
    };

    let objective = TripletObjective::new(grid, f, &transform, loss_cfg, cfg.losses)?;
    let mut trace = String::from("iter,total,sed,cyc,bit");
    if gt.is_some() {
        trace += ",aepe_vs_gt";
    }
    trace.push('\n');
    let mut iter = 0usize;
    let mut observe_err = None;
    let outcome = TripletOptimizer::new(init, objective, cfg)?.run_observed(|models, report| {
        let mut row = format!(
            "{iter},{},{},{},{}",
            f64_field(report.total),
            f64_field(report.term(TERM_SED)),
            f64_field(report.term(TERM_CYC)),
            f64_field(report.term(TERM_BIT))
        );
        if let Some(gt) = &gt {
            let pred = evaluate_model(&models.b_from_a, grid);
            match epiflow::metrics::aepe(&pred, gt, None) {
                Ok(e) => row += &format!(",{}", f64_field(e)),
                Err(e) => {
                    observe_err.get_or_insert(e);
                }
            }
        }
        row.push('\n');
        trace += &row;
        iter += 1;
    })?;
    if let Some(e) = observe_err {
        return Err(e.into());
    }

    let best = &outcome.trace[outcome.best_iteration];
    println!(
        "best iterate {} of {}: total {} (initial {})",
        outcome.best_iteration,
        outcome.trace.len() - 1,
        best.total,
        outcome.trace[0].total
    );
    let flows = outcome.models.map(|m| evaluate_model(m, grid));
    for (name, flow) in TRIPLET_FILES.iter().zip(flows.each()) {
        run.write(name, &io::write_flo(flow))?;
    }
    run.write("trace.csv", trace.as_bytes())?;
    run.finish()
}

fn load_keypoints(run: &mut Run, role: &str, path: &Path) -> Result<KeypointSet, CliError> {
    let bytes = run.read(role, path)?;
    let records = io::read_keypoints(&bytes).map_err(|e| CliError::input(path, e))?;
    records.to_set().map_err(|e| CliError::input(path, e))
}

pub fn match_cmd(args: &MatchArgs) -> Result<(), CliError> {
    if !(args.radius >= 0.0 && args.radius.is_finite()) {
        return Err(CliError::usage(format!("--radius must be non-negative, got {}", args.radius)));
    }
    let mut run = Run::new("match", &args.out);
    let a = load_keypoints(&mut run, "kpts_a", &args.kpts_a)?;
    let b = load_keypoints(&mut run, "kpts_b", &args.kpts_b)?;
    let fba = run.read_flo("flow_ba", &args.flow_ba)?;
    let fab = run.read_flo("flow_ab", &args.flow_ab)?;
    run.manifest.config("radius", args.radius);

    let matches = if a.is_empty() || b.is_empty() {
        MatchSet::default()
    } else {
        match_keypoints(&a, &b, &fba, &fab, args.radius)?
    };
    println!(
        "{} matches ({} flow-guided, {} descriptor)",
        matches.len(),
        matches.stage_count(epiflow::matcher::Stage::FlowGuided),
        matches.stage_count(epiflow::matcher::Stage::Descriptor)
    );
    run.write("matches.csv", io::write_match_set_csv(&matches, &a, &b).as_bytes())?;
    run.finish()
}

fn load_pairs(run: &mut Run, role: &str, path: &Path) -> Result<Vec<PointPair>, CliError> {
    let text = run.read_text(role, path)?;
    parse_with(path, &text, io::read_any_pairs_csv)
}

fn load_homography(run: &mut Run, role: &str, path: &Path) -> Result<Homography, CliError> {
    let text = run.read_text(role, path)?;
    let m = parse_with(path, &text, io::parse_matrix3)?;
    Homography::new(m).map_err(|e| CliError::input(path, e))
}

fn load_pose(run: &mut Run, role: &str, path: &Path) -> Result<epiflow::geometry::RelativePose, CliError> {
    let text = run.read_text(role, path)?;
    parse_with(path, &text, io::parse_pose)
}

fn metric_list(args: &EvalArgs, default: &[&str], allowed: &[&str]) -> Result<Vec<String>, CliError> {
    let list: Vec<String> = if args.metrics.is_empty() {
        default.iter().map(|s| s.to_string()).collect()
    } else {
        args.metrics.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
    };
    for m in &list {
        if !allowed.contains(&m.as_str()) {
            return Err(CliError::usage(format!(
                "metric '{m}' is not available here; choose from {}",
                allowed.join(",")
            )));
        }
    }
    Ok(list)
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut run = Run::new("eval", &args.out);
    let mut rows: Vec<(String, f64)> = Vec::new();

    if let (Some(pred_path), Some(gt_path)) = (&args.pred, &args.gt) {
        let metrics = metric_list(args, &["aepe", "f1", "acc"], &["aepe", "f1", "acc"])?;
        run.manifest.config("mode", "flow");
        run.manifest.config("metrics", metrics.join(","));
        let pred = run.read_flo("pred", pred_path)?;
        let gt = run.read_flo("gt", gt_path)?;
        let stats = flow_error_stats(&pred, &gt, None, &[1, 3, 5])?;
        for m in &metrics {
            match m.as_str() {
                "aepe" => rows.push(("aepe".into(), stats.aepe)),
                "f1" => rows.push(("f1".into(), stats.f1)),
                _ => rows.extend(stats.acc_at.iter().map(|(t, v)| (format!("acc@{t}"), *v))),
            }
        }
        rows.push(("pixels".into(), stats.count as f64));
    } else if let (Some(m_path), Some(h_path)) = (&args.matches, &args.gt_h) {
        let metrics = metric_list(args, &["mma", "corners"], &["mma", "corners"])?;
        run.manifest.config("mode", "matches");
        run.manifest.config("metrics", metrics.join(","));
        let pairs = load_pairs(&mut run, "matches", m_path)?;
        let gt_h = load_homography(&mut run, "gt_h", h_path)?;
        for m in &metrics {
            if m == "mma" {
                let n = args.num_features.unwrap_or(pairs.len());
                let stats = mma(&pairs, &gt_h, &(1..=10).collect::<Vec<u32>>(), n)?;
                rows.extend(stats.mma.iter().map(|(t, v)| (format!("mma@{t}"), *v)));
                rows.push(("matches".into(), stats.num_matches as f64));
            } else {
                let (w, h) = args.size.ok_or_else(|| CliError::usage("corner correctness needs --size WxH"))?;
                let est = match &args.est_h {
                    Some(p) => load_homography(&mut run, "est_h", p)?,
                    None => {
                        let cfg =
                            RansacConfig { threshold: args.threshold, seed: args.seed, ..RansacConfig::default() };
                        run.manifest.seed(args.seed);
                        run.manifest.config("threshold", args.threshold);
                        fit_homography_ransac(&pairs, &cfg)?.model
                    }
                };
                let (err, ok) = corner_correctness(&est, &gt_h, w, h, DEFAULT_CORNER_EPS);
                rows.push(("corner_error".into(), err));
                rows.push((format!("corner_correct@{DEFAULT_CORNER_EPS}"), if ok { 1.0 } else { 0.0 }));
            }
        }
    } else if let (Some(est_path), Some(gt_path)) = (&args.est_pose, &args.gt_pose) {
        run.manifest.config("mode", "pose");
        let est = load_pose(&mut run, "est_pose", est_path)?;
        let gt = load_pose(&mut run, "gt_pose", gt_path)?;
        let e = pose_angular_errors(&est, &gt)?;
        rows.push(("rotation_deg".into(), e.rotation_deg));
        rows.push(("translation_deg".into(), e.translation_deg));
        let ok = e.correct_at(DEFAULT_POSE_THRESHOLD_DEG);
        rows.push((format!("pose_correct@{DEFAULT_POSE_THRESHOLD_DEG}"), if ok { 1.0 } else { 0.0 }));
    } else {
        return Err(CliError::usage("choose one of --pred/--gt, --matches/--gt-h or --est-pose/--gt-pose"));
    }

    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut csv = String::from("metric,value\n");
    for (k, v) in &rows {
        println!("{k:<width$}  {v}");
        csv += &format!("{k},{v}\n");
    }
    run.write("metrics.csv", csv.as_bytes())?;
    run.finish()
}

fn inliers_csv(mask: &[bool]) -> String {
    let mut s = String::from("index,inlier\n");
    for (i, &m) in mask.iter().enumerate() {
        s += &format!("{i},{}\n", u8::from(m));
    }
    s
}

pub fn fit(args: &FitArgs) -> Result<(), CliError> {
    let mut run = Run::new("fit", &args.out);
    let pairs = load_pairs(&mut run, "matches", &args.matches)?;
    let cfg = RansacConfig {
        threshold: args.threshold,
        max_iterations: args.max_iterations,
        confidence: args.confidence,
        seed: args.seed,
    };
    cfg.validate()?;
    run.manifest.seed(args.seed);
    run.manifest.config("model", args.model.name());
    run.manifest.config("threshold", args.threshold);
    run.manifest.config("max_iterations", args.max_iterations);
    run.manifest.config("confidence", args.confidence);

    let (model_text, mask, iterations) = match args.model {
        ModelKind::Homography => {
            let r = fit_homography_ransac(&pairs, &cfg)?;
            (io::format_matrix3(r.model.matrix()), r.inliers, r.iterations)
        }
        ModelKind::Fundamental => {
            let r = fit_fundamental_ransac(&pairs, &cfg)?;
            (io::format_matrix3(r.model.matrix()), r.inliers, r.iterations)
        }
        ModelKind::Pose => {
            let cams = args.cams.as_deref().ok_or_else(|| CliError::usage("--model pose needs --cams"))?;
            let text = run.read_text("cams", cams)?;
            let (ka, kb) = parse_with(cams, &text, io::parse_cameras)?;
            let r = fit_fundamental_ransac(&pairs, &cfg)?;
            let inlier_pairs: Vec<PointPair> =
                pairs.iter().zip(&r.inliers).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
            let pose = pose_from_essential(&r.model, &ka, &kb, &inlier_pairs)?;
            (io::format_pose(&pose), r.inliers, r.iterations)
        }
    };
    let count = mask.iter().filter(|&&m| m).count();
    println!("{}: {count}/{} inliers after {iterations} iterations", args.model.name(), pairs.len());
    run.write("model.txt", model_text.as_bytes())?;
    run.write("inliers.csv", inliers_csv(&mask).as_bytes())?;
    run.finish()
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut run = Run::new("synth", &args.out);
    let (w, h) = args.size;
    if w < 4 || h < 4 {
        return Err(CliError::usage("synthetic fixtures need at least 4x4 pixels"));
    }
    let grid = PixelGrid::new(w, h).map_err(|e| CliError::usage(e.to_string()))?;
    run.manifest.seed(args.seed);
    run.manifest.config("size", format!("{w}x{h}"));
    run.manifest.config("occluder", args.occluder);

    let transform = TransformSampler::new(args.seed, grid, TransformRanges::default()).sample_transform()?;
    let mut options = TripletOptions { width: w, height: h, ..TripletOptions::default() };
    if args.occluder {
        let (wf, hf) = (w as f64, h as f64);
        options.occluder = Some(Occluder {
            region_a: Rect { u0: 0.3 * wf, v0: 0.3 * hf, u1: 0.62 * wf, v1: 0.7 * hf },
            depth: options.background_depth / 5.0,
        });
    }
    let t = SyntheticTriplet::new(args.seed, options, |_| transform);
    let scene = &t.scene;
    run.write("cams.txt", io::format_cameras(&scene.ka, &scene.kb).as_bytes())?;
    run.write("pose.txt", io::format_pose(&scene.pose).as_bytes())?;
    run.write("fmat.txt", io::format_matrix3(t.f.matrix()).as_bytes())?;
    run.write("transform.txt", io::format_transform(&t.transform).as_bytes())?;
    let gt = [&t.gt_b_from_a, &t.gt_a_from_b, &t.gt_bp_from_b, &t.gt_b_from_bp];
    for (name, flow) in TRIPLET_FILES.iter().zip(gt) {
        run.write(&format!("gt/{name}"), &io::write_flo(flow))?;
    }
    let mask = |m: &[bool]| -> Vec<Option<f64>> { m.iter().map(|&v| Some(if v { 1.0 } else { 0.0 })).collect() };
    run.write("visible_a.flo", &io::write_scalar_flo(grid, &mask(&t.visible_a)))?;
    println!("wrote synthetic triplet {w}x{h} (seed {})", args.seed);
    run.finish()
}

/// Bilinear lookup of every channel; `None` outside the image.
fn sample_image(img: &io::Image, p: &Vec2) -> Option<Vec<f64>> {
    let (w, h) = (img.width as f64, img.height as f64);
    if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= w - 1.0 && p.y <= h - 1.0) {
        return None;
    }
    let (u0, v0) = (p.x.floor() as usize, p.y.floor() as usize);
    let (u1, v1) = ((u0 + 1).min(img.width - 1), (v0 + 1).min(img.height - 1));
    let (a, b) = (p.x - u0 as f64, p.y - v0 as f64);
    let taps = [(u0, v0, (1.0 - a) * (1.0 - b)), (u1, v0, a * (1.0 - b)), (u0, v1, (1.0 - a) * b), (u1, v1, a * b)];
    let mut out = vec![0.0; img.channels];
    for (u, v, wgt) in taps {
        for (o, &c) in out.iter_mut().zip(img.pixel(u, v)) {
            *o += wgt * c as f64;
        }
    }
    Some(out)
}

pub fn warp(args: &WarpArgs) -> Result<(), CliError> {
    let mut run = Run::new("warp", &args.out);
    let bytes = run.read("image", &args.image)?;
    let img = io::read_pnm(&bytes).map_err(|e| CliError::input(&args.image, e))?;
    let flow = run.read_flo("flow", &args.flow)?;
    let grid = flow.grid();
    let mut data = Vec::with_capacity(grid.len() * img.channels);
    for i in 0..grid.len() {
        let x = grid.point(i);
        let px = if flow.is_valid(i) { sample_image(&img, &(x + flow.vector_at(i))) } else { None };
        match px {
            Some(v) => data.extend(v.iter().map(|c| c.round().clamp(0.0, 255.0) as u8)),
            None => data.extend(std::iter::repeat_n(0u8, img.channels)),
        }
    }
    let out = io::Image { width: grid.width, height: grid.height, channels: img.channels, data };
    let name = if img.channels == 1 { "warped.pgm" } else { "warped.ppm" };
    run.write(name, &io::write_pnm(&out))?;
    run.finish()
}
