use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use planeseg::crf::PlaneSegmentation;
use planeseg::pipeline::{
    ablation_grid, evaluate_view, generate_suite, run_ablation, run_single_view, run_two_view,
    suite_specs, two_view_ap_protocols, EvalScene, SuiteKind, TwoViewInput, ViewInput, ViewScores,
};
use planeseg::ransac::EstimatorVariant;
use planeseg::synth::{generate_scene, SceneSpec};
use planeseg_io::json::{from_json, to_json, GlobalPlanesDoc};
use planeseg_io::layout::{
    self, read_ground_truth, read_posed_views, read_segmentation, read_view, ViewData,
};
use planeseg_io::ply::encode_ply;
use planeseg_io::png::decode_labels;
use planeseg_io::{load, write_file};

use crate::mesh::{fused_mesh, single_view_mesh, ViewPart};
use crate::{
    AblateArgs, CliError, CrfArg, EvalArgs, Global, Outcome, SingleArgs, SynthArgs, TwoViewArgs,
};

fn emit(value: &Value) {
    println!("{value}");
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn view_input(v: &ViewData) -> ViewInput<'_> {
    ViewInput {
        rgb: &v.rgb,
        depth: &v.depth,
        normals: &v.normals,
        intrinsics: &v.intrinsics,
    }
}

pub fn single(g: &Global, a: &SingleArgs) -> Result<Outcome, CliError> {
    let pick = |flag: &Option<PathBuf>, name: &str, what: &str| -> Result<PathBuf, CliError> {
        flag.clone()
            .or_else(|| a.view.as_ref().map(|d| d.join(name)))
            .ok_or_else(|| CliError::Usage(format!("--{what} or --view is required")))
    };
    let view = layout::read_view_files(
        &pick(&a.rgb, layout::RGB, "rgb")?,
        &pick(&a.depth, layout::DEPTH, "depth")?,
        &pick(&a.normals, layout::NORMALS, "normals")?,
        &pick(&a.intrinsics, layout::INTRINSICS, "intrinsics")?,
    )?;
    let out = run_single_view(&view_input(&view), &g.config)?;

    layout::write_segmentation(&a.out, &out.segmentation)?;
    let mut files = vec![a.out.join(layout::LABELS), a.out.join(layout::PLANES)];
    if g.config.output.write_planar_depth {
        let p = a.out.join(layout::PLANAR_DEPTH);
        layout::write_depth(&p, &out.planar_depth)?;
        files.push(p);
    }
    if g.config.output.write_ply || a.ply {
        let p = a.out.join(layout::MESH);
        let mesh = single_view_mesh(&out.segmentation, &view.intrinsics);
        write_file(&p, &encode_ply(&mesh)?)?;
        files.push(p);
    }
    let empty = out.is_empty();
    emit(&json!({
        "command": "single",
        "status": if empty { "empty" } else { "ok" },
        "planes": out.segmentation.planes.len(),
        "files": files.iter().map(|p| path_str(p)).collect::<Vec<_>>(),
    }));
    Ok(if empty { Outcome::Empty } else { Outcome::Done })
}

pub fn two_view(g: &Global, a: &TwoViewArgs) -> Result<Outcome, CliError> {
    let views = [0, 1].map(|i| read_view(&a.input.join(layout::VIEW_DIRS[i])));
    let [v0, v1] = views;
    let views = [v0?, v1?];
    let posed = read_posed_views(&a.input, [views[0].intrinsics, views[1].intrinsics])?;
    let input = TwoViewInput {
        views: [view_input(&views[0]), view_input(&views[1])],
        posed: [&posed[0], &posed[1]],
    };
    let out = run_two_view(&input, &g.config)?;

    let mut files = Vec::new();
    for (i, v) in out.views.iter().enumerate() {
        let dir = a.out.join(layout::VIEW_DIRS[i]);
        layout::write_segmentation(&dir, &v.segmentation)?;
        files.extend([dir.join(layout::LABELS), dir.join(layout::PLANES)]);
        if g.config.output.write_planar_depth {
            let p = dir.join(layout::PLANAR_DEPTH);
            layout::write_depth(&p, &v.planar_depth)?;
            files.push(p);
        }
    }
    let counts = out.views.each_ref().map(|v| v.segmentation.pixel_counts());
    let pixel_counts: Vec<usize> = out
        .members
        .iter()
        .map(|ids| {
            (0..2)
                .filter_map(|v| ids[v].map(|id| counts[v][id as usize]))
                .sum()
        })
        .collect();
    let total = out.views.iter().map(|v| v.segmentation.labels.len()).sum();
    let doc = GlobalPlanesDoc::new(&out.planes, &pixel_counts, total);
    let p = a.out.join(layout::GLOBAL_PLANES);
    write_file(&p, &to_json(&doc))?;
    files.push(p);

    let parts = [0, 1].map(|i| ViewPart {
        seg: &out.views[i].segmentation,
        posed: &posed[i],
    });
    let p = a.out.join(layout::MESH);
    write_file(
        &p,
        &encode_ply(&fused_mesh(&out.planes, &out.members, parts))?,
    )?;
    files.push(p);

    let empty = out.planes.is_empty();
    emit(&json!({
        "command": "two-view",
        "status": if empty { "empty" } else { "ok" },
        "planes": out.planes.len(),
        "matches": out.matches.len(),
        "scales": out.scales,
        "files": files.iter().map(|p| path_str(p)).collect::<Vec<_>>(),
    }));
    Ok(if empty { Outcome::Empty } else { Outcome::Done })
}

/// Sorted names of the subdirectories of `root`.
fn scene_names(root: &Path) -> Result<Vec<String>, CliError> {
    let entries = std::fs::read_dir(root).map_err(|source| planeseg_io::IoError::File {
        path: root.to_path_buf(),
        source,
    })?;
    let mut names: Vec<String> = entries
        .filter_map(Result::ok)
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .collect();
    names.sort();
    Ok(names)
}

/// `root/name`, or its `gt/` subdirectory when only that holds labels.
fn segmentation_dir(root: &Path, name: &str) -> PathBuf {
    let dir = root.join(name);
    let gt = dir.join(layout::GT_DIR);
    if !dir.join(layout::LABELS).exists() && gt.join(layout::LABELS).exists() {
        gt
    } else {
        dir
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn write_lines(out: Option<&Path>, lines: &[Value]) -> Result<(), CliError> {
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    match out {
        Some(p) => {
            write_file(p, text.as_bytes())?;
            emit(&json!({"command": "eval", "status": "ok", "files": [path_str(p)]}));
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn view_record(name: &str, s: &ViewScores) -> Value {
    json!({
        "scene": name,
        "voi": s.scores.voi,
        "ri": s.scores.ri,
        "sc": s.scores.sc,
        "thresholds": s.recall.thresholds,
        "recall": s.recall.recall,
        "normal_errors_deg": s.normal_errors,
        "pred_planes": s.pred_planes,
        "gt_planes": s.gt_planes,
        "pardoned": s.pardoned,
    })
}

pub fn eval(g: &Global, a: &EvalArgs) -> Result<Outcome, CliError> {
    let names = scene_names(&a.gt)?;
    let pred_names = scene_names(&a.pred)?;
    if let Some(extra) = pred_names.iter().find(|n| !names.contains(n)) {
        return Err(CliError::Usage(format!(
            "scene list mismatch: predicted scene `{extra}` has no ground truth"
        )));
    }
    let mut metrics = g.config.metrics.clone();
    metrics.tolerance_protocol |= a.tolerance;

    if a.two_view {
        let aps: Vec<[f64; 3]> = names
            .par_iter()
            .map(|name| -> Result<[f64; 3], CliError> {
                let masked = |root: &Path, doc_name: &str, gt: bool| -> Result<_, CliError> {
                    let dir = root.join(name);
                    let doc = load(&dir.join(doc_name), from_json::<GlobalPlanesDoc>)?;
                    let labels = [0, 1].map(|i| {
                        let mut d = dir.join(layout::VIEW_DIRS[i]);
                        if gt {
                            d = d.join(layout::GT_DIR);
                        }
                        load(&d.join(layout::LABELS), decode_labels)
                    });
                    let [l0, l1] = labels;
                    let (l0, l1) = (l0?, l1?);
                    Ok(layout::masked_planes(&doc, [&l0.labels, &l1.labels])?)
                };
                let gt = masked(&a.gt, layout::GT_PLANES, true)?;
                let pred = if pred_names.contains(name) {
                    masked(&a.pred, layout::GLOBAL_PLANES, false)?
                } else {
                    Vec::new()
                };
                Ok(two_view_ap_protocols(&pred, &gt, &metrics.ap))
            })
            .collect::<Result<_, _>>()?;
        let mut lines: Vec<Value> = names
            .iter()
            .zip(&aps)
            .map(|(n, ap)| json!({"scene": n, "ap_all": ap[0], "ap_no_offset": ap[1], "ap_no_offset_normal": ap[2]}))
            .collect();
        lines.push(json!({
            "aggregate": true,
            "scenes": names.len(),
            "ap_all": mean(aps.iter().map(|a| a[0])),
            "ap_no_offset": mean(aps.iter().map(|a| a[1])),
            "ap_no_offset_normal": mean(aps.iter().map(|a| a[2])),
        }));
        write_lines(a.out.as_deref(), &lines)?;
        return Ok(Outcome::Done);
    }

    let scores: Vec<ViewScores> = names
        .par_iter()
        .map(|name| -> Result<ViewScores, CliError> {
            let gt = read_ground_truth(&segmentation_dir(&a.gt, name))?;
            // A scene without predictions scores as an empty segmentation.
            let pred = if pred_names.contains(name) {
                read_segmentation(&segmentation_dir(&a.pred, name))?
            } else {
                PlaneSegmentation::empty(gt.width(), gt.height())
            };
            Ok(evaluate_view(&pred, &gt, &metrics)?)
        })
        .collect::<Result<_, _>>()?;
    let mut lines: Vec<Value> = names
        .iter()
        .zip(&scores)
        .map(|(n, s)| view_record(n, s))
        .collect();
    let curve: Vec<f64> = (0..metrics.recall_thresholds.len())
        .map(|t| mean(scores.iter().map(|s| s.recall.recall[t])))
        .collect();
    lines.push(json!({
        "aggregate": true,
        "scenes": names.len(),
        "voi": mean(scores.iter().map(|s| s.scores.voi)),
        "ri": mean(scores.iter().map(|s| s.scores.ri)),
        "sc": mean(scores.iter().map(|s| s.scores.sc)),
        "thresholds": metrics.recall_thresholds,
        "recall": curve,
        "pardoned": scores.iter().map(|s| s.pardoned.len()).sum::<usize>(),
    }));
    write_lines(a.out.as_deref(), &lines)?;
    Ok(Outcome::Done)
}

/// `key=v1,v2` with each value read as a TOML literal, falling back to a
/// bare string.
fn parse_sweep(spec: &str) -> Result<(String, Vec<toml::Value>), CliError> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("sweep `{spec}` is not key=v1,v2,...")))?;
    let values = values
        .split(',')
        .map(|v| {
            toml::from_str::<toml::Table>(&format!("v = {v}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(v.to_string()))
        })
        .collect();
    Ok((key.trim().to_string(), values))
}

fn sweep_product(sweeps: &[(String, Vec<toml::Value>)]) -> Vec<Vec<(String, toml::Value)>> {
    let mut out = vec![Vec::new()];
    for (key, values) in sweeps {
        out = out
            .iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut cell: Vec<(String, toml::Value)> = prefix.clone();
                    cell.push((key.clone(), v.clone()));
                    cell
                })
            })
            .collect();
    }
    out
}

fn load_suite_dir(root: &Path) -> Result<Vec<EvalScene>, CliError> {
    scene_names(root)?
        .par_iter()
        .map(|name| {
            let dir = root.join(name);
            let view = read_view(&dir)?;
            let gt = read_ground_truth(&dir.join(layout::GT_DIR))?;
            Ok(EvalScene {
                name: name.clone(),
                rgb: view.rgb,
                depth: view.depth,
                normals: view.normals,
                gt,
            })
        })
        .collect()
}

pub fn ablate(g: &Global, a: &AblateArgs) -> Result<Outcome, CliError> {
    let scenes = match &a.scenes {
        Some(dir) => load_suite_dir(dir)?,
        None => {
            let kind = a.suite.unwrap_or(SuiteKind::Noisy);
            if kind == SuiteKind::TwoView {
                return Err(CliError::Usage(
                    "ablation runs on single-view suites".into(),
                ));
            }
            let specs = suite_specs(kind, a.count, g.seed.unwrap_or(0));
            generate_suite(&specs)?
                .iter()
                .enumerate()
                .map(|(i, s)| EvalScene::from_synth(format!("scene_{i:03}"), s))
                .collect()
        }
    };
    let variants: Vec<EstimatorVariant> = if !a.variants.is_empty() {
        a.variants.iter().map(|&v| v.into()).collect()
    } else if let Some(v) = g.variant {
        vec![v.into()]
    } else {
        EstimatorVariant::ALL.to_vec()
    };
    let crf = match (a.crf, g.no_crf) {
        (Some(CrfArg::On), _) => vec![true],
        (Some(CrfArg::Off), _) | (None, true) => vec![false],
        (Some(CrfArg::Both), _) | (None, false) => vec![true, false],
    };
    let sweeps = a
        .sweep
        .iter()
        .map(|s| parse_sweep(s))
        .collect::<Result<Vec<_>, _>>()?;
    let cells = ablation_grid(&variants, &crf, &sweep_product(&sweeps));
    let rows = run_ablation(&g.config, &cells, &scenes)?;

    let sink: Box<dyn Write> = match &a.out {
        Some(p) => {
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent).map_err(|source| planeseg_io::IoError::File {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
            Box::new(
                std::fs::File::create(p).map_err(|source| planeseg_io::IoError::File {
                    path: p.clone(),
                    source,
                })?,
            )
        }
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec![
        "variant",
        "crf",
        "overrides",
        "scenes",
        "voi",
        "ri",
        "sc",
        "recall",
    ];
    if !a.no_wall_time {
        header.push("wall_time_s");
    }
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![
            r.variant.clone(),
            r.crf.to_string(),
            r.overrides.clone(),
            r.scenes.to_string(),
            r.voi.to_string(),
            r.ri.to_string(),
            r.sc.to_string(),
            r.recall.to_string(),
        ];
        if !a.no_wall_time {
            rec.push(format!("{:.3}", r.wall_time_s));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    if let Some(p) = &a.out {
        emit(
            &json!({"command": "ablate", "status": "ok", "rows": rows.len(), "files": [path_str(p)]}),
        );
    }
    Ok(Outcome::Done)
}

pub fn synth(g: &Global, a: &SynthArgs) -> Result<Outcome, CliError> {
    let mut dirs = Vec::new();
    if let Some(spec_path) = &a.spec {
        let text = String::from_utf8(planeseg_io::read_file(spec_path)?)
            .map_err(|_| CliError::Usage(format!("{}: not utf-8", spec_path.display())))?;
        let mut spec: SceneSpec = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", spec_path.display())))?;
        if let Some(seed) = g.seed {
            spec.seed = seed;
        }
        let scene = generate_scene(&spec).map_err(planeseg::pipeline::PipelineError::from)?;
        layout::write_synth_scene(&a.out, &scene)?;
        dirs.push(a.out.clone());
    } else {
        let specs = suite_specs(a.suite, a.count, g.seed.unwrap_or(0));
        let scenes = generate_suite(&specs)?;
        for (i, scene) in scenes.iter().enumerate() {
            let dir = a.out.join(format!("scene_{i:03}"));
            layout::write_synth_scene(&dir, scene)?;
            dirs.push(dir);
        }
    }
    emit(&json!({
        "command": "synth",
        "status": "ok",
        "scenes": dirs.iter().map(|p| path_str(p)).collect::<Vec<_>>(),
    }));
    Ok(Outcome::Done)
}
