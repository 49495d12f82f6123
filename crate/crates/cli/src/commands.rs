//! Subcommand implementations. Each returns a report body and a pass flag;
//! artifacts are written into the output directory as they are produced.

use serde::Serialize;
use serde_json::{json, Value};

use foliage_core::civilize::{self, case1_flatten, check_constancy, CivilContext, RadiusSearchOptions, TubularNbhd};
use foliage_core::diffgroup::{four_conjugates, CompactDiffeo};
use foliage_core::filling::{
    self, boundary_band_check, boundary_holonomy_check, glue_all, holonomy_error, leaf_trace, leaf_trace_csv,
    max_fd_residual, max_residual, nonvanishing_certificate, partition_defect, slice_grid, transversality_homotopy,
    tube_samples, Filling, FillingForm,
};
use foliage_core::geometry::{self, is_general_position, jiggle, JiggleError};
use foliage_core::holonomy;
use foliage_core::planefield::graph_map_between;
use foliage_core::AffineSimplex;

use crate::config::{IdentityConfig, RunConfig};
use crate::output::{csv, OutDir};
use crate::CliError;

pub struct Outcome {
    pub pass: bool,
    pub result: Value,
}

fn outcome<T: Serialize>(pass: bool, result: T) -> Outcome {
    Outcome {
        pass,
        result: serde_json::to_value(result).expect("serializable result"),
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

fn section<'a, T>(v: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    v.as_ref()
        .ok_or_else(|| CliError::Config(format!("missing `{name}` section")))
}

pub fn triangulate(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let t = cfg.base_triangulation()?;
    let verified = t.verify();
    out.json("triangulation.json", &t)?;
    Ok(outcome(
        verified.is_ok(),
        json!({
            "vertices": t.vertex_count(),
            "simplices": t.simplices().len(),
            "total_volume": t.total_volume(),
            "min_edge": t.min_edge(),
            "meeting_k": t.meeting(&cfg.k_region()).len(),
            "verify_error": verified.err().map(|e| e.to_string()),
        }),
    ))
}

pub fn jiggle_cmd(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let t = cfg.base_triangulation()?;
    let field = cfg.plane_field()?;
    let params = cfg.jiggle_params();
    match jiggle(&t, &field, &cfg.k_region(), &params) {
        Ok(o) => {
            out.json("triangulation.json", &o.triangulation)?;
            Ok(outcome(
                true,
                json!({
                    "params": params,
                    "iterations": o.iterations,
                    "min_margin": o.min_margin,
                    "max_displacement": o.max_displacement,
                    "certified": o.certified,
                }),
            ))
        }
        Err(JiggleError::Failed(f)) => Ok(outcome(false, json!({"params": params, "failure": f}))),
        Err(JiggleError::Geometry(e)) => Err(input(e)),
    }
}

const MAX_WITNESSES: usize = 20;

pub fn genpos(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let t = cfg.base_triangulation()?;
    let field = cfg.plane_field()?;
    let params = cfg.jiggle_params();
    let rep = geometry::certify(&t, &field, &cfg.k_region(), params.samples, params.min_margin).map_err(input)?;
    let mut witnesses = Vec::new();
    for &id in rep.failing.iter().take(MAX_WITNESSES) {
        let s = t.simplex(id);
        let gp = is_general_position(&s, &field, params.samples).map_err(input)?;
        witnesses.push(json!({"simplex": id, "vertices": s.vertices, "report": gp}));
    }
    out.write(
        "margins.csv",
        &csv(&["simplex", "margin"], rep.margins.iter().map(|(id, m)| vec![*id as f64, *m])),
    )?;
    Ok(outcome(
        rep.pass,
        json!({
            "threshold": params.min_margin,
            "samples": rep.samples,
            "checked": rep.margins.len(),
            "min_margin": rep.min_margin,
            "failing": rep.failing,
            "witnesses": witnesses,
        }),
    ))
}

pub fn civilize_check(cfg: &RunConfig, _out: &mut OutDir) -> Result<Outcome, CliError> {
    let c = section(&cfg.civilize, "civilize")?;
    if c.top_dim + 2 > cfg.n {
        return Err(CliError::Config("civilize.top_dim must be at most n - 2".into()));
    }
    let t = cfg.base_triangulation()?;
    let field = cfg.plane_field()?;
    let k = cfg.k_region();
    let mut ctx = CivilContext::from_triangulation(&t, &field, &k, Some(k.clone()), cfg.u_region.clone());
    ctx.samples = cfg.grids.civilize_samples;
    ctx.seed = c.seed;
    let (radii, searched) = match &c.radii {
        Some(r) => (r.clone(), false),
        None => {
            let opts = RadiusSearchOptions::default();
            let mut r = Vec::new();
            for p in 0..=c.top_dim {
                match civilize::radius_search(&ctx, p, &r, &opts) {
                    Ok(pair) => r.push(pair),
                    Err(e) => {
                        return Ok(outcome(false, json!({"radii": r, "search_failed_at": p, "reason": e.to_string()})))
                    }
                }
            }
            (r, true)
        }
    };
    let cert = civilize::certify(&ctx, &radii, c.top_dim, c.include_constancy).map_err(input)?;
    let failures: Vec<_> = cert.failures().take(MAX_WITNESSES).cloned().collect();
    let mut conditions: std::collections::BTreeMap<String, (usize, usize)> = Default::default();
    for e in &cert.entries {
        let slot = conditions.entry(e.condition.clone()).or_default();
        slot.0 += 1;
        slot.1 += usize::from(!e.pass);
    }
    let summary: Value = conditions
        .into_iter()
        .map(|(k, (n, f))| (k, json!({"checked": n, "failed": f})))
        .collect::<serde_json::Map<_, _>>()
        .into();
    Ok(outcome(
        cert.pass,
        json!({
            "radii": radii,
            "radii_searched": searched,
            "samples": cert.samples,
            "seed": cert.seed,
            "conditions": summary,
            "failures": failures,
        }),
    ))
}

pub fn flatten(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let fc = section(&cfg.flatten, "flatten")?;
    let field = cfg.plane_field()?;
    let simplex = AffineSimplex::new(fc.simplex.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let h = case1_flatten(&field, &simplex, fc.delta, fc.eta, fc.delta_bar, fc.eta_bar).map_err(input)?;
    let after = h.at(1.0);
    let inner = TubularNbhd::for_simplex(simplex.clone(), &after, fc.delta, fc.eta);
    let constancy = check_constancy(&after, &inner, fc.samples, cfg.tolerances.constancy).map_err(input)?;
    let outer = TubularNbhd::for_simplex(simplex, &field, fc.delta_bar, fc.eta_bar);
    let samples = outer.sample_points(fc.samples).map_err(input)?;
    let steps = fc.t_steps.max(1);
    let mut norms = Vec::with_capacity(steps + 1);
    let mut graph_ok = true;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let mut worst: f64 = 0.0;
        for (x, z) in &samples {
            let base = field.frame(x).map_err(input)?;
            let plane = h.frame(z, t).map_err(input)?;
            match graph_map_between(&base, &plane) {
                Some(g) => worst = worst.max(g.norm),
                None => {
                    graph_ok = false;
                    worst = f64::INFINITY;
                }
            }
        }
        norms.push((t, worst));
    }
    let initial = norms[0].1;
    let peak = norms.iter().map(|p| p.1).fold(0.0, f64::max);
    let monotone = graph_ok && peak <= initial + cfg.tolerances.graph_slack;
    out.write("graph_norms.csv", &csv(&["t", "max_graph_norm"], norms.iter().map(|(t, n)| vec![*t, *n])))?;
    Ok(outcome(
        constancy.pass && monotone,
        json!({
            "constancy": constancy,
            "outer_samples": samples.len(),
            "graph_norm_initial": initial,
            "graph_norm_peak": peak,
            "graph_norm_bounded": monotone,
        }),
    ))
}

fn build_form(cfg: &RunConfig) -> Result<FillingForm, CliError> {
    cfg.form_spec().build().map_err(|e| CliError::Config(e.to_string()))
}

pub fn fill(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let form = build_form(cfg)?;
    let spec = cfg.form_spec();
    let m = cfg.grids.csv.max(1);
    let mut header = vec!["r".to_string()];
    header.extend((1..cfg.k()).map(|i| format!("x{i}")));
    header.push("residual".into());
    let rows: Vec<Vec<f64>> = slice_grid(form.k(), m)
        .into_iter()
        .map(|(r, x)| {
            let res = filling::integrability_residual(&form, r, &x);
            let mut row = vec![r];
            row.extend(x);
            row.push(res);
            row
        })
        .collect();
    let max = rows.iter().map(|r| r[r.len() - 1].abs()).fold(0.0, f64::max);
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    out.write("residual.csv", &csv(&refs, rows))?;
    out.json("form.json", &spec)?;
    Ok(outcome(
        max < cfg.tolerances.residual,
        json!({"form": spec, "csv_grid": m, "max_residual": max}),
    ))
}

pub fn fill_verify(cfg: &RunConfig, _out: &mut OutDir) -> Result<Outcome, CliError> {
    let form = build_form(cfg)?;
    let tol = &cfg.tolerances;
    let m = cfg.grids.residual;
    let max = max_residual(&form, m);
    let fd: Vec<f64> = cfg.grids.fd_steps.iter().map(|h| max_fd_residual(&form, m, 0.0, *h)).collect();
    let ratios: Vec<f64> = fd.windows(2).map(|w| w[0] / w[1]).collect();
    let ratios_ok = ratios.iter().all(|r| (tol.fd_ratio_low..=tol.fd_ratio_high).contains(r));
    let certificate = nonvanishing_certificate(&form, m);
    let defect = partition_defect(&form, m);
    let band = boundary_band_check(&form, m);
    let path = form.boundary_path().map_err(input)?;
    let holo = boundary_holonomy_check(&form, &path, &tube_samples(form.k(), cfg.grids.tube_samples), tol.holonomy)
        .map_err(input)?;
    let pass =
        max < tol.residual && ratios_ok && certificate >= tol.nonvanishing && defect <= tol.partition && band.is_ok() && holo.pass;
    Ok(outcome(
        pass,
        json!({
            "grid": m,
            "max_residual": max,
            "fd_steps": cfg.grids.fd_steps,
            "fd_residuals": fd,
            "fd_ratios": ratios,
            "nonvanishing_certificate": certificate,
            "partition_defect": defect,
            "boundary_band_exact": band.is_ok(),
            "boundary_band_error": band.err().map(|e| e.to_string()),
            "boundary_holonomy": holo,
        }),
    ))
}

pub fn homotopy(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let form = build_form(cfg)?;
    let tol = &cfg.tolerances;
    let m = cfg.grids.residual;
    let steps = cfg.grids.homotopy.max(1);
    let rows: Vec<Vec<f64>> = (0..=steps)
        .map(|i| {
            let s = i as f64 / steps as f64;
            let fs = transversality_homotopy(&form, s);
            vec![s, partition_defect(&fs, m), nonvanishing_certificate(&fs, m)]
        })
        .collect();
    let end = transversality_homotopy(&form, 1.0);
    let end_p = slice_grid(form.k(), m)
        .iter()
        .map(|(r, x)| (end.coefficients(*r, 0.0, x).p - 1.0).abs())
        .fold(0.0, f64::max);
    let worst_defect = rows.iter().map(|r| r[1]).fold(0.0, f64::max);
    let worst_cert = rows.iter().map(|r| r[2]).fold(f64::INFINITY, f64::min);
    out.write("homotopy.csv", &csv(&["s", "partition_defect", "certificate"], rows))?;
    Ok(outcome(
        worst_defect <= tol.partition && worst_cert >= tol.nonvanishing && end_p <= tol.partition,
        json!({
            "steps": steps,
            "max_partition_defect": worst_defect,
            "min_certificate": worst_cert,
            "endpoint_max_p_defect": end_p,
        }),
    ))
}

fn seams(f: &Filling, pts: &[Vec<f64>], samples: usize, acc: &mut Vec<Value>) -> Result<bool, CliError> {
    match f {
        Filling::Glued(g) => {
            let rep = g.seam_check(pts, samples).map_err(input)?;
            let exact = rep.exact;
            acc.push(json!({"eps": g.eps(), "report": rep}));
            let a = seams(g.first(), pts, samples, acc)?;
            let b = seams(g.second(), pts, samples, acc)?;
            Ok(exact && a && b)
        }
        Filling::Conjugated { inner, .. } => seams(inner, pts, samples, acc),
        Filling::Reeb(_) => Ok(true),
    }
}

pub fn glue(cfg: &RunConfig, _out: &mut OutDir) -> Result<Outcome, CliError> {
    let gc = section(&cfg.glue, "glue")?;
    if gc.pieces.is_empty() {
        return Err(CliError::Config("glue.pieces is empty".into()));
    }
    let pieces = gc
        .pieces
        .iter()
        .map(|p| p.build().map(|f| Filling::reeb(f.adjusted())))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let glued = glue_all(&pieces).map_err(input)?;
    let pts = tube_samples(cfg.k(), cfg.grids.tube_samples);
    let mut reports = Vec::new();
    let seam_ok = seams(&glued, &pts, cfg.grids.seam, &mut reports)?;
    let mut path = pieces[0].boundary_path().map_err(input)?;
    for p in &pieces[1..] {
        path = holonomy::concat(&path, &p.boundary_path().map_err(input)?).map_err(input)?;
    }
    let target = path.eval(1.0).map_err(input)?;
    let err = holonomy_error(&glued, &target, &pts).map_err(input)?;
    Ok(outcome(
        seam_ok && err < cfg.tolerances.holonomy,
        json!({
            "pieces": gc.pieces.len(),
            "seams": reports,
            "seams_exact": seam_ok,
            "holonomy_error": err,
        }),
    ))
}

fn diffeo(spec: &foliage_core::diffgroup::DiffeoSpec) -> Result<CompactDiffeo, CliError> {
    CompactDiffeo::try_from(spec.clone()).map_err(|e| CliError::Config(e.to_string()))
}

pub fn identity_verify(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let IdentityConfig::Four { a, b, h, u, region } = section(&cfg.identity, "identity")?;
    let (a, b, h) = (diffeo(a)?, diffeo(b)?, diffeo(h)?);
    let k = h.k();
    if a.k() != k || b.k() != k || u.center.len() != k {
        return Err(CliError::Config("identity: dimensions of a, b, h and u differ".into()));
    }
    let region = match region {
        Some(r) => r.clone(),
        None => [a.support(), b.support(), h.support()]
            .into_iter()
            .flatten()
            .fold(u.bounding_box(), |acc, s| acc.union(s))
            .expand(0.5),
    };
    let word = match four_conjugates(&a, &b, &h, u) {
        Ok(w) => w,
        Err(e) => return Ok(outcome(false, json!({"precondition": e.to_string()}))),
    };
    let pts = region.grid(cfg.grids.identity);
    let err = word.sup_error(&pts).map_err(input)?;
    out.json("word.json", &word)?;
    Ok(outcome(
        err < cfg.tolerances.identity,
        json!({"factors": word.len(), "region": region, "grid": cfg.grids.identity, "sup_error": err}),
    ))
}

pub fn subdivide(cfg: &RunConfig, _out: &mut OutDir) -> Result<Outcome, CliError> {
    let sc = section(&cfg.subdivide, "subdivide")?;
    let w = sc.path.build().map_err(|e| CliError::Config(e.to_string()))?;
    let parts = holonomy::subdivide(&w, sc.q).map_err(input)?;
    let region = sc.region.clone().unwrap_or_else(|| w.support().expand(0.1));
    let pts = region.grid(sc.grid);
    let ends = parts.iter().map(|p| p.eval(1.0)).collect::<Result<Vec<_>, _>>().map_err(input)?;
    let product = CompactDiffeo::compose_all(w.k(), ends.iter().rev());
    let full = w.eval(1.0).map_err(input)?;
    let err = product.sup_distance(&full, &pts).map_err(input)?;
    let mut piece_errors = Vec::new();
    for (i, e) in ends.iter().enumerate() {
        let a = holonomy::periodic_extend(&w, i as f64 / sc.q as f64).map_err(input)?;
        let b = holonomy::periodic_extend(&w, (i + 1) as f64 / sc.q as f64).map_err(input)?;
        let want = b.compose(&a.inverse());
        piece_errors.push(e.sup_distance(&want, &pts).map_err(input)?);
    }
    let worst_piece = piece_errors.iter().copied().fold(0.0, f64::max);
    let tol = cfg.tolerances.telescoping;
    Ok(outcome(
        err < tol && worst_piece < tol,
        json!({
            "q": sc.q,
            "region": region,
            "grid": sc.grid,
            "telescoping_error": err,
            "piece_errors": piece_errors,
        }),
    ))
}

pub fn trace(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let tc = section(&cfg.trace, "trace")?;
    let form = build_form(cfg)?;
    let leaf = leaf_trace(&form, tc.start, &tc.x, tc.length, tc.step, tc.direction).map_err(input)?;
    out.write("leaf.csv", &leaf_trace_csv(&leaf))?;
    let last = leaf.last().cloned();
    Ok(outcome(true, json!({"samples": leaf.len(), "end": last, "direction": tc.direction})))
}

/// Collects the reports already present in the output directory.
pub fn report(_cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    let mut names: Vec<String> = std::fs::read_dir(&out.path)
        .map_err(|e| CliError::Io(e.to_string()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".json") && n != "report.json")
        .collect();
    names.sort();
    let mut entries = Vec::new();
    let mut pass = true;
    for name in names {
        let text = std::fs::read_to_string(out.path.join(&name)).map_err(|e| CliError::Io(e.to_string()))?;
        let Ok(v) = serde_json::from_str::<Value>(&text) else { continue };
        let (Some(cmd), Some(p)) = (v.get("command").and_then(Value::as_str), v.get("pass").and_then(Value::as_bool))
        else {
            continue;
        };
        pass &= p;
        entries.push(json!({"file": name, "command": cmd, "pass": p, "config_hash": v.get("config_hash")}));
    }
    Ok(outcome(pass, json!({"reports": entries})))
}
