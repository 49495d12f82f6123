//! Acceptance criteria 1–10. Runs as a plain binary and prints one line per
//! criterion; exits nonzero if any criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use foliage_core::civilize::{case1_flatten, check_constancy, TubularNbhd, CONSTANCY_TOL};
use foliage_core::diffgroup::*;
use foliage_core::filling::*;
use foliage_core::geometry::{certify, jiggle, standard_triangulation, JiggleParams};
use foliage_core::holonomy::{self, PeriodicPath};
use foliage_core::planefield::{graph_map_between, Catalog};
use foliage_core::{AffineSimplex, Ball, BoxRegion, Expr, IntBox, PlaneField};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e(s: &str) -> Expr {
    Expr::parse(s).unwrap()
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let form = FillingForm::standard(2).map_err(|e| e.to_string())?;
    let sym = max_residual(&form, 256);
    let fd: Vec<f64> = [1e-3, 5e-4, 2.5e-4].iter().map(|h| max_fd_residual(&form, 256, 0.0, *h)).collect();
    let ratios = [fd[0] / fd[1], fd[1] / fd[2]];
    let secs = t0.elapsed().as_secs_f64();
    check(
        sym < 1e-9 && ratios.iter().all(|r| (3.5..=4.5).contains(r)) && secs < 5.0,
        format!("max|R| = {sym:.3e}, fd ratios = [{:.4}, {:.4}], {secs:.2} s", ratios[0], ratios[1]),
    )
}

fn criterion_2() -> Outcome {
    let form = FillingForm::from_parts(2, e("bump(x1)"), e("0.5"), PartitionProfiles::standard(), false);
    let r = max_residual(&form, 256);
    check(r > 1e-3, format!("negative control max|R| = {r:.3e}"))
}

fn criterion_3() -> Outcome {
    let form = FillingForm::standard(2).map_err(|e| e.to_string())?;
    let mut worst_defect: f64 = 0.0;
    let mut worst_cert = f64::INFINITY;
    for i in 0..=10 {
        let fs = transversality_homotopy(&form, i as f64 / 10.0);
        worst_defect = worst_defect.max(partition_defect(&fs, 256));
        worst_cert = worst_cert.min(nonvanishing_certificate(&fs, 256));
    }
    let end = transversality_homotopy(&form, 1.0);
    let p1 = slice_grid(2, 256)
        .iter()
        .map(|(r, x)| (end.coefficients(*r, 0.0, x).p - 1.0).abs())
        .fold(0.0, f64::max);
    check(
        worst_defect <= 1e-12 && worst_cert >= 0.5 && p1 <= 1e-12,
        format!("max|P+Q-1| = {worst_defect:.1e}, min certificate = {worst_cert}, max|P1-1| = {p1:.1e}"),
    )
}

fn criterion_4() -> Outcome {
    let form = FillingForm::standard(2).map_err(|e| e.to_string())?;
    let band = boundary_band_check(&form, 100);
    let h = h_f(2, form.f(), 1.0).map_err(|e| e.to_string())?;
    let w = form.boundary_path().map_err(|e| e.to_string())?;
    let pts = tube_samples(2, 50);
    let report = boundary_holonomy_check(&form, &w, &pts, 1e-6).map_err(|e| e.to_string())?;
    let direct = holonomy_error(&Filling::reeb(form.clone()), &h, &pts).map_err(|e| e.to_string())?;
    check(
        band.is_ok() && report.pass && direct < 1e-6,
        format!(
            "band exact = {}, holonomy error vs path = {:.2e}, vs h_f(1) = {direct:.2e} at 50 x",
            band.is_ok(),
            report.max_error
        ),
    )
}

fn plateau(c: &[f64], l: f64, w: f64) -> String {
    c.iter()
        .enumerate()
        .map(|(i, ci)| {
            let x = format!("x{}", i + 1);
            format!("smoothstep(({x}-({ci})+{})/{w})*smoothstep((({ci})+{}-{x})/{w})", l + w, l + w)
        })
        .collect::<Vec<_>>()
        .join("*")
}

fn shear(c: [f64; 2], s: f64, a: f64, b: f64) -> CompactDiffeo {
    let bm = format!("bump(((x1-({}))^2+(x2-({}))^2)/{})", c[0], c[1], s * s);
    let field = VectorField::parse(
        &[&format!("{a}*(x2-({}))*{bm}", c[1]), &format!("{b}*(x1-({}))*{bm}", c[0])],
        BoxRegion::centered(&c, s),
    )
    .unwrap();
    exp(&field)
}

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let pl = plateau(&[0.0, 0.0], 2.0, 1.0);
    let field = VectorField::parse(&[&pl, "0"], BoxRegion::cube(2, -3.0, 3.0)).unwrap();
    let h = flow_with_steps(&field, 1.0, 16);
    let u = Ball::new(vec![0.0, 0.0], 0.3);
    let pts = BoxRegion::cube(2, -3.0, 3.0).grid(100);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut counts_ok = true;
    for _ in 0..20 {
        let mut draw = || {
            let c = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
            shear(c, 0.12, rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))
        };
        let (a, b) = (draw(), draw());
        let w = four_conjugates(&a, &b, &h, &u).map_err(|e| e.to_string())?;
        counts_ok &= w.len() == 4;
        worst = worst.max(w.sup_error(&pts).map_err(|e| e.to_string())?);
    }
    // two commutators; the second pair lives near (0, 1) and is moved into U
    let mover_field = VectorField::parse(&["0", &format!("-({pl})")], BoxRegion::cube(2, -3.0, 3.0)).unwrap();
    let mover = flow_with_steps(&mover_field, 1.0, 16);
    let pairs = [
        CommutatorPair {
            a: shear([0.02, 0.01], 0.12, 1.0, -0.5),
            b: shear([-0.03, 0.0], 0.12, 0.7, 1.2),
            ball: Ball::new(vec![0.0, 0.0], 0.25),
        },
        CommutatorPair {
            a: shear([0.0, 1.0], 0.1, -1.5, 0.4),
            b: shear([0.02, 1.02], 0.1, 0.6, 0.9),
            ball: Ball::new(vec![0.0, 1.0], 0.2),
        },
    ];
    let w2 = four_r_conjugates(&pairs, &h, &u, &[CompactDiffeo::identity(2), mover]).map_err(|e| e.to_string())?;
    let err2 = w2.sup_error(&pts).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst < 1e-8 && counts_ok && w2.len() == 8 && err2 < 1e-8 && secs < 30.0,
        format!(
            "20 configs: max error = {worst:.2e}, 4 factors each = {counts_ok}; r = 2: length {} error {err2:.2e}; {secs:.1} s",
            w2.len()
        ),
    )
}

fn swirl(c: [f64; 2], s: f64, amp: f64) -> VectorField {
    let bm = format!("bump(((x1-({}))^2+(x2-({}))^2)/{})", c[0], c[1], s * s);
    VectorField::parse(
        &[&format!("{amp}*(-(x2-({})))*{bm}", c[1]), &format!("{amp}*(x1-({}))*{bm}", c[0])],
        BoxRegion::centered(&c, s),
    )
    .unwrap()
}

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let eps = v0_for_72();
    // independent bisection for (1 + ε)^72 = 2
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (1.0 + mid).powi(72) < 2.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root_ok = (eps - lo).abs() < 1e-12 && (composition_bound(eps, 72) - 1.0).abs() < 1e-12;
    let err = |e: DiffError| e.to_string();
    let unit = h_f(2, &e("bump(x1/0.9)"), 1.0).map_err(err)?;
    let amp = 0.5 * eps / norm_de(&unit, 41).map_err(err)?.deviation();
    let h = h_f(2, &e(&format!("{amp}*bump(x1/0.9)")), 1.0).map_err(err)?;
    let u = Ball::new(vec![1.0, 0.0], 0.35 * std::f64::consts::TAU * amp * (-1.0f64).exp());
    let pl = "(1-smoothstep(((x1-1)^2+x2^2-9)/7))";
    let gfield = VectorField::parse(
        &[&format!("-10*(x1-1)*{pl}"), &format!("-10*x2*{pl}")],
        BoxRegion::centered(&[1.0, 0.0], 4.0),
    )
    .unwrap();
    let g = flow_with_steps(&gfield, 1.0, 64);
    let a_ball = Ball::new(vec![0.0, 0.0], 1.6);
    let ms = norm_de(&flow_with_steps(&swirl([0.0, 0.0], 1.1, 1.0), 1.0, 64), 41).map_err(err)?.deviation();
    let mut words = Vec::new();
    let mut worst_err: f64 = 0.0;
    let mut worst_factor: f64 = 0.0;
    let mut all_v0 = true;
    for i in 0..6 {
        let fi = i as f64;
        let sigma = flow_with_steps(&swirl([0.02 * fi, -0.03], 1.05, 0.3 * eps / ms * (1.0 + 0.1 * fi)), 1.0, 64);
        let x = swirl([-0.04, 0.02 * fi], 1.05, -0.25 * eps / ms * (1.0 + 0.05 * fi));
        let w = twelve_factor_expansion(&sigma, &x, &g, &h, &a_ball, &u).map_err(err)?;
        let pts: Vec<Vec<f64>> = w.regions().iter().flat_map(|r| r.grid(30)).collect();
        worst_err = worst_err.max(w.sup_error(&pts).map_err(err)?);
        for m in w.v0_report(eps, 11).map_err(err)? {
            all_v0 &= m.in_v0 && m.norms.certifies_v0(eps);
            worst_factor = worst_factor.max(m.norms.deviation());
        }
        words.push(w);
    }
    let comp = CompactDiffeo::compose_all(2, words.iter().flat_map(|w| w.factors.iter().map(|(_, d)| d)));
    let regions = merge_regions(words.iter().flat_map(|w| w.regions()));
    let total = norm_de_on(&comp, &regions, 11).map_err(err)?;
    let factors: usize = words.iter().map(|w| w.factors.len()).sum();
    let secs = t0.elapsed().as_secs_f64();
    check(
        root_ok && worst_err < 1e-8 && all_v0 && factors == 72 && total.in_v(),
        format!(
            "eps = {eps:.6} (bisection agrees), word error = {worst_err:.2e}, max factor ‖de‖ = {worst_factor:.3e} < 0.99 eps = {all_v0}, \
             {factors}-fold ‖de‖ = {:.3e} < 1; {secs:.1} s",
            total.deviation()
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    let fields = [
        ("constant", Catalog::Horizontal),
        ("tilt", Catalog::LinearTilt { u: 0.3 }),
    ];
    let k_region = BoxRegion::cube(4, 0.0, 1.0);
    for l in [1u32, 2] {
        for (name, cat) in &fields {
            let t0 = Instant::now();
            let field = cat.field(BoxRegion::cube(4, -1.0, 2.0)).map_err(|e| e.to_string())?;
            let t = standard_triangulation(l, IntBox::cube(4, 0, 1)).map_err(|e| e.to_string())?;
            let eps = 0.05 / l as f64;
            let params = JiggleParams::new(eps, 7 + l as u64);
            let out = jiggle(&t, &field, &k_region, &params).map_err(|e| e.to_string())?;
            let again = jiggle(&t, &field, &k_region, &params).map_err(|e| e.to_string())?;
            let rep = certify(&out.triangulation, &field, &k_region, params.samples, 1e-3).map_err(|e| e.to_string())?;
            let secs = t0.elapsed().as_secs_f64() / 2.0;
            let pass = rep.pass
                && rep.margins.len() == t.meeting(&k_region).len()
                && out.max_displacement < eps
                && again == out
                && (l < 2 || secs < 60.0);
            ok &= pass;
            details.push(format!(
                "l={l} {name}: {} simplices, min margin {:.2e}, max displacement {:.3e} < {eps}, deterministic {}, {secs:.1} s",
                rep.margins.len(),
                rep.min_margin,
                out.max_displacement,
                again == out
            ));
        }
    }
    check(ok, details.join("; "))
}

fn seeded_paths(seed: u64) -> Vec<PeriodicPath> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..3 {
        let amp: f64 = rng.gen_range(-0.3..0.3);
        out.push(PeriodicPath::rotation(2, &e(&format!("{amp}*bump(x1/0.9)"))).unwrap());
        let c = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
        let time: f64 = rng.gen_range(0.2..1.0);
        out.push(PeriodicPath::flow(&swirl(c, 0.8, rng.gen_range(-1.0..1.0)), time).unwrap());
    }
    out
}

fn criterion_8() -> Outcome {
    let err = |e: holonomy::HolonomyError| e.to_string();
    let paths = seeded_paths(8);
    let pts = BoxRegion::cube(2, -1.6, 1.6).grid(12);
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let (mut cocycle, mut concat_err, mut tele): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for w in &paths {
        let w1 = w.eval(1.0).map_err(err)?;
        for _ in 0..3 {
            let t: f64 = rng.gen_range(0.0..1.0);
            let m: i64 = rng.gen_range(-2..=2);
            let ext = holonomy::periodic_extend(w, t + m as f64).map_err(err)?;
            let want = w.eval(t).map_err(err)?.compose(&w1.pow(m));
            cocycle = cocycle.max(ext.sup_distance(&want, &pts).map_err(|e| e.to_string())?);
        }
        for q in [2, 3, 5] {
            let parts = holonomy::subdivide(w, q).map_err(err)?;
            let ends = parts.iter().map(|p| p.eval(1.0)).collect::<Result<Vec<_>, _>>().map_err(err)?;
            let prod = CompactDiffeo::compose_all(2, ends.iter().rev());
            tele = tele.max(prod.sup_distance(&w1, &pts).map_err(|e| e.to_string())?);
        }
    }
    for pair in paths.windows(2) {
        let c = holonomy::concat(&pair[0], &pair[1]).map_err(err)?;
        let want = pair[1].eval(1.0).map_err(err)?.compose(&pair[0].eval(1.0).map_err(err)?);
        concat_err = concat_err.max(c.eval(1.0).map_err(err)?.sup_distance(&want, &pts).map_err(|e| e.to_string())?);
    }
    check(
        cocycle < 1e-9 && concat_err < 1e-9 && tele < 1e-9,
        format!(
            "{} paths: cocycle {cocycle:.2e}, concat endpoint {concat_err:.2e}, subdivision telescoping {tele:.2e}",
            paths.len()
        ),
    )
}

fn criterion_9() -> Outcome {
    let err = |e: FillingError| e.to_string();
    let (f2, g2) = standard_slope_and_cutoff(2, 0.3);
    let first = Filling::reeb(FillingForm::standard(2).map_err(err)?.adjusted());
    let second = Filling::reeb(
        explicit_form(2, &f2, &g2, &PartitionProfiles::standard()).map_err(err)?.adjusted(),
    );
    let glued = glue_concat(&first, &second, 0.02).map_err(err)?;
    let Filling::Glued(gl) = &glued else { return Err("not glued".into()) };
    let pts = tube_samples(2, 50);
    let seam = gl.seam_check(&pts, 64).map_err(err)?;
    let w = holonomy::concat(&first.boundary_path().map_err(err)?, &second.boundary_path().map_err(err)?)
        .map_err(|e| e.to_string())?;
    let target = w.eval(1.0).map_err(|e| e.to_string())?;
    let hol = holonomy_error(&glued, &target, &pts).map_err(err)?;
    check(
        seam.exact && hol < 1e-6,
        format!("seam exact on {} samples = {}, holonomy vs concatenated endpoint = {hol:.2e}", seam.checked, seam.exact),
    )
}

fn criterion_10() -> Outcome {
    let err = |e: foliage_core::civilize::CivilizeError| e.to_string();
    let f: PlaneField = Catalog::LinearTilt { u: 0.4 }
        .field(BoxRegion::cube(4, -2.0, 3.0))
        .map_err(|e| e.to_string())?;
    let edge = AffineSimplex::new(vec![vec![0.1, 0.0, 0.0, 0.0], vec![0.2, 0.3, 1.0, 0.4]]).unwrap();
    let (delta, eta, delta_bar, eta_bar) = (0.05, 0.03, 0.1, 0.06);
    let h = case1_flatten(&f, &edge, delta, eta, delta_bar, eta_bar).map_err(err)?;
    let after = h.at(1.0);
    let tube = TubularNbhd::for_simplex(edge.clone(), &after, delta, eta);
    let constancy = check_constancy(&after, &tube, 3, CONSTANCY_TOL).map_err(err)?;
    let outer = TubularNbhd::for_simplex(edge, &f, delta_bar, eta_bar);
    let samples = outer.sample_points(3).map_err(err)?;
    let graph = |t: f64| -> Result<f64, String> {
        let mut worst: f64 = 0.0;
        for (x, z) in &samples {
            let base = f.frame(x).map_err(|e| e.to_string())?;
            let plane = h.frame(z, t).map_err(|e| e.to_string())?;
            let g = graph_map_between(&base, &plane).ok_or("not a graph")?;
            worst = worst.max(g.norm);
        }
        Ok(worst)
    };
    let initial = graph(0.0)?;
    let mut peak: f64 = 0.0;
    for i in 1..=10 {
        peak = peak.max(graph(i as f64 / 10.0)?);
    }
    check(
        constancy.pass && constancy.worst < 1e-8 && peak <= initial + 1e-9,
        format!(
            "constancy defect {:.2e}, graph norm initial {initial:.4e}, max over t {peak:.4e} ({} samples)",
            constancy.worst,
            samples.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("Reeb-filling integrability", criterion_1),
        ("negative control", criterion_2),
        ("nonvanishing and homotopy", criterion_3),
        ("boundary matching", criterion_4),
        ("four-conjugate identity", criterion_5),
        ("twelve-factor expansion", criterion_6),
        ("jiggling", criterion_7),
        ("holonomy algebra", criterion_8),
        ("glued filling", criterion_9),
        ("tube flattening", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = run();
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {:>2} PASS  {name}: {d} [{secs:.1} s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {d} [{secs:.1} s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 10 criteria pass");
}
