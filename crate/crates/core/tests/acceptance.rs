//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if
//! any criterion fails.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use num_complex::Complex64;
use piezores::bvd::{self, inject_spurs, resonance_freqs, BvdBranch, BvdModel, Spur};
use piezores::converter::{power_sweep, solve_pss, spur_impact, ConverterSpec};
use piezores::io::{parse_csv_sweep, parse_touchstone_s1p, write_csv_sweep, write_touchstone, SweepFile};
use piezores::mason::{self, default_reference_stack, LayerStack};
use piezores::materials::{coupling_at, coupling_scan, ts_zero_crossings, CouplingForm, MaterialConstantSet};
use piezores::metrics::{self, reference_twin, reference_twin_sweep, twin_grid};
use piezores::sweep::{find_resonances, linspace, ImpedanceSweep};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn criterion_1() -> Outcome {
    let s = metrics::score(&reference_twin_sweep()).expect("twin scores");
    let ok_k = within(s.k_r_sq, 0.30, 0.005);
    let ok_fom = within(s.fom, 1200.0, 60.0);
    let ok_frac = within(s.fractional_supp, 0.62, 0.10);
    check(
        ok_k && ok_fom && ok_frac,
        format!(
            "k_r^2 = {:.4} (0.30 +/- 0.005: {}), FoM = {:.1} (1200 +/- 60: {}), fractional = {:.3} (0.62 +/- 0.10: {})",
            s.k_r_sq, ok_k, s.fom, ok_fom, s.fractional_supp, ok_frac
        ),
    )
}

fn criterion_2() -> Outcome {
    let ln = MaterialConstantSet::linbo3();
    let rows = coupling_scan(&ln, 0.0, 180.0, 1.0).expect("scan");
    let zeros = ts_zero_crossings(&ln, &rows);
    let star = zeros.iter().copied().find(|t| (31.0..=41.0).contains(t));
    let r = coupling_at(&ln, 36.0, CouplingForm::Literal);
    let ratio = r.k33_sq / r.k35_sq;
    check(
        star.is_some() && ratio >= 10.0,
        format!("theta* = {star:?} deg (in [31, 41]), k33^2/k35^2 at 36 deg = {ratio:.1} (>= 10)"),
    )
}

fn max_rel_param(a: &BvdBranch, b: &BvdBranch) -> f64 {
    rel(a.r_m, b.r_m).max(rel(a.l_m, b.l_m)).max(rel(a.c_m, b.c_m))
}

fn criterion_3() -> Outcome {
    // noiseless single branch
    let m1 = reference_twin();
    let s1 = bvd::impedance(&m1, &linspace(9.0e6, 12.5e6, 2000)).unwrap();
    let f1 = bvd::fit(&s1, 3).expect("single-branch fit");
    let one_ok = f1.model.branches.len() == 1;
    let e1 = if one_ok {
        max_rel_param(&f1.model.branches[0], &m1.branches[0]).max(rel(f1.model.c0, m1.c0))
    } else {
        f64::INFINITY
    };

    // three branches, 0.1 % multiplicative noise
    let m3 = inject_spurs(
        &m1,
        &[
            Spur { f_hz: 10.5e6, coupling: 0.01, q: 2000.0 },
            Spur { f_hz: 10.9e6, coupling: 0.005, q: 1500.0 },
        ],
    )
    .unwrap();
    let grid = linspace(9.5e6, 12.5e6, 4000);
    let mut rng = ChaCha8Rng::seed_from_u64(20240917);
    let clean = bvd::impedance(&m3, &grid).unwrap();
    let z: Vec<Complex64> = clean
        .z_ohm()
        .iter()
        .map(|z| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            z * Complex64::new(1.0 + 1e-3 * a, 1e-3 * b)
        })
        .collect();
    let noisy = ImpedanceSweep::new(grid, z, 50.0).unwrap();
    let f3 = bvd::fit(&noisy, 3);
    let (mut worst_fs, mut worst_r, mut n3) = (f64::INFINITY, f64::INFINITY, 0);
    if let Ok(f3) = &f3 {
        n3 = f3.model.branches.len();
        if n3 == 3 {
            let mut got = f3.model.branches.clone();
            got.sort_by(|a, b| a.fs().total_cmp(&b.fs()));
            let mut want = m3.branches.clone();
            want.sort_by(|a, b| a.fs().total_cmp(&b.fs()));
            worst_fs = got.iter().zip(&want).map(|(g, w)| rel(g.fs(), w.fs())).fold(0.0, f64::max);
            worst_r = got.iter().zip(&want).map(|(g, w)| rel(g.r_m, w.r_m)).fold(0.0, f64::max);
        }
    }
    check(
        one_ok && e1 <= 1e-3 && n3 == 3 && worst_fs <= 1e-4 && worst_r <= 0.05,
        format!(
            "1-branch max rel error {e1:.2e} (<= 1e-3); 3-branch: {n3} branches, max fs error {worst_fs:.2e} (<= 1e-4), max r_m error {worst_r:.2e} (<= 0.05)"
        ),
    )
}

fn criterion_4() -> Outcome {
    let s = metrics::score(&reference_twin_sweep()).expect("twin scores");
    let b = reference_twin().branches[0];
    let oracle = 2.0 * PI * b.fs() * b.l_m / b.r_m;
    let q = s.q_bode_at_fs;
    check(
        (3800.0..=4200.0).contains(&q) && rel(q, oracle) <= 0.05,
        format!("Bode Q(fs) = {q:.1} ([3800, 4200]; w_s L_m / R_m = {oracle:.1})"),
    )
}

/// Root of `g` in [a, b] by bisection.
fn bisect(g: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let mut ga = g(a);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let gm = g(m);
        if gm == 0.0 {
            return m;
        }
        if gm.signum() == ga.signum() {
            a = m;
            ga = gm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

fn criterion_5() -> Outcome {
    let stack = default_reference_stack();
    let f0 = mason::free_plate_fp(&stack);
    let sweep = mason::input_impedance(&stack, &linspace(0.8 * f0, 1.1 * f0, 6001)).unwrap();
    let (fs, _) = find_resonances(&sweep).expect("resonances");
    let band = rel(fs, 10.14e6);

    // lossless bare plate
    let mut p = *stack.piezo_layer();
    p.mech_q = f64::INFINITY;
    let bare = LayerStack::new(vec![p], stack.active_area).unwrap();
    let v = p.velocity();
    let kt2 = p.piezo_e33 * p.piezo_e33 / (p.stiffened_c33() * p.permittivity_e33);
    let phi = |f: f64| PI * f * p.thickness / v;
    // Mason zero of Z just below the half-wave pole
    let fp_free = v / (2.0 * p.thickness);
    let fs_mason = bisect(|f| mason::impedance_at(&bare, f).im, 0.5 * fp_free, fp_free * (1.0 - 1e-9));
    let lhs = phi(fs_mason).tan() / phi(fs_mason);
    let err = (lhs * kt2 - 1.0).abs();
    // independent root of tan(phi)/phi = 1/kt^2
    let phi_oracle = bisect(|x| x.tan() / x - 1.0 / kt2, 0.5, PI / 2.0 - 1e-12);
    let f_oracle = phi_oracle * v / (PI * p.thickness);
    let err_f = rel(fs_mason, f_oracle);
    check(
        band <= 0.15 && err <= 1e-6 && err_f <= 1e-6,
        format!(
            "default stack fs = {fs:.5e} Hz ({:.1}% from 10.14 MHz, <= 15%); thin lossless plate: |kt^2 tan(phi)/phi - 1| = {err:.1e}, fs vs root oracle {err_f:.1e} (<= 1e-6)",
            100.0 * band
        ),
    )
}

fn criterion_6() -> Outcome {
    let m = reference_twin();
    let (fs, fp) = resonance_freqs(&m).unwrap();
    let spec = ConverterSpec::new(40.0, 30.0, 0.5 * (fs + fp));
    let sol = match solve_pss(&spec, &m) {
        Ok(s) => s,
        Err(e) => return check(false, format!("solve_pss failed: {e}")),
    };
    let per_ok = sol.periodicity_residual < 1e-9;
    let audit_ok = sol.audit.imbalance.abs() < 1e-6;

    let grid = linspace(fs, fp, 22)[1..21].to_vec();
    let pts = power_sweep(&spec, &m, &grid);
    let conv: Vec<_> = pts.iter().filter(|p| p.converged).collect();
    let p_mono = conv.windows(2).all(|w| w[1].p_out <= w[0].p_out);
    let bad_eta: Vec<String> = conv
        .windows(2)
        .filter(|w| w[1].efficiency < w[0].efficiency)
        .map(|w| format!("{:.3}", w[1].f_op / 1e6))
        .collect();
    let eta_mono = bad_eta.is_empty();
    let argmax = conv
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.p_out.total_cmp(&b.1.p_out))
        .map(|(k, _)| k);
    let max_first = argmax == Some(0) && conv.first().is_some_and(|p| p.f_op == grid[0]);

    let mut lossless = m.clone();
    lossless.branches[0].r_m = 0.0;
    let eta0 = solve_pss(&spec, &lossless).map(|s| s.efficiency);
    let lossless_ok = eta0 == Ok(1.0);

    let eta_peak = conv
        .iter()
        .max_by(|a, b| a.efficiency.total_cmp(&b.efficiency))
        .map(|p| (p.f_op, p.efficiency))
        .unwrap_or((f64::NAN, f64::NAN));
    check(
        per_ok && audit_ok && conv.len() == 20 && p_mono && eta_mono && max_first && lossless_ok,
        format!(
            "periodicity {:.1e} (< 1e-9), audit {:.1e} (< 1e-6), {}/20 converged, p_out non-increasing {p_mono}, max p_out nearest fs {max_first}, efficiency non-decreasing {eta_mono} (peak {:.5} at {:.3} MHz; decreases at {} MHz), lossless efficiency {:?}",
            sol.periodicity_residual,
            sol.audit.imbalance.abs(),
            conv.len(),
            eta_peak.1,
            eta_peak.0 / 1e6,
            if bad_eta.is_empty() { "-".to_string() } else { bad_eta.join(", ") },
            eta0
        ),
    )
}

fn criterion_7() -> Outcome {
    let clean = reference_twin();
    let (fs, fp) = resonance_freqs(&clean).unwrap();
    let f_spur = 0.5 * (fs + fp);
    let spurred = inject_spurs(&clean, &[Spur { f_hz: f_spur, coupling: 0.01, q: 1000.0 }]).unwrap();
    let grid = twin_grid();
    let score = |m: &BvdModel| metrics::score(&bvd::impedance(m, &grid).unwrap());
    let (sc, ss) = match (score(&clean), score(&spurred)) {
        (Ok(a), Ok(b)) => (a, b),
        (a, b) => return check(false, format!("scoring failed: {:?} / {:?}", a.err(), b.err())),
    };
    let smaller = ss.fractional_supp < sc.fractional_supp;

    let spec = ConverterSpec::new(40.0, 30.0, f_spur);
    let f_grid = linspace(fs, fp, 42)[1..41].to_vec();
    let imp = spur_impact(&spec, &clean, &spurred, &f_grid).unwrap();
    let lost = &imp.lost_hz;
    let nearest = f_grid
        .iter()
        .copied()
        .min_by(|a, b| (a - f_spur).abs().total_cmp(&(b - f_spur).abs()))
        .unwrap();
    let contains = !lost.is_empty() && lost.contains(&nearest);

    let restored = spur_impact(&spec, &clean, &clean, &f_grid).unwrap();
    let rs = score(&clean).unwrap();
    let restore_ok = restored.lost_hz.is_empty() && rs.fractional_supp == sc.fractional_supp;
    let span = if lost.is_empty() {
        "empty".to_string()
    } else {
        format!("{} points, {:.3}..{:.3} MHz", lost.len(), lost[0] / 1e6, lost[lost.len() - 1] / 1e6)
    };
    check(
        smaller && contains && restore_ok,
        format!(
            "fractional {:.3} -> {:.3} with spur (strictly smaller {smaller}); lost range {span}, contains spur at {:.3} MHz {contains}; restored {restore_ok}",
            sc.fractional_supp,
            ss.fractional_supp,
            f_spur / 1e6
        ),
    )
}

const SEED_S1P: &str = "! seed file\n# MHZ S MA R 50\n9.5 0.91 -80\n10.14 0.2 10\n10.9 0.97 -89\n11.3 0.5 179\n";
const SEED_CSV: &str = "# ref_ohm=50\nfreq_hz,re_ohm,im_ohm\n9.5e6,1.2,-300\n1.014e7,0.25,0.1\n1.1e7,20,40\n";

const TOKENS: &[&str] = &[
    "#", "!", " ", "\n", ",", "HZ", "MHZ", "kHz", "S", "Z", "RI", "MA", "DB", "R", "50", "-1", "0",
    "1", "1e308", "-1e308", "nan", "inf", "-0", "0.999999999", "1e-320", "freq_hz", "re_ohm",
    "im_ohm", "ref_ohm=", "\"", "\r\n", "\u{FEFF}", "é", "\t", "1.0.0", "e", "+",
];

fn mutate(rng: &mut ChaCha8Rng, base: &str) -> String {
    let mut s: Vec<char> = base.chars().collect();
    for _ in 0..rng.gen_range(1..6) {
        let pos = if s.is_empty() { 0 } else { rng.gen_range(0..=s.len()) };
        match rng.gen_range(0..4) {
            0 if !s.is_empty() && pos < s.len() => {
                let end = (pos + rng.gen_range(1..8)).min(s.len());
                s.drain(pos..end);
            }
            1 => {
                let t = TOKENS[rng.gen_range(0..TOKENS.len())];
                for (k, c) in t.chars().enumerate() {
                    s.insert(pos + k, c);
                }
            }
            2 if pos < s.len() => s[pos] = char::from(rng.gen_range(0x20u8..0x7f)),
            _ => {
                let x: f64 = f64::from_bits(rng.gen());
                for (k, c) in format!(" {x} ").chars().enumerate() {
                    s.insert(pos.min(s.len()) + k, c);
                }
            }
        }
    }
    s.into_iter().collect()
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(0..120);
    let bytes: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn same_bits(a: &SweepFile, b: &SweepFile) -> bool {
    let (x, y) = (&a.sweep, &b.sweep);
    x.len() == y.len()
        && x.ref_ohm().to_bits() == y.ref_ohm().to_bits()
        && x.freq_hz().iter().zip(y.freq_hz()).all(|(p, q)| p.to_bits() == q.to_bits())
        && x.z_ohm()
            .iter()
            .zip(y.z_ohm())
            .all(|(p, q)| p.re.to_bits() == q.re.to_bits() && p.im.to_bits() == q.im.to_bits())
}

fn criterion_8() -> Outcome {
    const N: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut crashes, mut parsed, mut trips, mut bad_trips) = (0usize, 0usize, 0usize, 0usize);
    let prev = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for k in 0..N {
        let text = match k % 3 {
            0 => mutate(&mut rng, SEED_S1P),
            1 => mutate(&mut rng, SEED_CSV),
            _ => random_text(&mut rng),
        };
        let r = catch_unwind(AssertUnwindSafe(|| {
            let mut out = Vec::new();
            if let Ok(f) = parse_touchstone_s1p(&text) {
                let ts = f.touchstone.as_ref().map(write_touchstone).unwrap_or_default();
                out.push((f.clone(), parse_touchstone_s1p(&ts)));
                out.push((f.clone(), parse_csv_sweep(&write_csv_sweep(&f.sweep))));
            }
            if let Ok(f) = parse_csv_sweep(&text) {
                out.push((f.clone(), parse_csv_sweep(&write_csv_sweep(&f.sweep))));
            }
            out
        }));
        match r {
            Err(_) => crashes += 1,
            Ok(out) => {
                if !out.is_empty() {
                    parsed += 1;
                }
                for (a, b) in out {
                    trips += 1;
                    if !b.as_ref().is_ok_and(|b| same_bits(&a, b)) {
                        bad_trips += 1;
                    }
                }
            }
        }
    }
    std::panic::set_hook(prev);
    check(
        crashes == 0 && bad_trips == 0 && trips > 0,
        format!("{N} inputs: {crashes} crashes, {parsed} parsed, {trips} round trips, {bad_trips} not bit-exact"),
    )
}

type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

fn main() {
    let criteria: [Criterion; 8] = [
        ("Table-1 self-consistency", criterion_1, Some(Duration::from_secs(5))),
        ("cut scan thickness-shear null", criterion_2, Some(Duration::from_secs(10))),
        ("BVD fit round trip", criterion_3, Some(Duration::from_secs(30))),
        ("Bode Q oracle", criterion_4, Some(Duration::from_secs(5))),
        ("Mason sanity band", criterion_5, Some(Duration::from_secs(10))),
        ("converter properties", criterion_6, Some(Duration::from_secs(60))),
        ("spur impact", criterion_7, Some(Duration::from_secs(60))),
        ("parser robustness", criterion_8, None),
    ];
    let mut failed = 0;
    for (k, (name, f, limit)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            check(false, format!("panicked: {msg}"))
        });
        let dt = t.elapsed();
        let in_time = limit.is_none_or(|l| dt < l);
        let pass = r.pass && in_time;
        if !pass {
            failed += 1;
        }
        let limit_txt = limit.map_or(String::new(), |l| format!(" / {}s", l.as_secs()));
        println!(
            "criterion {}: {} [{name}] {} ({:.2}s{limit_txt})",
            k + 1,
            if pass { "PASS" } else { "FAIL" },
            r.detail,
            dt.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
