//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The pretrained desk regression needs a VGG19 weight file; point
//! `DEEPTILE_VGG19_WEIGHTS` at one to run it. Without it that line is
//! reported as BLOCKED. The five-minute desk budget is stated for four
//! cores and is reported as BLOCKED on smaller machines.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use clap::Parser;
use deeptile::gram::{gram_matrix, GramObjective, GramMatrix};
use deeptile::image::{seam_weight, seeded_rng};
use deeptile::network::{FeatureObjective, LayerFeatures};
use deeptile::{
    adam_step, alpha_optimal, build_merged_canvas, expand, layer_loss, load_image, make_seam_init,
    make_white_noise, random_weights, save_image, synthesize, tile, AdamState, Direction,
    ExpansionPlan, FeatureNetwork, GramTargets, LayerId, LossConfig, MergedCanvas, OptimConfig,
    Precision, SeamNoiseConfig, TextureImage, TileGeometry, TileRequest,
};
use deeptile_cli::config::{resolve, Cli, Job};
use rand::Rng;

const WEIGHTS_ENV: &str = "DEEPTILE_VGG19_WEIGHTS";

enum Outcome {
    Pass(String),
    Fail(String),
    Blocked(String),
}

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, name: &str, outcome: Outcome) {
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                self.failures += 1;
                ("FAIL", d)
            }
            Outcome::Blocked(d) => ("BLOCKED", d),
        };
        println!("{tag:7} {name}: {detail}");
    }

    fn check(&mut self, name: &str, ok: bool, detail: String) {
        self.line(name, if ok { Outcome::Pass(detail) } else { Outcome::Fail(detail) });
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}

fn gram_oracle(report: &mut Report) {
    let start = Instant::now();
    let mut rng = seeded_rng(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let (h, w) = loop {
            let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
            if h * w <= 32 {
                break (h, w);
            }
        };
        let vs = h * w;
        let values: Vec<f64> = (0..n * vs).map(|_| rng.random::<f64>() * 4.0).collect();
        let g = gram_matrix(&LayerFeatures::new(n, h, w, values.clone()).unwrap()).unwrap();
        for r in 0..n {
            for c in 0..n {
                let mut sum = 0.0;
                for k in 0..vs {
                    sum += values[r * vs + k] * values[c * vs + k];
                }
                let expected = sum / vs as f64;
                worst = worst.max((g.get(r, c) - expected).abs() / expected.abs().max(f64::MIN_POSITIVE));
            }
        }
    }
    let elapsed = start.elapsed();
    report.check(
        "Gram oracle equivalence",
        worst <= 1e-10 && elapsed < Duration::from_secs(1),
        format!("max relative error {worst:.2e} over 100 maps (<= 1e-10) in {}", secs(elapsed)),
    );
}

fn loss_formula(report: &mut Report) {
    let mut worst = 0.0f64;
    let cases: [(usize, Vec<f64>, Vec<f64>); 3] = [
        (1, vec![2.0], vec![0.5]),
        (2, vec![1.0, 2.0, 2.0, 5.0], vec![0.0, -1.0, -1.0, 3.5]),
        (2, vec![0.25, 0.0, 0.0, 0.25], vec![1.0, 0.5, 0.5, 1.0]),
    ];
    for (n, a, b) in &cases {
        for w in [1.0, 0.2] {
            let ga = GramMatrix::from_rows(*n, a.clone(), true).unwrap();
            let gb = GramMatrix::from_rows(*n, b.clone(), true).unwrap();
            let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            let expected = w / (4.0 * (*n * *n) as f64) * sq;
            let got = layer_loss(&ga, &gb, *n, w).unwrap();
            worst = worst.max((got - expected).abs());
        }
    }
    report.check(
        "Loss formula",
        worst <= 1e-12,
        format!("max abs deviation {worst:.2e} on 1x1 and 2x2 pairs, w in {{1, 0.2}} (<= 1e-12)"),
    );
}

fn gradient(report: &mut Report) {
    let start = Instant::now();
    let noise = |seed: u64| {
        let mut rng = seeded_rng(seed);
        TextureImage::from_fn(16, 16, |_, _| {
            [rng.random::<f64>() * 255.0, rng.random::<f64>() * 255.0, rng.random::<f64>() * 255.0]
        })
        .unwrap()
    };
    let cfg = LossConfig::uniform(vec![LayerId::Layer1, LayerId::Pool1]).unwrap();
    let net = FeatureNetwork::<f64>::new(&random_weights(0));
    let targets = GramTargets::from_image(&net, &noise(2), &cfg).unwrap();
    let obj = GramObjective { targets: &targets, cfg: &cfg };
    let layers = FeatureObjective::<f64>::layers(&obj);
    let loss = |img: &TextureImage| obj.evaluate(&net.forward_features(img, &layers).unwrap()).unwrap().value;
    let img = noise(1);
    let grad = net.input_gradient(&img, &obj).unwrap();
    let scale = grad.data().iter().fold(0.0f64, |m, g| m.max(g.abs()));

    let h = 1e-3;
    let mut rng = seeded_rng(3);
    let mut worst = 0.0f64;
    for _ in 0..25 {
        let (r, c, ch) = (rng.random_range(0..16), rng.random_range(0..16), rng.random_range(0..3));
        let shifted = |delta: f64| {
            let mut out = img.clone();
            let mut p = img.pixel(r, c);
            p[ch] += delta;
            out.set_pixel(r, c, p);
            out
        };
        let numeric = (loss(&shifted(h)) - loss(&shifted(-h))) / (2.0 * h);
        let analytic = grad.pixel(r, c)[ch];
        let denom = analytic.abs().max(numeric.abs()).max(1e-6 * scale);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    let elapsed = start.elapsed();
    report.check(
        "Gradient correctness",
        worst < 1e-3 && elapsed < Duration::from_secs(30),
        format!("max relative error {worst:.2e} at 25 pixels (< 1e-3) in {}", secs(elapsed)),
    );
}

fn adam(report: &mut Report) {
    let cfg = OptimConfig::default();
    let mut rng = seeded_rng(4);
    let len = 257;
    let mut params: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let mut reference = params.clone();
    let (mut m, mut v) = (vec![0.0f64; len], vec![0.0f64; len]);
    let mut state = AdamState::new(len);
    let mut worst = 0.0f64;
    for t in 1..=20 {
        let grads: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        for i in 0..len {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grads[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
            let m_hat = m[i] / (1.0 - cfg.beta1.powi(t));
            let v_hat = v[i] / (1.0 - cfg.beta2.powi(t));
            reference[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            worst = worst.max((params[i] - reference[i]).abs());
        }
    }

    let quad = OptimConfig {
        learning_rate: 0.1,
        ..OptimConfig::default()
    };
    let mut x = [0.0f64];
    let mut state = AdamState::new(1);
    for _ in 0..500 {
        let g = [2.0 * (x[0] - 3.0)];
        adam_step(&mut x, &g, &mut state, &quad).unwrap();
    }
    let miss = (x[0] - 3.0).abs();
    report.check(
        "Adam conformance",
        worst <= 1e-12 && miss < 0.01,
        format!("max deviation from reference {worst:.2e} (<= 1e-12); |x - 3| = {miss:.2e} after 500 steps (< 0.01)"),
    );
}

fn alpha(report: &mut Report) {
    let a = alpha_optimal(256).unwrap();
    let d1 = (a - 50.0 * 2f64.ln() / 256.0).abs();
    let d2 = ((-a * 256.0 / 50.0).exp() - 0.5).abs();
    report.check(
        "Alpha formula",
        d1 <= 1e-9 && d2 <= 1e-12,
        format!("alpha(256) = {a:.10}, |alpha - 50 ln2/256| = {d1:.1e}, |e^(-alpha 256/50) - 0.5| = {d2:.1e}"),
    );
}

fn seam_law(report: &mut Report) {
    let d = (seam_weight(0.25, 10) - (-2.5f64).exp()).abs();
    let ex = TextureImage::from_fn(20, 24, |r, c| [(r * 11 + c) as f64, (c * 9) as f64 % 256.0, 37.0 + r as f64])
        .unwrap();
    let cfg = SeamNoiseConfig::new(0.25, 0, 24).unwrap();
    let mut exact = true;
    for dir in [Direction::Right, Direction::Up] {
        let geometry = TileGeometry::new(dir, 1.0, 1.0, 20, 24).unwrap();
        let init = make_seam_init(&ex, &geometry, &cfg).unwrap();
        match dir {
            Direction::Right => {
                exact &= (0..20).all(|r| init.pixel(r, 0) == ex.pixel(r, 23));
            }
            _ => {
                exact &= (0..24).all(|c| init.pixel(19, c) == ex.pixel(0, c));
            }
        }
    }
    report.check(
        "Seam-init law",
        d <= 1e-12 && exact,
        format!("|w(j=10) - e^-2.5| = {d:.1e}; j = 0 band equals mirrored exemplar: {exact}"),
    );
}

fn frozen_region(report: &mut Report) {
    let ex = TextureImage::from_fn(16, 16, |r, c| [(r * 16 + c) as f64, 255.0 - (c * 16) as f64, 128.0]).unwrap();
    let weights = random_weights(5);
    let mut identical = true;
    let mut runs = 0;
    for (dir, precision, iterations) in [
        (Direction::Right, Precision::Single, 1),
        (Direction::Up, Precision::Single, 5),
        (Direction::Right, Precision::Double, 3),
    ] {
        let noise = make_white_noise(16, 16, 7).unwrap();
        let canvas = build_merged_canvas(&ex, &noise, dir).unwrap();
        let cfg = OptimConfig {
            iterations,
            precision,
            ..OptimConfig::desk()
        };
        let (out, _): (MergedCanvas, _) = synthesize(&ex, &canvas, &weights, &LossConfig::default(), &cfg).unwrap();
        let row0 = if dir == Direction::Up { 16 } else { 0 };
        for r in 0..16 {
            for c in 0..16 {
                let (a, b) = (out.image().pixel(row0 + r, c), ex.pixel(r, c));
                identical &= a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
            }
        }
        runs += 1;
    }
    report.check(
        "Frozen-region invariance",
        identical,
        format!("fixed pixels bit-identical after {runs} runs (right/up, single/double, 1-5 iterations)"),
    );
}

fn geometry(report: &mut Report) {
    let ex = TextureImage::from_fn(256, 256, |r, c| [(r % 256) as f64, (c % 256) as f64, ((r + c) % 256) as f64])
        .unwrap();
    let cfg = OptimConfig {
        iterations: 0,
        ..OptimConfig::desk()
    };
    let weights = random_weights(0);
    let out = tile(&ex, &TileRequest::new(Direction::Right), &weights, &LossConfig::default(), &cfg).unwrap();
    let merged = (out.merged.image().height(), out.merged.image().width());

    let small = TextureImage::from_fn(16, 20, |r, c| [(r * 8) as f64, (c * 8) as f64, 50.0]).unwrap();
    let plan = ExpansionPlan(vec![TileRequest::new(Direction::Right), TileRequest::new(Direction::Up)]);
    let (grown, _) = expand(&small, &plan, &weights, &LossConfig::default(), &OptimConfig { iterations: 1, ..cfg })
        .unwrap();
    let grown = (grown.height(), grown.width());
    report.check(
        "Geometry",
        merged == (256, 512) && grown == (32, 40),
        format!("256x256 + right tile -> {}x{}; [right, up] on 16x20 -> {}x{}", merged.0, merged.1, grown.0, grown.1),
    );
}

fn paper_profile(report: &mut Report) {
    let resolved = |extra: &[&str]| {
        let mut argv = vec!["deeptile", "tile", "--input", "in.png", "--random-weights", "0", "--direction", "right", "--out", "o"];
        argv.extend_from_slice(extra);
        resolve(&Cli::try_parse_from(argv).unwrap().command).unwrap().unwrap()
    };
    let mut ok = true;
    let mut detail = String::new();
    for extra in [&["--profile", "paper"][..], &[]] {
        let cfg = resolved(extra);
        let factors = match cfg.job {
            Job::Tile { factor_w, factor_h, .. } => (factor_w, factor_h),
            _ => (f64::NAN, f64::NAN),
        };
        ok &= cfg.optim.iterations == 100_000 && cfg.optim.learning_rate == 0.0005 && factors == (1.0, 1.0);
        detail = format!(
            "iterations {}, lr {}, factors {}/{}",
            cfg.optim.iterations, cfg.optim.learning_rate, factors.0, factors.1
        );
    }
    report.check("Paper profile accepted", ok, detail);
}

fn desk_exemplar(dir: &Path) -> PathBuf {
    let img = TextureImage::from_fn(64, 64, |r, c| {
        let (y, x) = (r as f64, c as f64);
        let stripes = ((x * 0.7 + y * 0.3).sin() * 0.5 + 0.5) * 200.0;
        let blobs = ((x * 0.25).sin() * (y * 0.31).cos() * 0.5 + 0.5) * 255.0;
        [stripes, blobs, 0.5 * stripes + 0.3 * blobs]
    })
    .unwrap();
    let path = dir.join("exemplar64.png");
    save_image(&img, &path).unwrap();
    path
}

struct DeskRun {
    out: PathBuf,
    threads: usize,
    losses: Vec<(usize, f64)>,
    elapsed: Duration,
}

/// Worker threads for the timed desk runs.
fn desk_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(4)
}

fn desk_run(input: &Path, weights: &[&str], threads: usize, out: PathBuf) -> Result<DeskRun, String> {
    let start = Instant::now();
    let threads = threads.to_string();
    let status = Command::new(env!("CARGO_BIN_EXE_deeptile"))
        .args(["tile", "--input", input.to_str().unwrap(), "--direction", "right", "--profile", "desk"])
        .args(["--seed", "0", "--threads", &threads, "--log-every", "1", "--out", out.to_str().unwrap()])
        .args(weights)
        .env("RUST_LOG", "warn")
        .status()
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    if !status.success() {
        return Err(format!("deeptile exited with {status}"));
    }
    let text = std::fs::read_to_string(out.join("trace.csv")).map_err(|e| e.to_string())?;
    let losses = text
        .lines()
        .skip(1)
        .map(|l| {
            let mut cells = l.split(',');
            let it = cells.next().unwrap().parse().unwrap();
            (it, cells.next().unwrap().parse().unwrap())
        })
        .collect();
    Ok(DeskRun {
        out,
        threads: threads.parse().unwrap(),
        losses,
        elapsed,
    })
}

fn ratio(run: &DeskRun) -> f64 {
    run.losses.last().unwrap().1 / run.losses[0].1
}

/// Checks the five-minute budget, which is stated for four cores.
fn desk_runtime(report: &mut Report, name: &str, run: &DeskRun) {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let detail = format!("{} with {} thread(s) on {cores} core(s) (< 300 s on 4 cores)", secs(run.elapsed), run.threads);
    if cores >= 4 {
        report.check(name, run.elapsed < Duration::from_secs(300), detail);
    } else {
        report.line(name, Outcome::Blocked(format!("{detail}; fewer than 4 cores available")));
    }
}

fn desk_regression(report: &mut Report, dir: &Path, input: &Path) -> Option<DeskRun> {
    let name = "Desk-scale synthesis regression";
    match std::env::var_os(WEIGHTS_ENV) {
        Some(path) => {
            let path = path.to_string_lossy().into_owned();
            match desk_run(input, &["--weights", &path], desk_threads(), dir.join("desk_pretrained")) {
                Ok(run) => {
                    let r = ratio(&run);
                    report.check(&format!("{name} (pretrained)"), r <= 0.10, format!("final/initial loss {r:.4} (<= 0.10)"));
                    desk_runtime(report, &format!("{name} (pretrained) runtime"), &run);
                }
                Err(e) => report.line(&format!("{name} (pretrained)"), Outcome::Fail(e)),
            }
        }
        None => report.line(
            &format!("{name} (pretrained)"),
            Outcome::Blocked(format!("no pretrained VGG19 weights available; set {WEIGHTS_ENV} to a VGGW file")),
        ),
    }
    match desk_run(input, &["--random-weights", "0"], desk_threads(), dir.join("desk_a")) {
        Ok(run) => {
            let r = ratio(&run);
            report.check(
                &format!("{name} (random weights)"),
                r <= 0.30,
                format!("final/initial loss {r:.4} (<= 0.30) after {} iterations", run.losses.last().unwrap().0),
            );
            desk_runtime(report, &format!("{name} (random weights) runtime"), &run);
            Some(run)
        }
        Err(e) => {
            report.line(&format!("{name} (random weights)"), Outcome::Fail(e));
            None
        }
    }
}

fn smoothed_trend(report: &mut Report, run: &DeskRun) {
    let at = |it: usize| {
        let window: Vec<f64> = run.losses.iter().filter(|(i, _)| *i + 50 > it && *i <= it).map(|p| p.1).collect();
        window.iter().sum::<f64>() / window.len() as f64
    };
    let (early, late) = (at(50), at(500));
    report.check(
        "Smoothed loss trend",
        late < early,
        format!("window-50 mean at iteration 500 = {late:.4e} < at iteration 50 = {early:.4e}"),
    );
}

fn determinism(report: &mut Report, dir: &Path, input: &Path, earlier: &DeskRun) {
    let name = "Determinism";
    let single = |out: &str| desk_run(input, &["--random-weights", "0"], 1, dir.join(out));
    let runs = if earlier.threads == 1 {
        single("desk_b").map(|b| (None, b))
    } else {
        single("desk_b").and_then(|b| single("desk_c").map(|c| (Some(b), c)))
    };
    match runs {
        Ok((b, c)) => {
            let first = b.as_ref().unwrap_or(earlier);
            let a = std::fs::read(first.out.join("merged.png")).unwrap_or_default();
            let other = std::fs::read(c.out.join("merged.png")).unwrap_or_default();
            let same_losses = first.losses.iter().map(|p| p.1.to_bits()).eq(c.losses.iter().map(|p| p.1.to_bits()));
            report.check(
                name,
                !a.is_empty() && a == other && same_losses,
                format!(
                    "two desk runs with --threads 1: merged.png identical {}, loss traces identical {same_losses}",
                    a == other
                ),
            );
        }
        Err(e) => report.line(name, Outcome::Fail(e)),
    }
}

fn desk_frozen(report: &mut Report, input: &Path, run: &DeskRun) {
    let original = load_image(input).unwrap();
    let merged = load_image(run.out.join("merged.png")).unwrap();
    let left = merged.crop(deeptile::Rect::new(0, 0, 64, 64)).unwrap();
    report.check(
        "Frozen-region invariance (desk run)",
        left == original && merged.width() == 128,
        format!("exemplar half of the 64x128 merged.png equals the input: {}", left == original),
    );
}

fn main() {
    let mut report = Report { failures: 0 };
    gram_oracle(&mut report);
    loss_formula(&mut report);
    gradient(&mut report);
    adam(&mut report);
    alpha(&mut report);
    seam_law(&mut report);
    frozen_region(&mut report);
    geometry(&mut report);
    paper_profile(&mut report);

    let dir = tempfile::tempdir().unwrap();
    let input = desk_exemplar(dir.path());
    if let Some(run) = desk_regression(&mut report, dir.path(), &input) {
        smoothed_trend(&mut report, &run);
        desk_frozen(&mut report, &input, &run);
        determinism(&mut report, dir.path(), &input, &run);
    } else {
        report.line("Determinism", Outcome::Fail("first desk run failed".into()));
    }

    println!("acceptance: {} failure(s)", report.failures);
    if report.failures > 0 {
        std::process::exit(1);
    }
}
