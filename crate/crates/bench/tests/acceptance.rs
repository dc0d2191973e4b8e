//! Acceptance suite. Runs every criterion, prints one line each and exits
//! nonzero when a hard criterion fails. Performance criteria only warn.

mod common;

use std::hint::black_box;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cnn_bench::checks::{
    aggregate_scaling, cache_param_check, fusion_check, measure_cache_params, measure_fusion,
};
use cnn_bench::report::parse_json;
use cnn_bench::{emit_report, run_ladder, run_multi_instance, LadderStep, OutputFormat, RunConfig};
use cnn_engine::conv::{
    conv_gemm, conv_gemm_aux_bound, conv_gemm_into, conv_im2col_gemm, im2col, im2col_bytes,
    im2col_offset,
};
use cnn_engine::gemm::kernel::{self, Tile};
use cnn_engine::gemm::{
    gemm, microkernel, pack_a, pack_b, select_cache_params, CacheHierarchy, Epilogue,
    GemmCacheParams, GemmConfig, KernelKind, LoopVariant, MR, NR,
};
use cnn_engine::model::{parse_model, Engine, Weights, RESNET_MINI};
use cnn_engine::{ConvDescriptor, Fill, Layout, MatrixView, MatrixViewMut, Shape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

#[derive(Debug)]
struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

// ---- oracles ----

fn gemm_oracle(a: &MatrixView, b: &MatrixView, c0: &[f32], ldc: usize) -> Vec<f64> {
    let (m, n, k) = (a.rows(), b.cols(), a.cols());
    let mut c = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = c0[i * ldc + j] as f64;
            for p in 0..k {
                acc += a.get(i, p) as f64 * b.get(p, j) as f64;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

fn direct_conv(x: &Tensor, w: &Tensor, d: &ConvDescriptor) -> Vec<f64> {
    let s = x.shape();
    let ho = (s.height + 2 * d.ph - d.kh) / d.sh + 1;
    let wo = (s.width + 2 * d.pw - d.kw) / d.sw + 1;
    let mut y = vec![0.0f64; s.batch * ho * wo * d.cout];
    for b in 0..s.batch {
        for oh in 0..ho {
            for ow in 0..wo {
                for co in 0..d.cout {
                    let mut acc = 0.0f64;
                    for r in 0..d.kh {
                        for q in 0..d.kw {
                            let ih = (oh * d.sh + r) as isize - d.ph as isize;
                            let iw = (ow * d.sw + q) as isize - d.pw as isize;
                            if ih < 0 || iw < 0 || ih >= s.height as isize || iw >= s.width as isize
                            {
                                continue;
                            }
                            for ci in 0..d.cin {
                                acc += x.get(b, ih as usize, iw as usize, ci) as f64
                                    * w.get(co, r, q, ci) as f64;
                            }
                        }
                    }
                    y[((b * ho + oh) * wo + ow) * d.cout + co] = acc;
                }
            }
        }
    }
    y
}

fn rel_frobenius(got: &[f32], want: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (g, w) in got.iter().zip(want) {
        num += (*g as f64 - w).powi(2);
        den += w * w;
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

fn ulps(a: f32, b: f32) -> u64 {
    if a == b {
        return 0;
    }
    let key = |v: f32| {
        let bits = v.to_bits() as i32 as i64;
        if bits < 0 {
            i64::from(i32::MIN) - bits
        } else {
            bits
        }
    };
    (key(a) - key(b)).unsigned_abs()
}

fn max_ulps(a: &[f32], b: &[f32]) -> u64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| ulps(*x, *y))
        .max()
        .unwrap_or(0)
}

fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

// ---- criteria ----

const ODD_DIMS: [usize; 16] = [
    1, 2, 3, 5, 7, 8, 13, 31, 61, 64, 97, 127, 128, 199, 251, 256,
];

fn gemm_dim(rng: &mut ChaCha8Rng) -> usize {
    if rng.gen_bool(0.5) {
        *ODD_DIMS.choose(rng).unwrap()
    } else {
        rng.gen_range(1..=256)
    }
}

fn random_params(rng: &mut ChaCha8Rng) -> GemmCacheParams {
    let mc = MR * rng.gen_range(1..=40);
    let nc = NR * rng.gen_range(1..=80);
    let kc = rng.gen_range(1..=300);
    GemmCacheParams::new(mc, nc, kc, MR, NR).unwrap()
}

/// Random operand view: row-major, column-major, or a window into a larger
/// buffer.
fn layout_view(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> (Vec<f32>, usize, usize) {
    match rng.gen_range(0..3) {
        0 => (random_vec(rng, rows * cols), cols, 1),
        1 => (random_vec(rng, rows * cols), 1, rows),
        _ => {
            let ld = cols + rng.gen_range(1..5);
            (random_vec(rng, rows * ld), ld, 1)
        }
    }
}

fn gemm_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut shapes: Vec<(usize, usize, usize)> = vec![
        (1, 1, 1),
        (251, 1, 127),
        (1, 256, 251),
        (256, 256, 256),
        (97, 13, 1),
    ];
    while shapes.len() < 500 {
        shapes.push((gemm_dim(&mut rng), gemm_dim(&mut rng), gemm_dim(&mut rng)));
    }
    let mut worst = 0.0f64;
    let mut runs = 0;
    for &(m, n, k) in &shapes {
        let (ad, ars, acs) = layout_view(&mut rng, m, k);
        let (bd, brs, bcs) = layout_view(&mut rng, k, n);
        let a = MatrixView::new(&ad, m, k, ars, acs).unwrap();
        let b = MatrixView::new(&bd, k, n, brs, bcs).unwrap();
        let c0 = random_vec(&mut rng, m * n);
        let want = gemm_oracle(&a, &b, &c0, n);
        for variant in [LoopVariant::A2B1, LoopVariant::B2A1] {
            for threads in [1, 2, 4] {
                let cfg = GemmConfig::new(random_params(&mut rng), variant, threads);
                let mut c = c0.clone();
                let mut cv = MatrixViewMut::row_major(&mut c, m, n).unwrap();
                gemm(&a, &b, &mut cv, &cfg, &Epilogue::None).unwrap();
                let e = rel_frobenius(&c, &want);
                if e.is_nan() || e > TOL {
                    return outcome(
                        false,
                        format!(
                            "{m}x{n}x{k} {variant:?} t={threads} {:?}: error {e:.2e}",
                            cfg.params
                        ),
                    );
                }
                worst = worst.max(e);
                runs += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        elapsed < Duration::from_secs(120),
        format!(
            "{} shapes, {runs} runs, worst relative error {worst:.2e}, {:.1}s",
            shapes.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn random_geometry(rng: &mut ChaCha8Rng) -> (Shape, ConvDescriptor) {
    loop {
        let k = *[1usize, 3, 5, 7].choose(rng).unwrap();
        let s = rng.gen_range(1..=2);
        let p = rng.gen_range(0..k.max(2)).min(3);
        let cin = *[1usize, 3, 8, 16].choose(rng).unwrap();
        let cout = rng.gen_range(1..=24);
        let h = rng.gen_range(1..=14);
        let w = rng.gen_range(1..=14);
        if h + 2 * p < k || w + 2 * p < k {
            continue;
        }
        return (
            Shape::new(rng.gen_range(1..=2), h, w, cin),
            ConvDescriptor::square(k, s, p, cin, cout),
        );
    }
}

/// Output cells whose receptive field reaches into the padding.
fn border_cells(shape: Shape, d: &ConvDescriptor) -> Vec<usize> {
    let ho = (shape.height + 2 * d.ph - d.kh) / d.sh + 1;
    let wo = (shape.width + 2 * d.pw - d.kw) / d.sw + 1;
    let mut out = Vec::new();
    for b in 0..shape.batch {
        for oh in 0..ho {
            for ow in 0..wo {
                let top = oh * d.sh < d.ph;
                let left = ow * d.sw < d.pw;
                let bottom = oh * d.sh + d.kh > shape.height + d.ph;
                let right = ow * d.sw + d.kw > shape.width + d.pw;
                if top || left || bottom || right {
                    for co in 0..d.cout {
                        out.push(((b * ho + oh) * wo + ow) * d.cout + co);
                    }
                }
            }
        }
    }
    out
}

fn conv_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let hw = CacheHierarchy::detect();
    let mut worst = 0.0f64;
    let mut border = 0usize;
    for i in 0..100 {
        let (shape, d) = random_geometry(&mut rng);
        let g = d.geometry(shape).unwrap();
        let (params, variant) = select_cache_params(g.m, g.n, g.k, &hw);
        let cfg = GemmConfig::new(params, variant, rng.gen_range(1..=3));

        let x = Tensor::new(shape, Layout::Nhwc, Fill::Random(i)).unwrap();
        let w = Tensor::new(d.filter_shape(), Layout::Nhwc, Fill::Random(1000 + i)).unwrap();
        let want = direct_conv(&x, &w, &d);
        let (y1, _) = conv_im2col_gemm(&x, &w, &d, &cfg, &Epilogue::None).unwrap();
        let (y2, _) = conv_gemm(&x, &w, &d, &cfg, &Epilogue::None).unwrap();
        for (name, y) in [("im2col", &y1), ("convgemm", &y2)] {
            let e = rel_frobenius(y.data(), &want);
            if e.is_nan() || e > TOL {
                return outcome(false, format!("{name} on {shape} {d:?}: error {e:.2e}"));
            }
            worst = worst.max(e);
        }

        // small integers make every sum exact, so border cells must match bit for bit
        let xi: Vec<f32> = (0..shape.len())
            .map(|_| rng.gen_range(-4i32..=4) as f32)
            .collect();
        let wi: Vec<f32> = (0..d.filter_shape().len())
            .map(|_| rng.gen_range(-3i32..=3) as f32)
            .collect();
        let xi = Tensor::from_vec(shape, Layout::Nhwc, xi).unwrap();
        let wi = Tensor::from_vec(d.filter_shape(), Layout::Nhwc, wi).unwrap();
        let want = direct_conv(&xi, &wi, &d);
        let (y1, _) = conv_im2col_gemm(&xi, &wi, &d, &cfg, &Epilogue::None).unwrap();
        let (y2, _) = conv_gemm(&xi, &wi, &d, &cfg, &Epilogue::None).unwrap();
        for idx in border_cells(shape, &d) {
            if y1.data()[idx] as f64 != want[idx] || y2.data()[idx] as f64 != want[idx] {
                return outcome(false, format!("border cell {idx} differs on {shape} {d:?}"));
            }
            border += 1;
        }
        let cols = im2col(&xi, &d).unwrap();
        for q in 0..cols.cols() {
            for p in 0..cols.rows() {
                if im2col_offset(&d, &g, p, q).is_none() && cols.get(p, q) != 0.0 {
                    return outcome(
                        false,
                        format!("padding entry ({p}, {q}) is not zero on {shape} {d:?}"),
                    );
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        elapsed < Duration::from_secs(180),
        format!(
            "100 geometries, worst relative error {worst:.2e}, {border} border cells exact, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn mini_engine(step: LadderStep, threads: usize, batch: usize) -> (Engine, Tensor) {
    let model = parse_model(RESNET_MINI).unwrap();
    let cfg = RunConfig {
        threads,
        ..RunConfig::default()
    };
    let e = Engine::new(
        &model,
        Weights::for_model(&model).unwrap(),
        batch,
        cfg.engine_config(step),
    )
    .unwrap();
    let x = Tensor::new(e.input_shape(), Layout::Nhwc, Fill::Random(77)).unwrap();
    (e, x)
}

fn fusion_equivalence() -> Outcome {
    let (mut fused, x) = mini_engine(LadderStep::Fuse, 1, 8);
    let (mut plain, _) = mini_engine(LadderStep::CacheOpt, 1, 8);
    let a = fused.forward(&x).unwrap().0;
    let b = plain.forward(&x).unwrap().0;
    let u = max_ulps(a.data(), b.data());
    outcome(
        u <= 2,
        format!("resnet-mini t=8, {} outputs, max {u} ulp", a.len()),
    )
}

fn memory_ceiling() -> Outcome {
    let shape = Shape::new(32, 56, 56, 64);
    let d = ConvDescriptor::square(3, 1, 1, 64, 64);
    let g = d.geometry(shape).unwrap();
    let full = im2col_bytes(&g).unwrap();
    let x = Tensor::new(shape, Layout::Nhwc, Fill::Random(4)).unwrap();
    let w = Tensor::new(d.filter_shape(), Layout::Nhwc, Fill::Random(5)).unwrap();
    let mut y = Tensor::zeros(g.output_shape()).unwrap();
    let hw = CacheHierarchy::detect();
    let mut details = Vec::new();
    let configs = [
        select_cache_params(g.m, g.n, g.k, &hw),
        (GemmCacheParams::BLIS_DEFAULT, LoopVariant::A2B1),
        (GemmCacheParams::BLIS_DEFAULT, LoopVariant::B2A1),
    ];
    for (params, variant) in configs {
        for threads in [1, 4] {
            let cfg = GemmConfig::new(params, variant, threads);
            let st = conv_gemm_into(&x, &w, &d, &cfg, &Epilogue::None, &mut y).unwrap();
            let bound = conv_gemm_aux_bound(&params, variant, g.m, g.k, threads);
            let aux = st.aux_bytes();
            if aux > bound || aux * 10 >= full {
                return outcome(
                    false,
                    format!(
                        "{variant:?} t={threads}: aux {aux} B, bound {bound} B, im2col {full} B"
                    ),
                );
            }
            details.push(aux);
        }
    }
    let worst = details.iter().max().unwrap();
    outcome(
        true,
        format!(
            "aux at most {worst} B vs im2col {full} B ({:.2}%)",
            *worst as f64 / full as f64 * 100.0
        ),
    )
}

fn thread_determinism() -> Outcome {
    for step in [LadderStep::Baseline, LadderStep::Fuse] {
        let (mut e1, x) = mini_engine(step, 1, 4);
        let reference = e1.forward(&x).unwrap().0;
        for threads in [2, 4, 8] {
            let (mut e, _) = mini_engine(step, threads, 4);
            let y = e.forward(&x).unwrap().0;
            if y.data()
                .iter()
                .zip(reference.data())
                .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return outcome(false, format!("{step} differs at {threads} threads"));
            }
        }
    }
    outcome(
        true,
        "resnet-mini baseline and fuse bitwise equal for threads 1, 2, 4, 8",
    )
}

fn performance_direction() -> Outcome {
    let model = parse_model(RESNET_MINI).unwrap();
    let hw = CacheHierarchy::detect();
    let fusion = fusion_check(&measure_fusion(&model, 8, 1, &hw, 5).unwrap());
    let params = cache_param_check(&measure_cache_params(&model, 8, 1, &hw, 5).unwrap());
    let cfg = RunConfig {
        reps: 5,
        ..RunConfig::default()
    };
    let one = run_multi_instance(&cfg, 1).unwrap().report;
    let four = run_multi_instance(&cfg, 4).unwrap().report;
    let scaling = aggregate_scaling(&one, &four);
    let checks = [fusion, params, scaling];
    let detail = checks
        .iter()
        .map(|c| {
            format!(
                "{} [{}] {}",
                c.name,
                if c.passed { "ok" } else { "warn" },
                c.detail
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    outcome(checks.iter().all(|c| c.passed), detail)
}

fn microkernel_parity() -> Outcome {
    if KernelKind::Vector.resolve() != KernelKind::Vector {
        return outcome(false, "no vector micro-kernel on this CPU");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7007);
    let mut worst = 0;
    for _ in 0..10_000 {
        let kc = rng.gen_range(1..=512);
        let (mv, nv) = (rng.gen_range(1..=MR), rng.gen_range(1..=NR));
        let a = random_vec(&mut rng, kc * MR);
        let b = random_vec(&mut rng, kc * NR);
        let c0 = random_vec(&mut rng, mv * nv);
        let scale = random_vec(&mut rng, mv);
        let shift = random_vec(&mut rng, mv);
        let accumulate = rng.gen_bool(0.5);
        let ep = match rng.gen_range(0..4) {
            0 => Epilogue::None,
            1 => Epilogue::Relu,
            2 => Epilogue::BatchNorm {
                scale: &scale,
                shift: &shift,
            },
            _ => Epilogue::BatchNormRelu {
                scale: &scale,
                shift: &shift,
            },
        };
        let mut out = [c0.clone(), c0];
        for (c, kind) in out.iter_mut().zip([KernelKind::Vector, KernelKind::Scalar]) {
            let mut cv = MatrixViewMut::row_major(c, mv, nv).unwrap();
            microkernel(&a, &b, kc, &mut cv, accumulate, &ep, !ep.is_none(), kind).unwrap();
        }
        worst = worst.max(max_ulps(&out[0], &out[1]));
        if worst > 2 {
            return outcome(false, format!("kc={kc} tile {mv}x{nv}: {worst} ulp"));
        }
    }

    let kc = 368;
    let a = random_vec(&mut rng, kc * MR);
    let b = random_vec(&mut rng, kc * NR);
    let rate = |kind: KernelKind| {
        let mut tile: Tile = [0.0; MR * NR];
        let mut best = f64::INFINITY;
        for _ in 0..5 {
            let t = Instant::now();
            for _ in 0..2000 {
                kernel::run(kind, kc, black_box(&a), black_box(&b), &mut tile, None);
                black_box(&mut tile);
            }
            best = best.min(t.elapsed().as_secs_f64());
        }
        (2 * MR * NR * kc * 2000) as f64 / best / 1e9
    };
    let (vector, scalar) = (rate(KernelKind::Vector), rate(KernelKind::Scalar));
    let speedup = vector / scalar;
    outcome(
        speedup >= 2.0,
        format!("10000 panels within {worst} ulp; kc=368 vector {vector:.1} GFLOPS, scalar {scalar:.1} GFLOPS ({speedup:.1}x)"),
    )
}

fn packing_layout() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8008);
    for trial in 0..500 {
        let rows = rng.gen_range(1..=70);
        let cols = rng.gen_range(1..=70);
        let (data, rs, cs) = layout_view(&mut rng, rows, cols);
        let src = MatrixView::new(&data, rows, cols, rs, cs).unwrap();
        let logical: Vec<f32> = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| src.get(i, j))
            .collect();
        for (packed, panel, is_a) in [(pack_a(&src, MR), MR, true), (pack_b(&src, NR), NR, false)] {
            if packed.unpack() != logical {
                return outcome(
                    false,
                    format!("trial {trial}: unpack differs for {rows}x{cols}"),
                );
            }
            // consumption order: panel, then k, then lane must walk memory with unit stride
            let (outer, depth) = if is_a { (rows, cols) } else { (cols, rows) };
            let mut expect = 0usize;
            for p in 0..outer.div_ceil(panel) {
                for kk in 0..depth {
                    for lane in 0..panel {
                        let e = p * panel + lane;
                        if e < outer {
                            let (i, j) = if is_a { (e, kk) } else { (kk, e) };
                            if packed.index_of(i, j) != expect {
                                return outcome(
                                    false,
                                    format!("trial {trial}: stride break at ({i}, {j})"),
                                );
                            }
                        } else if packed.as_slice()[expect] != 0.0 {
                            return outcome(false, format!("trial {trial}: padding lane not zero"));
                        }
                        expect += 1;
                    }
                }
            }
            if expect != packed.as_slice().len() {
                return outcome(
                    false,
                    format!("trial {trial}: packed length {}", packed.as_slice().len()),
                );
            }
        }
    }
    outcome(
        true,
        "500 random blocks up to 70x70, A and B panels, all layouts",
    )
}

fn report_integrity() -> Outcome {
    let cfg = RunConfig {
        steps: LadderStep::ALL.to_vec(),
        reps: 3,
        ..RunConfig::default()
    };
    let mut reports: Vec<_> = run_ladder(&cfg)
        .unwrap()
        .into_iter()
        .map(|o| o.report)
        .collect();
    reports.push(run_multi_instance(&cfg, 3).unwrap().report);
    for r in &reports {
        if let Err(e) = r.check_invariants() {
            return outcome(false, format!("{}: {e}", r.run));
        }
        let sum = r.timing.percent_sum();
        if (sum - 100.0).abs() > 0.1 {
            return outcome(false, format!("{}: percentages sum to {sum}", r.run));
        }
    }
    let multi = reports.last().unwrap();
    let inst: f64 = multi.per_instance.iter().map(|i| i.images_per_second).sum();
    if inst != multi.images_per_second {
        return outcome(
            false,
            format!("aggregate {} vs sum {inst}", multi.images_per_second),
        );
    }
    let fake = common::fake_reports();
    for (name, format) in [
        ("report.csv", OutputFormat::Csv),
        ("report.json", OutputFormat::Json),
    ] {
        let golden = std::fs::read_to_string(common::golden_dir().join(name)).unwrap();
        if emit_report(&fake, format).unwrap() != golden {
            return outcome(false, format!("{name} drifted"));
        }
    }
    let golden_json = std::fs::read_to_string(common::golden_dir().join("report.json")).unwrap();
    if parse_json(&golden_json).unwrap() != fake {
        return outcome(false, "golden JSON does not parse back to its reports");
    }
    outcome(
        true,
        format!(
            "{} live reports sum to 100%, aggregate matches instances, golden CSV/JSON stable",
            reports.len()
        ),
    )
}

/// Number, whether a failure fails the suite, name and check.
type Criterion = (u8, bool, &'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, true, "gemm oracle suite", gemm_suite),
        (2, true, "convolution triple equivalence", conv_suite),
        (3, true, "fusion equivalence", fusion_equivalence),
        (4, true, "convgemm memory ceiling", memory_ceiling),
        (5, true, "thread determinism", thread_determinism),
        (6, false, "directional performance", performance_direction),
        (7, true, "micro-kernel parity", microkernel_parity),
        (8, true, "packing layout", packing_layout),
        (9, true, "report integrity", report_integrity),
    ];
    let mut failed = 0;
    for (n, hard, name, check) in criteria {
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let status = match (o.passed, hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "WARN",
        };
        if !o.passed && hard {
            failed += 1;
        }
        println!(
            "criterion {n} {status} {name} ({:.1}s): {}",
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
