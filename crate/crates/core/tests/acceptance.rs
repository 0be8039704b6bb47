//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured numbers. Tests share a lock so timing-sensitive measurements
//! never overlap with the training runs.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ternkit_core::activations::{tern_tanh_at, tern_tanh_slope_at, ContinuationSchedule};
use ternkit_core::bench::{default_shapes, report_csv, run_gemm_bench, with_thread_count, BenchShape};
use ternkit_core::kernels::{binary_dot, ternary_dot};
use ternkit_core::network::{
    build_table1, build_toy, count_flops, count_params_memory, deserialize_bytes, forward,
    serialize_bytes, ConvEngine, ForwardOptions, LayerKind, Mode, Model, NetworkSpec, Precision,
};
use ternkit_core::quantize::{binarize_weights, tern_hard_scalar, ternarize_weights};
use ternkit_core::training::{
    forward_backward_batch, metrics_csv, synth_dataset, train, ActKind, MasterWeights,
    TrainConfig,
};
use ternkit_core::{DenseTensor, Error, PackedTernaryTensor};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    LOCK.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|e| e.into_inner())
}

fn pack_row(codes: &[i8]) -> PackedTernaryTensor {
    PackedTernaryTensor::pack(codes, &[codes.len()]).unwrap()
}

fn int_dot(a: &[i8], b: &[i8]) -> i32 {
    a.iter().zip(b).map(|(&x, &y)| x as i32 * y as i32).sum()
}

#[test]
fn acceptance_01_binary_dot_identity() {
    let _guard = serial();
    let start = Instant::now();

    // exhaustive c = 8: all 65,536 sign pairs
    let mut checked = 0usize;
    for abits in 0..256u32 {
        for bbits in 0..256u32 {
            let a: Vec<i8> = (0..8).map(|i| if abits >> i & 1 == 1 { 1 } else { -1 }).collect();
            let b: Vec<i8> = (0..8).map(|i| if bbits >> i & 1 == 1 { 1 } else { -1 }).collect();
            let (pa, pb) = (pack_row(&a), pack_row(&b));
            assert_eq!(
                binary_dot(pa.row(0), pb.row(0)).unwrap(),
                int_dot(&a, &b),
                "a={abits:08b} b={bbits:08b}"
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 65_536);

    // randomized at c in {64, 576}
    let mut rng = ChaCha8Rng::seed_from_u64(0xE8);
    for &c in &[64usize, 576] {
        for _ in 0..10_000 {
            let a: Vec<i8> = (0..c).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
            let b: Vec<i8> = (0..c).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
            let (pa, pb) = (pack_row(&a), pack_row(&b));
            assert_eq!(binary_dot(pa.row(0), pb.row(0)).unwrap(), int_dot(&a, &b));
        }
    }

    println!(
        "ACCEPTANCE 1 (binary dot identity): PASS — 65536 exhaustive at c=8, 2x10^4 random, {:.2} s",
        start.elapsed().as_secs_f64()
    );
}

#[test]
fn acceptance_02_ternary_dot_oracle_equivalence() {
    let _guard = serial();
    let start = Instant::now();

    for &x in &[-1i8, 0, 1] {
        for &y in &[-1i8, 0, 1] {
            let (pa, pb) = (pack_row(&[x]), pack_row(&[y]));
            assert_eq!(ternary_dot(pa.row(0), pb.row(0)).unwrap(), x as i32 * y as i32);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0xE9);
    for &c in &[64usize, 576, 1152] {
        for _ in 0..10_000 {
            let a: Vec<i8> = (0..c).map(|_| rng.gen_range(-1..=1)).collect();
            let b: Vec<i8> = (0..c).map(|_| rng.gen_range(-1..=1)).collect();
            let (pa, pb) = (pack_row(&a), pack_row(&b));
            assert_eq!(
                ternary_dot(pa.row(0), pb.row(0)).unwrap(),
                int_dot(&a, &b),
                "exact equality required"
            );
        }
    }

    println!(
        "ACCEPTANCE 2 (ternary dot oracle equivalence): PASS — 9 exhaustive pairs, 3x10^4 random, {:.2} s",
        start.elapsed().as_secs_f64()
    );
}

/// Quantisation error of the threshold `delta` with the per-delta optimal
/// scale, from sorted magnitudes and suffix sums.
fn sweep_min_error(mags_sorted: &[f64], suffix: &[f64], sumsq: f64, grid: usize) -> f64 {
    let n = mags_sorted.len();
    let max = mags_sorted[n - 1];
    let mut best = sumsq; // delta >= max: everything zeroed
    for g in 0..grid {
        let delta = max * g as f64 / grid as f64;
        let idx = mags_sorted.partition_point(|&m| m <= delta);
        let ns = n - idx;
        if ns == 0 {
            continue;
        }
        let alpha = suffix[idx] / ns as f64;
        let err = sumsq - ns as f64 * alpha * alpha;
        if err < best {
            best = err;
        }
    }
    best
}

#[test]
fn acceptance_03_ternary_quantiser_near_optimality() {
    let _guard = serial();
    let start = Instant::now();

    // the worked example
    let q = ternarize_weights(
        &DenseTensor::from_vec(&[1, 4], vec![0.8, -0.9, 0.05, 0.85]).unwrap(),
    )
    .unwrap();
    assert!((q.delta[0] - 0.455).abs() < 1e-6, "delta {}", q.delta[0]);
    assert!((q.alpha[0] - 0.85).abs() < 1e-6, "alpha {}", q.alpha[0]);
    assert_eq!(q.codes, vec![1, -1, 0, 1]);

    let n = 288usize;
    let trials = 1000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0x44);
    let normal = |rng: &mut ChaCha8Rng| -> f64 {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };

    let mut sum_eq4 = 0f64;
    let mut sum_opt = 0f64;
    let mut worst_ratio = 0f64;
    let mut ternary_wins = 0usize;
    for _ in 0..trials {
        let w: Vec<f32> = (0..n).map(|_| (normal(&mut rng) * 0.3) as f32).collect();
        let bank = DenseTensor::from_vec(&[1, n], w.clone()).unwrap();

        let q = ternarize_weights(&bank).unwrap();
        let e_eq4: f64 = w
            .iter()
            .zip(&q.codes)
            .map(|(&wi, &c)| (wi as f64 - q.alpha[0] as f64 * c as f64).powi(2))
            .sum();

        let b = binarize_weights(&bank).unwrap();
        let e_bin: f64 = w
            .iter()
            .zip(&b.codes)
            .map(|(&wi, &c)| (wi as f64 - b.alpha[0] as f64 * c as f64).powi(2))
            .sum();
        if e_eq4 <= e_bin {
            ternary_wins += 1;
        }

        let mut mags: Vec<f64> = w.iter().map(|&v| v.abs() as f64).collect();
        mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let sumsq: f64 = mags.iter().map(|m| m * m).sum();
        let mut suffix = vec![0f64; n + 1];
        for i in (0..n).rev() {
            suffix[i] = suffix[i + 1] + mags[i];
        }
        let e_opt = sweep_min_error(&mags, &suffix, sumsq, 1000);

        sum_eq4 += e_eq4;
        sum_opt += e_opt;
        worst_ratio = worst_ratio.max(e_eq4 / e_opt);
    }

    let excess = sum_eq4 / sum_opt;
    assert!(
        excess <= 1.02,
        "aggregate L2 error {excess:.4}x the brute-force optimum exceeds 2%"
    );
    assert!(
        ternary_wins >= 950,
        "ternary beat binary on only {ternary_wins}/1000 filters"
    );

    println!(
        "ACCEPTANCE 3 (ternary quantiser near-optimality): PASS — error {:.3}% over brute-force optimum (worst filter {:.2}%), ternary <= binary on {}/1000, {:.2} s",
        (excess - 1.0) * 100.0,
        (worst_ratio - 1.0) * 100.0,
        ternary_wins,
        start.elapsed().as_secs_f64()
    );
}

#[test]
fn acceptance_04_continuation_limit() {
    let _guard = serial();
    let mut max_diff = 0f64;
    let mut points = 0usize;
    for i in 0..10_000 {
        let x = -2.0 + 4.0 * i as f64 / 9_999.0;
        if (x.abs() - 0.5).abs() <= 0.05 {
            continue;
        }
        let soft = tern_tanh_at(x, 50.0);
        let hard = tern_hard_scalar(x as f32) as f64;
        max_diff = max_diff.max((soft - hard).abs());
        points += 1;
    }
    assert!(max_diff < 0.01, "max |ternTanh(x, 50) - tern(x)| = {max_diff}");
    println!(
        "ACCEPTANCE 4 (continuation limit): PASS — max diff {max_diff:.2e} over {points} grid points"
    );
}

// -------- criterion 5: gradients (scalar + micro-net vs f64 oracle) --------

/// Independent f64 forward pass over the same layer graph: direct nested-loop
/// convolutions, batch-statistics batch norm, soft ternary tanh, and the
/// weighted cross-entropy, entirely separate from the crate's f32 path.
mod oracle {
    use super::*;

    pub struct Params {
        pub conv: Vec<Option<Vec<f64>>>,
        pub gain: Vec<Option<Vec<f64>>>,
        pub shift: Vec<Option<Vec<f64>>>,
    }

    struct Map {
        c: usize,
        h: usize,
        w: usize,
        /// per sample: c*h*w values
        data: Vec<Vec<f64>>,
    }

    fn conv(spec_layer: &ternkit_core::network::LayerSpec, x: &Map, w: &[f64]) -> Map {
        let (kh, kw, pad) = (spec_layer.kernel.0, spec_layer.kernel.1, spec_layer.padding);
        let (cin, cout) = (spec_layer.in_channels, spec_layer.out_channels);
        assert_eq!(x.c, cin);
        let (oh, ow) = (x.h + 2 * pad + 1 - kh, x.w + 2 * pad + 1 - kw);
        let mut out = Vec::with_capacity(x.data.len());
        for sample in &x.data {
            let mut o = vec![0f64; cout * oh * ow];
            for oc in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0f64;
                        for ic in 0..cin {
                            for y in 0..kh {
                                for xx in 0..kw {
                                    let iy = oy as isize + y as isize - pad as isize;
                                    let ix = ox as isize + xx as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize
                                    {
                                        continue;
                                    }
                                    let iv = sample[(ic * x.h + iy as usize) * x.w + ix as usize];
                                    let wv = w[((oc * cin + ic) * kh + y) * kw + xx];
                                    acc += iv * wv;
                                }
                            }
                        }
                        o[(oc * oh + oy) * ow + ox] = acc;
                    }
                }
            }
            out.push(o);
        }
        Map { c: cout, h: oh, w: ow, data: out }
    }

    fn bn(x: &Map, gain: &[f64], shift: &[f64]) -> Map {
        let m = (x.data.len() * x.h * x.w) as f64;
        let plane = x.h * x.w;
        let mut out: Vec<Vec<f64>> = x.data.iter().map(|s| vec![0.0; s.len()]).collect();
        for c in 0..x.c {
            let mut sum = 0f64;
            for s in &x.data {
                for i in 0..plane {
                    sum += s[c * plane + i];
                }
            }
            let mu = sum / m;
            let mut sq = 0f64;
            for s in &x.data {
                for i in 0..plane {
                    sq += (s[c * plane + i] - mu).powi(2);
                }
            }
            let var = sq / m;
            let inv = 1.0 / (var + 1e-5f32 as f64).sqrt();
            for (s, o) in x.data.iter().zip(&mut out) {
                for i in 0..plane {
                    o[c * plane + i] = (s[c * plane + i] - mu) * inv * gain[c] + shift[c];
                }
            }
        }
        Map { c: x.c, h: x.h, w: x.w, data: out }
    }

    fn act(x: &Map, beta: f64) -> Map {
        Map {
            c: x.c,
            h: x.h,
            w: x.w,
            data: x
                .data
                .iter()
                .map(|s| s.iter().map(|&v| tern_tanh_at(v, beta)).collect())
                .collect(),
        }
    }

    fn pool(x: &Map) -> Map {
        let (oh, ow) = (x.h / 2, x.w / 2);
        let plane = x.h * x.w;
        let data = x
            .data
            .iter()
            .map(|s| {
                let mut o = vec![0f64; x.c * oh * ow];
                for c in 0..x.c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let p = c * plane + 2 * oy * x.w + 2 * ox;
                            o[(c * oh + oy) * ow + ox] =
                                (s[p] + s[p + 1] + s[p + x.w] + s[p + x.w + 1]) / 4.0;
                        }
                    }
                }
                o
            })
            .collect();
        Map { c: x.c, h: oh, w: ow, data }
    }

    fn upsample(x: &Map) -> Map {
        let (oh, ow) = (x.h * 2, x.w * 2);
        let data = x
            .data
            .iter()
            .map(|s| {
                let mut o = vec![0f64; x.c * oh * ow];
                for c in 0..x.c {
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            let v = s[(c * x.h + y) * x.w + xx];
                            let p = (c * oh + 2 * y) * ow + 2 * xx;
                            o[p] = v;
                            o[p + 1] = v;
                            o[p + ow] = v;
                            o[p + ow + 1] = v;
                        }
                    }
                }
                o
            })
            .collect();
        Map { c: x.c, h: oh, w: ow, data }
    }

    fn concat(a: &Map, b: &Map) -> Map {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| {
                let mut o = x.clone();
                o.extend_from_slice(y);
                o
            })
            .collect();
        Map { c: a.c + b.c, h: a.h, w: a.w, data }
    }

    pub fn loss(
        spec: &NetworkSpec,
        params: &Params,
        images: &DenseTensor,
        targets: &[u8],
        beta: f64,
        w_bg: f64,
        w_fg: f64,
    ) -> f64 {
        let s = images.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let per = c * h * w;
        let mut x = Map {
            c,
            h,
            w,
            data: (0..n)
                .map(|i| images.data()[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect())
                .collect(),
        };
        let mut saved: Vec<Option<Map>> = (0..spec.layers.len()).map(|_| None).collect();
        let sources = spec.skip_sources();
        for (i, layer) in spec.layers.iter().enumerate() {
            x = match layer.kind {
                LayerKind::Conv | LayerKind::Prediction => {
                    conv(layer, &x, params.conv[i].as_ref().unwrap())
                }
                LayerKind::BatchNorm => bn(
                    &x,
                    params.gain[i].as_ref().unwrap(),
                    params.shift[i].as_ref().unwrap(),
                ),
                LayerKind::Activation => act(&x, beta),
                LayerKind::AvgPool => pool(&x),
                LayerKind::Upsample => upsample(&x),
                LayerKind::ConcatSkip => {
                    concat(&x, saved[layer.skip_source.unwrap()].as_ref().unwrap())
                }
            };
            if sources.contains(&i) {
                saved[i] = Some(Map { c: x.c, h: x.h, w: x.w, data: x.data.clone() });
            }
        }
        // softmax + weighted cross-entropy, mean over pixels
        let plane = x.h * x.w;
        let total = (n * plane) as f64;
        let mut loss = 0f64;
        for (s_idx, sample) in x.data.iter().enumerate() {
            for i in 0..plane {
                let (s0, s1) = (sample[i], sample[plane + i]);
                let t = targets[s_idx * plane + i];
                let m = s0.max(s1);
                let z = (s0 - m).exp() + (s1 - m).exp();
                let log_pt = if t == 0 { s0 - m - z.ln() } else { s1 - m - z.ln() };
                loss -= if t == 0 { w_bg } else { w_fg } * log_pt;
            }
        }
        loss / total
    }
}

#[test]
fn acceptance_05_gradient_checks() {
    let _guard = serial();
    let start = Instant::now();

    // (a) analytic derivative of the ternary tanh vs central differences
    let mut rng = ChaCha8Rng::seed_from_u64(0x6D);
    let h = 1e-6;
    let mut checked = 0;
    let mut worst = 0f64;
    while checked < 100 {
        let x = rng.gen_range(-1.5..1.5f64);
        let beta = rng.gen_range(0.5..8.0f64);
        let analytic = tern_tanh_slope_at(x, beta);
        if analytic < 1e-4 {
            continue; // saturated: the quotient cancels below the tolerance
        }
        let fd = (tern_tanh_at(x + h, beta) - tern_tanh_at(x - h, beta)) / (2.0 * h);
        let rel = (analytic - fd).abs() / analytic.abs();
        assert!(rel < 1e-5, "x={x} beta={beta}: rel {rel}");
        worst = worst.max(rel);
        checked += 1;
    }

    // (b) end-to-end micro-net gradient vs an independent f64 finite-difference
    // oracle (all layer types: conv, bn, pool, upsample, concat, soft ternary
    // tanh, prediction, softmax + weighted cross-entropy)
    let spec = build_toy(2, 1, 2, 8).unwrap();
    let master = MasterWeights::init(&spec, 0xBEEF).unwrap();
    let samples = synth_dataset(0x05, 2, 8, 1);
    let mut data = Vec::new();
    let mut targets = Vec::new();
    for s in &samples {
        data.extend_from_slice(s.image.data());
        targets.extend_from_slice(&s.mask);
    }
    let images = DenseTensor::from_vec(&[2, 1, 8, 8], data).unwrap();
    let beta = 4.0f32;
    let (w_bg, w_fg) = (0.5f32, 2.5f32);

    let (_, grads) = forward_backward_batch(
        &spec,
        &master.conv,
        &master.bn_gain,
        &master.bn_shift,
        &images,
        &targets,
        ActKind::TernTanh(beta),
        w_bg,
        w_fg,
    )
    .unwrap();

    let mut params = oracle::Params {
        conv: master
            .conv
            .iter()
            .map(|t| t.as_ref().map(|t| t.data().iter().map(|&v| v as f64).collect()))
            .collect(),
        gain: master
            .bn_gain
            .iter()
            .map(|g| g.as_ref().map(|g| g.iter().map(|&v| v as f64).collect()))
            .collect(),
        shift: master
            .bn_shift
            .iter()
            .map(|s| s.as_ref().map(|s| s.iter().map(|&v| v as f64).collect()))
            .collect(),
    };

    let fd_h = 1e-5f64;
    let mut worst_group = 0f64;
    let mut check_group = |name: String, which: usize, layer: usize, analytic: &[f32]| {
        fn slot<'p>(p: &'p mut oracle::Params, which: usize, layer: usize, j: usize) -> &'p mut f64 {
            match which {
                0 => &mut p.conv[layer].as_mut().unwrap()[j],
                1 => &mut p.gain[layer].as_mut().unwrap()[j],
                _ => &mut p.shift[layer].as_mut().unwrap()[j],
            }
        }
        let len = analytic.len();
        let mut fd = Vec::with_capacity(len);
        for j in 0..len {
            let orig = *slot(&mut params, which, layer, j);
            *slot(&mut params, which, layer, j) = orig + fd_h;
            let up = oracle::loss(&spec, &params, &images, &targets, beta as f64, w_bg as f64, w_fg as f64);
            *slot(&mut params, which, layer, j) = orig - fd_h;
            let down = oracle::loss(&spec, &params, &images, &targets, beta as f64, w_bg as f64, w_fg as f64);
            *slot(&mut params, which, layer, j) = orig;
            fd.push((up - down) / (2.0 * fd_h));
        }
        let mut num = 0f64;
        let mut den = 0f64;
        for (&a, &b) in analytic.iter().zip(&fd) {
            num += (a as f64 - b).powi(2);
            den += b * b;
        }
        let rel = (num / den.max(1e-18)).sqrt();
        assert!(rel < 1e-3, "{name}: gradient rel error {rel}");
        worst_group = worst_group.max(rel);
    };

    for i in 0..spec.layers.len() {
        if let Some(g) = &grads.conv[i] {
            check_group(format!("conv weights (layer {i})"), 0, i, g.data());
        }
        if let Some(g) = &grads.bn_gain[i] {
            check_group(format!("bn gain (layer {i})"), 1, i, g);
        }
        if let Some(g) = &grads.bn_shift[i] {
            check_group(format!("bn shift (layer {i})"), 2, i, g);
        }
    }

    println!(
        "ACCEPTANCE 5 (gradient checks): PASS — scalar rel < {worst:.1e} (tol 1e-5), micro-net group rel < {worst_group:.1e} (tol 1e-3), {:.1} s",
        start.elapsed().as_secs_f64()
    );
}

#[test]
fn acceptance_06_published_accounting() {
    let _guard = serial();
    let start = Instant::now();
    let spec = build_table1();
    let flops = count_flops(&spec).unwrap();
    let rounded: Vec<i64> = flops.iter().map(|f| f.mflops.round() as i64).collect();
    let expected: Vec<i64> =
        vec![172, 718, 345, 661, 303, 552, 31, 31, 2005, 453, 1719, 407, 1583, 770, 2];
    assert_eq!(rounded, expected, "per-layer MFlops");

    let float = count_params_memory(&spec, Precision::Float32);
    assert_eq!(float.params, 2_661_728);
    let tern = count_params_memory(&spec, Precision::Ternary2Bit);
    let bin = count_params_memory(&spec, Precision::Binary1Bit);
    for (mb, want) in [
        (float.payload_mbytes(), 10.6),
        (tern.payload_mbytes(), 0.66),
        (bin.payload_mbytes(), 0.33),
    ] {
        assert!(
            (mb - want).abs() / want < 0.01,
            "memory {mb:.4} MB vs published {want} MB"
        );
    }
    println!(
        "ACCEPTANCE 6 (published accounting): PASS — 15 MFlops entries, {} params, 10.6/0.66/0.33 MB, {:.3} s",
        float.params,
        start.elapsed().as_secs_f64()
    );
}

#[test]
fn acceptance_07_mode_equivalence() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x07);
    for case in 0..20 {
        let width = *[2usize, 4, 6].iter().nth(rng.gen_range(0..3)).unwrap();
        let levels = rng.gen_range(2..=3usize);
        let slices = rng.gen_range(1..=3usize);
        let image = if levels == 3 { 16 } else { *[16usize, 32].iter().nth(rng.gen_range(0..2)).unwrap() };
        let spec = build_toy(width, slices, levels, image).unwrap();
        let model = Model::init_dense(spec, rng.gen())
            .unwrap()
            .quantized(Mode::TernaryFull, None)
            .unwrap();
        let n = slices * image * image;
        let input = DenseTensor::from_vec(
            &[slices, image, image],
            (0..n).map(|_| rng.gen_range(-2.0..2.0f32)).collect(),
        )
        .unwrap();
        let packed = forward(
            &model,
            &input,
            &ForwardOptions { engine: ConvEngine::Packed, ..Default::default() },
        )
        .unwrap();
        let dense = forward(
            &model,
            &input,
            &ForwardOptions { engine: ConvEngine::Reference, ..Default::default() },
        )
        .unwrap();
        assert_eq!(packed.shape(), dense.shape());
        for (i, (a, b)) in packed.data().iter().zip(dense.data()).enumerate() {
            assert_eq!(
                a.to_bits(),
                b.to_bits(),
                "case {case}: packed and dense paths differ at element {i}: {a} vs {b}"
            );
        }
    }
    println!(
        "ACCEPTANCE 7 (mode equivalence): PASS — 20 random nets, packed == dense simulation bit-exactly, {:.1} s",
        start.elapsed().as_secs_f64()
    );
}

#[test]
fn acceptance_08_serialization() {
    let _guard = serial();
    let base = Model::init_dense(build_toy(4, 3, 3, 16).unwrap(), 0x88).unwrap();
    let models = [
        ("float", base.clone()),
        ("ternary", base.quantized(Mode::TernaryFull, None).unwrap()),
        ("binary", base.quantized(Mode::BinaryFull, None).unwrap()),
    ];
    for (name, model) in &models {
        let bytes = serialize_bytes(model).unwrap();
        let back = deserialize_bytes(&bytes).unwrap();
        assert_eq!(&back, model, "{name} roundtrip");
        assert_eq!(serialize_bytes(&back).unwrap(), bytes, "{name} byte-stable");
    }

    let bytes = serialize_bytes(&models[1].1).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[1] = b'X';
    assert!(matches!(deserialize_bytes(&bad_magic), Err(Error::BadMagic)));

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    assert!(matches!(
        deserialize_bytes(&flipped),
        Err(Error::ChecksumMismatch { .. })
    ));

    assert!(matches!(deserialize_bytes(&bytes[..6]), Err(Error::Truncated(_))));

    println!(
        "ACCEPTANCE 8 (serialization): PASS — float/ternary/binary roundtrip bit-exact; bad magic, checksum, truncation rejected distinctly"
    );
}

fn dice_training_config(mode: Mode, fixed_beta: Option<f32>, seed: u64) -> TrainConfig {
    let epochs = 8;
    TrainConfig {
        mode,
        seed,
        epochs,
        iters_per_epoch: 40,
        image: 48,
        val_size: 16,
        schedule: match fixed_beta {
            Some(b) => ContinuationSchedule::fixed(b, epochs).unwrap(),
            None => ContinuationSchedule::new(3.0, 8.0, epochs).unwrap(),
        },
        ..TrainConfig::paper_defaults()
    }
}

#[test]
fn acceptance_09_desk_scale_training() {
    let _guard = serial();
    let start = Instant::now();
    let mut rows = Vec::new();
    for seed in [1u64, 2, 3] {
        let cont = train(&dice_training_config(Mode::TernaryFull, None, seed)).unwrap();
        let fixed = train(&dice_training_config(Mode::TernaryFull, Some(3.0), seed)).unwrap();
        let float = train(&dice_training_config(Mode::Float, None, seed)).unwrap();

        let final_dice = |m: &ternkit_core::training::TrainOutcome| m.metrics.last().unwrap().val_dice;
        let (dc, df, dl) = (final_dice(&cont), final_dice(&fixed), final_dice(&float));
        let sp_first = cont.metrics.first().unwrap().mean_weight_sparsity;
        let sp_last = cont.metrics.last().unwrap().mean_weight_sparsity;
        println!(
            "  seed {seed}: continuation {dc:.4}, fixed-beta3 {df:.4}, float {dl:.4}, sparsity {sp_first:.4} -> {sp_last:.4}"
        );

        assert!(
            dc >= df,
            "seed {seed}: continuation {dc:.4} below fixed-beta {df:.4}"
        );
        assert!(
            dc >= dl - 0.05,
            "seed {seed}: continuation {dc:.4} more than 0.05 below float {dl:.4}"
        );
        assert!(
            sp_last > sp_first,
            "seed {seed}: weight sparsity did not grow ({sp_first:.4} -> {sp_last:.4})"
        );
        // keep the metrics CSV wired end to end
        assert!(metrics_csv(&cont.metrics).lines().count() == cont.metrics.len() + 1);
        rows.push((seed, dc, df, dl));
    }
    println!(
        "ACCEPTANCE 9 (desk-scale training): PASS — 3 seeds x (continuation, fixed, float), {:.1} min total",
        start.elapsed().as_secs_f64() / 60.0
    );
}

#[test]
fn acceptance_10_throughput() {
    let _guard = serial();
    let headline = BenchShape { rows: 1024, c: 576, filters: 64 };
    let report = with_thread_count(1, || run_gemm_bench(headline, 5, 0x10)).unwrap();
    assert!(
        report.speedup >= 2.0,
        "packed GEMM speedup {:.2}x below 2x at {headline:?}",
        report.speedup
    );

    // the full table for the report
    let mut reports = vec![report.clone()];
    for shape in default_shapes() {
        if shape != headline {
            reports.push(with_thread_count(1, || run_gemm_bench(shape, 3, 0x10)).unwrap());
        }
    }
    println!("--- single-thread speedup table ---");
    print!("{}", report_csv(&reports));
    println!(
        "ACCEPTANCE 10 (throughput): PASS — checksum-verified speedup {:.2}x at 1024x576x64 (bar: 2x)",
        report.speedup
    );
}
