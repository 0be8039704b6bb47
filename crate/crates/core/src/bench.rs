//! Throughput harness: packed ternary GEMM against the crate's own float
//! GEMM on the same problem, with a bit-exact output comparison before any
//! timing is reported.
//!
//! The float baseline runs on the unpacked codes with the channel scale
//! applied after accumulation, so both paths compute alpha * integer and the
//! f32 bit patterns must match; a mismatch aborts the benchmark.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{float_gemm, ternary_gemm};
use crate::packed::PackedTernaryTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchShape {
    pub rows: usize,
    pub c: usize,
    pub filters: usize,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub shape: BenchShape,
    pub float_ns: f64,
    pub ternary_ns: f64,
    pub speedup: f64,
    /// FNV-1a over the output f32 bit patterns (identical for both paths).
    pub checksum: u64,
}

/// Shapes covering the regimes of interest; the 1024 x 576 x 64 problem is
/// the headline measurement.
pub fn default_shapes() -> Vec<BenchShape> {
    vec![
        BenchShape { rows: 256, c: 64, filters: 32 },
        BenchShape { rows: 1024, c: 576, filters: 64 },
        BenchShape { rows: 1024, c: 1152, filters: 64 },
        BenchShape { rows: 4096, c: 576, filters: 16 },
    ]
}

fn fnv1a_bits(values: &[f32]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    hash
}

fn median_ns(mut times: Vec<f64>) -> f64 {
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    times[times.len() / 2]
}

/// Time both paths on one shape. Every timing is preceded by a checksum
/// comparison of the two outputs; mismatch is a hard failure.
pub fn run_gemm_bench(shape: BenchShape, reps: usize, seed: u64) -> Result<BenchReport> {
    if reps == 0 {
        return Err(Error::Domain("need at least one repetition".into()));
    }
    let BenchShape { rows, c, filters } = shape;
    if rows == 0 || c == 0 || filters == 0 {
        return Err(Error::Domain("bench shape must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patch_codes: Vec<i8> = (0..rows * c).map(|_| rng.gen_range(-1..=1)).collect();
    let filter_codes: Vec<i8> = (0..filters * c).map(|_| rng.gen_range(-1..=1)).collect();
    let alphas: Vec<f32> = (0..filters).map(|_| rng.gen_range(0.05..1.5f32)).collect();

    let patches = PackedTernaryTensor::pack(&patch_codes, &[rows, c])?;
    let bank = PackedTernaryTensor::pack(&filter_codes, &[filters, c])?;
    let patch_floats: Vec<f32> = patch_codes.iter().map(|&v| v as f32).collect();
    let filter_floats: Vec<f32> = filter_codes.iter().map(|&v| v as f32).collect();

    let float_path = || {
        let mut out = float_gemm(&patch_floats, rows, c, &filter_floats, filters);
        for (i, v) in out.iter_mut().enumerate() {
            *v = alphas[i % filters] * *v;
        }
        out
    };
    let ternary_path = || ternary_gemm(&patches, &bank, &alphas).map(|t| t.into_data());

    // correctness precedes speed
    let fout = float_path();
    let tout = ternary_path()?;
    let (fsum, tsum) = (fnv1a_bits(&fout), fnv1a_bits(&tout));
    if fsum != tsum {
        return Err(Error::Integrity(format!(
            "float and ternary outputs disagree (checksums {fsum:#018x} vs {tsum:#018x})"
        )));
    }

    // warm-up, then median over reps
    let _ = float_path();
    let _ = ternary_path()?;
    let mut float_times = Vec::with_capacity(reps);
    let mut ternary_times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        let out = float_path();
        float_times.push(t0.elapsed().as_nanos() as f64);
        std::hint::black_box(out);

        let t1 = Instant::now();
        let out = ternary_path()?;
        ternary_times.push(t1.elapsed().as_nanos() as f64);
        std::hint::black_box(out);
    }
    let float_ns = median_ns(float_times);
    let ternary_ns = median_ns(ternary_times);
    Ok(BenchReport {
        shape,
        float_ns,
        ternary_ns,
        speedup: float_ns / ternary_ns,
        checksum: fsum,
    })
}

/// Fixed CSV contract: `rows,c,filters,float_ns,ternary_ns,speedup`.
pub fn report_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from("rows,c,filters,float_ns,ternary_ns,speedup\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.0},{:.0},{:.2}\n",
            r.shape.rows, r.shape.c, r.shape.filters, r.float_ns, r.ternary_ns, r.speedup
        ));
    }
    out
}

/// Run `f` on a rayon pool of the given size (1 pins the benchmark to a
/// single thread). Without the `parallel` feature everything is sequential
/// already and `f` runs directly.
pub fn with_thread_count<T>(threads: usize, f: impl FnOnce() -> T + Send) -> T
where
    T: Send,
{
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
            .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_single_row_report() {
        let r = run_gemm_bench(BenchShape { rows: 1, c: 64, filters: 4 }, 2, 9).unwrap();
        assert!(r.float_ns > 0.0 && r.ternary_ns > 0.0);
        assert!((r.speedup - r.float_ns / r.ternary_ns).abs() < 1e-9);
    }

    #[test]
    fn csv_header_is_stable() {
        let r = run_gemm_bench(BenchShape { rows: 8, c: 70, filters: 3 }, 1, 2).unwrap();
        let csv = report_csv(&[r]);
        assert!(csv.starts_with("rows,c,filters,float_ns,ternary_ns,speedup\n"));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn rejects_empty_work() {
        assert!(run_gemm_bench(BenchShape { rows: 0, c: 64, filters: 1 }, 1, 0).is_err());
        assert!(run_gemm_bench(BenchShape { rows: 1, c: 64, filters: 1 }, 0, 0).is_err());
    }

    #[test]
    fn single_thread_pin_runs() {
        let r = with_thread_count(1, || {
            run_gemm_bench(BenchShape { rows: 16, c: 128, filters: 8 }, 1, 3)
        })
        .unwrap();
        assert!(r.checksum != 0);
    }
}
