//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! fails if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use clap::Parser;
use common::{random_points, random_weights};
use pnacc_cli::commands::{reported, REPORTED, REPORTED_N};
use pnacc_cli::{run, Cli};
use pnacc_core::accel::{estimate_latency, Accelerator, MachineParams};
use pnacc_core::fixq::{requantize, wrap_to_width, FixedFormat, QTensor};
use pnacc_core::matrix::RealMatrix;
use pnacc_core::pointnet::{
    build_network, build_network_with_dims, compile, quantize_network, run_compiled, run_reference_float, NetworkDims,
    NetworkKind, WeightSet,
};
use pnacc_core::tile_mm::{matmul_maxpool, matmul_tiled, max_columns, Activation, OutputOrientation, TileConfig};
use pnacc_velodyne::packet::wire::{BLOCKS, ELEVATION_DEG, PACKET_LEN, RECORDS_PER_BLOCK};
use pnacc_velodyne::packet::{RawBlock, RawReturn};
use pnacc_velodyne::synth::SyntheticScan;
use pnacc_velodyne::{
    fit_to_capacity, read_capture, roi_filter, to_cartesian, write_capture, FrameAssembler, PointCloudFrame, PolarFrame,
    RoiBox, Subsample, VelodynePacket, DEFAULT_CAPACITY,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

const KINDS: [NetworkKind; 3] = [NetworkKind::VanillaCls, NetworkKind::FullCls, NetworkKind::FullSeg];

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn op_counts() -> Outcome {
    let mut detail = Vec::new();
    for kind in KINDS {
        let ops = build_network(kind, REPORTED_N, 40, 50).unwrap().count_ops().ops as f64;
        let r8 = reported(kind, 8).unwrap();
        let r16 = reported(kind, 16).unwrap();
        let dev = ops / r8.implied_ops() - 1.0;
        ensure(dev.abs() <= 0.05, || format!("{kind}: {ops:.4e} ops vs {:.4e} implied", r8.implied_ops()))?;
        let rows = r16.implied_ops() / r8.implied_ops() - 1.0;
        ensure(rows.abs() <= 0.01, || format!("{kind}: INT16 row off by {:.2}%", rows * 100.0))?;
        detail.push(format!("{kind} {:+.2}%", dev * 100.0));
    }
    Ok(detail.join(", "))
}

fn reported_fps() -> Outcome {
    let mut detail = Vec::new();
    for (kind, want) in [("cls", "50.5"), ("seg", "28.9")] {
        let cli = Cli::try_parse_from(["pnacc", "bench", "--net", kind, "--bits", "8"]).unwrap();
        let mut out = Vec::new();
        run(cli, &mut out).map_err(|e| e.to_string())?;
        let text = String::from_utf8(out).unwrap();
        let got = text
            .lines()
            .find_map(|l| l.strip_prefix("reported_fps="))
            .ok_or_else(|| format!("bench printed no reported_fps for {kind}"))?;
        ensure(got == want, || format!("{kind}: {got} fps, expected {want}"))?;
        let r = REPORTED.iter().find(|r| r.net.to_string() == kind && r.bits == 8).unwrap();
        ensure(format!("{:.3}", 1e3 / r.latency_ms).starts_with(want), || format!("{kind}: 1/latency"))?;
        detail.push(format!("{kind} {got}"));
    }
    Ok(detail.join(", "))
}

fn modeled_latency() -> Outcome {
    let mut lat8 = Vec::new();
    for kind in KINDS {
        let g = build_network(kind, REPORTED_N, 40, 50).unwrap();
        let mut per_bits = Vec::new();
        for bits in [8u8, 16] {
            let q = quantize_network(&g, &WeightSet::zeros(&g), &[], bits, 0.0).unwrap();
            let mp = MachineParams::default().with_bits(bits);
            let r = estimate_latency(&compile(&g, &q).unwrap(), &mp).unwrap();
            ensure(r.effective_gops <= mp.roofline_gops() + 1e-9, || format!("{kind} exceeds roofline"))?;
            per_bits.push(r.latency_s);
        }
        ensure(per_bits[1] >= per_bits[0], || format!("{kind}: INT16 faster than INT8"))?;
        lat8.push(per_bits[0]);
    }
    ensure(lat8[0] < lat8[1] && lat8[1] < lat8[2], || format!("ordering {lat8:?}"))?;
    let cls = lat8[1] * 1e3;
    ensure((9.9..=39.6).contains(&cls), || format!("cls INT8 {cls:.2} ms outside 2x of 19.8 ms"))?;
    Ok(format!("vanilla {:.2} ms < cls {cls:.2} ms < seg {:.2} ms", lat8[0] * 1e3, lat8[2] * 1e3))
}

/// Triple loop with a 64-bit accumulator, wrapped to the hardware width.
fn naive(a: &QTensor, w: &QTensor, bias: &[i64], shift: i32, act: Activation, fmt: FixedFormat) -> Vec<i32> {
    let (n, k, c) = (a.dims()[0], a.dims()[1], w.dims()[1]);
    let bits = if fmt.total_bits() == 8 { 32 } else { 48 };
    let mut acc = vec![0i64; n * c];
    for i in 0..n {
        for j in 0..c {
            let mut s = bias[j];
            for t in 0..k {
                s += a.codes()[i * k + t] as i64 * w.codes()[t * c + j] as i64;
            }
            acc[i * c + j] = wrap_to_width(s, bits);
        }
    }
    let codes = requantize(&acc, shift, fmt).unwrap();
    match act {
        Activation::Relu => codes.into_iter().map(|x| x.max(0)).collect(),
        _ => codes,
    }
}

fn tiling() -> Outcome {
    const CONFIGS: [(usize, usize); 4] = [(32, 32), (8, 16), (1, 1), (5, 7)];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let random = |rng: &mut ChaCha8Rng, r: usize, c: usize, f: FixedFormat| {
        let codes = (0..r * c).map(|_| rng.gen_range(f.min_code()..=f.max_code()) as i32).collect();
        QTensor::new(vec![r, c], codes, f).unwrap()
    };
    for case in 0..200 {
        let bits = if case % 2 == 0 { 8 } else { 16 };
        let fmt = FixedFormat::new(bits, rng.gen_range(0..bits / 2)).unwrap();
        let (n, k, c) = (rng.gen_range(1..=100), rng.gen_range(1..=100), rng.gen_range(1..=100));
        let a = random(&mut rng, n, k, fmt);
        let w = random(&mut rng, k, c, fmt);
        let bias: Vec<i64> = (0..c).map(|_| rng.gen_range(-5000..5000)).collect();
        let shift = rng.gen_range(0..2 * fmt.frac_bits() as i32 + 8);
        let act = if case % 3 == 0 { Activation::None } else { Activation::Relu };
        let want = naive(&a, &w, &bias, shift, act, fmt);
        let pooled_want = max_columns(&QTensor::new(vec![n, c], want.clone(), fmt).unwrap()).unwrap();
        for &(mu, nu) in &CONFIGS {
            let tile = TileConfig::new(mu, nu).unwrap();
            for orient in [OutputOrientation::RowOriented, OutputOrientation::ColumnOriented] {
                let got = matmul_tiled(&a, &w, &bias, tile, orient, act, shift, fmt).unwrap();
                ensure(got.codes() == want.as_slice(), || format!("case {case} tile {mu}x{nu} {orient:?}"))?;
            }
            let pooled = matmul_maxpool(&a, &w, &bias, tile, act, shift, fmt).unwrap();
            ensure(pooled == pooled_want, || format!("case {case} fused max-pool tile {mu}x{nu}"))?;
        }
    }
    Ok("200 cases x 4 tiles x 2 orientations, fused max-pool bit-exact".into())
}

fn relative_error(got: &RealMatrix, want: &RealMatrix) -> f64 {
    let scale = want.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = got.data().iter().zip(want.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    err / scale.max(1e-12)
}

fn fidelity() -> Outcome {
    let mut worst16 = 0.0f64;
    let (mut agree, mut total) = (0usize, 0usize);
    for s in 0..100u64 {
        let kind = KINDS[s as usize % 3];
        let mut rng = ChaCha8Rng::seed_from_u64(50_000 + s);
        let n = rng.gen_range(8..=64);
        let g = build_network_with_dims(kind, n, 8, 6, NetworkDims::small()).unwrap();
        let w = random_weights(&g, &mut rng);
        let pts = random_points(n, &mut rng);
        let float = run_reference_float(&g, &w, &pts).unwrap();
        for bits in [8u8, 16] {
            let q = quantize_network(&g, &w, std::slice::from_ref(&pts), bits, 0.001).unwrap();
            let p = compile(&g, &q).unwrap();
            let (sim, _) = run_compiled(&mut Accelerator::new(), &p, &pts, &MachineParams::default()).unwrap();
            if bits == 16 {
                worst16 = worst16.max(relative_error(&sim.scores, &float.scores));
            } else {
                let labels = sim.argmax_rows();
                agree += labels.iter().zip(float.argmax_rows()).filter(|(a, b)| **a == *b).count();
                total += labels.len();
            }
        }
    }
    let rate = agree as f64 / total as f64;
    ensure(worst16 <= 0.01, || format!("INT16 relative error {worst16:.3e}"))?;
    ensure(rate >= 0.95, || format!("INT8 argmax agreement {:.2}%", rate * 100.0))?;
    Ok(format!("INT16 max rel err {worst16:.2e}, INT8 argmax agreement {:.2}%", rate * 100.0))
}

fn front_end() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..1000 {
        let mut blocks = [RawBlock { azimuth: 0, returns: [RawReturn::default(); RECORDS_PER_BLOCK] }; BLOCKS];
        for b in blocks.iter_mut() {
            b.azimuth = rng.gen_range(0..36000);
            for r in b.returns.iter_mut() {
                *r = RawReturn { distance: rng.gen(), reflectivity: rng.gen() };
            }
        }
        let p = VelodynePacket { blocks, timestamp_us: rng.gen(), return_mode: 0x37, product_id: 0x22 };
        let bytes = p.to_bytes();
        ensure(bytes.len() == PACKET_LEN, || format!("packet {i} is {} bytes", bytes.len()))?;
        let back = VelodynePacket::parse(&bytes).map_err(|e| format!("packet {i}: {e}"))?;
        ensure(back == p && back.to_bytes() == bytes, || format!("packet {i} round trip"))?;
    }

    let records = SyntheticScan::default().records().unwrap();
    let mut asm = FrameAssembler::new();
    let mut frames: Vec<PolarFrame> = records.iter().filter_map(|r| asm.push(r.timestamp_us, &r.payload)).collect();
    frames.extend(asm.finish());
    ensure(frames.len() == 1, || format!("{} frames from one revolution", frames.len()))?;
    let points = frames[0].points.len();
    ensure((points as i64 - 28_800).abs() <= 16, || format!("{points} points in one revolution"))?;

    let cloud = PointCloudFrame::from(&frames[0]);
    let roi = roi_filter(&cloud, &RoiBox::default());
    let capped = fit_to_capacity(&roi, DEFAULT_CAPACITY, &Subsample { seed: 1 });
    ensure(capped.len() == 1 && capped[0].len() <= DEFAULT_CAPACITY, || "capped frame exceeds 4096".into())?;
    ensure(roi.points.iter().all(|p| p.x.abs() <= 10.0 && (0.0..=60.0).contains(&p.y)), || "ROI leak".into())?;

    for p in &frames[0].points {
        let (x, y, z) = to_cartesian(p);
        let norm = (x * x + y * y + z * z).sqrt();
        ensure((norm - p.r).abs() <= 1e-9 * p.r, || format!("norm {norm} vs r {}", p.r))?;
        ensure(ELEVATION_DEG.contains(&p.elevation), || "unknown elevation".into())?;
    }
    Ok(format!("1000 packets, {points} points/revolution, {} after ROI, {} capped", roi.len(), capped[0].len()))
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("scan.vlpcap");
    write_capture(&path, &SyntheticScan::default().records().unwrap()).map_err(|e| e.to_string())?;

    let g = build_network(NetworkKind::FullCls, DEFAULT_CAPACITY, 40, 50).unwrap();
    let w = random_weights(&g, &mut ChaCha8Rng::seed_from_u64(7));
    let q = quantize_network(&g, &w, &[], 8, 0.001).unwrap();
    let wide = RoiBox::new(-100.0, 100.0, -100.0, 100.0).unwrap();

    let classify = || -> Result<(usize, RealMatrix, f64), String> {
        let start = Instant::now();
        let records = read_capture(&path).map_err(|e| e.to_string())?;
        let mut asm = FrameAssembler::new();
        let mut frames: Vec<PolarFrame> = records.iter().filter_map(|r| asm.push(r.timestamp_us, &r.payload)).collect();
        frames.extend(asm.finish());
        let frame = frames.first().ok_or("no frame decoded")?;
        let cloud = roi_filter(&PointCloudFrame::from(frame), &wide);
        let part = fit_to_capacity(&cloud, DEFAULT_CAPACITY, &Subsample { seed: 0 }).remove(0);
        if part.len() != DEFAULT_CAPACITY {
            return Err(format!("frame has {} points after capping", part.len()));
        }
        let pts = RealMatrix::from_vec(part.len(), 3, part.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect())
            .map_err(|e| e.to_string())?;
        let program = compile(&g, &q).map_err(|e| e.to_string())?;
        let (out, _) = run_compiled(&mut Accelerator::new(), &program, &pts, &MachineParams::default())
            .map_err(|e| e.to_string())?;
        Ok((out.class(), out.scores, start.elapsed().as_secs_f64()))
    };
    let (c1, s1, t1) = classify()?;
    let (c2, s2, t2) = classify()?;
    ensure(c1 == c2 && s1 == s2, || "classification is not deterministic".into())?;
    let t = t1.max(t2);
    ensure(t < 1.0, || format!("{t:.3} s per frame"))?;
    Ok(format!("class {c1}, {:.0} ms per 4096-point frame", t * 1e3))
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("op counts match reported throughput x latency within 5%", op_counts),
        ("reported latencies give 50.5 and 28.9 fps", reported_fps),
        ("modeled latency ordering, roofline and 2x band", modeled_latency),
        ("tiled and fused matmul match the naive oracle", tiling),
        ("quantization fidelity on 100 random networks", fidelity),
        ("VLP-16 front end", front_end),
        ("capture to INT8 classification under 1 s", end_to_end),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
