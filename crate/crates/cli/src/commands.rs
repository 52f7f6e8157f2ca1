use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use pnacc_core::accel::{estimate_latency, Accelerator, MachineParams, MAX_POINTS};
use pnacc_core::fixq::dequantize;
use pnacc_core::matrix::RealMatrix;
use pnacc_core::pointnet::{
    build_network, compile, quantize_network, run_compiled, NetworkGraph, NetworkKind, NetworkOutput, QuantizedNetwork,
    WeightSet,
};
use pnacc_core::tile_mm::{EngineRegistry, TileConfig};
use pnacc_velodyne::{
    fit_to_capacity, read_capture, read_points_csv, roi_filter, write_points_csv, CapacityRegistry, FrameAssembler,
    FramePipeline, PointCloudFrame, PolarFrame, RoiBox,
};

use crate::container::WeightContainer;
use crate::error::{CliError, Result};
use crate::weights_io::{container_kind, graph_for, quantized_container, quantized_from, weight_set_from, ContainerKind};
use crate::{BenchArgs, DecodeArgs, InferArgs, QuantizeArgs};

/// Measured throughput and latency of the FPGA build at 4096 points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportedBenchmark {
    pub net: NetworkKind,
    pub bits: u8,
    pub gops: f64,
    pub latency_ms: f64,
}

impl ReportedBenchmark {
    pub fn fps(&self) -> f64 {
        1e3 / self.latency_ms
    }

    /// Operations implied by throughput × latency.
    pub fn implied_ops(&self) -> f64 {
        self.gops * 1e9 * self.latency_ms * 1e-3
    }
}

pub const REPORTED_N: usize = 4096;

pub const REPORTED: [ReportedBenchmark; 6] = [
    ReportedBenchmark { net: NetworkKind::VanillaCls, bits: 8, gops: 112.5, latency_ms: 10.9 },
    ReportedBenchmark { net: NetworkKind::VanillaCls, bits: 16, gops: 64.9, latency_ms: 18.9 },
    ReportedBenchmark { net: NetworkKind::FullCls, bits: 8, gops: 182.1, latency_ms: 19.8 },
    ReportedBenchmark { net: NetworkKind::FullCls, bits: 16, gops: 130.0, latency_ms: 27.8 },
    ReportedBenchmark { net: NetworkKind::FullSeg, bits: 8, gops: 280.0, latency_ms: 34.6 },
    ReportedBenchmark { net: NetworkKind::FullSeg, bits: 16, gops: 227.4, latency_ms: 42.6 },
];

pub fn reported(net: NetworkKind, bits: u8) -> Option<ReportedBenchmark> {
    REPORTED.iter().copied().find(|r| r.net == net && r.bits == bits)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?))
}

pub fn read_container(path: &Path) -> Result<WeightContainer> {
    WeightContainer::read_from(BufReader::new(open(path)?))
}

pub fn write_container(path: &Path, c: &WeightContainer) -> Result<()> {
    c.write_to(create(path)?)
}

/// Load an `n×3` point matrix from CSV.
pub fn read_points(path: &Path) -> Result<RealMatrix> {
    let pts = read_points_csv(BufReader::new(open(path)?))?;
    if pts.is_empty() {
        return Err(CliError::Format(format!("{}: no points", path.display())));
    }
    if pts.len() > MAX_POINTS {
        return Err(CliError::Capacity(format!(
            "{}: {} points; the accelerator accepts at most {MAX_POINTS}",
            path.display(),
            pts.len()
        )));
    }
    Ok(RealMatrix::from_vec(pts.len(), 3, pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect())?)
}

/// Largest deviation between the folded float weights and their codes,
/// plus how many values saturated.
fn weight_error(float: &[f64], q: &QuantizedNetwork, layer: &str) -> (f64, usize) {
    let qt = &q.layers[layer].weight;
    let (lo, hi) = (qt.fmt().min_code() as f64 * qt.fmt().ulp(), qt.fmt().max_code() as f64 * qt.fmt().ulp());
    let clipped = float.iter().filter(|&&v| v < lo || v > hi).count();
    let err = float.iter().zip(dequantize(qt)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (err, clipped)
}

pub fn quantize(args: &QuantizeArgs, out: &mut dyn Write) -> Result<()> {
    let c = read_container(&args.input)?;
    if container_kind(&c)? != ContainerKind::Float {
        return Err(CliError::Format(format!("{} is already quantized", args.input.display())));
    }
    let calib = args.calib.as_deref().map(read_points).transpose()?;
    let n = calib.as_ref().map_or(1, |m| m.rows());
    let graph = graph_for(args.net, n, &c)?;
    let ws = weight_set_from(&c, &graph)?;
    let q = quantize_network(&graph, &ws, calib.as_slice(), args.bits, args.clip)?;
    let folded = ws.fold(&graph)?;
    writeln!(out, "layer,format,max_abs_error,half_ulp,clipped")?;
    for (name, l) in &q.layers {
        let (err, clipped) = weight_error(folded.layers[name].0.data(), &q, name);
        let fmt = l.weight.fmt();
        writeln!(out, "{name},Q{}.{},{err:.6e},{:.6e},{clipped}", fmt.total_bits(), fmt.frac_bits(), fmt.ulp() / 2.0)?;
    }
    write_container(&args.out, &quantized_container(&q))?;
    log::info!("wrote {}-bit weights for {} layers to {}", args.bits, q.layers.len(), args.out.display());
    Ok(())
}

/// Quantized network for `graph` from either kind of container.
pub fn load_network(c: &WeightContainer, graph: &NetworkGraph, bits: u8) -> Result<QuantizedNetwork> {
    match container_kind(c)? {
        ContainerKind::Float => {
            let ws: WeightSet = weight_set_from(c, graph)?;
            Ok(quantize_network(graph, &ws, &[], bits, 0.001)?)
        }
        ContainerKind::Quantized { bits: stored } if stored == bits => quantized_from(c, graph, bits),
        ContainerKind::Quantized { bits: stored } => {
            Err(CliError::Mismatch(format!("weights are {stored}-bit but --bits is {bits}")))
        }
    }
}

pub fn machine_params(tile: Option<TileConfig>, bits: u8) -> MachineParams {
    MachineParams::for_tile(tile.unwrap_or_default()).with_bits(bits)
}

/// Compile and run `points` through `net` on a fresh accelerator.
pub fn infer_points(
    graph: &NetworkGraph,
    net: &QuantizedNetwork,
    points: &RealMatrix,
    mp: &MachineParams,
    engine: Option<&str>,
) -> Result<(NetworkOutput, pnacc_core::accel::Run)> {
    let program = compile(graph, net)?;
    let mut acc = Accelerator::new();
    if let Some(name) = engine {
        acc = acc.with_engine(EngineRegistry::with_defaults().get(name).map_err(|e| CliError::Format(e.to_string()))?);
    }
    Ok(run_compiled(&mut acc, &program, points, mp)?)
}

pub fn infer(args: &InferArgs, out: &mut dyn Write) -> Result<()> {
    let c = read_container(&args.weights)?;
    let points = read_points(&args.points)?;
    let graph = graph_for(args.net, points.rows(), &c)?;
    let net = load_network(&c, &graph, args.bits)?;
    let mp = machine_params(args.tile, args.bits);
    let (output, run) = infer_points(&graph, &net, &points, &mp, args.engine.as_deref())?;
    if args.net.is_segmentation() {
        writeln!(out, "point,label")?;
        for (i, label) in output.argmax_rows().iter().enumerate() {
            writeln!(out, "{i},{label}")?;
        }
    } else {
        let scores: Vec<String> = output.scores.row(0).iter().map(|s| s.to_string()).collect();
        writeln!(out, "class={}", output.class())?;
        writeln!(out, "scores={}", scores.join(","))?;
    }
    if let Some(path) = &args.report {
        create(path)?.write_all(run.report.to_key_value().as_bytes())?;
    }
    if let Some(path) = &args.trace {
        create(path)?.write_all(run.fsm_trace().to_csv().as_bytes())?;
    }
    log::info!("modeled latency {:.3} ms", run.report.latency_s * 1e3);
    Ok(())
}

pub fn bench(args: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let graph = build_network(args.net, args.n, args.classes, args.seg_classes)?;
    let net = quantize_network(&graph, &WeightSet::zeros(&graph), &[], args.bits, 0.0)?;
    let program = compile(&graph, &net)?;
    let mut mp = machine_params(args.tile, args.bits);
    mp.clock_hz = args.clock;
    mp.validate()?;
    let report = estimate_latency(&program, &mp)?;
    out.write_all(report.to_key_value().as_bytes())?;
    writeln!(out, "fps={:.3}", report.frames_per_second())?;
    writeln!(out, "roofline_gops={:.3}", mp.roofline_gops())?;
    if let Some(r) = reported(args.net, args.bits).filter(|_| args.n == REPORTED_N) {
        writeln!(out, "reported_gops={}", r.gops)?;
        writeln!(out, "reported_latency_ms={}", r.latency_ms)?;
        writeln!(out, "reported_fps={:.1}", r.fps())?;
        writeln!(out, "ops_consistency={:.4}", report.ops as f64 / r.implied_ops())?;
        writeln!(out, "latency_ratio={:.4}", report.latency_s * 1e3 / r.latency_ms)?;
    }
    Ok(())
}

/// Totals over a decode run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeSummary {
    pub frames: usize,
    pub decoded: usize,
    pub in_roi: usize,
    pub written: usize,
    pub files: usize,
}

/// Frames from a capture file, or from a live socket for `duration`.
fn collect_frames(input: &str, duration: Duration) -> Result<Vec<PolarFrame>> {
    if let Some(port) = input.strip_prefix("udp:") {
        let port: u16 = port.parse().map_err(|_| CliError::Format(format!("bad UDP port in `{input}`")))?;
        let mut pipeline = FramePipeline::spawn(pnacc_velodyne::listen(port)?, pnacc_velodyne::net::DEFAULT_FRAME_QUEUE);
        let deadline = Instant::now() + duration;
        let mut frames = Vec::new();
        while let Some(left) = deadline.checked_duration_since(Instant::now()) {
            if let pnacc_velodyne::net::Pop::Item(f) = pipeline.frames().pop_timeout(left.min(Duration::from_millis(100))) {
                frames.push(f);
            }
        }
        if let Some(listener) = pipeline.stop() {
            log::info!("{} malformed datagrams, {} packets dropped", listener.malformed(), listener.overflowed());
        }
        while let Some(f) = pipeline.frames().pop() {
            frames.push(f);
        }
        return Ok(frames);
    }
    let records = read_capture(Path::new(input))?;
    let mut asm = FrameAssembler::new();
    let mut frames: Vec<PolarFrame> = records.iter().filter_map(|r| asm.push(r.timestamp_us, &r.payload)).collect();
    frames.extend(asm.finish());
    if asm.out_of_order() + asm.decode_errors() > 0 {
        log::warn!("{} out-of-order and {} undecodable packets skipped", asm.out_of_order(), asm.decode_errors());
    }
    Ok(frames)
}

/// Filter and cap `frames`, writing one CSV per capped part into `dir`.
pub fn write_frames(
    frames: &[PolarFrame],
    roi: &RoiBox,
    cap: usize,
    strategy: &dyn pnacc_velodyne::CapacityStrategy,
    dir: &Path,
) -> Result<DecodeSummary> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Format(format!("{}: {e}", dir.display())))?;
    let mut s = DecodeSummary { frames: frames.len(), ..Default::default() };
    for f in frames {
        let cloud = PointCloudFrame::from(f);
        let kept = roi_filter(&cloud, roi);
        s.decoded += cloud.len();
        s.in_roi += kept.len();
        let parts = fit_to_capacity(&kept, cap, strategy);
        for (i, part) in parts.iter().enumerate() {
            let name =
                if parts.len() == 1 { format!("frame_{:05}.csv", f.index) } else { format!("frame_{:05}_{i}.csv", f.index) };
            write_points_csv(create(&dir.join(name))?, &part.points, true)?;
            s.written += part.len();
            s.files += 1;
        }
    }
    Ok(s)
}

pub fn decode(args: &DecodeArgs, out: &mut dyn Write) -> Result<()> {
    if args.cap == 0 {
        return Err(CliError::Format("--cap must be positive".into()));
    }
    let strategy = CapacityRegistry::with_defaults().create(&args.mode, args.seed)?;
    let frames = collect_frames(&args.input, Duration::from_secs_f64(args.duration.max(0.0)))?;
    let s = write_frames(&frames, &args.roi, args.cap, strategy.as_ref(), &args.out)?;
    writeln!(
        out,
        "frames={} decoded={} in_roi={} written={} files={}",
        s.frames, s.decoded, s.in_roi, s.written, s.files
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reported_rows() {
        assert_eq!(format!("{:.1}", reported(NetworkKind::FullCls, 8).unwrap().fps()), "50.5");
        assert_eq!(format!("{:.1}", reported(NetworkKind::FullSeg, 8).unwrap().fps()), "28.9");
        assert!(reported(NetworkKind::FullSeg, 4).is_none());
    }
}
