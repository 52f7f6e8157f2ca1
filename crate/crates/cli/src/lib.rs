//! `pnacc` command-line front end: weight quantization, LiDAR capture decoding,
//! inference on the simulated accelerator and latency benchmarking.

pub mod commands;
pub mod container;
pub mod error;
pub mod weights_io;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pnacc_core::pointnet::NetworkKind;
use pnacc_core::tile_mm::TileConfig;
use pnacc_velodyne::RoiBox;

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "pnacc", version, about = "PointNet accelerator model and VLP-16 front end")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a float weight container.
    Quantize(QuantizeArgs),
    /// Decode a capture file or live UDP stream into per-frame CSV point files.
    Decode(DecodeArgs),
    /// Run a point cloud through the simulated accelerator.
    Infer(InferArgs),
    /// Model latency and throughput of a network configuration.
    Bench(BenchArgs),
}

fn parse_bits(s: &str) -> std::result::Result<u8, String> {
    match s {
        "8" => Ok(8),
        "16" => Ok(16),
        _ => Err(format!("bits must be 8 or 16, got `{s}`")),
    }
}

fn parse_tile(s: &str) -> std::result::Result<TileConfig, String> {
    let (m, n) = s.split_once(',').ok_or_else(|| format!("expected M,N, got `{s}`"))?;
    let m = m.trim().parse().map_err(|e| format!("`{m}`: {e}"))?;
    let n = n.trim().parse().map_err(|e| format!("`{n}`: {e}"))?;
    TileConfig::new(m, n).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Float weight container.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// vanilla-cls, cls or seg.
    #[arg(long)]
    pub net: NetworkKind,
    #[arg(long, value_parser = parse_bits, default_value = "8")]
    pub bits: u8,
    /// CSV point cloud used to calibrate activation formats.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Fraction of weights allowed to saturate when choosing formats.
    #[arg(long, default_value_t = 0.001)]
    pub clip: f64,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Capture file, or `udp:PORT` to listen live.
    #[arg(long = "in")]
    pub input: String,
    /// Output directory for `frame_NNNNN.csv` files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "-10,10,0,60")]
    pub roi: RoiBox,
    #[arg(long, default_value_t = pnacc_velodyne::DEFAULT_CAPACITY)]
    pub cap: usize,
    /// Capacity strategy: subsample or partition.
    #[arg(long, default_value = "subsample")]
    pub mode: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Listening time for `udp:PORT` input, in seconds.
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub net: NetworkKind,
    /// Quantized (or float, quantized on load) weight container.
    #[arg(long)]
    pub weights: PathBuf,
    /// CSV point cloud.
    #[arg(long)]
    pub points: PathBuf,
    #[arg(long, value_parser = parse_bits, default_value = "8")]
    pub bits: u8,
    #[arg(long, value_parser = parse_tile)]
    pub tile: Option<TileConfig>,
    /// Matrix engine: reference, tiled or tiled-parallel.
    #[arg(long)]
    pub engine: Option<String>,
    /// Write the performance report as key=value lines.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write the FSM trace as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub net: NetworkKind,
    #[arg(long, default_value_t = 4096)]
    pub n: usize,
    #[arg(long, value_parser = parse_bits, default_value = "8")]
    pub bits: u8,
    /// Accelerator clock in Hz.
    #[arg(long, default_value_t = pnacc_core::accel::DEFAULT_CLOCK_HZ)]
    pub clock: f64,
    #[arg(long, value_parser = parse_tile)]
    pub tile: Option<TileConfig>,
    #[arg(long, default_value_t = pnacc_core::pointnet::DEFAULT_NUM_CLASSES)]
    pub classes: usize,
    #[arg(long, default_value_t = pnacc_core::pointnet::DEFAULT_NUM_SEG_CLASSES)]
    pub seg_classes: usize,
}

/// Execute `cli`, writing command output to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match cli.command {
        Command::Quantize(a) => commands::quantize(&a, out),
        Command::Decode(a) => commands::decode(&a, out),
        Command::Infer(a) => commands::infer(&a, out),
        Command::Bench(a) => commands::bench(&a, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_arguments() {
        let cli = Cli::try_parse_from(["pnacc", "bench", "--net", "seg", "--bits", "16", "--tile", "16,8"]).unwrap();
        match cli.command {
            Command::Bench(b) => {
                assert_eq!(b.net, NetworkKind::FullSeg);
                assert_eq!(b.bits, 16);
                assert_eq!(b.tile, Some(TileConfig::new(16, 8).unwrap()));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(Cli::try_parse_from(["pnacc", "bench", "--net", "cls", "--bits", "12"]).is_err());
        assert!(Cli::try_parse_from(["pnacc", "decode", "--in", "a", "--out", "b", "--roi", "1,0,0,1"]).is_err());
    }
}
