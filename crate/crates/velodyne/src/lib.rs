//! Velodyne VLP-16 front end: UDP ingestion, packet decoding, revolution
//! assembly, Cartesian conversion, region-of-interest filtering and fitting
//! frames to the accelerator's point budget.

mod assembler;
pub mod capacity;
pub mod capture;
pub mod cloud;
mod error;
pub mod net;
pub mod packet;
pub mod synth;

pub use assembler::FrameAssembler;
pub use capacity::{fit_to_capacity, CapacityRegistry, CapacityStrategy, Partition, Subsample, DEFAULT_CAPACITY};
pub use capture::{read_capture, write_capture, CaptureReader, CaptureWriter, Record};
pub use cloud::{
    read_points_csv, roi_filter, to_cartesian, write_points_csv, CartesianPoint, PointCloudFrame, PolarFrame, RoiBox,
};
pub use error::{Result, VelodyneError};
pub use net::{listen, listen_on, replay, DropOldestQueue, FramePipeline, Listener};
pub use packet::{decode_packet, encode_packet, interpolate_azimuth, PolarPoint, Return, VelodynePacket};
