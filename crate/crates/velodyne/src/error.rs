use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VelodyneError {
    #[error("packet is {got} bytes, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("block {block} has flag {found:#06x}, expected 0xffee")]
    BlockFlag { block: usize, found: u16 },
    #[error("block {block} azimuth {value} is outside 0..36000")]
    Azimuth { block: usize, value: u16 },
    #[error("dual-return packets are not supported")]
    DualReturn,
    #[error("unknown return mode byte {0:#04x}")]
    ReturnMode(u8),
    #[error("distance {0} m cannot be encoded")]
    Distance(f64),
    #[error("invalid region of interest: {0}")]
    Roi(String),
    #[error("capture format: {0}")]
    Capture(String),
    #[error("point file: {0}")]
    PointFile(String),
    #[error("unknown capacity strategy `{0}`")]
    UnknownStrategy(String),
    #[error("I/O: {0}")]
    Io(String),
    #[error("stream closed")]
    Closed,
}

impl From<std::io::Error> for VelodyneError {
    fn from(e: std::io::Error) -> Self {
        VelodyneError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, VelodyneError>;
