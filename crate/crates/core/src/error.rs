use thiserror::Error;

use crate::dynamics::CarId;
use crate::network::{JunctionId, RoadId};

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown road {0}")]
    UnknownRoad(RoadId),

    #[error("car {car} has no route choice at {junction}")]
    PolicyUndefined { car: CarId, junction: JunctionId },

    #[error("car {car} was routed onto {road}, which does not leave {junction}")]
    PolicyInconsistent {
        car: CarId,
        junction: JunctionId,
        road: RoadId,
    },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("replay refused: {0}")]
    Replay(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
