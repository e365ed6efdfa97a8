pub mod chaos;
pub mod ensemble;
pub mod integrate;
pub mod model;
pub mod scaling;
pub mod theory;
