pub mod cli_io;
pub mod evaluation;
pub mod geometry;
pub mod multi_agent;
pub mod odometry;
pub mod pose_costs;
pub mod pose_graph;
pub mod sensor_sim;
pub mod spatial;
pub mod surfel;
