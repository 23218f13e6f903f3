//! Cross-module runs: simulator → files → odometry → pose graph, and submap gossip.

use ctslam_core::cli_io::{read_dataset, write_dataset, Dataset};
use ctslam_core::evaluation::{self, ApeAlign};
use ctslam_core::multi_agent::{collective_optimize, decode_submap, encode_submap, run_sync, Agent, LinkParams, SimNetwork, SyncConfig};
use ctslam_core::odometry::{run_odometry, OdometryConfig};
use ctslam_core::pose_graph::{PoseGraph, PoseGraphConfig};
use ctslam_core::sensor_sim::{self, ImuNoise, LidarModel, SceneKind};

fn room_dataset(seconds: f64) -> Dataset {
    let spec = sensor_sim::default_trajectory(SceneKind::Room, Some(seconds));
    let times = sensor_sim::imu_times(spec.duration, 0.01);
    Dataset {
        imu: sensor_sim::simulate_imu(&spec, &times, &ImuNoise::none(), 1).unwrap(),
        lidar: sensor_sim::simulate_lidar(&sensor_sim::build_scene(SceneKind::Room), &spec, &LidarModel::default(), 2).unwrap(),
        ground_truth: Some(sensor_sim::ground_truth(&spec, &times).unwrap()),
    }
}

fn rigid_ape(gt: &[(f64, ctslam_core::geometry::Pose)], est: &[(f64, ctslam_core::geometry::Pose)]) -> f64 {
    let pairs = evaluation::associate(gt, est, 1e-6).unwrap();
    evaluation::ape(gt, est, &pairs, ApeAlign::Rigid).unwrap().translation.rmse
}

#[test]
fn dataset_files_drive_odometry_and_graph() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &room_dataset(14.0)).unwrap();
    let data = read_dataset(dir.path()).unwrap();
    let gt = data.ground_truth.clone().unwrap();

    let out = run_odometry(&data.imu, &data.lidar, &OdometryConfig::default(), 0).unwrap();
    assert!(rigid_ape(&gt, &out.trajectory) < 0.05);
    assert!(out.submaps.len() >= 2);

    // submaps survive the wire format; poses pass through quaternions
    let submaps: Vec<_> = out.submaps.iter().map(|s| decode_submap(&encode_submap(s)).unwrap().0).collect();
    for (a, b) in submaps.iter().zip(&out.submaps) {
        assert_eq!((a.id, a.t0, a.t1, &a.surfels, a.up_local), (b.id, b.t0, b.t1, &b.surfels, b.up_local));
        assert!((a.base_pose.rotation - b.base_pose.rotation).abs().max() < 1e-12);
        assert_eq!(a.base_pose.translation, b.base_pose.translation);
    }

    let mut graph = PoseGraph::new(PoseGraphConfig::default());
    for s in &submaps {
        graph.ingest(s).unwrap();
    }
    graph.optimize().unwrap();
    assert!(graph.node_count() <= submaps.len());
    assert!(rigid_ape(&gt, &graph.correct_trajectory(0, &submaps, &out.trajectory)) < 0.05);
}

#[test]
fn lossy_gossip_replicates_databases_and_graphs() {
    let data = room_dataset(12.0);
    let out = run_odometry(&data.imu, &data.lidar, &OdometryConfig::default(), 0).unwrap();
    // a second agent owning a copy of the same submaps under its own id
    let mut theirs = out.submaps.clone();
    for s in &mut theirs {
        s.id.agent = 1;
    }
    let mut agents = vec![Agent::new(0, out.submaps.clone()), Agent::new(1, theirs)];
    let mut net = SimNetwork::full(&[0, 1], LinkParams { drop_probability: 0.3, ..LinkParams::default() }, 4);
    let outcome = run_sync(&mut agents, &mut net, &SyncConfig::default(), 0.1, 300);
    assert!(outcome.converged_round.is_some());
    assert_eq!(agents[0].db.len(), 2 * out.submaps.len());
    assert!(net.transcript.iter().any(|e| e.dropped));

    let a = collective_optimize(&agents[0].db, &PoseGraphConfig::default()).unwrap();
    let b = collective_optimize(&agents[1].db, &PoseGraphConfig::default()).unwrap();
    assert_eq!(a.graph.to_json().to_string(), b.graph.to_json().to_string());
}
