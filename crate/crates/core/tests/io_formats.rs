use std::fs;

use nalgebra::{UnitQuaternion, Vector2};
use splatmap::evaluation::Trajectory;
use splatmap::geometry::{Grid, SE3Pose, Vec3};
use splatmap::io::*;
use splatmap::splats::{Splat, SplatModel};

fn bin_bytes(rows: &[[f32; 4]]) -> Vec<u8> {
    rows.iter()
        .flat_map(|r| r.iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

#[test]
fn kitti_bin_four_points_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scan.bin");
    let rows = [
        [1.0, 2.0, 3.0, 0.5],
        [-4.25, 0.0, 7.5, 1.0],
        [0.125, -0.5, 2.0, 0.0],
        [10.0, 20.0, -30.0, 0.9],
    ];
    fs::write(&path, bin_bytes(&rows)).unwrap();
    let scan = load_scan(&path).unwrap();
    assert_eq!(scan.dropped, 0);
    let expect: Vec<Vec3> = rows
        .iter()
        .map(|r| Vec3::new(r[0] as f64, r[1] as f64, r[2] as f64))
        .collect();
    assert_eq!(scan.points, expect);
}

#[test]
fn nan_rows_are_dropped_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scan.bin");
    let rows = [
        [1.0, 2.0, 3.0, 0.0],
        [f32::NAN, 0.0, 0.0, 0.0],
        [0.0, f32::INFINITY, 0.0, 0.0],
        [4.0, 5.0, 6.0, 0.0],
    ];
    fs::write(&path, bin_bytes(&rows)).unwrap();
    let scan = load_scan(&path).unwrap();
    assert_eq!(scan.points.len(), 2);
    assert_eq!(scan.dropped, 2);
}

#[test]
fn ingestion_errors() {
    let dir = tempfile::tempdir().unwrap();
    let odd = dir.path().join("scan.xyz");
    fs::write(&odd, b"1 2 3").unwrap();
    assert!(matches!(load_scan(&odd), Err(IoError::UnknownExtension(_))));

    let short = dir.path().join("short.bin");
    fs::write(&short, [0u8; 18]).unwrap();
    assert!(matches!(load_scan(&short), Err(IoError::Truncated(_))));

    let nan = dir.path().join("nan.bin");
    fs::write(&nan, bin_bytes(&[[f32::NAN, 0.0, 0.0, 0.0]])).unwrap();
    assert!(matches!(load_scan(&nan), Err(IoError::NoFinitePoints(_))));

    let ply = dir.path().join("cut.ply");
    let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n".to_vec();
    bytes.extend_from_slice(&[0u8; 20]);
    fs::write(&ply, bytes).unwrap();
    assert!(matches!(load_scan(&ply), Err(IoError::Truncated(_))));

    let missing = dir.path().join("missing.bin");
    assert!(matches!(load_scan(&missing), Err(IoError::Io { .. })));
}

fn awkward_points() -> Vec<Vec3> {
    vec![
        Vec3::new(0.1, -0.2, 0.30000000000000004),
        Vec3::new(1e-300, -1e300, std::f64::consts::PI),
        Vec3::new(-0.0, 12345.678901234567, -9.87654321e-5),
    ]
}

#[test]
fn ply_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let pts = awkward_points();
    let normals: Vec<Vec3> = pts.iter().map(|_| Vec3::new(0.0, 0.6, 0.8)).collect();
    for format in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
        let path = dir.path().join(format!("{format:?}.ply"));
        write_ply(&path, &pts, Some(&normals), format).unwrap();
        let back = read_ply(&path).unwrap();
        for (a, b) in back.points.iter().zip(&pts) {
            for k in 0..3 {
                assert_eq!(a[k].to_bits(), b[k].to_bits(), "{format:?}");
            }
        }
        assert_eq!(back.normals.unwrap(), normals);
    }
}

#[test]
fn ply_reader_accepts_common_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ply");
    let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n1 2 3 255\n4 5 6 0\n";
    fs::write(&path, text).unwrap();
    let cloud = read_ply(&path).unwrap();
    assert_eq!(cloud.points, vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0)]);
    assert!(cloud.normals.is_none());

    let path = dir.path().join("b.ply");
    let mut bytes = b"ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n".to_vec();
    for v in [1.5f32, -2.0, 0.25] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(&path, bytes).unwrap();
    assert_eq!(read_ply(&path).unwrap().points, vec![Vec3::new(1.5, -2.0, 0.25)]);
}

#[test]
fn identity_pose_tum_line() {
    let traj = Trajectory::new(vec![1.5], vec![SE3Pose::identity()]).unwrap();
    assert_eq!(format_trajectory(&traj, TrajectoryFormat::Tum), "1.5 0 0 0 0 0 0 1\n");
}

fn sample_trajectory() -> Trajectory {
    let poses = (0..20)
        .map(|i| {
            let t = i as f64;
            let q = UnitQuaternion::from_euler_angles(0.1 * t.sin(), -0.3 + 0.05 * t, 0.7 * t);
            SE3Pose::from_quaternion(&q, Vec3::new(t, -2.0 * t, 0.01 * t * t))
        })
        .collect();
    Trajectory::new((0..20).map(|i| 0.1 * i as f64 + 3.0).collect(), poses).unwrap()
}

#[test]
fn trajectory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let traj = sample_trajectory();
    for format in [TrajectoryFormat::Tum, TrajectoryFormat::Kitti] {
        let path = dir.path().join("traj.txt");
        save_trajectory(&traj, &path, format).unwrap();
        let back = load_trajectory(&path, format).unwrap();
        assert_eq!(back.len(), traj.len());
        for (a, b) in back.poses.iter().zip(&traj.poses) {
            assert!((a.rotation - b.rotation).abs().max() < 1e-9);
            assert!((a.translation - b.translation).abs().max() < 1e-9);
        }
        if format == TrajectoryFormat::Tum {
            assert_eq!(back.timestamps, traj.timestamps);
        }
    }
}

#[test]
fn saved_quaternions_are_unit() {
    let text = format_trajectory(&sample_trajectory(), TrajectoryFormat::Tum);
    for line in text.lines() {
        let v: Vec<f64> = line.split(' ').map(|t| t.parse().unwrap()).collect();
        let n = (v[4] * v[4] + v[5] * v[5] + v[6] * v[6] + v[7] * v[7]).sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn empty_trajectory_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.tum");
    assert!(save_trajectory(&Trajectory::default(), &path, TrajectoryFormat::Tum).is_err());
}

#[test]
fn model_container_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = SplatModel::new();
    for k in 0..25 {
        let t = k as f64;
        model.push(
            Splat::facing(
                Vec3::new(t.cos(), t.sin(), 0.1 * t),
                Vec3::new(0.3, -0.2, 1.0 + t),
                Vector2::new(0.01 + 0.001 * t, 0.2),
                0.05 + 0.03 * t,
            ),
            k as u32 / 5,
        );
    }
    for ascii in [false, true] {
        let path = dir.path().join("m.splt");
        save_model(&model, &path, ascii).unwrap();
        assert_eq!(load_model(&path).unwrap(), model);
    }
    let bytes = encode_model(&model);
    assert_eq!(&bytes[..4], b"SPLT");
    assert!(decode_model(&bytes[..bytes.len() - 3]).is_err());
    assert!(decode_model(b"garbage").is_err());
}

#[test]
fn pfm_layout() {
    let mut g = Grid::filled(2, 2, 0.0);
    *g.get_mut(0, 0) = 1.0;
    *g.get_mut(1, 1) = 4.0;
    let bytes = encode_pfm(&g);
    let header = b"Pf\n2 2\n-1.0\n";
    assert_eq!(&bytes[..header.len()], header);
    // bottom row first
    let first = f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap());
    assert_eq!(first, 0.0);
    let last = f32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    assert_eq!(last, 0.0);
    assert_eq!(decode_pfm(&bytes).unwrap(), g);
}
