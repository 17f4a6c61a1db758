use super::*;

#[test]
fn tile_key_bytes_preserve_order() {
    let mut ks: Vec<TileKey> = [(-3, 2), (0, 0), (-1, -1), (5, -7), (0, -1), (i32::MIN, i32::MAX)]
        .iter()
        .map(|&(tx, ty)| TileKey { tx, ty })
        .collect();
    let mut by_bytes = ks.clone();
    by_bytes.sort_by_key(|k| k.to_bytes());
    ks.sort();
    assert_eq!(ks, by_bytes);
    for k in ks {
        assert_eq!(TileKey::from_bytes(&k.to_bytes()), Some(k));
    }
}

#[test]
fn zero_correction_leaves_points_untouched() {
    let r = PointRecord {
        xyz: Vec3::new(1.0 / 3.0, 2.7, -0.1),
        t0: Vec3::new(0.1, 0.2, 2.5),
        arc: 3.0,
        trajectory_id: TrajectoryId(0),
        strip_id: crate::strip::StripId(0),
        segment_id: Some(1),
        row: 1,
        col: 2,
        normal: Vec3::z(),
    };
    assert_eq!(corrected_point(&PoseCorrection::ZERO, &r), r.xyz);
    assert_eq!(point_id(&r), 1 << 20 | 2);
}
