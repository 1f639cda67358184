mod common;

use common::*;
use dvconv::data::{read_bin, resample, tile_scene, write_bin};
use dvconv::geom::{anisotropic_scale, Labels, PointCloud};
use dvconv::groups::{Group, GroupElement, GroupKind, LayerKind};
use dvconv::model::{LayerSpec, Network, NetworkConfig, OrientationPool, Role, RunMode, Task};
use dvconv::nn::GroupConv;
use dvconv::voxelizer::{voxelize_backward, voxelize_layer, LayerOptions, Pooling, Sampling};
use proptest::prelude::*;
use rand::Rng;

fn cloud_strategy(max_points: usize, channels: usize) -> impl Strategy<Value = PointCloud> {
    (2..=max_points).prop_flat_map(move |n| {
        (
            prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), n),
            prop::collection::vec(-1.0f64..1.0, n * channels),
        )
            .prop_map(move |(p, f)| PointCloud::new(p, f, channels).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_mass_is_conserved(cloud in cloud_strategy(80, 2), m in 1usize..8, k in 1usize..16, d in 1usize..3, seed: u64) {
        let m = m.min(cloud.len());
        let opts = LayerOptions { k, d, ..Default::default() };
        let batch = voxelize_layer((&cloud).into(), m, &opts, Sampling::Random { seed }).unwrap();
        let mut r = rng(seed);
        let up: Vec<f64> = (0..batch.len() * batch.row_len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let back = voxelize_backward(&up, &batch, cloud.len()).unwrap();
        let mut occupied = 0.0;
        for (kernel, g) in batch.kernels.iter().zip(up.chunks(batch.row_len())) {
            for cell in 0..27 {
                if kernel.occupancy(cell) > 0 {
                    occupied += g[cell * 2..cell * 2 + 2].iter().sum::<f64>();
                }
            }
        }
        prop_assert!((back.iter().sum::<f64>() - occupied).abs() < 1e-9);
    }

    #[test]
    fn average_pooling_conserves_too(cloud in cloud_strategy(60, 1), k in 2usize..12) {
        let opts = LayerOptions { k, d: 1, kernel: dvconv::voxelizer::KernelOptions { pooling: Pooling::Average, ..Default::default() }, ..Default::default() };
        let batch = voxelize_layer((&cloud).into(), 3.min(cloud.len()), &opts, Sampling::Deterministic).unwrap();
        let up = vec![1.0; batch.len() * batch.row_len()];
        let back = voxelize_backward(&up, &batch, cloud.len()).unwrap();
        let occupied: usize = batch.kernels.iter().map(|k| k.nonzero_cells()).sum();
        prop_assert!((back.iter().sum::<f64>() - occupied as f64).abs() < 1e-9);
    }

    #[test]
    fn selected_points_lie_inside_their_cube(cloud in cloud_strategy(100, 1), m in 1usize..10, k in 1usize..20, d in 1usize..4) {
        let m = m.min(cloud.len());
        let opts = LayerOptions { k, d, ..Default::default() };
        let batch = voxelize_layer((&cloud).into(), m, &opts, Sampling::Deterministic).unwrap();
        for kernel in &batch.kernels {
            for &i in &kernel.members {
                let p = cloud.positions[i as usize];
                for (a, &pa) in p.iter().enumerate() {
                    prop_assert!((pa - kernel.centroid[a]).abs() <= kernel.radius * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn voxelization_commutes_with_quarter_turns(cloud in cloud_strategy(90, 2), m in 1usize..12, k in 1usize..24, d in 1usize..3) {
        let m = m.min(cloud.len());
        let opts = LayerOptions { k, d, ..Default::default() };
        let rot = GroupElement::new(1, 0);
        let turned = cloud.transform_positions(&linear(rot));
        let a = voxelize_layer((&cloud).into(), m, &opts, Sampling::Deterministic).unwrap();
        let b = voxelize_layer((&turned).into(), m, &opts, Sampling::Deterministic).unwrap();
        prop_assert_eq!(&a.centroid_indices, &b.centroid_indices);
        for (ka, kb) in a.kernels.iter().zip(&b.kernels) {
            prop_assert_eq!(ka.radius, kb.radius);
            for cell in 0..27 {
                let moved = move_cell(rot, cell, 3);
                prop_assert_eq!(&ka.grid[cell * 2..cell * 2 + 2], &kb.grid[moved * 2..moved * 2 + 2]);
            }
        }
    }

    #[test]
    fn single_layer_equivariance(c_in in 1usize..4, c_out in 1usize..4, seed: u64, mirror: bool, deep: bool) {
        let kind = if mirror { GroupKind::P4m } else { GroupKind::P4 };
        let group = Group::enumerate(kind);
        let layer = if deep { LayerKind::Group } else { LayerKind::Lifting };
        let n_in = if deep { group.order() } else { 1 };
        let conv = GroupConv::new(&group, 3, c_in, layer, c_out).unwrap();
        let mut r = rng(seed);
        let w: Vec<f64> = (0..conv.weight_len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..c_out).map(|_| r.random_range(-1.0..1.0)).collect();
        let f: Vec<f64> = (0..2 * conv.rows()).map(|_| r.random_range(-1.0..1.0)).collect();
        let y = conv.forward(&f, 2, &w, &b).unwrap();
        for g in 0..group.order() {
            let lhs = conv.forward(&act_on_grids(&group.elements, g, &f, 3, c_in, n_in), 2, &w, &b).unwrap();
            prop_assert_eq!(lhs, act_on_outputs(&group.elements, g, &y, c_out));
        }
    }

    #[test]
    fn tiles_partition_the_scene(n in 1usize..300, tile in 0.3f64..2.0, offset in 0.0f64..0.5, seed: u64) {
        let mut r = rng(seed);
        let pos: Vec<[f64; 3]> = (0..n).map(|_| [r.random_range(0.0..5.0), r.random_range(0.0..3.0), r.random_range(0.0..1.0)]).collect();
        let scene = PointCloud::new(pos.clone(), (0..n).map(|i| i as f64).collect(), 1).unwrap();
        let tiles = tile_scene(&scene, tile, offset).unwrap();
        let mut core: Vec<usize> = Vec::new();
        for t in &tiles {
            for (i, &m) in t.mask.as_ref().unwrap().iter().enumerate() {
                if m {
                    core.push(t.features[i] as usize);
                    prop_assert_eq!(t.positions[i], pos[t.features[i] as usize]);
                }
            }
        }
        core.sort_unstable();
        prop_assert_eq!(core, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn dataset_container_round_trips(clouds in prop::collection::vec(cloud_strategy(20, 2), 0..5), labels in prop::collection::vec(0usize..7, 5)) {
        let clouds: Vec<PointCloud> = clouds
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                // f32 storage: round values first so equality is exact
                let mut c = PointCloud::new(
                    c.positions.iter().map(|p| p.map(|v| v as f32 as f64)).collect(),
                    c.features.iter().map(|&v| v as f32 as f64).collect(),
                    2,
                ).unwrap();
                if i % 2 == 0 {
                    c.labels = Some(Labels::Cloud(labels[i]));
                } else {
                    let n = c.len();
                    c.labels = Some(Labels::Points((0..n).map(|j| (j + i) % 3).collect()));
                    c.mask = Some((0..n).map(|j| j % 3 != 0).collect());
                    c.category = Some(i);
                }
                c
            })
            .collect();
        let mut buf = Vec::new();
        write_bin(&mut buf, &clouds).unwrap();
        prop_assert_eq!(read_bin(&buf[..]).unwrap(), clouds);
        if !buf.is_empty() {
            let cut = buf.len() / 2;
            prop_assert!(read_bin(&buf[..cut]).is_err());
        }
    }

    #[test]
    fn subsampling_keeps_original_points(n in 10usize..200, target in 1usize..300, seed: u64) {
        let mut r = rng(seed);
        let cloud = random_cloud(&mut r, n, 1);
        let out = resample(&cloud, target, seed).unwrap();
        prop_assert_eq!(out.len(), target);
        for (i, p) in out.positions.iter().enumerate() {
            let j = cloud.positions.iter().position(|q| q == p).unwrap();
            prop_assert_eq!(out.features[i], cloud.features[j]);
        }
    }

    #[test]
    fn unit_scaling_is_identity(cloud in cloud_strategy(30, 1), seed: u64) {
        let out = anisotropic_scale(&cloud, 1.0, 1.0, &mut rng(seed)).unwrap();
        prop_assert_eq!(out.positions, cloud.positions);
    }
}

fn layer(role: Role, m: usize, k: usize, ch: usize, partner: Option<usize>) -> LayerSpec {
    LayerSpec { role, n_centroids: m, k, d: 1, s: 3, channels: ch, partner, fixed_radius: None }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn hierarchy_point_counts(n in 8usize..120, m0 in 1usize..64, m1 in 1usize..32, seed: u64) {
        let config = NetworkConfig {
            version: 1,
            task: Task::Segment,
            group: GroupKind::P4,
            in_channels: 1,
            num_classes: 2,
            layers: vec![
                layer(Role::Encoder, m0, 6, 2, None),
                layer(Role::Encoder, m1, 6, 2, None),
                layer(Role::Decoder, 0, 4, 2, Some(1)),
                layer(Role::Decoder, 0, 4, 2, Some(0)),
            ],
            head: vec![],
            dropout: 0.0,
            orientation_pool: OrientationPool::Concat,
            conv_relu: true,
            voxel: Default::default(),
            deterministic_sampling: false,
            center: false,
        };
        let net = Network::build(&config, seed).unwrap();
        let cloud = random_cloud(&mut rng(seed), n, 1);
        let f = net.forward(&cloud, RunMode::Train { seed }).unwrap();
        let p = &f.trace.points;
        prop_assert!(p[0] <= n && p[1] <= p[0]);
        prop_assert_eq!(p[2], p[0]);
        prop_assert_eq!(p[3], n);
    }
}
