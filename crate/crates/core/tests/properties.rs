use gsforge_core::align::{
    combined_infonce, infonce_voxel_loss, l2_normalize, nll_match_loss, quaternion_to_6d, rotation_from_6d,
    AlignmentAnchor, InfoNceConfig,
};
use gsforge_core::augment::{augment_image, AugmentRecipe, ColorJitter};
use gsforge_core::io::{gidx, gtns, pfm};
use gsforge_core::labeler::{symmetric_overlap, warp_pixel};
use gsforge_core::metrics::{depth_l1_regularization, fundamental_from_cameras, symmetric_epipolar_distance, PriorAlignment};
use gsforge_core::pipeline::{PipelineConfig, CONFIG_KEYS};
use gsforge_core::render::render_buffers;
use gsforge_core::synthetic::{make_synthetic_scene, SceneKind, SyntheticParams};
use gsforge_core::types::{logit, SH_LEN};
use gsforge_core::view_synth::{filter_candidates, perturb_camera, PerturbationConfig, ViewStats};
use gsforge_core::{CameraModel, GaussianPrimitive, GaussianScene, Image};
use nalgebra::{DMatrix, Matrix3, Rotation3, SymmetricEigen, UnitQuaternion, Vector3};
use proptest::prelude::*;

fn quat() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-1.0f64..1.0).prop_filter("nonzero", |q| q.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn primitive() -> impl Strategy<Value = GaussianPrimitive> {
    (
        prop::array::uniform3(-2.0f64..2.0),
        prop::array::uniform3(-4.0f64..0.5),
        quat(),
        -4.0f64..4.0,
    )
        .prop_map(|(p, s, q, o)| GaussianPrimitive {
            position: Vector3::from(p),
            log_scale: Vector3::from(s),
            rotation: q,
            opacity_logit: o,
            sh: [0.1; SH_LEN],
        })
}

fn camera() -> impl Strategy<Value = CameraModel> {
    (prop::array::uniform3(-0.3f64..0.3), prop::array::uniform3(-0.6f64..0.6), 30.0f64..80.0).prop_map(|(e, t, f)| {
        let r = Rotation3::from_euler_angles(e[0], e[1], e[2]).into_inner();
        CameraModel::new(f, f * 1.1, 31.5, 30.0, 64, 61, r, Vector3::from(t)).unwrap()
    })
}

fn stats() -> impl Strategy<Value = ViewStats> {
    (0usize..500, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(n, a, v, f)| ViewStats {
        n_gaussians: n,
        mean_alpha: a,
        frac_valid: v,
        frac_near: f,
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn activation_is_idempotent(p in primitive()) {
        let a = p.activate().unwrap();
        let b = a.to_stored().activate().unwrap();
        prop_assert!((a.position - b.position).abs().max() == 0.0);
        prop_assert!((a.scale - b.scale).abs().max() <= 1e-12 * a.scale.max());
        prop_assert!(a.rotation.angle_to(&b.rotation) <= 1e-12);
        prop_assert!((a.opacity - b.opacity).abs() <= 1e-12);
    }

    #[test]
    fn covariance_spectrum_is_squared_scales(p in primitive()) {
        let a = p.activate().unwrap();
        let mut eig: Vec<f64> = SymmetricEigen::new(a.covariance()).eigenvalues.iter().copied().collect();
        let mut sq: Vec<f64> = a.scale.iter().map(|s| s * s).collect();
        eig.sort_by(f64::total_cmp);
        sq.sort_by(f64::total_cmp);
        let scale = sq[2];
        for (e, s) in eig.iter().zip(&sq) {
            prop_assert!((e - s).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn gaussian_is_rotation_equivariant(p in primitive(), q in quat(), x in prop::array::uniform3(-2.0f64..2.0)) {
        let a = p.activate().unwrap();
        let rq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        let mut b = a.clone();
        b.position = rq * a.position;
        b.rotation = rq * a.rotation;
        let x = Vector3::from(x);
        let before = a.evaluate(&x).unwrap();
        let after = b.evaluate(&(rq * x)).unwrap();
        prop_assert!((before - after).abs() <= 1e-9);
    }

    #[test]
    fn quaternion_6d_round_trip(q in quat()) {
        let u = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        let neg = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(-q[0], -q[1], -q[2], -q[3]));
        let d = quaternion_to_6d(&u);
        let d_neg = quaternion_to_6d(&neg);
        for k in 0..6 {
            prop_assert!((d[k] - d_neg[k]).abs() <= 1e-12);
        }
        let r = rotation_from_6d(&d).unwrap();
        prop_assert!((r - u.to_rotation_matrix().into_inner()).abs().max() <= 1e-9);
    }

    #[test]
    fn filter_is_permutation_invariant(s in prop::collection::vec(stats(), 2..30), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let kept = filter_candidates(&s).unwrap();
        let mut perm: Vec<usize> = (0..s.len()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let shuffled: Vec<ViewStats> = perm.iter().map(|&k| s[k]).collect();
        let mut back: Vec<usize> = filter_candidates(&shuffled).unwrap().into_iter().map(|k| perm[k]).collect();
        back.sort_unstable();
        prop_assert_eq!(back, kept);
    }

    #[test]
    fn zero_perturbation_reproduces_camera(c in camera(), seed in any::<u64>(), draw in 0u64..100) {
        let cfg = PerturbationConfig { rot_jitter_max: 0.0, trans_jitter_max: 0.0, scale_range: (1.0, 1.0), seed };
        prop_assert_eq!(perturb_camera(&c, &cfg, draw).unwrap(), c);
    }

    #[test]
    fn warp_round_trip_exact(a in camera(), b in camera(), u in 0.0f64..63.0, v in 0.0f64..60.0, d in 1.0f64..10.0) {
        if let Some((p, z)) = warp_pixel(&a, &b, u, v, d) {
            if let Some((q, z2)) = warp_pixel(&b, &a, p.x, p.y, z) {
                prop_assert!((q.x - u).abs() < 1e-8 && (q.y - v).abs() < 1e-8);
                prop_assert!(close(z2, d, 1e-12));
            }
        }
    }

    #[test]
    fn symmetric_overlap_bounded(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let s = symmetric_overlap(a, b);
        prop_assert!(s <= a && s <= b);
    }

    #[test]
    fn epipolar_invariances(a in camera(), b in camera(), k in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0],
                            pt in prop::array::uniform3(-1.0f64..1.0), depth in 2.0f64..8.0) {
        prop_assume!((a.center() - b.center()).norm() > 1e-3);
        let f = *fundamental_from_cameras(&a, &b).unwrap().matrix();
        // Exact correspondence of a world point seen by both.
        let world = a.camera_to_world(&Vector3::new(pt[0], pt[1], depth));
        let (ca, cb) = (a.world_to_camera(&world), b.world_to_camera(&world));
        prop_assume!(cb.z > 0.1);
        let (pa, pb) = (a.project_camera(&ca), b.project_camera(&cb));
        let (pa, pb) = ([pa.x, pa.y], [pb.x, pb.y]);
        if let Some(e) = symmetric_epipolar_distance(&f, pa, pb) {
            prop_assert!(e < 1e-9);
        }
        // Off-match point: scale and swap invariance.
        let off = [pb[0] + 3.0, pb[1] - 2.0];
        if let (Some(e1), Some(e2), Some(e3)) = (
            symmetric_epipolar_distance(&f, pa, off),
            symmetric_epipolar_distance(&(f * k), pa, off),
            symmetric_epipolar_distance(&f.transpose(), off, pa),
        ) {
            prop_assert!(close(e1, e2, 1e-9));
            prop_assert!((e1 - e3).abs() <= 1e-12 * e1.max(1.0));
        }
    }

    #[test]
    fn depth_prior_alignment_absorbs_affine(vals in prop::collection::vec(0.5f64..5.0, 16), noise in prop::collection::vec(-0.2f64..0.2, 16),
                                            s in prop_oneof![-3.0f64..-0.1, 0.1f64..3.0], t in -2.0f64..2.0) {
        let rendered = Image::from_vec(4, 4, vals.clone()).unwrap();
        let prior = Image::from_vec(4, 4, vals.iter().zip(&noise).map(|(v, n)| 1.0 / v + n).collect()).unwrap();
        let moved = prior.map(|p| s * p + t);
        let mask = Image::filled(4, 4, true);
        let a = depth_l1_regularization(&rendered, &prior, &mask, PriorAlignment::LeastSquares).unwrap();
        let b = depth_l1_regularization(&rendered, &moved, &mask, PriorAlignment::LeastSquares).unwrap();
        prop_assert!((a.loss - b.loss).abs() <= 1e-9);
    }

    #[test]
    fn nll_zero_iff_supervised_entries_are_one(n in 1usize..6, fill in 0.01f64..1.0, hit in any::<bool>()) {
        let mut s = DMatrix::from_element(n, n, fill);
        let gt: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        for &(i, j) in &gt {
            s[(i, j)] = 1.0;
        }
        if !hit {
            s[gt[0]] = fill.min(0.99);
        }
        let l = nll_match_loss(&s, &gt).unwrap();
        prop_assert_eq!(l == 0.0, hit);
        let mut rev = gt.clone();
        rev.reverse();
        prop_assert!((nll_match_loss(&s, &rev).unwrap() - l).abs() <= 1e-15);
    }

    #[test]
    fn infonce_positive_and_permutation_invariant(raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 8), 6..13),
                                                  tau in 0.05f64..1.0) {
        prop_assume!(raw.iter().all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3));
        let units: Vec<Vec<f64>> = raw.iter().map(|v| l2_normalize(v).unwrap()).collect();
        let batch: Vec<AlignmentAnchor> = units
            .chunks_exact(3)
            .map(|c| AlignmentAnchor { scene: 0, v: c[0].clone(), q_a: c[1].clone(), q_b: c[2].clone() })
            .collect();
        let cfg = InfoNceConfig { tau, ..Default::default() };
        let l = combined_infonce(&batch, &cfg).unwrap();
        prop_assert!(l.voxel > 0.0 && l.patch > 0.0);
        let mut rev = batch.clone();
        rev.reverse();
        let r = combined_infonce(&rev, &cfg).unwrap();
        prop_assert!((l.total - r.total).abs() <= 1e-12 * l.total.abs().max(1.0));
        // A negative equal to a positive keeps the voxel loss above ln 2 / 2 > 0.
        let x = &batch[0];
        let v = infonce_voxel_loss(&x.v, &x.q_a, &x.q_b, &[&x.q_a], tau).unwrap();
        prop_assert!(v > 0.0);
    }

    #[test]
    fn tensor_round_trip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        for data in [
            gtns::TensorData::F32((0..n).map(|_| rng.gen::<f32>() * 1e3 - 5e2).collect()),
            gtns::TensorData::F64((0..n).map(|_| rng.gen::<f64>() * 1e9).collect()),
            gtns::TensorData::I32((0..n).map(|_| rng.gen()).collect()),
        ] {
            let t = gtns::Tensor::new(dims.clone(), data).unwrap();
            prop_assert_eq!(gtns::decode_tensor(&gtns::encode_tensor(&t)).unwrap(), t);
        }
    }

    #[test]
    fn maps_round_trip(w in 1usize..9, h in 1usize..9, vals in prop::collection::vec(prop_oneof![Just(0.0f32), 0.01f32..100.0], 64),
                       ids in prop::collection::vec(-1i32..1000, 64)) {
        let depth = Image::from_vec(w, h, vals[..w * h].iter().map(|&v| v as f64).collect()).unwrap();
        prop_assert_eq!(pfm::decode_pfm(&pfm::encode_pfm(&depth)).unwrap(), depth);
        let g = Image::from_vec(w, h, ids[..w * h].to_vec()).unwrap();
        prop_assert_eq!(gidx::decode_gmap(&gidx::encode_gmap(&g)).unwrap(), g);
    }

    #[test]
    fn config_rejects_unknown_keys(key in "[a-z_]{1,12}", blank in 0usize..4) {
        prop_assume!(!CONFIG_KEYS.contains(&key.as_str()));
        let text = format!("seed = 3\n{}{key} = 1\n", "\n".repeat(blank));
        let e = PipelineConfig::from_text(&text, "p.cfg").unwrap_err();
        prop_assert_eq!(e.to_string(), format!("p.cfg:{}: unknown key `{key}`", blank + 2));
    }

    #[test]
    fn augmentation_is_seeded_and_clamped(seed in any::<u64>(), g in 0.3f64..3.0, n in 0.0f64..0.5, len in 1usize..6) {
        let img = Image::from_vec(6, 5, (0..30).map(|i| [i as f64 / 29.0, 0.5, 1.0 - i as f64 / 29.0]).collect()).unwrap();
        let r = AugmentRecipe {
            color_jitter: Some(ColorJitter { gain: (0.5, 1.5), bias: (-0.3, 0.3) }),
            gamma: Some((g, g * 1.5)),
            motion_blur: Some((1, len)),
            iso_noise: Some((0.0, n)),
        };
        let a = augment_image(&img, &r, seed).unwrap();
        prop_assert_eq!(&a, &augment_image(&img, &r, seed).unwrap());
        prop_assert!(a.data.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn render_is_schedule_independent_and_partitions(seed in any::<u64>(), count in 20usize..300) {
        let s = make_synthetic_scene(SceneKind::RandomCloud, &SyntheticParams { count, ..Default::default() }, seed).unwrap();
        let c = CameraModel::new(40.0, 40.0, 23.5, 19.5, 48, 40, Matrix3::identity(), Vector3::zeros()).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| render_buffers(&c, &s.scene, 0.5)).unwrap();
        let b = three.install(|| render_buffers(&c, &s.scene, 0.5)).unwrap();
        prop_assert!(a == b);
        for (acc, t) in a.alpha_acc.data.iter().zip(&a.transmittance.data) {
            prop_assert!((acc + t - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn opaque_disc_depth_modes_agree(z in 1.0f64..8.0, x in -0.3f64..0.3, y in -0.3f64..0.3) {
        let disc = GaussianPrimitive {
            position: Vector3::new(x, y, z),
            log_scale: Vector3::new(5f64.ln() * 5.0, 5f64.ln() * 5.0, -12.0),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(1.0 - 1e-12),
            sh: [0.0; SH_LEN],
        };
        let c = CameraModel::new(30.0, 30.0, 10.0, 10.0, 21, 21, Matrix3::identity(), Vector3::zeros()).unwrap();
        let b = render_buffers(&c, &GaussianScene::new("disc", vec![disc]), 0.5).unwrap();
        for i in 0..b.alpha_acc.data.len() {
            let (alpha, dom, plane) = (b.depth_alpha.data[i], b.depth_dominant.data[i], b.depth_plane.data[i]);
            prop_assert!(close(alpha, z, 1e-6) && close(dom, z, 1e-6) && close(plane, z, 1e-6),
                "pixel {i}: alpha {alpha} dominant {dom} plane {plane} vs {z}");
        }
    }
}
