use multireg::dataset::{Dataset, DatasetParams};
use multireg::mdp::*;
use multireg::nn::ACTION_COUNT;
use multireg::projection::agent_frame_for_pixel;
use multireg::se3::{geodesic_distance, RigidTransform};
use multireg::training::random_pose;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn rewards_telescope_on_random_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let t_g = random_pose(&mut rng, 30.0, 30.0);
        let t = random_pose(&mut rng, 30.0, 30.0);
        let e = random_pose(&mut rng, 300.0, 180.0);
        let a = ActionSpec::from_index(rng.random_range(0..ACTION_COUNT));
        let r = reward(&t, &a, &e, &t_g).unwrap();
        let back = reward(&apply_action(&t, &a, &e), &a.opposite(), &e, &t_g).unwrap();
        assert!((r + back).abs() < 1e-9, "{r} vs {back}");
    }
}

#[test]
fn greedy_oracle_descends_then_stays_trapped() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let max_step = 2f64.sqrt();
    let trap = 2f64.sqrt() + 1.0;
    for trial in 0..200 {
        let t_g = random_pose(&mut rng, 10.0, 10.0);
        let e = random_pose(&mut rng, 200.0, 90.0);
        let offset = random_pose(&mut rng, 15.0, 8.0);
        let mut t = e.inverse().compose(&offset).compose(&e).compose(&t_g);
        let dist = |t: &RigidTransform| geodesic_distance(&e.compose(t), &e.compose(&t_g)).unwrap();
        let mut d = dist(&t);
        let mut trapped = false;
        for step in 0..120 {
            t = apply_action(&t, &greedy_oracle_policy(&t, &e, &t_g).unwrap(), &e);
            let next = dist(&t);
            if trapped {
                assert!(next < trap, "trial {trial} step {step}: escaped to {next}");
            } else if d >= max_step {
                assert!(next < d, "trial {trial} step {step}: {d} -> {next}");
            }
            trapped |= next < max_step;
            d = next;
        }
        assert!(trapped, "trial {trial} never converged (D = {d})");
    }
}

#[test]
fn default_setup_mask_covers_most_agents() {
    let d = Dataset::generate(&DatasetParams::default(), 0).unwrap();
    for view in &d.views {
        let grid = AgentGrid::for_image(view.geometry.image_dims, 61).unwrap();
        let t = RigidTransform::identity();
        let map = RewardPrecompute::new(&view.geometry, &d.volume, &t, &t, grid).unwrap().map_for_shift_mm([0.0, 0.0]);
        assert!(map.valid_fraction() >= 0.9, "valid fraction {}", map.valid_fraction());
    }
}

#[test]
fn shifted_map_equals_map_of_translated_volume() {
    let d = Dataset::generate(&DatasetParams::default(), 1).unwrap();
    let g = &d.views[0].geometry;
    let n = g.normal();
    let c = g.image_frame();
    let grid = AgentGrid::for_image(g.image_dims, 61).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..3 {
        let t_g = random_pose(&mut rng, 5.0, 5.0);
        // Rotation about the view axis keeps the volume's front and back
        // faces parallel to the detector.
        let t = RigidTransform::translation(Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            .compose(&RigidTransform::rotation(n, rng.random_range(-0.1..0.1)));
        let pre = RewardPrecompute::new(g, &d.volume, &t, &t_g, grid).unwrap();
        let [cx, cy] = grid.center();
        let mm = pre.mm_per_px(cx, cy).unwrap();
        let shift_px = [rng.random_range(-15i64..=15), rng.random_range(-15i64..=15)];
        let delta = Vector3::new(shift_px[0] as f64 * mm[0], shift_px[1] as f64 * mm[1], 0.0);
        let moved = RigidTransform::translation(c.rotation_block().transpose() * delta).compose(&t);
        let shortcut = pre.map_for_shift_px(shift_px);
        let direct = RewardPrecompute::new(g, &d.volume, &moved, &t_g, grid).unwrap().map_for_shift_mm([0.0, 0.0]);

        let centre = grid.pixel_of(cx, cy);
        let depth = |tt: &RigidTransform, p: [usize; 2]| {
            agent_frame_for_pixel(g, &d.volume, tt, [p[0] as f64, p[1] as f64]).ok().map(|f| n.dot(&f.origin_3d))
        };
        let ref_depth = depth(&t, centre).unwrap();
        let mut checked = 0;
        for iy in 0..grid.dims[1] {
            for ix in 0..grid.dims[0] {
                let p = grid.pixel_of(ix, iy);
                let interior = [depth(&t, p), depth(&moved, p)]
                    .iter()
                    .all(|z| z.is_some_and(|z| (z - ref_depth).abs() < 1e-9));
                if !interior {
                    continue;
                }
                let (a, b) = (shortcut.get(ix, iy).unwrap(), direct.get(ix, iy).unwrap());
                for k in 0..ACTION_COUNT {
                    assert!((a[k] - b[k]).abs() < 1e-6, "({ix},{iy}) action {k}: {} vs {}", a[k], b[k]);
                }
                checked += 1;
            }
        }
        assert!(checked > grid.len() / 2, "only {checked} interior agents");
    }
}
