use multireg::dataset::{Dataset, DatasetParams, GeometryParams};
use multireg::eval::compute_tre;
use multireg::mdp::{action_rewards, apply_action};
use multireg::nn::{NetworkConfig, PolicyNetwork};
use multireg::projection::agent_frame_for_pixel;
use multireg::registration::*;
use multireg::se3::RigidTransform;
use multireg::training::random_pose;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(views: Vec<f64>, dims: usize) -> Dataset {
    let p = DatasetParams {
        geometry: GeometryParams { view_angles_deg: views, image_dims: [dims, dims], ..Default::default() },
        ..Default::default()
    };
    Dataset::generate(&p, 7).unwrap()
}

fn fixed_images(d: &Dataset, t_g: &RigidTransform) -> Vec<multireg::projection::Image2D> {
    (0..d.views.len()).map(|v| d.render(&d.volume, v, t_g).unwrap()).collect()
}

fn run(d: &Dataset, t_g: &RigidTransform, t_init: &RigidTransform, cfg: &RegistrationRunConfig) -> Trajectory {
    let p = RegistrationProblem::from_dataset(d, fixed_images(d, t_g), 61).unwrap();
    let mut oracle = OraclePolicy::new(&p, *t_g);
    register(&p, &mut oracle, t_init, Some(t_g), cfg)
}

#[test]
fn oracle_in_plane_offset_converges_single_view() {
    let d = dataset(vec![0.0], 128);
    let t_g = RigidTransform::identity();
    let u = d.views[0].geometry.image_frame().rotation_block().row(0).transpose();
    let t_init = RigidTransform::translation(u * 10.0);
    for mode in [RegistrationMode::AgtS, RegistrationMode::AgtM] {
        let cfg = RegistrationRunConfig { mode, ..Default::default() };
        let traj = run(&d, &t_g, &t_init, &cfg);
        assert!(traj.aborted.is_none());
        let last = traj.steps.last().unwrap().distance_to_gt.unwrap();
        assert!(last < 2.0, "{mode:?}: final distance {last}");
    }
}

#[test]
fn zero_offset_wander_is_bounded() {
    let d = dataset(vec![0.0, 90.0], 128);
    let t_g = random_pose(&mut ChaCha8Rng::seed_from_u64(3), 5.0, 5.0);
    let cfg = RegistrationRunConfig { steps: 20, ..Default::default() };
    let traj = run(&d, &t_g, &t_g, &cfg);
    assert_eq!(traj.steps.len(), 20 * 2 + 1);
    assert_eq!(traj.poses.len(), traj.steps.len());
    for s in &traj.steps {
        assert!(s.distance_to_gt.unwrap() <= 2f64.sqrt() + 1.0 + 1e-9, "{s:?}");
    }
    let json: serde_json::Value = serde_json::from_str(&traj.to_json().unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 41);
    assert_eq!(json[1]["view"], 0);
    assert_eq!(json[2]["view"], 1);
    assert_eq!(json[0]["pose"].as_array().unwrap().len(), 16);
}

#[test]
fn single_selected_agent_step_is_apply_action() {
    let d = dataset(vec![0.0], 96);
    let t_g = RigidTransform::identity();
    let t0 = random_pose(&mut ChaCha8Rng::seed_from_u64(5), 8.0, 4.0);
    let p = RegistrationProblem::from_dataset(&d, fixed_images(&d, &t_g), 61).unwrap();
    let cfg = RegistrationRunConfig {
        steps: 1,
        confidence_threshold: f64::MAX,
        fallback_fraction: 1e-9,
        ..Default::default()
    };
    let mut oracle = OraclePolicy::new(&p, t_g);
    let traj = register(&p, &mut oracle, &t0, None, &cfg);
    assert_eq!(traj.steps[1].n_selected_agents, 1);
    let all = OraclePolicy::new(&p, t_g).dense(0, &t0).unwrap();
    let chosen = select_agents(&all, cfg.confidence_threshold, cfg.fallback_fraction)[0];
    let expected = apply_action(&t0, &chosen.action, &p.center_frame(0, &t0).unwrap());
    assert!((traj.poses[1].matrix() - expected.matrix()).abs().max() < 1e-12);
}

#[test]
fn oracle_decisions_all_improve_away_from_optimum() {
    let d = dataset(vec![0.0], 96);
    let t_g = RigidTransform::identity();
    let t = RigidTransform::translation(Vector3::new(6.0, -4.0, 3.0))
        .compose(&RigidTransform::rotation(Vector3::new(1.0, 2.0, 0.5), 0.08));
    let p = RegistrationProblem::from_dataset(&d, fixed_images(&d, &t_g), 61).unwrap();
    let decisions = OraclePolicy::new(&p, t_g).dense(0, &t).unwrap();
    assert!(decisions.len() > 36 * 36 / 2 && decisions.len() <= 36 * 36);
    let g = &d.views[0].geometry;
    for dec in decisions.iter().step_by(37) {
        let e = agent_frame_for_pixel(g, &d.volume, &t, [dec.pixel[0] as f64, dec.pixel[1] as f64])
            .unwrap()
            .world_to_agent();
        let r = action_rewards(&t, &e, &t_g).unwrap();
        assert!((dec.confidence - r.iter().cloned().fold(f64::MIN, f64::max)).abs() < 1e-9);
        assert!(r[dec.action.index()] > 0.0, "{dec:?}");
        assert!(dec.confidence > 0.0);
    }
}

#[test]
fn network_decision_count_is_valid_extent() {
    let d = dataset(vec![0.0], 96);
    let net = PolicyNetwork::new(NetworkConfig::narrowed(8), 1).unwrap();
    let fixed = d.views[0].scale.apply(&d.render(&d.volume, 0, &RigidTransform::identity()).unwrap());
    let decisions = agent_decisions(&net, &fixed, &fixed).unwrap();
    assert_eq!(decisions.len(), 36 * 36);
    for dec in &decisions {
        assert!((30..66).contains(&dec.pixel[0]) && (30..66).contains(&dec.pixel[1]));
    }
    let small = fixed.crop(0, 0, 50, 50).unwrap();
    assert!(agent_decisions(&net, &small, &small).is_err());

    let t = RigidTransform::translation(Vector3::new(2.0, 0.0, 0.0));
    let p = RegistrationProblem::from_dataset(&d, vec![d.render(&d.volume, 0, &t).unwrap()], 61).unwrap();
    let mut policy = NetworkPolicy::new(&p, &net).unwrap();
    let dense = policy.dense(0, &RigidTransform::identity()).unwrap();
    let single = policy.single(0, &RigidTransform::identity(), [48, 48]).unwrap();
    let same = dense.iter().find(|x| x.pixel == [48, 48]).unwrap();
    assert_eq!(same.action, single.action);
    assert!((same.confidence - single.confidence).abs() < 1e-6 * (1.0 + single.confidence.abs()));
}

#[test]
fn oracle_multi_agent_descends_monotonically() {
    let d = dataset(vec![0.0, 90.0], 96);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let limit = 2f64.sqrt() + 1.0;
    let cfg = RegistrationRunConfig { steps: 25, ..Default::default() };
    let mut violations = Vec::new();
    for trial in 0..100 {
        let t_g = random_pose(&mut rng, 5.0, 5.0);
        let center = t_g.transform_point(&d.volume.center());
        let t_init = multireg::eval::perturb_pose(&t_g, center, &mut rng, 15.0, 8.0);
        let traj = run(&d, &t_g, &t_init, &cfg);
        assert!(traj.aborted.is_none());
        for w in traj.steps.windows(2) {
            let (a, b) = (w[0].distance_to_gt.unwrap(), w[1].distance_to_gt.unwrap());
            if a > limit && b > a + 1e-9 {
                violations.push((trial, w[1].step, a, b));
            }
        }
    }
    assert!(violations.is_empty(), "{violations:?}");
}

#[test]
fn refinement_from_truth_stays_and_from_offset_improves() {
    let d = dataset(vec![0.0, 90.0], 128);
    let t_g = random_pose(&mut ChaCha8Rng::seed_from_u64(2), 3.0, 3.0);
    let fixed = fixed_images(&d, &t_g);
    let geoms: Vec<_> = d.views.iter().map(|v| v.geometry.clone()).collect();
    let cfg = RegistrationRunConfig::default();
    let r = refine_local(&d.volume, &fixed, &t_g, &geoms, &cfg).unwrap();
    let rel = r.compose(&t_g.inverse());
    assert!(compute_tre(&d.landmarks, &r, &t_g) <= 0.5);
    assert!(rel.rotation_angle().to_degrees() <= 0.5);

    let u = d.views[0].geometry.image_frame().rotation_block().row(0).transpose();
    let start = RigidTransform::translation(u * 2.0).compose(&t_g);
    let refined = refine_local(&d.volume, &fixed, &start, &geoms, &cfg).unwrap();
    let (before, after) = (compute_tre(&d.landmarks, &start, &t_g), compute_tre(&d.landmarks, &refined, &t_g));
    assert!(after < before, "TRE {before} -> {after}");
}

fn decisions_strategy() -> impl Strategy<Value = Vec<AgentDecision>> {
    prop::collection::vec((0usize..12, 0usize..12, -3i32..3, 0usize..12), 1..60).prop_map(|v| {
        let mut seen = std::collections::BTreeSet::new();
        v.into_iter()
            .filter(|(x, y, _, _)| seen.insert((*x, *y)))
            .map(|(x, y, c, a)| AgentDecision {
                pixel: [x, y],
                confidence: c as f64 * 0.5,
                action: multireg::mdp::ActionSpec::from_index(a),
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn selection_ignores_input_order(ds in decisions_strategy(), seed in any::<u64>(), thr in -2.0f64..2.0, frac in 0.01f64..1.0) {
        let mut shuffled = ds.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = select_agents(&ds, thr, frac);
        prop_assert_eq!(&a, &select_agents(&shuffled, thr, frac));
        let k = ((frac * ds.len() as f64).ceil() as usize).min(ds.len());
        prop_assert!(a.len() >= k);
        let above = ds.iter().filter(|d| d.confidence > thr).count();
        prop_assert_eq!(a.len(), above.max(k));
    }
}
