use super::*;
use proptest::prelude::*;

fn free_params() -> PhysicsParams {
    PhysicsParams::default()
}

#[test]
fn free_fall_matches_closed_form() {
    let p = free_params();
    let ball = ObjectSpec::ball(0.0, 10.0, 0.05, "red");
    // 26 frames of 10 steps of 1/256 s: 250/256 s
    let states = integrate(&[ball], &p, 27).unwrap();
    for (l, s) in states.iter().enumerate() {
        let t = l as f64 * p.frame_stride as f64 * p.dt;
        let want = 10.0 - 0.5 * p.gravity * t * t;
        assert!((s[0].y - want).abs() < 1e-3, "l={l}: {} vs {want}", s[0].y);
    }
    assert!(states.last().unwrap()[0].y < 10.0 - 4.6);
}

#[test]
fn elastic_head_on_collision_swaps_velocities() {
    let p = PhysicsParams {
        gravity: 0.0,
        restitution: 1.0,
        friction: 0.0,
        ..PhysicsParams::default()
    };
    let mut a = ObjectSpec::ball(0.3, 0.5, 0.05, "red");
    let mut b = ObjectSpec::ball(0.7, 0.5, 0.05, "blue");
    a.vx = 1.0;
    b.vx = -0.5;
    let s = integrate(&[a, b], &p, 20).unwrap();
    let last = s.last().unwrap();
    assert!((last[0].vx + 0.5).abs() < 1e-6);
    assert!((last[1].vx - 1.0).abs() < 1e-6);
    assert_eq!(last[0].vy, 0.0);
    let momentum = last[0].vx + last[1].vx;
    assert!((momentum - 0.5).abs() < 1e-6);
}

#[test]
fn ball_rests_on_bar() {
    let p = free_params();
    let bar = ObjectSpec::bar(0.5, 0.3, 0.3, 0.0);
    let ball = ObjectSpec::ball(0.5, 0.3 + BAR_HALF_THICKNESS + 0.05, 0.05, "red");
    let s = integrate(&[ball.clone(), bar.clone()], &p, 64).unwrap();
    for frame in &s {
        assert!((frame[0].x - 0.5).abs() < 1e-9);
        assert!((frame[0].y - ball.y).abs() < 1e-3);
        assert!(max_overlap(&[ball.clone(), bar.clone()], frame) < 1e-3);
    }
}

#[test]
fn templates_conserve_energy_and_avoid_overlap() {
    for name in TEMPLATE_NAMES {
        let tpl = make_template(name).unwrap();
        for seed in 0..6 {
            let objects = tpl.instance(seed).unwrap();
            let s = integrate(&objects, &tpl.physics, tpl.frames).unwrap();
            let mut prev = f64::INFINITY;
            for frame in &s {
                let e = mechanical_energy(&objects, frame, tpl.physics.gravity);
                assert!(e <= prev + 1e-3, "{name}/{seed}: energy {e} after {prev}");
                prev = e;
                assert!(max_overlap(&objects, frame) < 1e-3, "{name}/{seed}");
            }
        }
    }
}

#[test]
fn templates_have_expected_objects() {
    let tpl = make_template("three-balls").unwrap();
    let objects = tpl.instance(0).unwrap();
    assert_eq!(objects.len(), 7);
    assert_eq!(objects.iter().filter(|o| o.movable && o.shape == Shape::Ball).count(), 3);
    assert_eq!(objects.iter().filter(|o| o.shape == Shape::Bar).count(), 4);
    for name in TEMPLATE_NAMES {
        let tpl = make_template(name).unwrap();
        let a = tpl.instance(1).unwrap();
        let b = tpl.instance(2).unwrap();
        assert_eq!(a.len(), tpl.object_count());
        assert_ne!(a, b);
        for o in a.iter().filter(|o| o.movable) {
            assert!(o.x - o.size > 0.02 && o.x + o.size < 0.98);
            assert!(o.y - o.size > 0.02 && o.y + o.size < 0.98);
        }
    }
    assert!(matches!(make_template("cup"), Err(Error::Usage(_))));
}

#[test]
fn simulation_is_deterministic() {
    let tpl = make_template("funnel").unwrap();
    assert_eq!(simulate(&tpl, 5).unwrap(), simulate(&tpl, 5).unwrap());
}

#[test]
fn encoding_layout() {
    let tpl = make_template("ball-on-bar").unwrap();
    let rec = simulate(&tpl, 3).unwrap();
    let (o_n, l_n) = (rec.x.dims()[0], rec.x.dims()[1]);
    assert_eq!(rec.x.dims(), [tpl.object_count(), 64, FEATURE_DIM]);
    for o in 0..o_n {
        let movable = rec.x.at(&[o, 0, feature::MOVABLE]);
        let ball = rec.x.at(&[o, 0, feature::SHAPE_BALL]);
        assert_eq!(movable, ball);
        for l in 0..l_n {
            for f in 3..FEATURE_DIM {
                assert_eq!(rec.x.at(&[o, l, f]), rec.x.at(&[o, 0, f]));
            }
            if movable == 0.0 {
                for f in 0..3 {
                    assert_eq!(rec.x.at(&[o, l, f]), rec.x.at(&[o, 0, f]));
                }
            }
            for f in 0..3 {
                let v = rec.x.at(&[o, l, f]);
                assert!((0.0..=1.0).contains(&v), "feature {f} = {v}");
            }
        }
    }
}

#[test]
fn decode_roundtrip_and_layout_check() {
    let tpl = make_template("three-balls").unwrap();
    let objects = tpl.instance(4).unwrap();
    let states = integrate(&objects, &tpl.physics, 8).unwrap();
    let x = encode_features(&objects, &states).unwrap();
    let colors: Vec<String> = objects.iter().map(|o| o.color.clone()).collect();
    let frames = decode_features(&x, &colors, FEATURE_LAYOUT_VERSION).unwrap();
    for (l, frame) in frames.iter().enumerate() {
        for (o, d) in frame.iter().enumerate() {
            assert!((d.x - states[l][o].x).abs() < 1e-6);
            assert!((d.y - states[l][o].y).abs() < 1e-6);
            assert_eq!(d.color, objects[o].color);
            assert_eq!(d.shape, objects[o].shape);
            assert_eq!(d.movable, objects[o].movable);
        }
    }
    assert!(matches!(decode_features(&x, &colors, 2), Err(Error::Format(_))));
}

#[test]
fn unwrapped_rotation_starts_in_unit_interval() {
    let mut bar = ObjectSpec::bar(0.5, 0.5, 0.1, -7.0);
    bar.movable = false;
    let states = vec![vec![BodyState {
        x: 0.5,
        y: 0.5,
        rotation: -7.0,
        vx: 0.0,
        vy: 0.0,
    }]];
    let x = encode_features(&[bar], &states).unwrap();
    let r = x.at(&[0, 0, feature::ROT]) as f64;
    assert!((0.0..1.0).contains(&r));
    assert!((r * TAU - (-7.0f64).rem_euclid(TAU)).abs() < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn augmentation_is_a_rigid_shift(dx in -1.0f64..1.0, dy in -1.0f64..1.0, seed in 0u64..50) {
        let tpl = make_template("drop-two").unwrap().with_frames(16);
        let rec = simulate(&tpl, seed).unwrap();
        let aug = augment_offset(&rec, [dx, dy]);
        prop_assert_eq!(aug.offset, [dx, dy]);
        let (o_n, l_n) = (rec.x.dims()[0], rec.x.dims()[1]);
        for l in 0..l_n {
            for a in 0..o_n {
                for f in 0..2 {
                    let shift = [dx, dy][f];
                    prop_assert!(((aug.x.at(&[a, l, f]) - rec.x.at(&[a, l, f])) as f64 - shift).abs() < 1e-6);
                    for b in 0..o_n {
                        let before = rec.x.at(&[a, l, f]) - rec.x.at(&[b, l, f]);
                        let after = aug.x.at(&[a, l, f]) - aug.x.at(&[b, l, f]);
                        prop_assert!((before - after).abs() <= 1e-6);
                    }
                }
                for f in 2..FEATURE_DIM {
                    prop_assert_eq!(aug.x.at(&[a, l, f]), rec.x.at(&[a, l, f]));
                }
            }
        }
        prop_assert_eq!(augment_offset(&rec, [0.0, 0.0]), rec);
    }
}
