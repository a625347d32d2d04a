use std::io::Cursor;

use nmpc_core::reference::{
    sample_count, synth_track, ReferenceError, ReferenceTrajectory, SynthParams, TrackKind,
};
use proptest::prelude::*;

const KINDS: [TrackKind; 4] = [
    TrackKind::Straight,
    TrackKind::Circle,
    TrackKind::Oval,
    TrackKind::Chicane,
];

fn csv_bytes(r: &ReferenceTrajectory) -> Vec<u8> {
    let mut out = Vec::new();
    r.write_csv(&mut out).unwrap();
    out
}

fn short(duration: f64) -> SynthParams {
    SynthParams {
        duration,
        ..Default::default()
    }
}

#[test]
fn csv_round_trip_is_byte_identical() {
    for kind in KINDS {
        let r = synth_track(kind, &short(60.0)).unwrap();
        let bytes = csv_bytes(&r);
        let back = ReferenceTrajectory::read_csv(Cursor::new(&bytes), 4.0).unwrap();
        assert_eq!(back, r);
        assert_eq!(csv_bytes(&back), bytes);
    }
}

#[test]
fn gzip_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let r = synth_track(TrackKind::Oval, &SynthParams::default()).unwrap();
    let plain = dir.path().join("oval.csv");
    let packed = dir.path().join("oval.csv.gz");
    r.save_csv(&plain).unwrap();
    r.save_csv(&packed).unwrap();
    let raw = std::fs::read(&packed).unwrap();
    assert_eq!(&raw[..2], &[0x1f, 0x8b]);
    assert_eq!(ReferenceTrajectory::load_csv(&packed).unwrap(), r);
    assert_eq!(ReferenceTrajectory::load_csv(&plain).unwrap(), r);
}

#[test]
fn columns_may_come_in_any_order() {
    let text = "t,k,y,x,psi,v,delta,u2,u1\n0,0,1,2,0,5,0,0,0\n0.3,1,1,3.5,0,5,0,0,0\n";
    let r = ReferenceTrajectory::read_csv(text.as_bytes(), 4.0).unwrap();
    assert_eq!((r.states[1].x_pos, r.states[1].y_pos), (3.5, 1.0));
    assert!((r.h - 0.3).abs() < 1e-15);
    assert!(r.consistency < 1e-12);
}

#[test]
fn malformed_files_rejected() {
    let head = "k,t,x,y,psi,v,delta,u1,u2\n";
    let row = |k: usize, t: f64| format!("{k},{t},0,0,0,0,0,0,0\n");
    let bad_grid = format!("{head}{}{}{}", row(0, 0.0), row(1, 0.3), row(2, 0.7));
    assert!(matches!(
        ReferenceTrajectory::read_csv(bad_grid.as_bytes(), 4.0),
        Err(ReferenceError::NonUniformGrid { line: 4 })
    ));
    let backwards = format!("{head}{}{}", row(0, 0.3), row(1, 0.0));
    assert!(matches!(
        ReferenceTrajectory::read_csv(backwards.as_bytes(), 4.0),
        Err(ReferenceError::NonUniformGrid { .. })
    ));
    let one = format!("{head}{}", row(0, 0.0));
    assert!(matches!(
        ReferenceTrajectory::read_csv(one.as_bytes(), 4.0),
        Err(ReferenceError::TooShort)
    ));
    let missing = "k,t,x,y,psi,v,delta,u1\n0,0,0,0,0,0,0,0\n";
    assert!(matches!(
        ReferenceTrajectory::read_csv(missing.as_bytes(), 4.0),
        Err(ReferenceError::MissingColumn(c)) if c == "u2"
    ));
    let garbage = format!("{head}{}1,0.3,zero,0,0,0,0,0,0\n", row(0, 0.0));
    assert!(matches!(
        ReferenceTrajectory::read_csv(garbage.as_bytes(), 4.0),
        Err(ReferenceError::Parse { line: 3, .. })
    ));
    assert!(matches!(
        ReferenceTrajectory::load_csv("/nonexistent/track.csv"),
        Err(ReferenceError::Io(_))
    ));
}

#[test]
fn circle_uses_steady_steering_and_stays_on_radius() {
    let r = synth_track(TrackKind::Circle, &short(30.0)).unwrap();
    // tan(delta) = l / R = 4 / 40.
    let delta = 0.1f64.atan();
    assert!((delta - 0.09966865249116204).abs() < 1e-16);
    for (s, c) in r.states.iter().zip(&r.controls) {
        assert_eq!(s.delta, delta);
        assert_eq!((c.u1, c.u2), (0.0, 0.0));
        let radius = (s.x_pos.powi(2) + (s.y_pos - 40.0).powi(2)).sqrt();
        assert!((radius - 40.0).abs() < 1e-4, "radius {radius}");
    }
}

#[test]
fn synthetic_tracks_are_dynamically_consistent_and_admissible() {
    for kind in KINDS {
        let r = synth_track(kind, &SynthParams::default()).unwrap();
        assert_eq!(r.len(), 368);
        assert!(r.consistency < 1e-12, "{kind:?}: {}", r.consistency);
        for (s, c) in r.states.iter().zip(&r.controls) {
            assert!(s.delta.abs() <= 0.5 && c.u2.abs() <= 0.5);
            assert_eq!((s.v, c.u1), (10.0, 0.0));
        }
    }
}

#[test]
fn oval_alternates_straights_and_turns() {
    let p = SynthParams::default();
    let r = synth_track(TrackKind::Oval, &p).unwrap();
    // Straight for the first 100 m, i.e. 10 s.
    let straight_end = (100.0 / (p.speed * p.h)) as usize;
    assert!(r.states[..straight_end].iter().all(|s| s.delta == 0.0));
    let turning = r.states.iter().filter(|s| s.delta > 0.09).count();
    assert!(turning > 100);
}

#[test]
fn infeasible_or_invalid_parameters_rejected() {
    let tight = SynthParams {
        radius: 5.0,
        ..Default::default()
    };
    assert!(matches!(
        synth_track(TrackKind::Circle, &tight),
        Err(ReferenceError::InfeasibleGeometry { .. })
    ));
    // A straight line needs no turning radius.
    assert!(synth_track(TrackKind::Straight, &tight).is_ok());
    for bad in [
        SynthParams {
            h: 0.0,
            ..Default::default()
        },
        SynthParams {
            duration: -1.0,
            ..Default::default()
        },
        SynthParams {
            speed: f64::NAN,
            ..Default::default()
        },
        SynthParams {
            bend_length: 0.0,
            ..Default::default()
        },
    ] {
        assert!(synth_track(TrackKind::Chicane, &bad).is_err(), "{bad:?}");
    }
}

proptest! {
    #[test]
    fn grid_covers_the_duration(duration in 0.1..200.0f64, h in 0.01..1.0f64) {
        let n = sample_count(duration, h);
        prop_assert!((n - 1) as f64 * h >= duration - 1e-9 * h);
        prop_assert!((n as f64 - 2.0) * h < duration);
    }

    #[test]
    fn windows_have_horizon_shape(k0 in 0usize..500, n in 1usize..20) {
        let r = synth_track(TrackKind::Chicane, &short(20.0)).unwrap();
        let w = r.window(k0, n);
        prop_assert_eq!(w.states.len(), n + 1);
        prop_assert_eq!(w.controls.len(), n);
        // Past the end the last sample is held.
        let last = r.states.last().unwrap().to_vector();
        if k0 >= r.len() {
            prop_assert!(w.states.iter().all(|s| *s == last));
        }
    }
}
