use proptest::prelude::*;
use sfr_core::geometry::{frustum_windows, prp_for_local_tile, window_for_scale, FrustumConfig, ProjectionReferencePoint};

const TOL: f64 = 1e-6;

fn distances() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..20.0, 1..5).prop_map(|steps| {
        let mut acc = 0.0;
        steps
            .into_iter()
            .map(|s| {
                acc += s;
                acc
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn windows_nest_contain_the_prp_and_stay_inside(
        w in 1usize..8000,
        h in 1usize..8000,
        fx in 0.0f64..=1.0,
        fy in 0.0f64..=1.0,
        d in distances(),
    ) {
        let cfg = FrustumConfig::new(d.clone(), (8, 8)).unwrap();
        let prp = ProjectionReferencePoint::new(fx * w as f64, fy * h as f64);
        let wins = frustum_windows(prp, &cfg, (w, h)).unwrap();
        prop_assert_eq!(wins.len(), d.len());
        for (i, win) in wins.iter().enumerate() {
            let t = d[i] / d[d.len() - 1];
            let r = win.rect;
            prop_assert!((r.width() - t * w as f64).abs() <= TOL);
            prop_assert!((r.height() - t * h as f64).abs() <= TOL);
            prop_assert!(r.x_min >= 0.0 && r.y_min >= 0.0);
            prop_assert!(r.x_max <= w as f64 && r.y_max <= h as f64);
            prop_assert!(r.contains_point(prp.w, prp.h));
            if let Some(next) = wins.get(i + 1) {
                let o = next.rect;
                let nested = o.x_min <= r.x_min + TOL
                    && o.y_min <= r.y_min + TOL
                    && r.x_max <= o.x_max + TOL
                    && r.y_max <= o.y_max + TOL;
                prop_assert!(nested, "window {} not inside window {}", i, i + 1);
            }
        }
        let last = wins.last().unwrap().rect;
        prop_assert_eq!((last.x_min, last.y_min, last.x_max, last.y_max), (0.0, 0.0, w as f64, h as f64));
    }

    #[test]
    fn local_tile_inverse_round_trips(
        w in 2usize..8000,
        h in 2usize..8000,
        t0 in 0.01f64..0.99,
        fx in 0.0f64..=1.0,
        fy in 0.0f64..=1.0,
    ) {
        let x0 = fx * w as f64 * (1.0 - t0);
        let y0 = fy * h as f64 * (1.0 - t0);
        let prp = prp_for_local_tile(x0, y0, t0, (w, h)).unwrap();
        let win = window_for_scale(prp, t0, (w, h)).unwrap();
        prop_assert!((win.rect.x_min - x0).abs() <= TOL);
        prop_assert!((win.rect.y_min - y0).abs() <= TOL);
        win.validate((w, h)).unwrap();
    }

    #[test]
    fn infeasible_tile_origins_are_rejected(w in 2usize..4000, t0 in 0.01f64..0.99, over in 0.01f64..100.0) {
        let x0 = w as f64 * (1.0 - t0) + over;
        prop_assert!(prp_for_local_tile(x0, 0.0, t0, (w, w)).is_err());
    }
}
