mod common;

use common::*;
use macrl::model::Macrl;
use macrl::momentum::{ema_update, init_momentum_copy, is_tracked, DEFAULT_MOMENTUM};
use macrl::params::ParamStore;
use macrl::rng;
use macrl::tensor::Tensor;

fn online(seed: u64) -> ParamStore<f64> {
    let m = Macrl::<f64>::new(tiny_model(8, 4, 1, 16, 2)).unwrap();
    let r = &mut rng::stream(seed, &[]);
    let mut p = m.init_params(r);
    jitter(&mut p, 0.1, r);
    p
}

#[test]
fn copy_is_independent_of_online() {
    let mut p = online(1);
    let target = init_momentum_copy(&p);
    let before = target.clone();
    for (_, t) in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 1.0);
    }
    assert_eq!(target, before);
}

#[test]
fn copy_covers_encoder_and_projector() {
    let p = online(2);
    let target = init_momentum_copy(&p);
    let expect: Vec<_> = p.names().filter(|n| is_tracked(n)).collect();
    assert_eq!(target.names().collect::<Vec<_>>(), expect);
    assert!(expect.iter().any(|n| n.starts_with("encoder.")));
    assert!(expect.iter().any(|n| n.starts_with("projector.")));
    for (name, t) in target.iter() {
        assert_eq!(t, p.get(name).unwrap());
    }
}

#[test]
fn fresh_copy_is_a_fixed_point() {
    let p = online(3);
    for m in [0.0, 0.5, DEFAULT_MOMENTUM] {
        let mut target = init_momentum_copy(&p);
        ema_update(&mut target, &p, m).unwrap();
        for (name, t) in target.iter() {
            assert_eq!(t, p.get(name).unwrap());
        }
    }
}

#[test]
fn geometric_decay() {
    let p = online(4);
    let mut target = init_momentum_copy(&online(5));
    let start = target.clone();
    for _ in 0..10 {
        ema_update(&mut target, &p, 0.99).unwrap();
    }
    let f = 0.99f64.powi(10);
    for (name, t) in target.iter() {
        let (o, s) = (p.get(name).unwrap(), start.get(name).unwrap());
        for ((tv, ov), sv) in t.data().iter().zip(o.data()).zip(s.data()) {
            assert!(((tv - ov) - f * (sv - ov)).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_momentum_copies() {
    let p = online(6);
    let mut target = init_momentum_copy(&online(7));
    ema_update(&mut target, &p, 0.0).unwrap();
    for (name, t) in target.iter() {
        assert_eq!(t, p.get(name).unwrap());
    }
}

#[test]
fn scalar_case() {
    let mut target = ParamStore::new();
    target.insert("encoder.w", Tensor::<f64>::full(&[1], 1.0));
    let mut o = ParamStore::new();
    o.insert("encoder.w", Tensor::<f64>::full(&[1], 0.0));
    ema_update(&mut target, &o, 0.99).unwrap();
    assert!((target.get("encoder.w").unwrap().data()[0] - 0.99).abs() < 1e-15);
}

#[test]
fn affine_consistency() {
    let scale = |s: &ParamStore<f64>, a: f64| {
        let mut s = s.clone();
        s.iter_mut()
            .for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v *= a));
        s
    };
    let p = online(8);
    let t0 = init_momentum_copy(&online(9));
    let a = -2.5;
    let mut plain = t0.clone();
    ema_update(&mut plain, &p, 0.9).unwrap();
    let mut scaled = scale(&t0, a);
    ema_update(&mut scaled, &scale(&p, a), 0.9).unwrap();
    let expect = scale(&plain, a);
    for (name, t) in scaled.iter() {
        for (x, y) in t.data().iter().zip(expect.get(name).unwrap().data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn rejects_bad_momentum_and_drift() {
    let p = online(10);
    let mut target = init_momentum_copy(&p);
    assert!(ema_update(&mut target, &p, 1.0).is_err());
    assert!(ema_update(&mut target, &p, -0.1).is_err());
    let mut drifted = p.clone();
    drifted.insert("encoder.cls", Tensor::zeros(&[3]));
    let name = target.names().next().unwrap().to_string();
    drifted.insert(&name, Tensor::zeros(&[1, 1, 1]));
    assert!(ema_update(&mut target, &drifted, 0.5).is_err());
    let mut missing = p.clone();
    missing.retain(|n| n != name);
    assert!(ema_update(&mut target, &missing, 0.5).is_err());
}
