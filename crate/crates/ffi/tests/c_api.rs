use std::ffi::{c_char, CString};
use std::path::Path;
use std::ptr;

use oht_es_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { oht_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn env_round_trip() {
    let name = CString::new("pendulum").unwrap();
    let mut env = ptr::null_mut();
    unsafe {
        assert_eq!(oht_env_new(name.as_ptr(), 1, &mut env), OhtStatus::Ok);
        let (mut od, mut ad) = (0usize, 0usize);
        assert_eq!(oht_env_dims(env, &mut od, &mut ad), OhtStatus::Ok);
        assert_eq!((od, ad), (3, 1));
        let mut obs = [0.0; 3];
        assert_eq!(oht_env_reset(env, 7, obs.as_mut_ptr(), 3), OhtStatus::Ok);
        let (mut r, mut done, mut term) = (0.0, false, false);
        let mut total = 0.0;
        let mut steps = 0;
        while !done {
            let a = [0.5];
            assert_eq!(oht_env_step(env, a.as_ptr(), 1, obs.as_mut_ptr(), 3, &mut r, &mut done, &mut term), OhtStatus::Ok);
            assert!(r <= 0.0);
            total += r;
            steps += 1;
        }
        assert_eq!(steps, 200);
        assert!(!term && total < 0.0);
        let a = [0.0];
        assert_eq!(oht_env_step(env, a.as_ptr(), 1, obs.as_mut_ptr(), 3, &mut r, &mut done, &mut term), OhtStatus::Logic);
        assert!(!last_error().is_empty());
        assert_eq!(oht_env_reset(env, 7, obs.as_mut_ptr(), 2), OhtStatus::InvalidArgument);
        oht_env_free(env);
    }
}

#[test]
fn errors_are_reported() {
    let bad = CString::new("cartpole").unwrap();
    let mut env = ptr::null_mut();
    unsafe {
        assert_eq!(oht_env_new(bad.as_ptr(), 1, &mut env), OhtStatus::InvalidArgument);
        assert!(last_error().contains("cartpole"));
        assert!(env.is_null());
        assert_eq!(oht_env_new(ptr::null(), 1, &mut env), OhtStatus::NullPointer);
        assert_eq!(oht_env_dims(ptr::null(), ptr::null_mut(), ptr::null_mut()), OhtStatus::NullPointer);
        let mut z = 0.0;
        assert_eq!(oht_normalized_score(1.0, 2.0, 2.0, &mut z), OhtStatus::InvalidArgument);
        assert_eq!(oht_normalized_score(2972.5, -55.0, 6000.0, &mut z), OhtStatus::Ok);
        assert!((z - 0.5).abs() < 1e-15);
        assert!(last_error().is_empty());
        oht_env_free(ptr::null_mut());
    }
}

#[test]
fn gaussian_tuner_raw_update() {
    let mu = [0.0];
    let sigma = [1.0];
    let mut t = ptr::null_mut();
    unsafe {
        assert_eq!(oht_gaussian_tuner_new(mu.as_ptr(), sigma.as_ptr(), 1, 1.0, 2, OhtGaussianMode::EsGradient, 0, &mut t), OhtStatus::Ok);
        assert_eq!(oht_gaussian_tuner_set_standardize(t, false), OhtStatus::Ok);
        let mut etas = [0.0; 2];
        assert_eq!(oht_gaussian_tuner_sample(t, etas.as_mut_ptr(), 2), OhtStatus::Ok);
        let fixed = [1.0, -1.0];
        assert_eq!(oht_gaussian_tuner_update(t, fixed.as_ptr(), fixed.as_ptr(), 2), OhtStatus::Ok);
        let (mut m, mut s) = ([0.0], [0.0]);
        assert_eq!(oht_gaussian_tuner_state(t, m.as_mut_ptr(), s.as_mut_ptr(), 1), OhtStatus::Ok);
        assert_eq!((m[0], s[0]), (1.0, 1.0));
        let nan = [f64::NAN, 0.0];
        assert_eq!(oht_gaussian_tuner_update(t, fixed.as_ptr(), nan.as_ptr(), 2), OhtStatus::Numeric);
        oht_gaussian_tuner_free(t);
    }
}

#[test]
fn categorical_tuner_learns_bandit() {
    let support = [1usize, 2, 3];
    let mut t = ptr::null_mut();
    unsafe {
        assert_eq!(oht_categorical_tuner_new(support.as_ptr(), 3, 0.1, 6, 0.05, 3, &mut t), OhtStatus::Ok);
        for _ in 0..200 {
            let mut idx = [0usize; 6];
            let mut fit = [0.0; 6];
            for j in 0..6 {
                assert_eq!(oht_categorical_tuner_sample(t, &mut idx[j]), OhtStatus::Ok);
                fit[j] = if idx[j] == 2 { 1.0 } else { 0.0 };
            }
            assert_eq!(oht_categorical_tuner_update(t, idx.as_ptr(), fit.as_ptr(), 6), OhtStatus::Ok);
        }
        let mut p = [0.0; 3];
        assert_eq!(oht_categorical_tuner_probabilities(t, p.as_mut_ptr(), 3), OhtStatus::Ok);
        assert!(p[2] > 0.8, "{p:?}");
        let idx = [0usize; 5];
        assert_eq!(oht_categorical_tuner_update(t, idx.as_ptr(), p.as_ptr(), 5), OhtStatus::InvalidArgument);
        oht_categorical_tuner_free(t);
    }
}

#[test]
fn policy_from_checkpoint() {
    use oht_es::envs::make_env;
    use oht_es::td3::Agent;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.bin");
    let env = make_env("pendulum", 1).unwrap();
    let agent = Agent::new(env.spec(), &[8, 8], 1).unwrap();
    let mut f = std::fs::File::create(&path).unwrap();
    agent.actor.write_snapshot(&mut f).unwrap();
    drop(f);
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let c_env = CString::new("pendulum").unwrap();
    let mut p = ptr::null_mut();
    unsafe {
        assert_eq!(oht_policy_load(c_path.as_ptr(), c_env.as_ptr(), &mut p), OhtStatus::Ok);
        let obs = [0.1, -0.2, 0.3];
        let mut act = [0.0];
        assert_eq!(oht_policy_act(p, obs.as_ptr(), 3, act.as_mut_ptr(), 1), OhtStatus::Ok);
        let expect = agent.actor.forward(&[0.1f32, -0.2, 0.3]).unwrap()[0] as f64;
        assert_eq!(act[0], expect);
        assert!(act[0].abs() <= 2.0);
        oht_policy_free(p);
        let missing = CString::new(dir.path().join("nope.bin").to_str().unwrap()).unwrap();
        assert_eq!(oht_policy_load(missing.as_ptr(), c_env.as_ptr(), &mut p), OhtStatus::Io);
    }
}

#[test]
fn prop1_through_c() {
    let (mut e, mut a, mut err) = (0.0, 0.0, 0.0);
    unsafe {
        assert_eq!(oht_prop1_check(1e-3, 200_000, 0, true, &mut e, &mut a, &mut err), OhtStatus::Ok);
        assert_eq!(oht_prop1_check(0.0, 10, 0, true, &mut e, &mut a, &mut err), OhtStatus::InvalidArgument);
    }
    assert_eq!(a, -2.0);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/oht_es.h")).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.trim().strip_prefix("pub unsafe extern \"C\" fn "))
        .map(|l| l.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for f in exports {
        assert!(header.contains(&format!("{f}(")), "header lacks {f}");
    }
}

#[test]
fn header_compiles_as_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(&src, "#include \"oht_es.h\"\nint main(void) { OhtStatus s = OHT_STATUS_OK; return (int)s; }\n").unwrap();
    let Ok(out) = std::process::Command::new("cc").arg("-fsyntax-only").arg("-I").arg(&include).arg(&src).output() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
