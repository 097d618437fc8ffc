use std::ffi::{CStr, CString};
use std::ptr;

use fcre_ffi::*;

const CONFIG: &str = r#"{
  "data": {"kind": "synthetic", "vocab_size": 40, "num_relations": 9, "tasks": 3, "n_way": 3, "k_shot": 2,
           "test_per_relation": 3, "noise": 0.1, "seed": 5, "corpus_per_relation": 3},
  "model": {"embed": 6, "hidden": 6, "feature": 6, "phi": 6},
  "pretrain": {"epochs": 1, "lr": 0.01, "seed": 2},
  "methods": [{"family": "CPL", "mi_enabled": true, "epochs": 1, "replay_epochs": 1},
              {"family": "SCKD", "epochs": 1, "replay_epochs": 1}],
  "seeds": [0],
  "output_dir": "unused"
}"#;

fn last_error() -> String {
    let p = fcre_last_error();
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string();
    unsafe { fcre_string_free(p) };
    s
}

fn experiment() -> *mut FcreExperiment {
    let cfg = CString::new(CONFIG).unwrap();
    let mut exp = ptr::null_mut();
    assert_eq!(unsafe { fcre_experiment_new(cfg.as_ptr(), &mut exp) }, FcreStatus::Ok);
    assert!(!exp.is_null());
    exp
}

#[test]
fn learner_matches_full_run() {
    let exp = experiment();
    unsafe {
        let mut n = 0;
        assert_eq!(fcre_experiment_task_count(exp, &mut n), FcreStatus::Ok);
        assert_eq!(n, 3);
        assert_eq!(fcre_experiment_method_count(exp, &mut n), FcreStatus::Ok);
        assert_eq!(n, 2);

        let mut learner = ptr::null_mut();
        assert_eq!(fcre_learner_new(exp, 0, 4, &mut learner), FcreStatus::Protocol);
        assert!(last_error().contains("pretrain"));
        assert_eq!(fcre_experiment_pretrain(exp), FcreStatus::Ok);
        assert_eq!(fcre_learner_new(exp, 0, 4, &mut learner), FcreStatus::Ok);

        let mut rows = Vec::new();
        let mut buf = [0.0f64; 3];
        for t in 1..=3 {
            assert_eq!(fcre_learner_train_next(learner), FcreStatus::Ok);
            let mut len = 0;
            assert_eq!(fcre_learner_evaluate(learner, buf.as_mut_ptr(), buf.len(), &mut len), FcreStatus::Ok);
            assert_eq!(len, t);
            rows.push(buf[..t].to_vec());
        }
        assert_eq!(fcre_learner_train_next(learner), FcreStatus::Protocol);
        let mut len = 0;
        assert_eq!(fcre_learner_evaluate(learner, buf.as_mut_ptr(), 1, &mut len), FcreStatus::BufferTooSmall);
        assert_eq!(len, 3);
        fcre_learner_free(learner);

        let mut json = ptr::null_mut();
        assert_eq!(fcre_run(exp, 0, 4, &mut json), FcreStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        fcre_string_free(json);
        let acc: Vec<Vec<f64>> = serde_json::from_value(v["accuracy"].clone()).unwrap();
        assert_eq!(acc, rows);
        assert_eq!(v["method"], "CPL+MI");

        assert_eq!(fcre_run(exp, 7, 0, &mut json), FcreStatus::Index);
        assert!(json.is_null());
        fcre_experiment_free(exp);
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("ck.json").to_str().unwrap()).unwrap();
    let a = experiment();
    let b = experiment();
    unsafe {
        assert_eq!(fcre_experiment_save_checkpoint(a, path.as_ptr()), FcreStatus::Protocol);
        assert_eq!(fcre_experiment_pretrain(a), FcreStatus::Ok);
        assert_eq!(fcre_experiment_save_checkpoint(a, path.as_ptr()), FcreStatus::Ok);
        assert_eq!(fcre_experiment_load_checkpoint(b, path.as_ptr()), FcreStatus::Ok);
        let (mut ja, mut jb) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(fcre_run(a, 1, 9, &mut ja), FcreStatus::Ok);
        assert_eq!(fcre_run(b, 1, 9, &mut jb), FcreStatus::Ok);
        assert_eq!(CStr::from_ptr(ja), CStr::from_ptr(jb));
        fcre_string_free(ja);
        fcre_string_free(jb);
        let missing = CString::new("/nonexistent/ck.json").unwrap();
        assert_ne!(fcre_experiment_load_checkpoint(b, missing.as_ptr()), FcreStatus::Ok);
        fcre_experiment_free(a);
        fcre_experiment_free(b);
    }
}

#[test]
fn error_codes() {
    unsafe {
        let mut exp = ptr::null_mut();
        assert_eq!(fcre_experiment_new(ptr::null(), &mut exp), FcreStatus::NullArgument);
        let bad = CString::new("{not json").unwrap();
        assert_eq!(fcre_experiment_new(bad.as_ptr(), &mut exp), FcreStatus::Parse);
        assert!(exp.is_null());
        let bad_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(fcre_experiment_new(bad_utf8.as_ptr().cast(), &mut exp), FcreStatus::InvalidUtf8);
        let infeasible = CString::new(CONFIG.replace("\"num_relations\": 9", "\"num_relations\": 4")).unwrap();
        assert_eq!(fcre_experiment_new(infeasible.as_ptr(), &mut exp), FcreStatus::Config);
        assert!(!last_error().is_empty());
        assert_eq!(fcre_experiment_task_count(ptr::null(), &mut 0), FcreStatus::NullArgument);

        // A successful call clears the previous message.
        let mut v = 0.0;
        let g = [1.0, 0.0];
        assert_eq!(fcre_info_nce(g.as_ptr(), g.as_ptr(), [1.0].as_ptr(), 2, 1, 1, 1.0, &mut v), FcreStatus::Ok);
        assert!(fcre_last_error().is_null());
        assert_eq!(fcre_info_nce(g.as_ptr(), g.as_ptr(), g.as_ptr(), 2, 1, 1, 0.0, &mut v), FcreStatus::Config);
        fcre_string_free(ptr::null_mut());
        fcre_experiment_free(ptr::null_mut());
        fcre_learner_free(ptr::null_mut());
    }
}

#[test]
fn info_nce_identical_scores_give_minus_log_batch() {
    // All-zero critic: every score ties, so the bound is -ln B.
    for b in [2usize, 4, 8] {
        let g: Vec<f64> = (0..b * 3).map(|i| (i as f64).sin()).collect();
        let l: Vec<f64> = (0..b * 2).map(|i| (i as f64).cos()).collect();
        let w = [0.0; 6];
        let mut v = 0.0;
        let s = unsafe { fcre_info_nce(g.as_ptr(), l.as_ptr(), w.as_ptr(), b, 3, 2, 0.5, &mut v) };
        assert_eq!(s, FcreStatus::Ok);
        assert!((v + (b as f64).ln()).abs() < 1e-12);
    }
    assert_eq!(fcre_accuracy_drop(0.9475, 0.6298), 0.9475 - 0.6298);
    assert!(!unsafe { CStr::from_ptr(fcre_version()) }.to_str().unwrap().is_empty());
}
