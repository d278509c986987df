use std::ffi::{CStr, CString};
use std::ptr;

use lmlab_ffi::*;

fn last_error() -> String {
    let p = lm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

const TINY: &str = "model=transformer\nvocab_size=7\np=8\nd_pos=2\nheads=2\ndepth=2\nwindow=6\n";

fn tiny() -> *mut LmModel {
    let cfg = CString::new(TINY).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { lm_model_new(cfg.as_ptr(), 3, &mut m) }, LmStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn model_round_trip_and_logits() {
    let m = tiny();
    unsafe {
        assert_eq!(lm_model_vocab_size(m), 7);
        assert!(lm_model_num_params(m) > 0);
        let mut logits = [0.0; 7];
        assert_eq!(lm_model_next_logits(m, [3usize, 4].as_ptr(), 2, logits.as_mut_ptr(), 7), LmStatus::Ok);
        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.lmck").to_str().unwrap()).unwrap();
        assert_eq!(lm_model_save(m, path.as_ptr()), LmStatus::Ok);
        let mut m2 = ptr::null_mut();
        assert_eq!(lm_model_load(path.as_ptr(), &mut m2), LmStatus::Ok);
        let mut again = [0.0; 7];
        assert_eq!(lm_model_next_logits(m2, [3usize, 4].as_ptr(), 2, again.as_mut_ptr(), 7), LmStatus::Ok);
        assert_eq!(logits, again);

        let mut probs = [0.0; 7];
        assert_eq!(lm_decode(logits.as_ptr(), 7, 1.0, probs.as_mut_ptr()), LmStatus::Ok);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let mut out = [0usize; 5];
        let mut n = 0;
        assert_eq!(lm_model_sample(m, [3usize].as_ptr(), 1, 1.0, 5, 9, out.as_mut_ptr(), &mut n), LmStatus::Ok);
        assert!(n >= 1 && n <= 5);
        let mut out2 = [0usize; 5];
        let mut n2 = 0;
        lm_model_sample(m2, [3usize].as_ptr(), 1, 1.0, 5, 9, out2.as_mut_ptr(), &mut n2);
        assert_eq!(out[..n], out2[..n2]);
        lm_model_free(m);
        lm_model_free(m2);
    }
}

#[test]
fn status_codes_follow_error_categories() {
    unsafe {
        let bad = CString::new("p=8\n").unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(lm_model_new(bad.as_ptr(), 0, &mut m), LmStatus::Config);
        assert!(last_error().contains("vocab_size"), "{}", last_error());
        assert!(m.is_null());

        let missing = CString::new("/nonexistent/x.lmck").unwrap();
        assert_eq!(lm_model_load(missing.as_ptr(), &mut m), LmStatus::Io);

        assert_eq!(lm_model_new(ptr::null(), 0, &mut m), LmStatus::InvalidArgument);

        let model = tiny();
        let mut small = [0.0; 3];
        assert_eq!(
            lm_model_next_logits(model, ptr::null(), 0, small.as_mut_ptr(), 3),
            LmStatus::BufferTooSmall
        );
        assert!(last_error().contains('7'));
        lm_model_free(model);

        let mut ng = ptr::null_mut();
        assert_eq!(lm_ngram_fit([3usize, 4].as_ptr(), 2, 2, 0.0, 6, &mut ng), LmStatus::Ok);
        let mut p = 0.0;
        // unseen context with k = 0: the conditional is 0/0
        assert_eq!(lm_ngram_prob(ng, [5usize].as_ptr(), 1, 3, &mut p), LmStatus::Numeric);
        assert_eq!(lm_ngram_prob(ng, [3usize].as_ptr(), 1, 4, &mut p), LmStatus::Ok);
        assert_eq!(p, 1.0);
        lm_ngram_free(ng);
    }
}

#[test]
fn grammar_parse_and_probability() {
    unsafe {
        let name = CString::new("fig3-pcfg").unwrap();
        let mut g = ptr::null_mut();
        assert_eq!(lm_grammar_new(name.as_ptr(), &mut g), LmStatus::Ok);
        let input = CString::new("y + 1 * x").unwrap();
        let mut tree = ptr::null_mut();
        assert_eq!(lm_grammar_parse(g, input.as_ptr(), &mut tree), LmStatus::Ok);
        assert_eq!(
            CStr::from_ptr(tree).to_str().unwrap(),
            "(EXPR (TERM (VALUE y)) + (EXPR (TERM (VALUE 1) * (TERM (VALUE x)))))"
        );
        lm_string_free(tree);
        let mut lp = 0.0;
        assert_eq!(lm_grammar_logprob(g, input.as_ptr(), &mut lp), LmStatus::Ok);
        assert!(lp < 0.0 && lp.is_finite());
        let bad = CString::new("y + +").unwrap();
        assert_eq!(lm_grammar_parse(g, bad.as_ptr(), &mut tree), LmStatus::Data);
        lm_grammar_free(g);
    }
}

#[test]
fn scaling_fit_recovers_exponents() {
    let (mut p, mut d, mut l) = (vec![], vec![], vec![]);
    for i in 0..7 {
        for j in 0..7 {
            let pp = 1e5 * 10f64.powf(i as f64);
            let dd = 1e6 * 10f64.powf(j as f64);
            p.push(pp);
            d.push(dd);
            l.push(lmlab::analysis::scaling_law(8.8e13, 5.4e13, 0.076, 0.095, pp, dd));
        }
    }
    let mut fit = LmScalingFit::default();
    assert_eq!(unsafe { lm_scaling_fit(p.as_ptr(), d.as_ptr(), l.as_ptr(), p.len(), &mut fit) }, LmStatus::Ok);
    assert!((fit.alpha_p - 0.076).abs() < 1e-6, "{fit:?}");
    assert!((fit.alpha_d - 0.095).abs() < 1e-6, "{fit:?}");
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(lm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
