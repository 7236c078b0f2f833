use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use medrecall_ffi::*;

const TINY: &str = r#"
[data]
synth_dialogues = 10
max_eval_samples = 3

[model]
d_model = 16
d_ff = 32
n_enc_layers = 1
n_dec_layers = 1
n_heads = 2
d_vertex = 16
d_speaker = 4
max_history_len = 48
max_knowledge_len = 12
max_recall_len = 12
max_response_len = 12

[retriever]
d_model = 16
max_steps = 4

[training]
max_steps = 4
warmup_steps = 2

[decode]
beam = 2
top_k = 4
max_recall_len = 12
max_response_len = 12
"#;

fn last_error() -> String {
    let p = mr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take(s: *mut c_char) -> String {
    assert!(!s.is_null());
    let out = CStr::from_ptr(s).to_string_lossy().into_owned();
    mr_string_free(s);
    out
}

fn config_in(dir: &Path) -> *mut MrConfig {
    let paths = format!(
        "[paths]\ncorpus = {:?}\nkg = {:?}\ncache = {:?}\ncheckpoints = {:?}\noutputs = {:?}\n",
        dir.join("corpus.jsonl"),
        dir.join("kg.jsonl"),
        dir.join("cache"),
        dir.join("ckpt"),
        dir.join("out"),
    );
    let text = CString::new(format!("{paths}{TINY}")).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { mr_config_from_toml(text.as_ptr(), &mut cfg) }, MrStatus::Ok);
    cfg
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(mr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(mr_config_from_toml(ptr::null(), &mut cfg), MrStatus::NullArgument);
        assert!(cfg.is_null());
        assert_eq!(last_error(), "toml is null");
        assert_eq!(mr_config_set_seed(ptr::null_mut(), 1), MrStatus::NullArgument);
        assert_eq!(mr_run_command(ptr::null(), c"synth".as_ptr(), ptr::null_mut()), MrStatus::NullArgument);
        let mut x = 0.0;
        assert_eq!(mr_distinct2(ptr::null(), 2, &mut x), MrStatus::NullArgument);
        assert_eq!(last_error(), "candidates is null");
        mr_config_free(ptr::null_mut());
        mr_responder_free(ptr::null_mut());
        mr_string_free(ptr::null_mut());
    }
}

#[test]
fn config_errors_map_to_config_status() {
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(mr_config_from_toml(c"seed = 1\n[model]\nwidth = 3\n".as_ptr(), &mut cfg), MrStatus::Config);
        assert!(last_error().contains("width"), "{}", last_error());
        assert_eq!(mr_config_load(c"/nonexistent/cfg.toml".as_ptr(), &mut cfg), MrStatus::Config);

        assert_eq!(mr_config_from_toml(c"".as_ptr(), &mut cfg), MrStatus::Ok);
        let mut summary = ptr::null_mut();
        assert_eq!(mr_run_command(cfg, c"synth".as_ptr(), &mut summary), MrStatus::Config);
        assert!(summary.is_null());
        assert!(last_error().contains("seed"));
        assert_eq!(mr_config_set_seed(cfg, 11), MrStatus::Ok);
        assert_eq!(mr_run_command(cfg, c"frobnicate".as_ptr(), &mut summary), MrStatus::InvalidArgument);
        let mut toml = ptr::null_mut();
        assert_eq!(mr_config_to_toml(cfg, &mut toml), MrStatus::Ok);
        assert!(take(toml).starts_with("seed = 11"));
        mr_config_free(cfg);
    }
}

#[test]
fn invalid_utf8_is_rejected() {
    let bad = [0x66u8, 0xff, 0x00];
    let mut cfg = ptr::null_mut();
    let status = unsafe { mr_config_from_toml(bad.as_ptr().cast(), &mut cfg) };
    assert_eq!(status, MrStatus::InvalidUtf8);
}

#[test]
fn metrics_match_the_library() {
    let cands = ["the pain is in my chest", "take some rest"];
    let refs = ["the pain is in your chest", "you should rest"];
    let cs: Vec<CString> = cands.iter().map(|s| CString::new(*s).unwrap()).collect();
    let rs: Vec<CString> = refs.iter().map(|s| CString::new(*s).unwrap()).collect();
    let cp: Vec<*const c_char> = cs.iter().map(|s| s.as_ptr()).collect();
    let rp: Vec<*const c_char> = rs.iter().map(|s| s.as_ptr()).collect();
    let owned = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let mut x = f64::NAN;
    unsafe {
        for order in 1..=4 {
            assert_eq!(mr_bleu(cp.as_ptr(), rp.as_ptr(), 2, order, &mut x), MrStatus::Ok);
            assert_eq!(x, medrecall::metrics::bleu(&owned(&cands), &owned(&refs), order as usize));
        }
        assert_eq!(mr_bleu(cp.as_ptr(), rp.as_ptr(), 2, 5, &mut x), MrStatus::InvalidArgument);
        assert_eq!(mr_distinct2(cp.as_ptr(), 2, &mut x), MrStatus::Ok);
        assert_eq!(x, medrecall::metrics::distinct2(&owned(&cands)));
        assert_eq!(mr_distinct2(ptr::null(), 0, &mut x), MrStatus::Ok);
        assert_eq!(x, 0.0);
    }
}

#[test]
fn pipeline_and_responder_through_the_c_interface() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path());
    unsafe {
        let mut responder = ptr::null_mut();
        assert_eq!(mr_config_set_seed(cfg, 3), MrStatus::Ok);
        assert_eq!(mr_responder_load(cfg, &mut responder), MrStatus::MissingPrerequisite);
        assert!(responder.is_null());

        for cmd in [c"synth", c"build-recall", c"train-retriever", c"train"] {
            let mut summary = ptr::null_mut();
            let status = mr_run_command(cfg, cmd.as_ptr(), &mut summary);
            assert_eq!(status, MrStatus::Ok, "{cmd:?}: {}", last_error());
            assert!(take(summary).starts_with(cmd.to_str().unwrap()));
        }

        assert_eq!(mr_responder_load(cfg, &mut responder), MrStatus::Ok, "{}", last_error());
        let turns = [c"patient: i have a headache and a fever".as_ptr(), c"doctor: since when?".as_ptr(), c"patient: two days".as_ptr()];
        let (mut response, mut recall) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(mr_responder_respond(responder, turns.as_ptr(), 3, 0, &mut response, &mut recall), MrStatus::Ok, "{}", last_error());
        let first = (take(response), take(recall));
        assert_eq!(mr_responder_respond(responder, turns.as_ptr(), 3, 0, &mut response, ptr::null_mut()), MrStatus::Ok);
        assert_eq!(take(response), first.0, "same nonce, same reply");

        let bad = [c"nurse: hello".as_ptr()];
        assert_eq!(mr_responder_respond(responder, bad.as_ptr(), 1, 0, &mut response, &mut recall), MrStatus::InvalidArgument);
        assert!(response.is_null() && recall.is_null());
        assert_eq!(mr_responder_respond(responder, turns.as_ptr(), 0, 0, &mut response, ptr::null_mut()), MrStatus::InvalidArgument);
        mr_responder_free(responder);
        mr_config_free(cfg);
    }
}

#[test]
fn header_declares_the_interface_and_compiles_as_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(include.join("medrecall.h")).unwrap();
    for name in [
        "mr_version",
        "mr_last_error",
        "mr_string_free",
        "mr_config_from_toml",
        "mr_config_load",
        "mr_config_set_seed",
        "mr_config_to_toml",
        "mr_config_free",
        "mr_run_command",
        "mr_responder_load",
        "mr_responder_respond",
        "mr_responder_free",
        "mr_bleu",
        "mr_distinct2",
        "MR_STATUS_PANIC",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }

    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"medrecall.h\"\n\
         int main(void) {\n\
           MrConfig *cfg = NULL;\n\
           MrStatus s = mr_config_from_toml(\"seed = 1\", &cfg);\n\
           if (s != MR_STATUS_OK) { return (int)s; }\n\
           mr_config_free(cfg);\n\
           return mr_last_error() == NULL ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let out = Command::new(cc).args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"]).arg(&include).arg(&src).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
