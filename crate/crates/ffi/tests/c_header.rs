//! Compiles and runs a C program against the generated header and the
//! static library.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "fcre.h"

int main(void) {
    FcreExperiment *exp = NULL;
    if (fcre_experiment_new("{", &exp) != FCRE_STATUS_PARSE || exp != NULL) return 10;
    char *msg = fcre_last_error();
    if (msg == NULL || strlen(msg) == 0) return 11;
    fcre_string_free(msg);

    double g[4] = {1, 0, 0, 1};
    double w[4] = {0, 0, 0, 0};
    double v = 0;
    if (fcre_info_nce(g, g, w, 2, 2, 2, 1.0, &v) != FCRE_STATUS_OK) return 12;
    if (v > -0.6931 || v < -0.6932) return 13;
    if (fcre_info_nce(NULL, g, w, 2, 2, 2, 1.0, &v) != FCRE_STATUS_NULL_ARGUMENT) return 14;
    printf("ok %s\n", fcre_version());
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test-binary>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libfcre_ffi.a");
    assert!(lib.is_file(), "static library missing at {}", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let bin = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(manifest.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("C compiler");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok 0.1.0"));
}
