//! Compiles a small C program against the generated header and the cdylib,
//! then runs it. Skipped when no C compiler is on PATH.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "h2g.h"

int main(void) {
    uint64_t hist[256];
    memset(hist, 0, sizeof hist);
    hist[50] = 40;
    hist[200] = 60;
    uint8_t t = 0;
    if (h2g_otsu_threshold(hist, &t) != H2G_STATUS_OK || t != 50) return 1;

    memset(hist, 0, sizeof hist);
    if (h2g_otsu_threshold(hist, &t) != H2G_STATUS_INVALID_INPUT) return 2;
    if (strlen(h2g_last_error_message()) == 0) return 3;

    H2gPyramid *p = NULL;
    if (h2g_pyramid_open("/nonexistent.hpyr", &p) != H2G_STATUS_IO || p != NULL) return 4;
    h2g_pyramid_free(p);

    uint8_t pred[4] = {255, 255, 0, 0}, truth[4] = {255, 0, 255, 0};
    H2gMetrics m;
    if (h2g_score_slide(pred, truth, 2, 2, &m) != H2G_STATUS_OK) return 5;
    if (m.tp != 1 || m.fp != 1 || m.fn_count != 1 || m.dsc != 0.5) return 6;
    puts("ok");
    return 0;
}
"#;

fn compiler() -> Option<&'static str> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
}

#[test]
fn c_program_links_against_the_header() {
    let Some(cc) = compiler() else {
        eprintln!("skipping: no C compiler found");
        return;
    };
    // target/<profile>/deps/c_header-<hash> -> target/<profile>
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap().to_path_buf();
    assert!(lib_dir.join("libh2g_ffi.so").exists() || lib_dir.join("libh2g_ffi.dylib").exists(), "cdylib not built in {lib_dir:?}");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let bin = dir.path().join("main");
    let out = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg("-L")
        .arg(&lib_dir)
        .arg("-lh2g_ffi")
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .output()
        .unwrap();
    assert!(out.status.success(), "compile failed: {}", String::from_utf8_lossy(&out.stderr));

    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
