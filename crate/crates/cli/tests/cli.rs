use std::path::Path;
use std::process::Command;

use rpe_lab::manifest::RunManifest;
use rpe_lab::table::CsvTable;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rpe-lab"))
}

fn run_ok(out: &Path, args: &[&str]) -> String {
    let o = bin().arg(format!("--out-dir={}", out.display())).args(args).output().unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(out: &Path, args: &[&str]) -> i32 {
    bin().arg(format!("--out-dir={}", out.display())).args(args).output().unwrap().status.code().unwrap()
}

fn table(path: &Path) -> CsvTable {
    CsvTable::parse(&std::fs::read(path).unwrap()).unwrap()
}

fn assert_svg(path: &Path) {
    let text = std::fs::read_to_string(path).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let root = doc.root_element();
    assert_eq!(root.tag_name().name(), "svg");
    assert!(root.attribute("viewBox").is_some(), "{}", path.display());
}

#[test]
fn catalog_lists_nine_kernels_with_notes() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(dir.path(), &["catalog"]);
    let t = table(&dir.path().join("catalog.csv"));
    assert_eq!(t.rows.len(), 9);
    let names = t.column("name").unwrap();
    let notes = t.column("note").unwrap();
    let formulas = t.column("formula").unwrap();
    let at = |n: &str| names.iter().position(|x| *x == n).unwrap();
    assert_eq!(notes[at("kerple_log")], "requires r > 1");
    assert_eq!(notes[at("sandwich")], "convergent when d < 2 ln r / k");
    assert!(formulas[at("type2")].contains("ln"));
}

#[test]
fn manifest_hashes_match_outputs() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(dir.path(), &["--seed=3", "trf", "--kernel=alibi(k=1)", "--points=5"]);
    let m = RunManifest::read(dir.path()).unwrap();
    assert_eq!(m.command, "trf");
    assert_eq!(m.status, "ok");
    assert_eq!(m.flags.seed, 3);
    assert!(m.kernels.contains(&"alibi(k=1)".to_string()));
    let names: Vec<&str> = m.outputs.iter().map(|o| o.path.as_str()).collect();
    for want in ["trf.csv", "trf_curve.csv", "trf.svg", "trf_curve.svg"] {
        assert!(names.contains(&want), "{names:?}");
    }
    assert!(m.stale_outputs(dir.path()).is_empty());
    std::fs::write(dir.path().join("trf.csv"), "tampered").unwrap();
    assert_eq!(m.stale_outputs(dir.path()), vec!["trf.csv".to_string()]);
}

#[test]
fn alibi_trf_rows_follow_log_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(dir.path(), &["--format=csv", "trf", "--kernel=alibi(k=1)", "--points=4"]);
    let t = table(&dir.path().join("trf.csv"));
    for r in &t.rows {
        let e: f64 = r[1].parse().unwrap();
        let j: f64 = r[2].parse().unwrap();
        assert!((j - (-e.ln()).ceil()).abs() <= 1.0, "{r:?}");
    }
    assert!(!dir.path().join("trf.svg").exists());
}

#[test]
fn svg_outputs_are_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(dir.path(), &["erf", "--kernel=type1", "--kernel=inverse_n", "--n=48", "--points=5"]);
    run_ok(dir.path(), &["heatmap", "--kernel=alibi(k=0.5)", "--size=40"]);
    for name in ["erf.svg", "erf_curve.svg", "heatmap_alibi.svg"] {
        assert_svg(&dir.path().join(name));
    }
    let erf = table(&dir.path().join("erf.csv"));
    assert_eq!(erf.rows.len(), 10);
}

#[test]
fn window_mask_heatmap_is_a_band() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(dir.path(), &["heatmap", "--kernel=window_mask(w=4)", "--size=12"]);
    let t = table(&dir.path().join("heatmap.csv"));
    let normalized: Vec<f64> = t.column("normalized").unwrap().iter().map(|x| x.parse().unwrap()).collect();
    assert_eq!(&normalized[..4], &[1.0; 4]);
    assert!(normalized[4..].iter().all(|x| *x == 0.0));
    let svg = std::fs::read_to_string(dir.path().join("heatmap_window_mask.svg")).unwrap();
    assert_eq!(svg.matches("rgb(0,0,0)").count(), 12);
}

#[test]
fn seeded_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--seed=9", "simulate-delta", "--kernel=alibi", "--kernel=type2", "--n=32", "--dims=4,8", "--seeds=4"];
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&a, &args);
    run_ok(&b, &["--threads=1"].iter().chain(&args).copied().collect::<Vec<_>>());
    for name in ["delta.csv", "delta_summary.csv", "delta_d4.svg"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let s = table(&a.join("delta_summary.csv"));
    assert!(s.column("violations").unwrap().iter().all(|v| *v == "0"));
    assert_eq!(RunManifest::read(&a).unwrap().seeds, vec![9, 10, 11, 12]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(p, &["--help"]), 0);
    assert_eq!(code(p, &["no-such-command"]), 2);
    assert_eq!(code(p, &["classify", "--kernel=alibi(k=-1)"]), 2);
    assert_eq!(code(p, &["heatmap", "--kernel=type1", "--size=0"]), 2);
    assert_eq!(code(p, &["--threads=0", "catalog"]), 2);
    assert_eq!(code(p, &["trf", "--eps-min=0"]), 2);
    let missing = p.join("missing.ckpt");
    assert_eq!(code(p, &["eval-ppl", &format!("--checkpoint={}", missing.display())]), 4);
    let junk = p.join("junk.ckpt");
    std::fs::write(&junk, "not a checkpoint").unwrap();
    assert_eq!(code(p, &["eval-ppl", &format!("--checkpoint={}", junk.display())]), 4);
    let cfg = p.join("bad.cfg");
    std::fs::write(&cfg, "peak_lr=1e300\nclip_norm=0\nsteps=5\ncorpus=markov(order=1,vocab=4,length=2000,seed=1)\n\
        vocab_size=4\nseq_len=8\nhidden_dim=8\nffn_dim=8\nbatch_size=2\n").unwrap();
    assert_eq!(code(&p.join("div"), &["train", &format!("--config={}", cfg.display())]), 3);
    let m = RunManifest::read(&p.join("div")).unwrap();
    assert!(m.status.starts_with("failed"));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lm.cfg");
    std::fs::write(
        &cfg,
        "# tiny model\ndecoder_layers=1\nheads=1\nhidden_dim=8\nffn_dim=16\nvocab_size=6\nseq_len=8\n\
         kernel=alibi(k=1)\nsteps=20\nwarmup_steps=4\nbatch_size=2\ncorpus=markov(order=1,vocab=6,length=3000,seed=2)\n",
    )
    .unwrap();
    let out = dir.path().join("train");
    run_ok(&out, &["train", &format!("--config={}", cfg.display())]);
    let log = table(&out.join("train_log.csv"));
    assert_eq!(log.rows.len(), 20);
    assert_svg(&out.join("train_loss.svg"));
    let ck = out.join("model.ckpt");
    let eval = dir.path().join("eval");
    let stdout = run_ok(&eval, &["eval-ppl", &format!("--checkpoint={}", ck.display()), "--lengths=16,32", "--mode=sliding:4"]);
    assert!(stdout.contains("verdict(delta=0.2)"));
    let ppl = table(&eval.join("ppl.csv"));
    assert_eq!(ppl.column("length").unwrap(), vec!["8", "16", "32"]);
    assert_eq!(ppl.column("deviation").unwrap()[0], "0");
}

#[test]
fn experiment_runs_steps_into_numbered_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("plan.txt");
    std::fs::write(&cfg, "# two steps\ncatalog\nheatmap --kernel type2 --size 16   # trailing\n").unwrap();
    let out = dir.path().join("out");
    run_ok(&out, &["experiment", &format!("--config={}", cfg.display())]);
    assert!(out.join("01-catalog/catalog.csv").exists());
    assert!(out.join("02-heatmap/heatmap.csv").exists());
    let m = RunManifest::read(&out).unwrap();
    assert_eq!(m.command, "experiment");
    assert!(m.outputs.iter().any(|o| o.path == "02-heatmap/heatmap_type2.svg"));
    assert!(m.stale_outputs(&out).is_empty());

    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "# nothing\n\n").unwrap();
    let out = dir.path().join("none");
    run_ok(&out, &["experiment", &format!("--config={}", empty.display())]);
    assert!(RunManifest::read(&out).unwrap().outputs.is_empty());
}

#[test]
fn heatmap_concentration_ordering() {
    use rpe_core::Kernel;
    use rpe_lab::commands::heatmap_values;
    // offsets drawn darker than white
    let band = |k: &Kernel| heatmap_values(k, 256).iter().filter(|v| (255.0 * (1.0 - **v)).round() < 255.0).count();
    assert!(band(&Kernel::type2()) < band(&Kernel::type1()));
    let inv = heatmap_values(&Kernel::inverse_n(), 256);
    assert!(inv.windows(2).all(|w| w[1] < w[0]));
    assert!(inv[255] < 0.01);
}
