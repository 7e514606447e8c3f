use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use auxmtl::auxiliary::Genotype;
use auxmtl::data::{load_dataset, read_manifest};
use auxmtl::mtl_net::{build_model, load_checkpoint};
use auxmtl::tensor::ParamSet;
use auxmtl::train::evaluate;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_auxmtl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

const TINY: &str = r#"{
  "data": {"dir": "d"},
  "model": {"stage_channels": [4, 8, 16], "stem_channels": 4, "decoder_channels": 8},
  "train": {"iters": 4, "batch": 2, "eval_every": 2, "eval_batch": 4, "probe_samples": 4},
  "search": {"candidates": 3, "batch": 2, "short_iters": 2, "seed": 5},
  "output_dir": "o"
}"#;

/// Temporary directory holding a 24-sample dataset `d/` and `c.json`.
fn workspace(config: &str) -> TempDir {
    let tmp = TempDir::new().unwrap();
    let o = run(
        tmp.path(),
        &[
            "gen-data",
            "--seed",
            "7",
            "--n",
            "24",
            "--out",
            "d",
            "--height",
            "16",
            "--width",
            "16",
            "--classes",
            "3",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(tmp.path().join("c.json"), config).unwrap();
    tmp
}

fn dir_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().into(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_deterministic_and_validated() {
    let tmp = TempDir::new().unwrap();
    for out in ["a", "b"] {
        assert_eq!(
            code(&run(
                tmp.path(),
                &["gen-data", "--seed", "7", "--n", "64", "--out", out]
            )),
            0
        );
    }
    assert_eq!(
        dir_files(&tmp.path().join("a")),
        dir_files(&tmp.path().join("b"))
    );

    let o = run(tmp.path(), &["gen-data", "--seed", "7", "--n", "4"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    assert_eq!(
        code(&run(tmp.path(), &["gen-data", "--n", "1", "--out", "one"])),
        0
    );
    let m = read_manifest(tmp.path().join("one")).unwrap();
    assert_eq!((m.n, m.files.len()), (1, 1));
    assert_eq!(
        load_dataset(tmp.path().join("one")).unwrap().samples.len(),
        1
    );

    assert_eq!(
        code(&run(tmp.path(), &["gen-data", "--n", "0", "--out", "zero"])),
        2
    );
}

#[test]
fn train_writes_records_and_checkpoint() {
    let tmp = workspace(TINY);
    let w = tmp.path();
    let o = run(
        w,
        &[
            "train",
            "--config",
            "c.json",
            "--strategy",
            "joint",
            "--out",
            "joint",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(
        w,
        &[
            "train",
            "--config",
            "c.json",
            "--strategy",
            "auxi-both",
            "--out",
            "both",
        ],
    );
    assert_eq!(code(&o), 0);
    for f in ["run.csv", "eval.csv", "model.ckpt", "config.resolved.json"] {
        assert!(w.join("joint").join(f).exists(), "{f}");
    }
    let header = |d: &str| {
        read(w.join(d).join("run.csv"))
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert!(header("both").contains("loss_aux_seg,loss_aux_depth"));
    assert!(!header("joint").contains("loss_aux"));

    // the checkpoint reproduces the final evaluation
    let (h, ps) = load_checkpoint::<f32>(w.join("both/model.ckpt")).unwrap();
    let model = build_model(
        &h.model,
        &mut ParamSet::<f32>::new(),
        &mut Pcg64::seed_from_u64(0),
    )
    .unwrap();
    let data = load_dataset(w.join("d")).unwrap();
    let m = evaluate(&model, &ps, &data, "val", 4).unwrap();
    let last = read(w.join("both/eval.csv"))
        .lines()
        .last()
        .unwrap()
        .to_string();
    let cells: Vec<String> = m
        .values()
        .iter()
        .map(|v| v.map(|x| x.to_string()).unwrap_or_default())
        .collect();
    assert_eq!(last, format!("4,{}", cells.join(",")));

    // the resolved config reproduces the run
    let o = run(
        w,
        &[
            "train",
            "--config",
            "both/config.resolved.json",
            "--strategy",
            "auxi-both",
            "--out",
            "again",
        ],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(read(w.join("again/run.csv")), read(w.join("both/run.csv")));
    assert_eq!(
        std::fs::read(w.join("again/model.ckpt")).unwrap(),
        std::fs::read(w.join("both/model.ckpt")).unwrap()
    );
}

#[test]
fn train_preconditions_and_exit_codes() {
    let tmp = workspace(TINY);
    let w = tmp.path();
    assert_eq!(
        code(&run(
            w,
            &["train", "--config", "c.json", "--strategy", "prior-t1"]
        )),
        2
    );
    assert_eq!(
        code(&run(
            w,
            &["train", "--config", "c.json", "--strategy", "sideways"]
        )),
        2
    );
    assert_eq!(code(&run(w, &["train", "--config", "missing.json"])), 3);
    std::fs::write(w.join("bad.json"), r#"{"train": {"iters": 2, "speed": 1}}"#).unwrap();
    assert_eq!(code(&run(w, &["train", "--config", "bad.json"])), 2);

    assert_eq!(
        code(&run(
            w,
            &[
                "train",
                "--config",
                "c.json",
                "--strategy",
                "single-t1",
                "--out",
                "s1"
            ]
        )),
        0
    );
    let o = run(
        w,
        &[
            "train",
            "--config",
            "c.json",
            "--strategy",
            "auxi-t2",
            "--init-ckpt",
            "s1/model.ckpt",
            "--out",
            "a2",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read(w.join("a2/run.csv"))
        .starts_with("iter,lr,loss_total,loss_seg,loss_depth,loss_aux_depth"));

    let diverging = TINY.replace("\"iters\": 4,", "\"iters\": 20, \"lr0\": 1e8,");
    std::fs::write(w.join("div.json"), diverging).unwrap();
    let o = run(
        w,
        &[
            "train",
            "--config",
            "div.json",
            "--strategy",
            "joint",
            "--out",
            "div",
        ],
    );
    assert_eq!(code(&o), 4);
    assert!(w.join("div/run.csv").exists() && w.join("div/eval.csv").exists());
}

#[test]
fn search_outputs() {
    let tmp = workspace(TINY);
    let w = tmp.path();
    for out in ["s1", "s2"] {
        let o = run(w, &["search", "--config", "c.json", "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let log = read(w.join("s1/search.log"));
    assert_eq!(log, read(w.join("s2/search.log")));
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in [
            "candidate_id",
            "seed",
            "genotype",
            "metrics",
            "reward",
            "diverged",
            "wall_ms",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
    assert_eq!(read(w.join("s1/opstats.csv")).lines().count(), 3);
    let best = read(w.join("s1/best.genotype.json"));
    let g = Genotype::from_json(best.trim()).unwrap();
    assert_eq!((g.p(), g.t()), (3, 2));

    // the best genotype trains under auxi-nas
    let cfg = TINY.replace("\"output_dir\"", "\"aux\": {\"mode\": \"genotype\", \"genotype_path\": \"s1/best.genotype.json\"},\n  \"output_dir\"");
    std::fs::write(w.join("nas.json"), cfg).unwrap();
    let o = run(w, &["train", "--config", "nas.json", "--out", "nas"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read(w.join("nas/run.csv")).contains("loss_aux_seg"));

    std::fs::write(
        w.join("none.json"),
        TINY.replace("\"candidates\": 3", "\"candidates\": 0"),
    )
    .unwrap();
    assert_eq!(
        code(&run(w, &["search", "--config", "none.json", "--out", "s0"])),
        0
    );
    assert_eq!(read(w.join("s0/search.log")), "");
    assert!(!w.join("s0/best.genotype.json").exists());
}

#[test]
fn compare_tables() {
    let tmp = workspace(TINY);
    let w = tmp.path();
    let o = run(
        w,
        &[
            "compare",
            "--config",
            "c.json",
            "--strategies",
            "single-t1,prior-t1,joint",
            "--seeds",
            "1,2",
            "--out",
            "cmp",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = read(w.join("cmp/table.csv"));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "strategy,seed,status,miou,pixacc,rel,rms,angle");
    assert_eq!(lines.len(), 1 + 3 * 2 + 3);
    for l in &lines[1..3] {
        let c: Vec<&str> = l.split(',').collect();
        assert_eq!(
            &c[..3],
            &["single-t1", if l == &lines[1] { "1" } else { "2" }, "ok"]
        );
        assert!(!c[3].is_empty() && !c[4].is_empty());
        assert!(c[5..].iter().all(|v| v.is_empty()));
    }
    assert!(lines[7].starts_with("single-t1,mean,ok,"));
    assert!(lines[9].starts_with("joint,mean,ok,"));
    assert!(!table.contains('\r'));

    let o = run(
        w,
        &[
            "compare",
            "--config",
            "c.json",
            "--strategies",
            "single-t1,prior-t1,joint",
            "--seeds",
            "1,2",
            "--out",
            "cmp2",
        ],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(read(w.join("cmp2/table.csv")), table);

    assert_eq!(
        code(&run(
            w,
            &[
                "compare",
                "--config",
                "c.json",
                "--strategies",
                "joint,nope",
                "--seeds",
                "1"
            ]
        )),
        2
    );
}
