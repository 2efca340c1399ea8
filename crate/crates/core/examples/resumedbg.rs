// scratch resume debugging (deleted before ship)
use ovcoser_core::data::toyset::{generate, write_to_dir, ToySpec};
use ovcoser_core::harness::{self, load_checkpoint, load_config};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToySpec { train_per_class: 2, test_per_class: 1, ..Default::default() };
    let set = generate(&spec);
    let paths = write_to_dir(&set, dir.path()).unwrap();
    let overrides = vec![
        format!("data.manifest={}", paths.train_manifest.display()),
        format!("data.split={}", paths.split.display()),
        "decoder.width=8".into(),
        "decoder.heads=2".into(),
        "decoder.se_stages=[2,3]".into(),
        "train.resolution=64".into(),
        "train.batch_size=4".into(),
        "train.seed=5".into(),
        "optimizer.lr=0.001".into(),
        format!("backbone.stub.planted_classes=[{}]",
            set.classes.iter().map(|c| format!("\"{c}\"")).collect::<Vec<_>>().join(",")),
    ];
    let mut cfg1 = load_config(None, &overrides).unwrap();
    cfg1.train.epochs = 2;
    cfg1.run.out_dir = dir.path().join("r1");
    harness::train_run(&cfg1, None).unwrap();
    let mut cfg2 = cfg1.clone();
    cfg2.run.out_dir = dir.path().join("r2");
    harness::train_run(&cfg2, None).unwrap();
    let a = load_checkpoint(&cfg1.run.out_dir.join("checkpoint_latest.json")).unwrap();
    let b = load_checkpoint(&cfg2.run.out_dir.join("checkpoint_latest.json")).unwrap();
    let mut same = true;
    for (x, y) in a.params.iter().zip(&b.params) {
        if x.data != y.data { println!("fresh-vs-fresh differs at {}", x.name); same = false; break; }
    }
    println!("fresh twice identical: {same}");

    // now in-memory continue vs save/load continue for ONE more epoch
    let mut cfg3 = cfg1.clone();
    cfg3.train.epochs = 3;
    cfg3.run.out_dir = dir.path().join("r3");
    harness::train_run(&cfg3, None).unwrap();
    let mut cfg4 = cfg1.clone();
    cfg4.train.epochs = 3;
    cfg4.run.out_dir = cfg1.run.out_dir.clone(); // resume in r1
    harness::train_run(&cfg4, Some(&cfg1.run.out_dir.join("checkpoint_latest.json"))).unwrap();
    let c = load_checkpoint(&cfg3.run.out_dir.join("checkpoint_latest.json")).unwrap();
    let d = load_checkpoint(&cfg1.run.out_dir.join("checkpoint_latest.json")).unwrap();
    let mut firstdiff = None;
    for (x, y) in c.params.iter().zip(&d.params) {
        if x.data != y.data && firstdiff.is_none() {
            let idx = x.data.iter().zip(&y.data).position(|(u, v)| u != v).unwrap();
            firstdiff = Some((x.name.clone(), idx, x.data[idx], y.data[idx]));
        }
    }
    println!("straight-vs-resume: {:?}", firstdiff);
}
