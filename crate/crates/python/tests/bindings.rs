use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module(code: &str) {
    Python::attach(|py| {
        let m = PyModule::new(py, "starprompt_py").unwrap();
        starprompt_py::register(&m).unwrap();
        let globals = PyDict::new(py);
        globals.set_item("sp", m).unwrap();
        let code = std::ffi::CString::new(code).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            panic!("{e}");
        }
    });
}

#[test]
fn presets_and_metrics() {
    with_module(
        r#"
hp = sp.Hyperparams.preset("imagenet_r")
assert (hp.e1, hp.lambda_stage1, hp.lr_stage1, hp.e2, hp.lambda_stage2, hp.lr_stage2) == (50, 30.0, 0.05, 10, 30.0, 0.001)
assert (hp.components, hp.n_replay) == (5, 256)
assert abs(sp.faa([[0.9], [0.8, 0.6]]) - 0.7) < 1e-12
assert abs(sp.final_forgetting([[0.9], [0.5, 0.8]]) - 0.4) < 1e-12
try:
    sp.Hyperparams.preset("mnist")
    raise AssertionError("unknown preset accepted")
except ValueError as e:
    assert "mnist" in str(e)
"#,
    );
}

#[test]
fn config_run_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let code = format!(
        r#"
cfg = sp.ExperimentConfig("""
scenario.tasks = 2
scenario.classes_per_task = 2
scenario.train_per_class = 6
scenario.test_per_class = 3
e1 = 2
e2 = 1
n_replay = 4
batch_size = 6
seeds = 7
encoder.d = 16
encoder.d_prime = 16
encoder.layers = 2
encoder.heads = 2
encoder.seq_len = 5
encoder.patch_dim = 4
encoder.text_heads = 2
""")
cfg.set("out", {out:?})
assert cfg.seeds == [7] and cfg.variant == "full"
r = sp.run(cfg)
assert [len(row) for row in r.accuracy(7)] == [1, 2]
assert len(r.retrieval(7)) == 2
t = sp.Trainer.load({ckpt:?})
assert t.tasks_done == 2
cls, logits = t.predict([[0.0] * 4] * 4)
assert cls in t.classes and len(logits) == 4
try:
    t.predict([[0.0] * 3])
    raise AssertionError("bad input accepted")
except ValueError:
    pass
"#,
        out = dir.path().display().to_string(),
        ckpt = dir.path().join("checkpoint_seed7").display().to_string()
    );
    with_module(&code);
}
