use matchbox_py::matchbox_py;
use pyo3::ffi::c_str;
use pyo3::prelude::*;

fn run(code: &std::ffi::CStr) -> PyResult<()> {
    pyo3::append_to_inittab!(matchbox_py);
    Python::initialize();
    Python::attach(|py| py.run(code, None, None))
}

#[test]
fn bindings_work_from_python() {
    run(c_str!(
        r#"
import math, os, tempfile
import matchbox_py as mb

assert mb.count_params("3x2x64", 35) == 93411
assert mb.ModelConfig("6x2x64", 35).count_params() == 139491
assert mb.SAMPLE_RATE_HZ == 16000

tone = [0.3 * math.sin(2 * math.pi * 700 * i / 16000) for i in range(16000)]
feats = mb.mfcc(tone)
assert len(feats) == 64 and len(feats[0]) == 128

assert mb.lr_at(0, 100) == 0.0 and mb.lr_at(100, 100) == 0.001
try:
    mb.ModelConfig("3x0x64", 35)
    raise AssertionError("accepted a zero-repeat model")
except ValueError:
    pass

ckpt = mb.Checkpoint.init(mb.ModelConfig("1x1x8", 3), ["a", "b", "c"], seed=5)
logits = ckpt.predict([tone, tone[:8000]])
assert len(logits) == 2 and len(logits[0]) == 3
with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "m.ckpt")
    ckpt.save(path)
    again = mb.Checkpoint.load(path)
    assert again.predict([tone, tone[:8000]]) == logits
    assert again.num_params == ckpt.num_params
"#
    ))
    .unwrap();
}
