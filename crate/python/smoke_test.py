"""Smoke test for the matchbox_py extension.

Uses an installed ``matchbox_py`` if importable, otherwise loads the shared
library built by ``cargo build -p matchbox-python --features extension-module``.
"""

import importlib.util
import math
import os
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def load_module():
    try:
        import matchbox_py

        return matchbox_py
    except ImportError:
        pass
    for profile in ("release", "debug"):
        for name in ("libmatchbox_py.so", "libmatchbox_py.dylib", "matchbox_py.dll"):
            lib = REPO / "target" / profile / name
            if lib.exists():
                spec = importlib.util.spec_from_file_location("matchbox_py", lib)
                module = importlib.util.module_from_spec(spec)
                spec.loader.exec_module(module)
                return module
    sys.exit("matchbox_py not found; run: cargo build -p matchbox-python --features extension-module")


def sine(freq, amp=0.3, n=16000):
    return [amp * math.sin(2 * math.pi * freq * i / 16000) for i in range(n)]


def main():
    mb = load_module()

    assert mb.count_params("3x2x64", 35) == 93411
    cfg = mb.ModelConfig("3x1x64", 35)
    assert cfg.count_params() == 77859
    assert cfg.block_kernels == [13, 15, 17]
    assert abs(cfg.count_params() - 77_000) <= 7_700

    feats = mb.mfcc(sine(1000.0))
    assert len(feats) == 64 and all(len(row) == 128 for row in feats)

    assert abs(mb.lr_at(50, 1000) - 0.05) < 1e-12
    assert abs(mb.lr_at(1000, 1000) - 0.001) < 1e-12

    clip = sine(440.0, 0.1, 8000)
    noise = [((i * 7919) % 1000) / 1000.0 - 0.5 for i in range(12000)]
    mix, start, end, scaled = mb.mix_at_snr(clip, noise, 10.0, seed=3)
    sig = math.sqrt(sum(x * x for x in clip[start:end]) / (end - start))
    nse = math.sqrt(sum(x * x for x in scaled) / len(scaled))
    assert abs(20 * math.log10(sig / nse) - 10.0) < 0.1

    mean, half = mb.trials_ci([97.0] * 5)
    assert (mean, half) == (97.0, 0.0)
    try:
        mb.trials_ci([97.0])
        raise AssertionError("expected TooFewTrials")
    except ValueError as e:
        assert str(e).startswith("TooFewTrials")

    tiny = mb.ModelConfig("1x1x8", 2)
    ckpt = mb.Checkpoint.init(tiny, ["tone", "noise"], seed=1)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "tiny.ckpt")
        ckpt.save(path)
        back = mb.Checkpoint.load(path)
        batch = [sine(500.0), sine(3000.0)]
        assert back.predict(batch) == ckpt.predict(batch)
        assert back.model_name == "1x1x8" and back.labels == ["noise", "tone"]
        assert set(back.classify(batch)) <= {"noise", "tone"}

        wav = os.path.join(tmp, "a.wav")
        mb.write_wav(wav, [0.0, 0.5, -0.5])
        samples, rate = mb.read_wav(wav)
        assert rate == 16000 and abs(samples[1] - 0.5) < 1e-4

        with open(path, "r+b") as f:
            f.write(b"XXXX")
        try:
            mb.Checkpoint.load(path)
            raise AssertionError("expected BadMagic")
        except ValueError as e:
            assert str(e).startswith("BadMagic")

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
