"""Smoke test for the facecomp Python extension.

Usage: python3 python/smoke_test.py [path/to/libfacecomp_py.so]

Without an argument the library is looked up in target/debug and
target/release. It is copied next to a temporary `facecomp_py.so` so the
interpreter can import it.
"""

import importlib
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def find_library():
    if len(sys.argv) > 1:
        return sys.argv[1]
    for profile in ("debug", "release"):
        path = os.path.join(ROOT, "target", profile, "libfacecomp_py.so")
        if os.path.exists(path):
            return path
    sys.exit("libfacecomp_py.so not found; run `cargo build -p facecomp-py` first")


def main():
    lib = find_library()
    tmp = tempfile.mkdtemp()
    shutil.copy(lib, os.path.join(tmp, "facecomp_py.so"))
    sys.path.insert(0, tmp)
    fc = importlib.import_module("facecomp_py")

    frames = fc.sprite_frames(7, 3, 32)
    assert len(frames) == 3 and len(frames[0]) == 32 * 32 * 3
    assert all(0.0 <= v <= 1.0 for v in frames[0])
    assert frames == fc.sprite_frames(7, 3, 32), "sprite rendering must be deterministic"
    assert fc.frame_tensor_shape(frames, 32) == [3, 3, 32, 32]

    assert fc.nearest_codes([[0.2, 0.1], [0.9, 1.2]], [[0.0, 0.0], [1.0, 1.0]]) == [0, 1]
    assert fc.nearest_codes([[0.5, 0.5]], [[0.0, 0.0], [1.0, 1.0]]) == [0]

    assert math.isclose(fc.perplexity([5] * 64), 64.0, rel_tol=1e-12)
    assert fc.perplexity([0, 9, 0]) == 1.0

    assert fc.psnr(frames[0], frames[0]) == 100.0
    assert fc.l1(frames[0], frames[0]) == 0.0
    a, b = [0.0, 0.5, 1.0], [0.1, 0.5, 0.7]
    assert math.isclose(fc.l1(a, b), (0.1 + 0.0 + 0.3) / 3, rel_tol=1e-6)
    try:
        fc.l1([0.0], [0.0, 1.0])
    except (ValueError, RuntimeError):
        pass
    else:
        raise AssertionError("size mismatch must raise")

    try:
        fc.checkpoint_info(os.path.join(tmp, "missing.safetensors"))
    except RuntimeError:
        pass
    else:
        raise AssertionError("missing checkpoint must raise")

    ckpt = os.environ.get("FACECOMP_CHECKPOINT")
    if ckpt:
        step, config = fc.checkpoint_info(ckpt)
        size = int(config.split("image_size = ")[1].split()[0])
        video = fc.sprite_frames(1, 2, size)
        out = fc.animate(ckpt, video[0], video)
        assert len(out) == 2 and len(out[0]) == size * size * 3
        print(f"checkpoint step {step}: animated {len(out)} frames")

    print(f"facecomp_py {fc.__version__}: ok")


if __name__ == "__main__":
    main()
