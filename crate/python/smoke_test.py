#!/usr/bin/env python3
"""Smoke test for the sae_py extension module.

Builds nothing itself: run `cargo build -p sae-py --release` first, then
`python3 python/smoke_test.py`. The script copies the cdylib next to a temp
module path and exercises generation, training, encode/decode, checkpointing,
test-time sweeps, and the power-law fitter.
"""

import math
import os
import shutil
import sys
import tempfile

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_sae_py():
    candidates = [
        os.path.join(REPO, "target", "release", "libsae_py.so"),
        os.path.join(REPO, "target", "debug", "libsae_py.so"),
        os.path.join(REPO, "target", "release", "libsae_py.dylib"),
        os.path.join(REPO, "target", "debug", "libsae_py.dylib"),
    ]
    built = [p for p in candidates if os.path.exists(p)]
    if not built:
        sys.exit("build the extension first: cargo build -p sae-py --release")
    stage = tempfile.mkdtemp(prefix="sae_py_")
    shutil.copy(built[0], os.path.join(stage, "sae_py.so"))
    sys.path.insert(0, stage)
    import sae_py

    return sae_py


def main():
    sae = import_sae_py()

    # top-k selection against a sorted oracle
    values = [3.0, -1.0, 2.5, 0.0, 2.5, 7.0]
    got = sae.topk_select(values, 3, False)
    assert got == [(0, 3.0), (2, 2.5), (5, 7.0)], got

    # flop accounting reproduces the sparse-kernel headline numbers
    rep = sae.count_flops("decoder-forward", 4096, 64, 4096, 32)
    assert rep["ratio"] == 4096 / 32
    full = sae.count_flops("train-step", 65536, 64, 1 << 20, 1)
    assert 5.9 < full["ratio"] < 6.0

    # train a small TopK autoencoder on recoverable dictionary data
    data, dictionary = sae.gen_dictionary(32, 64, 4, 0.01, 30000, 7)
    assert len(data) == 30000 and len(data[0]) == 32
    model, log = sae.train(
        data, n=64, k=4, lr=4e-3, batch_size=1024, budget_tokens=300_000, seed=5
    )
    first, last = log[0]["val_nmse"], log[-1]["val_nmse"]
    assert last < 0.5 * first, (first, last)
    assert model.n == 64 and model.d == 32 and model.k == 4

    # encode/decode plumbing: k active latents, finite reconstruction
    z = model.encode(data[0])
    assert len(z) <= 4 and all(v >= 0.0 for _, v in z), z
    recon = model.decode(z)
    assert len(recon) == 32 and all(math.isfinite(v) for v in recon)

    # checkpoint round trip preserves evaluation behavior exactly
    eval_rows = data[-1500:]
    nmse = model.nmse(eval_rows)
    stage = tempfile.mkdtemp(prefix="sae_ckpt_")
    path = os.path.join(stage, "model.saeckpt")
    model.save(path)
    back = sae.Autoencoder.load(path)
    assert back.nmse(eval_rows) == nmse

    # test-time sweep: k' = training k reproduces the plain evaluation, and
    # pushing k' above the training k degrades a TopK-trained model (the
    # overfit-to-k signature)
    sweep = back.test_time_topk(eval_rows, [4, 16])
    assert abs(sweep[0][2] - nmse) < 1e-6, (sweep, nmse)
    assert sweep[1][2] > sweep[0][2], sweep

    # power-law fitter recovers planted parameters
    points = [(4.0 * 2.0**i, 1.5 * (4.0 * 2.0**i) ** -0.4 + 0.05) for i in range(12)]
    fit = sae.fit_power_law(points, True)
    assert abs(fit["alpha"] - 1.5) < 0.02
    assert abs(fit["beta"] + 0.4) < 0.02
    assert abs(fit["irreducible"] - 0.05) < 0.005

    print(f"smoke test OK: trained to nmse {nmse:.4f}, fit {fit}")


if __name__ == "__main__":
    main()
