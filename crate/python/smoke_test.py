"""Smoke test for the ctdiag Python extension.

Build first:  pip install maturin && pip install --no-build-isolation -e crates/py
Then run:     python python/smoke_test.py
"""

import math
import os
import tempfile

import numpy as np
from PIL import Image

import ctdiag


def write_dataset(root, per_class=2, slices=2, seed=0):
    rng = np.random.default_rng(seed)
    for cls, mean in (("covid", 80), ("non-covid", 170)):
        for v in range(per_class):
            d = os.path.join(root, cls, f"{cls}_{v}")
            os.makedirs(d)
            for s in range(slices):
                px = np.clip(rng.normal(mean, 20, (48, 48)), 0, 255).astype(np.uint8)
                Image.fromarray(px, mode="L").save(os.path.join(d, f"slice_{s:03}.png"))


def main():
    assert ctdiag.classify_slice(0.3, 0.5) == "COVID"
    assert ctdiag.classify_slice(0.7, 0.5) == "NON_COVID"
    assert ctdiag.aggregate(["COVID", "NON_COVID"]) == "NON_COVID"
    assert ctdiag.aggregate(["COVID", "NON_COVID"], "any") == "COVID"
    v = ctdiag.diagnose_volume("v1", [0.1, 0.2, 0.9], 0.5)
    assert (v["covid_count"], v["diagnosis"]) == (2, "COVID")
    assert abs(ctdiag.macro_f1_avgpr(0.776, 0.788) - 0.782) < 1e-3
    assert math.isclose(ctdiag.ci_radius(0.78, 106378), 1.96 * math.sqrt(0.78 * 0.22 / 106378))

    model = ctdiag.Model()
    info = model.summary()
    assert info["total_params"] == 21_124_393, info
    assert info["trainable_params"] == 262_657, info
    assert info["weights_loaded"] is False
    assert "head/dense2/kernel" in model.name_manifest()

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "t.ntc")
        ctdiag.save_ntc(path, [("a/kernel", [2, 3], [float(i) for i in range(6)])])
        [(name, shape, data)] = ctdiag.load_ntc(path)
        assert (name, shape, data) == ("a/kernel", [2, 3], [float(i) for i in range(6)])

        for split, seed in (("train", 1), ("val", 2)):
            write_dataset(os.path.join(tmp, split), seed=seed)
        model.init_random(0)
        model.calibrate(os.path.join(tmp, "train"))
        history = model.train_head(os.path.join(tmp, "train"), os.path.join(tmp, "val"), epochs=1, batch=4)
        assert len(history) == 1 and 0.0 <= history[0]["val_acc"] <= 1.0

        weights = os.path.join(tmp, "model.ntc")
        model.save(weights)
        reloaded = ctdiag.Model.load(weights)
        assert reloaded.summary()["weights_loaded"] is True

        reports = reloaded.evaluate(os.path.join(tmp, "val"), [0.9, 0.5])
        assert [round(r["threshold"], 3) for r in reports] == [0.9, 0.5]
        assert reports[0]["volume"]["confusion"]["tp"] + reports[0]["volume"]["confusion"]["fn"] == 2
        preds = reloaded.predict(os.path.join(tmp, "val"))
        assert len(preds) == 4 and all(p["diagnosis"] in ("COVID", "NON_COVID") for p in preds)

    print("ctdiag smoke test: OK")


if __name__ == "__main__":
    main()
