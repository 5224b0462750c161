"""Smoke test for the deepbound Python module.

Build and install first:
    cd crates/py && maturin build --release -o dist && pip install dist/*.whl
"""

import os
import tempfile

import deepbound as db


def main():
    data = db.Dataset.generate(seed=3, per_class=20)
    assert len(data) == 200
    pixels, label = data.image(0), data.label(0)
    assert len(pixels) == 3 * 32 * 32

    model, acc = db.train_model("plain-cnn", data, seed=1, epochs=8)
    print(f"held-out accuracy after 8 epochs: {acc:.2f}")
    assert 0 <= model.predict(pixels) < 10
    assert len(model.logits(pixels)) == 10

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.dbw")
        model.save(path)
        again = db.Model.load(path)
        assert again.logits(pixels) == model.logits(pixels)

    names = [name for _, name, _ in model.planes()]
    assert "stage2.bias" in names

    dist = db.Distribution([0.0, 1.0, 2.0, 3.0])
    assert abs(dist.quantile(dist.cdf(1.5)) - 1.5) < 1e-3
    lo, hi = dist.bound(1.0, 0.2)
    assert lo <= 1.0 <= hi

    profile = db.PlaneProfile(model, data, "stage2.bias")
    print(f"{profile.name}: {len(profile)} neurons, normality {profile.normality:.3f}")

    samples = [(data.image(i), data.label(i)) for i in range(10)]
    eps_base = db.calibrate(model, profile, samples, mode="targeted+1")
    step = db.find_step(model, profile, samples, 0.4 * eps_base, mode="targeted+1", probes=6, probe_iters=10)
    assert 0.0 <= step <= 0.01
    res = db.d2b(model, profile, pixels, label, 0.4 * eps_base, mode="targeted+1", step=1e-3, iters=30)
    print(f"d2b: success {res.success} feasible {res.feasible} qd {res.quantile_distance:.3f}")
    assert res.quantile_distance > 0.0
    assert res.quantile_distance <= 0.4 * eps_base + 1e-6 or not res.feasible

    base = db.bim(model, pixels, label, eps=0.02, mode="targeted+1")
    l2, linf = db.pixel_distances(pixels, base.x_adv)
    assert linf <= 0.02 + 1e-6
    assert db.ssim(pixels, pixels) == 1.0
    print(f"bim: success {base.success} linf {linf:.4f} ssim {db.ssim(pixels, base.x_adv):.4f}")

    try:
        db.Model.init("no-such-arch", 0)
    except ValueError:
        pass
    else:
        raise AssertionError("bad architecture accepted")
    print("ok")


if __name__ == "__main__":
    main()
