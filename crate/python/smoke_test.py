"""Smoke test for the dmipy extension module.

Build and install first:
    pip install --no-build-isolation -e crates/py
Then run:
    python python/smoke_test.py
"""

import math

import dmipy


def mean_rows(grids):
    h, w = len(grids[0]), len(grids[0][0])
    return [[sum(g[r][c] for g in grids) / len(grids) for c in range(w)] for r in range(h)]


def rel_l2(a, b):
    num = sum((x - y) ** 2 for ra, rb in zip(a, b) for x, y in zip(ra, rb))
    den = sum(y * y for rb in b for y in rb)
    return math.sqrt(num / den)


def main():
    sched = dmipy.Schedule(100, 1e-4, 0.2)
    assert sched.n_steps == 100 and len(sched.c) == 101
    assert abs(sched.c[0] - 1.0) < 1e-15

    scene = dmipy.Scene.generate(32, 32, 4, seed=1)
    truth = scene.pathloss()
    assert len(truth) == 32 and all(0.0 <= v <= 1.0 for row in truth for v in row)

    obs = dmipy.Observations.observe(truth, 0.7, 0.01, seed=2)
    assert len(obs) == round(0.3 * 32 * 32)
    aware = obs.augment_aware(scene)
    assert len(aware) >= len(obs)

    for name, est in [("idw", dmipy.idw(obs)), ("kriging", dmipy.kriging(obs))]:
        p = dmipy.psnr(est, truth)
        print(f"{name:8s} psnr {p:6.2f} dB  ssim {dmipy.ssim(est, truth):.3f}  spe {dmipy.spe(est, scene):.2f}")
        assert p > 10.0

    # sampler against the exact Gaussian posterior
    prior = dmipy.Prior.homogeneous(16, 16, 0.5, 0.04)
    small = [[0.5 + 0.1 * math.sin(r + 2 * c) for c in range(16)] for r in range(16)]
    o16 = dmipy.Observations.observe(small, 0.8, 0.05, seed=3)
    exact, _ = dmipy.posterior_gaussian(prior, o16)
    tik = dmipy.map_tikhonov(prior, o16)
    assert rel_l2(tik, exact) < 1e-9
    runs = [dmipy.reconstruct(o16, prior, sched, m=10, seed=s) for s in range(60)]
    err = rel_l2(mean_rows(runs), exact)
    print(f"sampler mean vs exact posterior: relative L2 {err:.4f}")
    assert err < 0.08

    try:
        dmipy.psnr([[0.0, 1.0]], [[0.0]])
    except ValueError as e:
        print(f"dimension check raised: {e}")
    else:
        raise AssertionError("expected ValueError")
    print("smoke test passed")


if __name__ == "__main__":
    main()
