"""Smoke test for the freqhe extension module.

Build first, e.g. `maturin develop -m crates/py/Cargo.toml`, or copy the
compiled library next to this file as `freqhe.so`.
"""

import random

import freqhe


def rand_tensor(rng, dims):
    c, h, w = dims
    return [rng.uniform(-1.0, 1.0) for _ in range(c * h * w)]


def main():
    rng = random.Random(0)

    # operation counts of the full-size networks
    rgb = freqhe.Graph.build("resnet18-rgb", (3, 224, 224)).analyze()
    dct = freqhe.Graph.build("resnet18-dct", (64, 56, 56)).analyze()
    assert rgb["relus"] == 2_308_096, rgb["relus"]
    assert dct["relus"] == 1_505_280, dct["relus"]

    assert freqhe.normalize_latency(216000, 20) == 45000

    m = freqhe.dct_matrix(4)
    for i in range(4):
        for j in range(4):
            dot = sum(m[i * 4 + k] * m[j * 4 + k] for k in range(4))
            assert abs(dot - (i == j)) < 1e-12

    pixels = bytes(rng.randrange(256) for _ in range(32 * 32 * 3))
    data, dims = freqhe.preprocess(pixels, 32, 32, filter_size=4, channels=48)
    assert dims == (48, 8, 8) and len(data) == 48 * 64

    g = freqhe.Graph.build("resnet20-dct", dims)
    w = freqhe.Weights.random(g, 1)
    calib = [rand_tensor(rng, dims) for _ in range(4)]
    model = freqhe.Model.quantize(g, w, calib, bits=4, rounding=6, p_err=0.01)
    logits, trace = model.run_exact(calib[0])
    assert len(logits) == 10
    assert trace["pbs_invocations"] > 0
    assert trace["max_abs_accumulator"] < 2 ** (model.circuit_bitwidth - 1)
    a, _ = model.run_noisy(calib[0], 5)
    b, _ = model.run_noisy(calib[0], 5)
    assert a == b
    model.p_err = 0.0
    assert model.run_noisy(calib[0], 5)[0] == logits

    ci = freqhe.bootstrap([i % 10 != 0 for i in range(4000)], seed=3)
    assert ci["ci_low"] <= ci["estimate"] <= ci["ci_high"]
    assert ci["disjoint"]

    try:
        freqhe.Graph.build("vgg", (3, 32, 32))
    except ValueError:
        pass
    else:
        raise AssertionError("unknown architecture accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
