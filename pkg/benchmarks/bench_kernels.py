"""Compare the numba and numpy kernel backends.

Times each hot kernel on shapes taken from the r=32 network at a 158x158
training crop, then one full forward/backward step. Usage:

    python benchmarks/bench_kernels.py [--repeat 5] [--step]
"""

import argparse
import timeit

import numpy as np

from redcount import kernels


def kernel_cases(rng):
    x = rng.standard_normal((4, 64, 127, 127)).astype(np.float32)
    gamma = np.ones(64, np.float32)
    beta = np.zeros(64, np.float32)
    y, mean, _, invstd = kernels.load_backend("numpy").bn_train_forward(x, gamma, beta, 1e-5)
    g = rng.standard_normal(x.shape).astype(np.float32)

    c, side, k = 32, 64, 3
    xflat = rng.standard_normal((c, side * side + k)).astype(np.float32)
    n_out = (side - k + 1) * side
    cols = rng.standard_normal((k * k * c, n_out)).astype(np.float32)
    z = rng.standard_normal((k * k * 48, side * side + k)).astype(np.float32)

    f = 40 * 21
    wf = (rng.standard_normal((32, 112, f)) + 1j * rng.standard_normal((32, 112, f))).astype(np.complex64)
    xf = (rng.standard_normal((4, 112, f)) + 1j * rng.standard_normal((4, 112, f))).astype(np.complex64)
    gf = (rng.standard_normal((4, 32, f)) + 1j * rng.standard_normal((4, 32, f))).astype(np.complex64)

    return {
        "leaky_relu": lambda b: b.leaky_relu(x, 0.01),
        "leaky_relu_grad": lambda b: b.leaky_relu_grad(y, g, 0.01),
        "bn_train_forward": lambda b: b.bn_train_forward(x, gamma, beta, 1e-5),
        "bn_train_backward": lambda b: b.bn_train_backward(x, mean, invstd, gamma, g),
        "im2col": lambda b: b.im2col(xflat, k, side, n_out),
        "col2im": lambda b: b.col2im(cols, c, xflat.shape[1], k, side),
        "shift_sum": lambda b: b.shift_sum(z, 48, k, side, n_out),
        "spectral_mix": lambda b: b.spectral_mix(wf, xf),
        "spectral_mix_adjoint": lambda b: b.spectral_mix_adjoint(wf, gf),
        "spectral_weight_grad": lambda b: b.spectral_weight_grad(gf, xf),
    }


def train_step():
    from redcount.network import build_countception, forward_full
    from redcount.tensorcore import Tape, l1_loss

    rng = np.random.default_rng(0)
    spec, state = build_countception(32, seed=0)
    x = rng.random((4, 1, 158, 158), dtype=np.float32)
    target = rng.random((4, 1, 127, 127), dtype=np.float32)

    def step():
        with Tape() as tape:
            loss = l1_loss(forward_full(state, spec, x, mode="train"), target)
            tape.backward(loss, retain_intermediate=False)

    return step


def best_of(fn, repeat):
    fn()  # warm-up, includes jit compilation
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--step", action="store_true", help="also time a full training step")
    args = ap.parse_args()

    names = [n for n in kernels.BACKENDS if n != "numba" or kernels.numba_available()]
    backends = {n: kernels.load_backend(n) for n in names}
    cases = kernel_cases(np.random.default_rng(0))

    print(f"{'kernel':<22}" + "".join(f"{n + ' ms':>12}" for n in names) + f"{'speedup':>10}")
    for label, fn in cases.items():
        ms = {n: 1e3 * best_of(lambda: fn(b), args.repeat) for n, b in backends.items()}
        ratio = ms["numpy"] / ms["numba"] if "numba" in ms else float("nan")
        print(f"{label:<22}" + "".join(f"{ms[n]:>12.2f}" for n in names) + f"{ratio:>10.2f}")

    if args.step:
        for n in names:
            kernels.set_backend(n)
            print(f"train step (batch 4, 158x158) {n}: {best_of(train_step(), 2):.2f} s")


if __name__ == "__main__":
    main()
