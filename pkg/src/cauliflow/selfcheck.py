"""Fast invariant suite behind the `selftest` CLI subcommand.

Each check returns (name, passed, detail). The whole battery runs in
well under a minute: it covers gradient correctness per op, flow
round-trips and log-det exactness on toy models, metric oracle
equivalence against brute-force reimplementations, and serialization
round-trips.
"""

import math
import os
import tempfile

import numpy as np

from . import rng, tensor as T
from .flow import FlowConfig, FlowStep, pad_to_group, squeeze, unsqueeze
from .metrics import fbeta, jsd_histograms, percentile_l1
from .optim import Adam, grad_check
from .serialize import load_arrays, save_arrays
from .tensor import Tensor, no_grad


def _toy_cond(gen, frames, group, cond_channels, n_pad_tokens=0):
    valid = np.ones((frames, group), dtype=bool)
    if n_pad_tokens:
        flat = valid.reshape(-1)
        flat[len(flat) - n_pad_tokens:] = False
        valid = flat.reshape(frames, group)
    return {
        "c_sq": Tensor(gen.normal(size=(frames, cond_channels))),
        "valid": valid,
        "frame_any": valid.any(axis=1),
        "valid_float": valid.astype(np.float64),
        "full_float": np.repeat(valid.all(axis=1)[:, None], group, axis=1).astype(np.float64),
        "n_valid": int(valid.sum()),
    }


def _toy_steps(gen, config, cond_channels, randomize=True):
    steps = [FlowStep(gen, config, cond_channels, parity=k % 2)
             for k in range(config.steps)]
    if randomize:
        for step in steps:
            step.an_log_scale.data = gen.normal(0, 0.3, step.an_log_scale.shape)
            step.an_offset.data = gen.normal(0, 0.5, step.an_offset.shape)
            step.cc_out.weight.data = gen.normal(0, 0.3, step.cc_out.weight.shape)
            step.cc_out.bias.data = gen.normal(0, 0.2, step.cc_out.bias.shape)
    return steps


def _run_steps(steps, x, cond, inverse=False):
    logdet = Tensor(0.0)
    if inverse:
        for step in reversed(steps):
            x = step.generate(x, cond)
        return x, logdet
    for step in steps:
        x, ld = step.normalize(x, cond)
        logdet = logdet + ld
    return x, logdet


def check_op_gradients(trials=2, tolerance=1e-4):
    gen = np.random.default_rng(101)
    worst = 0.0
    for _ in range(trials):
        cases = {
            "add": (lambda ts: (T.add(ts[0], ts[1]) * T.add(ts[0], ts[1])).sum(),
                    [gen.uniform(-2, 2, (3, 4)), gen.uniform(-2, 2, (3, 4))]),
            "add-scalar": (lambda ts: (T.add(ts[0], ts[1]) * T.add(ts[0], ts[1])).sum(),
                           [gen.uniform(-2, 2, (3, 4)), gen.uniform(-2, 2, ())]),
            "sub": (lambda ts: (T.sub(ts[0], ts[1]) * T.sub(ts[0], ts[1])).sum(),
                    [gen.uniform(-2, 2, (3, 4)), gen.uniform(-2, 2, (3, 4))]),
            "mul": (lambda ts: (T.mul(ts[0], ts[1]) * T.mul(ts[0], ts[1])).sum(),
                    [gen.uniform(-2, 2, (3, 4)), gen.uniform(-2, 2, (3, 4))]),
            "exp": (lambda ts: T.exp(ts[0]).sum(), [gen.uniform(-2, 2, (3, 4))]),
            "log": (lambda ts: T.log(ts[0]).sum(), [gen.uniform(0.1, 2, (3, 4))]),
            "tanh": (lambda ts: (T.tanh(ts[0]) * T.tanh(ts[0])).sum(), [gen.uniform(-2, 2, (3, 4))]),
            "sigmoid": (lambda ts: (T.sigmoid(ts[0]) * T.sigmoid(ts[0])).sum(),
                        [gen.uniform(-2, 2, (3, 4))]),
            "softplus": (lambda ts: (T.softplus(ts[0]) * T.softplus(ts[0])).sum(),
                         [gen.uniform(-2, 2, (3, 4))]),
            "matmul": (lambda ts: (T.matmul(ts[0], ts[1]) * T.matmul(ts[0], ts[1])).sum(),
                       [gen.uniform(-2, 2, (3, 4)), gen.uniform(-2, 2, (4, 2))]),
            "conv1d": (lambda ts: (T.conv1d(ts[0], ts[1], 2) * T.conv1d(ts[0], ts[1], 2)).sum(),
                       [gen.uniform(-2, 2, (7, 3)), gen.uniform(-2, 2, (3, 3, 2))]),
            "embedding": (lambda ts: (T.embedding(ts[0], np.array([0, 2, 1, 2]))
                                      * T.embedding(ts[0], np.array([0, 2, 1, 2]))).sum(),
                          [gen.uniform(-2, 2, (3, 4))]),
            "sum": (lambda ts: T.sum_(T.mul(ts[0], ts[0])), [gen.uniform(-2, 2, (3, 4))]),
            "mean": (lambda ts: T.mean_(T.mul(ts[0], ts[0])), [gen.uniform(-2, 2, (3, 4))]),
            "concat": (lambda ts: (T.concat(ts, axis=1) * T.concat(ts, axis=1)).sum(),
                       [gen.uniform(-2, 2, (3, 2)), gen.uniform(-2, 2, (3, 3))]),
            "slice": (lambda ts: (ts[0][1:3, ::2] * ts[0][1:3, ::2]).sum(),
                      [gen.uniform(-2, 2, (4, 5))]),
            "masked_fill": (lambda ts: (T.masked_fill(ts[0], _MASK, 0.5)
                                        * T.masked_fill(ts[0], _MASK, 0.5)).sum(),
                            [gen.uniform(-2, 2, (3, 4))]),
        }
        for name, (fn, inputs) in cases.items():
            rep = grad_check(fn, inputs, tolerance=tolerance)
            worst = max(worst, rep.max_rel_err)
            if not rep.passed:
                return "op-gradients", False, f"{name}: rel err {rep.max_rel_err:.2e}"
    return "op-gradients", True, f"max rel err {worst:.2e}"


_MASK = np.array([[False, True, False, True]] * 3)


def check_adam_step():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.array([0.5, -1.5])
    opt.step()
    # bias-corrected first step moves each coordinate by lr * g/(|g| + eps)
    expected = np.array([1.0, -2.0]) - 0.1 * np.array([0.5, -1.5]) / (
        np.abs(np.array([0.5, -1.5])) + 1e-8)
    if not np.allclose(p.data, expected, atol=1e-9):
        return "adam-step", False, f"got {p.data}, expected {expected}"
    q = Tensor(np.array([3.0]), requires_grad=True)
    opt2 = Adam([q])
    q.grad = np.zeros(1)
    opt2.step()
    if q.data[0] != 3.0:
        return "adam-step", False, "zero gradient moved the parameter"
    return "adam-step", True, "first-step magnitude and zero-grad fixpoint"


def check_flow_roundtrip(trials=10):
    gen = np.random.default_rng(7)
    worst = 0.0
    for t in range(trials):
        group = int(gen.choice([2, 4]))
        config = FlowConfig(steps=int(gen.integers(2, 5)), group=group, hidden=8,
                            cond_dim=4, seed=int(t))
        cond_ch = 8
        steps = _toy_steps(rng.derive(t, "toy"), config, cond_ch)
        frames = int(gen.integers(2, 6))
        n_pad = int(gen.integers(0, group))
        cond = _toy_cond(gen, frames, group, cond_ch, n_pad_tokens=n_pad)
        y = gen.normal(0, 3, (frames, group))
        y[~cond["valid"]] = 0.0
        with no_grad():
            z, _ = _run_steps(steps, Tensor(y), cond)
            back, _ = _run_steps(steps, z, cond, inverse=True)
        err = np.max(np.abs(back.data - y)) / (1.0 + np.max(np.abs(y)))
        worst = max(worst, err)
    ok = worst <= 1e-6
    return "flow-roundtrip", ok, f"max relative error {worst:.2e} over {trials} toys"


def check_flow_logdet(trials=5):
    gen = np.random.default_rng(17)
    worst = 0.0
    for t in range(trials):
        group = 2
        config = FlowConfig(steps=3, group=group, hidden=6, cond_dim=4, seed=100 + t)
        cond_ch = 6
        steps = _toy_steps(rng.derive(100 + t, "toy"), config, cond_ch)
        frames = int(gen.integers(1, 4))
        cond = _toy_cond(gen, frames, group, cond_ch)
        n = frames * group
        y = gen.normal(0, 2, n)

        def fwd(vec):
            with no_grad():
                z, ld = _run_steps(steps, Tensor(vec.reshape(frames, group)), cond)
            return z.data.reshape(-1), float(ld.data)

        _, analytic = fwd(y)
        h = 1e-6
        jac = np.zeros((n, n))
        for j in range(n):
            up = y.copy()
            up[j] += h
            dn = y.copy()
            dn[j] -= h
            jac[:, j] = (fwd(up)[0] - fwd(dn)[0]) / (2 * h)
        _, numeric = np.linalg.slogdet(jac)
        rel = abs(analytic - numeric) / max(1.0, abs(numeric))
        worst = max(worst, rel)
    ok = worst <= 1e-4
    return "flow-logdet", ok, f"max rel err {worst:.2e} vs numerical Jacobian"


def check_squeeze_roundtrip():
    gen = np.random.default_rng(3)
    for group in (2, 4):
        for n in (1, 5, 8, 13):
            x = gen.normal(size=n)
            padded = pad_to_group(x, group)
            if not np.array_equal(unsqueeze(squeeze(padded, group)), padded):
                return "squeeze-roundtrip", False, f"n={n} group={group}"
    return "squeeze-roundtrip", True, "unsqueeze(squeeze(x)) == x"


def check_metric_oracles(trials=200):
    gen = np.random.default_rng(23)
    for _ in range(trials):
        tp, fp, fn = (int(x) for x in gen.integers(0, 30, 3))
        beta = float(gen.uniform(0.1, 2.0))
        p, r, f = fbeta(tp, fp, fn, beta)
        ep = tp / (tp + fp) if tp + fp else 0.0
        er = tp / (tp + fn) if tp + fn else 0.0
        ef = ((1 + beta ** 2) * ep * er / (beta ** 2 * ep + er)
              if (beta ** 2 * ep + er) > 0 else 0.0)
        if abs(p - ep) > 1e-12 or abs(r - er) > 1e-12 or abs(f - ef) > 1e-12:
            return "metric-oracles", False, f"fbeta({tp},{fp},{fn},{beta})"
    for _ in range(trials):
        a = gen.integers(0, 20, 30).astype(float)
        b = gen.integers(0, 20, 30).astype(float)
        if a.sum() == 0 or b.sum() == 0:
            continue
        got = jsd_histograms(a, b)
        pa, pb = a / a.sum(), b / b.sum()
        m = 0.5 * (pa + pb)
        want = 0.0
        for i in range(len(a)):
            if pa[i] > 0:
                want += 0.5 * pa[i] * math.log(pa[i] / m[i])
            if pb[i] > 0:
                want += 0.5 * pb[i] * math.log(pb[i] / m[i])
        if abs(got - want) > 1e-12:
            return "metric-oracles", False, "jsd mismatch"
    for _ in range(trials):
        n = int(gen.integers(1, 40))
        pred = gen.integers(0, 30, n).astype(float)
        targ = gen.integers(0, 30, n).astype(float)
        q = float(gen.uniform(1, 100))
        got = percentile_l1(pred, targ, q)
        errs = sorted(abs(float(x) - float(y)) for x, y in zip(pred, targ))
        want = errs[math.ceil((n - 1) * q / 100.0)]
        if abs(got - want) > 1e-12:
            return "metric-oracles", False, f"percentile q={q}"
    return "metric-oracles", True, f"fbeta/jsd/percentile match brute force on {trials} cases"


def check_serialization():
    gen = np.random.default_rng(31)
    arrays = {"a": gen.normal(size=(3, 4)), "b": gen.normal(size=(7,)),
              "c": np.array(2.5), "ids": np.arange(5, dtype=np.int64)}
    meta = {"kind": "demo", "value": 1.25}
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "x.ckpt")
        save_arrays(path, arrays, meta=meta)
        with open(path, "rb") as fh:
            first = fh.read()
        meta2, arrays2 = load_arrays(path)
        save_arrays(path, arrays2, meta=meta2)
        with open(path, "rb") as fh:
            second = fh.read()
    if first != second:
        return "serialization", False, "round trip is not byte-identical"
    for k in arrays:
        if not np.array_equal(arrays[k], arrays2[k]):
            return "serialization", False, f"array {k} changed"
    return "serialization", True, "byte-identical round trip"


def check_determinism():
    def run():
        gen = rng.derive(99, "selftest")
        x = Tensor(gen.normal(size=(4, 3)), requires_grad=True)
        w = Tensor(gen.normal(size=(3, 2)), requires_grad=True)
        loss = (T.tanh(x @ w) * T.tanh(x @ w)).sum()
        x.zero_grad()
        w.zero_grad()
        loss.backward()
        return float(loss.data), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    ok = l1 == l2 and np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)
    return "determinism", ok, "bit-identical forward and backward on rerun"


ALL_CHECKS = [
    check_op_gradients,
    check_adam_step,
    check_determinism,
    check_squeeze_roundtrip,
    check_flow_roundtrip,
    check_flow_logdet,
    check_metric_oracles,
    check_serialization,
]


def run_selftest(verbose=True):
    """Run every check; returns True when all pass."""
    all_ok = True
    for check in ALL_CHECKS:
        name, ok, detail = check()
        all_ok = all_ok and ok
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return all_ok
