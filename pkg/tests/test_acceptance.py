"""Acceptance criteria 1-11, each reporting one PASS/FAIL line.

Run under pytest (lines appear in the terminal summary) or directly with
``python tests/test_acceptance.py``.
"""

import functools
import itertools
import json
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_log import LINES  # noqa: E402
from oracles import brute_mean, densify_row_updates  # noqa: E402

from fedselect.config import config_from_dict  # noqa: E402
from fedselect.delivery import DeliveryMode, deliver  # noqa: E402
from fedselect.experiment import run_experiment  # noqa: E402
from fedselect.fedcore import aggregate_mean_deselect, broadcast, clients, fed_select, server  # noqa: E402
from fedselect.models import (  # noqa: E402
    MLP,
    DenseBatch,
    ParamPacker,
    SparseBatch,
    SparseExample,
    SparseLogReg,
    grad_check,
    loss_and_grad_logreg,
    loss_and_grad_mlp,
)
from fedselect.selection import (  # noqa: E402
    BlockedParams,
    Layout,
    NeuronSelect,
    RowSelect,
    flatten_multikey_plan,
    fuse_broadcast_into_select,
    merge_select_plans,
)

SEEDS = (0, 1, 2)
TAG_TRAINING = {"rounds": 200, "client_lr": 0.1, "server_lr": 1.0, "eval_every": 20}


def report(number, title, passed, detail):
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} {title} ({detail})"
    LINES.append(line)
    print(line)
    assert passed, line


def curves(rows, phase="valid"):
    """{round: value} for one metric of one trial."""
    return {r.round: r.value for r in rows if r.phase == phase}


def final(rows):
    (value,) = [r.value for r in rows if r.phase == "test"]
    return value


# 1 baseline equivalence


def test_c1_identity_plan_matches_baseline():
    start = time.perf_counter()
    worst = 0.0
    tasks = [({"kind": "synthetic_tag"}, "sparse_logreg"), ({"kind": "synthetic_dense"}, {"kind": "mlp", "hidden": 16})]
    for (task, model), opt in itertools.product(tasks, ("sgd", "adagrad", "adam")):
        doc = {"task": task, "model": model, "training": {"rounds": 20, "optimizer": opt, "eval_every": 20}}
        base, ident = {}, {}
        run_experiment(config_from_dict(doc), history=base)
        run_experiment(config_from_dict(dict(doc, selection={"plan": "identity"})), history=ident)
        assert len(base[0]) == len(ident[0]) == 20
        for a, b in zip(base[0], ident[0]):
            worst = max(worst, float(np.max(np.abs(a - b))))
    dt = time.perf_counter() - start
    report(1, "identity plan equals broadcast baseline", worst <= 1e-12 and dt < 60,
           f"max per-round diff {worst:.3g}, {dt:.1f}s")


# 2 support equivalence


def test_c2_full_support_keys_match_full_training():
    start = time.perf_counter()
    task = {"kind": "synthetic_tag", "clients": 30, "vocab": 200, "tags": 10}
    doc = {"task": task, "model": "sparse_logreg", "training": {"rounds": 10, "eval_every": 10}}
    base, sel = {}, {}
    run_experiment(config_from_dict(doc), history=base)
    run_experiment(config_from_dict(dict(doc, selection={"plan": "row", "strategy": "top", "m": 200})), history=sel)
    diff = float(np.max(np.abs(base[0][-1] - sel[0][-1])))
    dt = time.perf_counter() - start
    report(2, "structured keys over full support equal full training", diff <= 1e-9 and dt < 60,
           f"max diff after 10 rounds {diff:.3g}, {dt:.1f}s")


# 3 deselect oracle


def test_c3_deselect_matches_brute_force():
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    worst = 0.0
    dupes = 0
    for _ in range(1000):
        n_clients = int(rng.integers(1, 9))
        n_cols = int(rng.integers(1, 5))
        rows = int(rng.integers(1, 32 // n_cols + 1))
        plan = RowSelect(Layout([("W", (rows, n_cols))]), "W")
        keys = [[int(k) for k in rng.integers(0, rows, size=int(rng.integers(0, 7)))] for _ in range(n_clients)]
        ups = [[rng.standard_normal(n_cols) for _ in seq] for seq in keys]
        dupes += sum(len(seq) != len(set(seq)) for seq in keys)
        cohort = [int(c) for c in rng.permutation(50)[:n_clients]]
        got = aggregate_mean_deselect(clients(ups, cohort), clients(keys, cohort), plan).payload
        ref = brute_mean([densify_row_updates(rows * n_cols, n_cols, k, u) for k, u in zip(keys, ups)])
        worst = max(worst, float(np.max(np.abs(got - ref))))
    dt = time.perf_counter() - start
    report(3, "deselect mean equals densify-then-mean", worst <= 1e-12 and dupes > 0 and dt < 10,
           f"1000 instances, {dupes} with duplicate keys, max diff {worst:.3g}, {dt:.1f}s")


# 4 composition laws


def _same(a, b):
    if isinstance(a, (tuple, list)):
        return isinstance(b, (tuple, list)) and len(a) == len(b) and all(_same(p, q) for p, q in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def test_c4_composition_laws_exhaustive():
    start = time.perf_counter()
    layout = Layout([("R", (4, 2)), ("W1", (2, 3)), ("b1", (3,)), ("W2", (3, 2)), ("y", (2,), True)])
    x = BlockedParams(layout, np.random.default_rng(4).standard_normal(layout.size))
    rows, neurons = RowSelect(layout, "R"), NeuronSelect(layout, "W1", "b1", "W2")
    ok = True
    checked = 0

    fused = fuse_broadcast_into_select(rows, "y")
    for k1, k2 in itertools.product(range(rows.K), repeat=2):
        keys = clients([[k1], [k2, k1]])
        got = fed_select(server(x), keys, fused)
        sel = fed_select(server(x), keys, rows)
        bc = broadcast(server(x["y"].copy()), [0, 1])
        ok &= all(_same(g, (s, bc[c])) for c in range(2) for g, s in zip(got[c], sel[c]))
        checked += 1

    merged = merge_select_plans(rows, neurons)
    assert merged.K <= 16
    for k1, k2 in itertools.product(range(rows.K), range(neurons.K)):
        ok &= _same(merged.psi(x, merged.encode(k1, k2)), (rows.psi(x, k1), neurons.psi(x, k2)))
        checked += 1

    rng = np.random.default_rng(5)
    for plan in (rows, neurons):
        flat = flatten_multikey_plan(plan, 2)
        assert flat.K <= 16
        for z in itertools.product(range(plan.K), repeat=2):
            code = flat.encode(list(z))
            single = fed_select(server(x), clients([[code]]), flat)[0][0]
            multi = fed_select(server(x), clients([list(z)]), plan)[0]
            ok &= _same(single, multi)
            if plan is rows:
                ups = [rng.standard_normal(2) for _ in z]
                a = aggregate_mean_deselect(clients([[ups]]), clients([[code]]), flat).payload
                b = aggregate_mean_deselect(clients([ups]), clients([list(z)]), plan).payload
                ok &= np.array_equal(a, b)
            checked += 1
    dt = time.perf_counter() - start
    report(4, "fuse, merge and flatten equal unfused paths", bool(ok) and dt < 10,
           f"{checked} exhaustive cases, {dt:.2f}s")


# 5 gradient checks


def _flat(fn, params, batch):
    packer = ParamPacker(params)

    def f(v):
        loss, grads = fn(packer.unpack(v), batch)
        return loss, packer.pack(grads)

    return f, packer.pack(params)


def test_c5_gradient_checks():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    examples = []
    for _ in range(30):
        idx = np.sort(rng.choice(80, size=int(rng.integers(5, 25)), replace=False))
        labels = frozenset(rng.choice(6, size=int(rng.integers(1, 3)), replace=False).tolist())
        examples.append(SparseExample(tuple(idx.tolist()), tuple(rng.uniform(0.5, 2, idx.size).tolist()), labels))
    f_lr, x_lr = _flat(loss_and_grad_logreg, SparseLogReg(80, 6).init(rng).as_dict(),
                       SparseBatch.from_examples(examples, 6))
    dense = DenseBatch(rng.standard_normal((30, 12)), rng.integers(0, 4, 30), 4)
    f_mlp, x_mlp = _flat(loss_and_grad_mlp, MLP(12, 10, 4).init(rng).as_dict(), dense)
    lr = grad_check(f_lr, x_lr, n_coords=100, rng=rng)
    mlp = grad_check(f_mlp, x_mlp, n_coords=100, rng=rng)

    def corrupted(v):
        loss, g = f_mlp(v)
        g = g.copy()
        g[::7] *= 1.01
        return loss, g

    bad = grad_check(corrupted, x_mlp, n_coords=100, rng=rng)
    dt = time.perf_counter() - start
    passed = lr.passed and mlp.passed and lr.n_checked >= 100 and mlp.n_checked >= 100 and not bad.passed
    report(5, "analytic gradients match central differences", passed and dt < 30,
           f"logreg err {lr.max_rel_error:.2g}, mlp err {mlp.max_rel_error:.2g}, "
           f"corrupted err {bad.max_rel_error:.2g}, {dt:.1f}s")


# 6 and 8 tag-task trends


@functools.lru_cache(maxsize=None)
def tag_run(strategy, m, seed):
    # 200 test clients: with 20, held-out noise (about 0.01) swamps the trend gaps
    doc = {"task": {"kind": "synthetic_tag", "seed": seed, "test_clients": 200}, "model": "sparse_logreg",
           "selection": {"plan": "row", "strategy": strategy, "m": m},
           "training": dict(TAG_TRAINING, seed=seed)}
    return tuple(run_experiment(config_from_dict(doc)))


def test_c6_model_size_reduction_keeps_recall():
    start = time.perf_counter()
    full = np.mean([final(tag_run("top", 500, s)) for s in SEEDS])
    tenth = np.mean([final(tag_run("top", 50, s)) for s in SEEDS])
    fiftieth = np.mean([final(tag_run("top", 10, s)) for s in SEEDS])
    dt = time.perf_counter() - start
    passed = abs(tenth - full) <= 0.02 and tenth - fiftieth >= 0.02
    report(6, "m=n/10 keeps recall@5 while m=n/50 loses it", passed and dt < 600,
           f"recall@5 m=500 {full:.4f}, m=50 {tenth:.4f}, m=10 {fiftieth:.4f}, {dt:.0f}s")


def test_c8_top_keys_dominate_random():
    start = time.perf_counter()
    mean_curves = {}
    for strategy in ("top", "random", "random_top"):
        per_seed = [curves(tag_run(strategy, 10, s)) for s in SEEDS]
        rounds = sorted(per_seed[0])
        mean_curves[strategy] = {t: np.mean([c[t] for c in per_seed]) for t in rounds}
    rounds = sorted(mean_curves["top"])
    margin = min(mean_curves["top"][t] - mean_curves["random"][t] for t in rounds)
    complete = all(len(c) == len(rounds) and len(rounds) >= 2 for c in mean_curves.values())
    dt = time.perf_counter() - start
    last = rounds[-1]
    report(8, "top keys dominate random keys at every eval round", complete and margin >= -0.01 and dt < 600,
           f"min top-random margin {margin:.4f} over {len(rounds)} rounds; final top "
           f"{mean_curves['top'][last]:.4f}, random {mean_curves['random'][last]:.4f}, "
           f"random_top {mean_curves['random_top'][last]:.4f}, {dt:.0f}s")


# 7 neuron-select trend


def test_c7_accuracy_non_decreasing_in_m():
    start = time.perf_counter()
    h = 40
    ms = (h // 20, h // 4, h // 2, h)
    means = []
    for m in ms:
        accs = []
        for s in SEEDS:
            doc = {"task": {"kind": "synthetic_dense", "seed": s}, "model": {"kind": "mlp", "hidden": h},
                   "selection": {"plan": "neuron", "m": m},
                   "training": {"rounds": 200, "client_lr": 0.1, "server_lr": 1.0, "eval_every": 200, "seed": s}}
            accs.append(final(run_experiment(config_from_dict(doc))))
        means.append(float(np.mean(accs)))
    worst_drop = max(a - b for a, b in zip(means, means[1:]))
    dt = time.perf_counter() - start
    report(7, "accuracy non-decreasing in hidden units per client", worst_drop <= 0.01 and dt < 600,
           "accuracy " + ", ".join(f"m={m} {a:.4f}" for m, a in zip(ms, means)) + f", {dt:.0f}s")


# 9 shared vs independent keys


def test_c9_shared_and_independent_keys_emit_curves():
    start = time.perf_counter()
    out = {}
    for shared in (False, True):
        doc = {"task": {"kind": "synthetic_dense"}, "model": {"kind": "mlp", "hidden": 40},
               "selection": {"plan": "neuron", "m": 10, "shared_per_round": shared},
               "training": {"rounds": 60, "client_lr": 0.1, "server_lr": 1.0, "eval_every": 10}}
        out[shared] = curves(run_experiment(config_from_dict(doc)))
    ok = all(len(c) == 6 and all(np.isfinite(v) for v in c.values()) for c in out.values())
    dt = time.perf_counter() - start
    report(9, "shared and independent key runs both emit curves", ok,
           f"final accuracy independent {out[False][60]:.4f}, shared {out[True][60]:.4f}, {dt:.0f}s")


# 10 delivery accounting


def test_c10_delivery_accounting():
    start = time.perf_counter()
    rng = np.random.default_rng(10)
    keys = clients([[1, 2], [2, 3], [2]])

    def model(K, cols=1):
        layout = Layout([("W", (K, cols))])
        return BlockedParams(layout, rng.standard_normal(layout.size)), RowSelect(layout, "W")

    x, plan = model(5)
    _, none = deliver(DeliveryMode("on_demand"), server(x), keys, plan)
    _, cached = deliver(DeliveryMode("on_demand", "per_round"), server(x), keys, plan)
    x100, plan100 = model(100)
    _, pre = deliver(DeliveryMode("pregenerated"), server(x100), keys, plan100)
    _, bc = deliver(DeliveryMode("broadcast_compute"), server(x), keys, plan)
    counters = (none.psi_evals, cached.psi_evals, pre.psi_evals, pre.wasted_slices)
    bc_ok = bc.scalars_down == {c: x.size for c in range(3)}

    xs, ps = model(12, cols=3)
    rand_keys = clients([[int(k) for k in rng.integers(0, 12, size=5)] for _ in range(4)])
    modes = [DeliveryMode("broadcast_compute"), DeliveryMode("on_demand"), DeliveryMode("on_demand", "per_round"),
             DeliveryMode("pregenerated")]
    outs = [deliver(mode, server(xs), rand_keys, ps)[0].payload for mode in modes]
    identical = all(np.array_equal(a, b) for o in outs[1:] for ca, cb in zip(outs[0], o) for a, b in zip(ca, cb))
    dt = time.perf_counter() - start
    report(10, "delivery counters and slices", counters == (5, 3, 100, 97) and bc_ok and identical and dt < 5,
           f"psi_evals none/per_round/pregenerated {counters[:3]}, wasted {counters[3]}, "
           f"broadcast scalars per client {x.size}, slices identical {identical}, {dt:.2f}s")


# 11 determinism


def test_c11_cli_byte_identical_metrics():
    doc = {"task": {"kind": "synthetic_tag", "clients": 20, "vocab": 100},
           "model": "sparse_logreg", "selection": {"plan": "row", "strategy": "random_top", "m": 5},
           "training": {"rounds": 10, "eval_every": 5, "trials": 2, "seed": 7}}
    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / "cfg.json"
        cfg.write_text(json.dumps(doc))
        blobs = []
        for i in range(2):
            out = Path(tmp) / f"run{i}"
            proc = subprocess.run([sys.executable, "-m", "fedselect", "--config", str(cfg), "--output-dir", str(out),
                                   "--quiet"], capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            blobs.append((out / "metrics.csv").read_bytes())
    n_rows = blobs[0].count(b"\n") - 1
    report(11, "same config and seed give byte-identical metrics.csv", blobs[0] == blobs[1],
           f"{len(blobs[0])} bytes, {n_rows} rows")


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_c") and callable(fn):
            try:
                fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
