"""Release acceptance checks, one test per criterion.

Each test prints a ``PASS``/``FAIL`` line; the lines are repeated in the
pytest terminal summary. Run on its own with::

    pytest tests/test_acceptance.py -v

Criteria 6 and 7 train full models and take several minutes each; they are
marked ``slow``.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from talnet import cli
from talnet import segments as seg
from talnet.head import SoIConfig, build_head, classify, cls_loss, soi_pool
from talnet.metrics import PROPOSAL_TIOUS, average_precision, average_recall
from talnet.pipeline import Detector, TrainConfig, build_detector, detect, evaluate_dataset, train
from talnet.receptive_field import derive_rates, empirical_rf
from talnet.spn import DEFAULT_SCALES, SPNConfig, anchor_targets, build_spn, sample_minibatch, scale_logit_fn, spn_forward, spn_loss
from talnet.synth import SynthConfig, generate
from talnet.tensor import (
    ParamStore,
    Tensor,
    conv1d,
    linear,
    maxpool1d,
    no_grad,
    record,
    relu,
    smooth_l1,
    softmax_cross_entropy,
    total,
)

ROOT = Path(__file__).resolve().parents[1]
REPORT_DIR = ROOT / "build" / "acceptance"
RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS.append(line)
    print(line)


def write_manifest(name: str, doc: dict) -> Path:
    REPORT_DIR.mkdir(parents=True, exist_ok=True)
    path = REPORT_DIR / f"{name}.manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


@pytest.fixture(scope="module")
def benchmark():
    cfg = SynthConfig.from_dict(json.loads((ROOT / "configs" / "benchmark.json").read_text()))
    return generate(cfg)


# --------------------------------------------------------------------------
# 1. gradients


def weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return total(record(out.data * w, (out,), lambda g: (g * w,)))


def check_leaves(build, arrays) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    build(leaves).backward()
    worst = 0.0
    for leaf in leaves:
        with no_grad():
            num = oracles.numerical_grad(lambda: build(leaves).item(), leaf.data, eps=1e-6)
        worst = max(worst, oracles.rel_error(leaf.grad, num))
    return worst


def check_store(store: ParamStore, loss_fn) -> float:
    store.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for _, t in store.items():
        with no_grad():
            num = oracles.numerical_grad(lambda: loss_fn().item(), t.data, eps=1e-6)
        worst = max(worst, oracles.rel_error(t.grad, num))
    return worst


def case_conv(rng):
    T, din, dout = rng.integers(3, 12), rng.integers(1, 4), rng.integers(1, 4)
    k, d = rng.choice([1, 3, 5]), rng.integers(1, 4)
    w = rng.normal(size=(T, dout))
    return check_leaves(
        lambda L: weighted(conv1d(L[0], L[1], L[2], int(d)), w),
        [rng.normal(size=(T, din)), rng.normal(size=(k, din, dout)), rng.normal(size=dout)],
    )


def case_pool(rng):
    T, D, k = rng.integers(2, 12), rng.integers(1, 4), rng.integers(1, 6)
    w = rng.normal(size=(T, D))
    return check_leaves(lambda L: weighted(maxpool1d(L[0], int(k)), w), [rng.normal(size=(T, D))])


def case_relu(rng):
    shape = tuple(rng.integers(1, 6, size=rng.integers(1, 3)))
    w = rng.normal(size=shape)
    return check_leaves(lambda L: weighted(relu(L[0]), w), [rng.normal(size=shape)])


def case_linear(rng):
    n, din, dout = rng.integers(1, 6), rng.integers(1, 5), rng.integers(1, 5)
    lead = (n,) if rng.random() < 0.5 else (n, int(rng.integers(1, 4)))
    w = rng.normal(size=lead + (dout,))
    return check_leaves(
        lambda L: weighted(linear(L[0], L[1], L[2]), w),
        [rng.normal(size=lead + (din,)), rng.normal(size=(din, dout)), rng.normal(size=dout)],
    )


def case_softmax_ce(rng):
    n, c = rng.integers(1, 8), rng.integers(2, 6)
    labels = rng.integers(0, c, size=n)
    return check_leaves(lambda L: softmax_cross_entropy(L[0], labels), [rng.normal(scale=2, size=(n, c))])


def case_smooth_l1(rng):
    n = rng.integers(1, 8)
    target = rng.normal(scale=2, size=(n, 2))
    return check_leaves(lambda L: smooth_l1(L[0], target), [rng.normal(scale=2, size=(n, 2))])


def case_soi(rng):
    T, D = int(rng.integers(4, 20)), int(rng.integers(1, 4))
    n = int(rng.integers(1, 5))
    starts = rng.uniform(0, T - 0.5, n)
    props = np.stack([starts, np.minimum(starts + rng.uniform(0.3, T, n), T)], 1)
    cfg = SoIConfig(1, output_bins=int(rng.integers(1, 7)), context=bool(rng.random() < 0.5))
    w = rng.normal(size=(n, cfg.output_bins, D))
    return check_leaves(lambda L: weighted(soi_pool(L[0], props, cfg), w), [rng.normal(size=(T, D))])


def case_spn(rng):
    scales = tuple(sorted(rng.choice(DEFAULT_SCALES, size=int(rng.integers(1, 3)), replace=False).tolist()))
    cfg = SPNConfig(anchor_scales=scales, hidden_width=3, context=bool(rng.random() < 0.5))
    D = int(rng.integers(1, 3))
    store = ParamStore("wide")
    net = build_spn(cfg, D, store, rng)
    for _, t in store.items():  # nonzero biases so every path carries gradient
        t.data[...] = rng.normal(scale=0.5, size=t.shape)
    T = int(rng.integers(12, 30))
    x = rng.normal(size=(T, D))
    s = float(rng.integers(0, T - 4))
    tg = anchor_targets(T, cfg, np.array([[s, s + float(rng.integers(1, 5))]]))
    sample = sample_minibatch(tg.labels == seg.POSITIVE, tg.labels == seg.NEGATIVE, 32, 0.5, rng)
    return check_store(store, lambda: spn_loss(spn_forward(net, x), tg, sample=sample))


def case_head(rng):
    C, D, T = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(6, 20))
    cfg = SoIConfig(C, output_bins=int(rng.integers(1, 5)), context=bool(rng.random() < 0.5), hidden_width=3)
    store = ParamStore("wide")
    head = build_head(cfg, D, store, rng)
    for _, t in store.items():
        t.data[...] = rng.normal(scale=0.5, size=t.shape)
    n = int(rng.integers(1, 5))
    starts = rng.uniform(0, T - 1, n)
    props = np.stack([starts, np.minimum(starts + rng.uniform(0.5, T, n), T)], 1)
    labels = rng.integers(0, C + 1, n)
    targets = rng.normal(size=(n, 2))
    x = Tensor(rng.normal(size=(T, D)))
    return check_store(store, lambda: cls_loss(*classify(head, x, props), labels, targets))


GRAD_CASES = {
    "conv1d": case_conv,
    "maxpool1d": case_pool,
    "relu": case_relu,
    "linear": case_linear,
    "softmax_ce": case_softmax_ce,
    "smooth_l1": case_smooth_l1,
    "soi_pool": case_soi,
    "spn": case_spn,
    "head": case_head,
}


def test_criterion_1_gradients():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = {}
    for name, case in GRAD_CASES.items():
        worst[name] = max(case(rng) for _ in range(20))
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v < 1e-5}
    ok = not bad and elapsed < 60
    report(1, ok, f"9 ops x 20 shapes, worst rel err {max(worst.values()):.1e}, {elapsed:.1f}s" + (f", failing {bad}" if bad else ""))
    assert not bad
    assert elapsed < 60


# --------------------------------------------------------------------------
# 2. receptive fields


def test_criterion_2_receptive_fields():
    mismatches = []
    for context in (False, True):
        cfg = SPNConfig(hidden_width=3, context=context)
        store = ParamStore("wide")
        net = build_spn(cfg, 2, store, np.random.default_rng(0))
        for k, s in enumerate(cfg.anchor_scales):
            want = derive_rates(s, context).rf
            got = empirical_rf(scale_logit_fn(net, k), 4 * want + 9, 2)
            if got != want:
                mismatches.append((s, context, got, want))
    for variant, want in (("single", 1), ("single-tconv", 5), ("multi-tconv", 5)):
        cfg = SPNConfig(hidden_width=3, variant=variant)
        net = build_spn(cfg, 2, ParamStore("wide"), np.random.default_rng(0))
        for k in range(len(cfg.anchor_scales)):
            got = empirical_rf(scale_logit_fn(net, k), 31, 2)
            if got != want:
                mismatches.append((variant, k, got, want))
    report(2, not mismatches, "18 dilated towers, Single=1, TConv=5" + (f"; mismatches {mismatches}" if mismatches else ""))
    assert not mismatches


# --------------------------------------------------------------------------
# 3. geometry and metric oracles


def rand_rows(rng, n, span=40.0):
    s = rng.uniform(0, span, n).round(1)
    return np.stack([s, s + rng.uniform(0.5, 10, n).round(1)], 1)


def test_criterion_3_oracles():
    rng = np.random.default_rng(99)
    fails = {"tiou": 0, "nms": 0, "match_anchors": 0, "ar": 0, "ap": 0}
    N = 500
    for _ in range(N):
        a, b = rand_rows(rng, 8), rand_rows(rng, 5)
        m = seg.tiou_matrix(a, b)
        if any(abs(m[i, j] - oracles.tiou(a[i], b[j])) > 1e-9 for i in range(8) for j in range(5)):
            fails["tiou"] += 1

        rows = rand_rows(rng, int(rng.integers(0, 30)))
        scores = rng.integers(0, 8, len(rows)) / 8
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        if seg.nms_indices(rows, scores, thr).tolist() != oracles.nms([tuple(r) for r in rows], list(scores), thr):
            fails["nms"] += 1

        T = int(rng.integers(4, 16))
        anchors = seg.anchor_grid(T, sorted(rng.choice([1, 2, 3, 5], size=2, replace=False).tolist()))
        gts = rand_rows(rng, int(rng.integers(0, 4)), span=T)
        labels, matched = seg.match_anchors(anchors, gts)
        ol, om = oracles.match_anchors([tuple(x) for x in anchors], [tuple(g) for g in gts])
        if labels.tolist() != ol or matched.tolist() != om:
            fails["match_anchors"] += 1

        g, p, og, op, dets = {}, {}, {}, {}, []
        for v in range(int(rng.integers(1, 4))):
            gr = rand_rows(rng, int(rng.integers(1, 4)))
            lab = rng.integers(1, 3, len(gr))
            pr = rand_rows(rng, int(rng.integers(0, 15)))
            sc = rng.integers(0, 10, len(pr)) / 10
            g[f"v{v}"] = (gr, lab)
            p[f"v{v}"] = (pr, sc)
            og[f"v{v}"] = [(x, y, int(c)) for (x, y), c in zip(gr, lab)]
            op[f"v{v}"] = [(x, y, s) for (x, y), s in zip(pr, sc)]
            dets += [(f"v{v}", float(x), float(y), float(s), int(c)) for (x, y), s, c in zip(pr, sc, rng.integers(1, 3, len(pr)))]
        an = int(rng.choice([1, 3, 10]))
        if abs(average_recall(p, g, an) - oracles.average_recall(op, {k: [r[:2] for r in v] for k, v in og.items()}, an, PROPOSAL_TIOUS)) > 1e-9:
            fails["ar"] += 1
        thr = float(rng.choice([0.1, 0.5, 0.7]))
        for c in (1, 2):
            if any(c == r[2] for rows_ in og.values() for r in rows_):
                if abs(average_precision(dets, g, c, thr) - oracles.average_precision(dets, og, c, thr)) > 1e-9:
                    fails["ap"] += 1
    spot = average_precision(
        [("v", 0.0, 4.0, 0.9, 1), ("v", 20.0, 24.0, 0.8, 1), ("v", 10.0, 14.0, 0.7, 1)],
        {"v": (np.array([[0.0, 4.0], [10.0, 14.0]]), np.array([1, 1]))}, 1, 0.5,
    )
    ok = not any(fails.values()) and abs(spot - 5 / 6) < 1e-12
    report(3, ok, f"{N} instances per check, mismatches {fails}, AP spot {spot:.4f}")
    assert not any(fails.values())
    assert spot == pytest.approx(5 / 6, abs=1e-12)


# --------------------------------------------------------------------------
# 4. offsets


def test_criterion_4_offsets():
    rng = np.random.default_rng(4)
    n = 10_000
    c, l = rng.uniform(-100, 100, n), rng.uniform(0.05, 200, n)
    ca, la = rng.uniform(-100, 100, n), rng.uniform(0.05, 200, n)
    g = np.stack([c - l / 2, c + l / 2], 1)
    a = np.stack([ca - la / 2, ca + la / 2], 1)
    err = float(np.abs(seg.decode(seg.encode(g, a), a) - g).max())
    anchor = seg.Anchor(12.5, 8.0)
    o = seg.encode_offsets(seg.Segment(12.5 + 0.8 - 4, 12.5 + 0.8 + 4), anchor)
    spot = max(abs(o.center_shift - 1.0), abs(o.log_scale))
    ok = err <= 1e-9 and spot <= 1e-12
    report(4, ok, f"round-trip max err {err:.1e} over {n} pairs, spot err {spot:.1e}")
    assert err <= 1e-9
    assert spot <= 1e-12


# --------------------------------------------------------------------------
# 5. fusion degeneracy


def test_criterion_5_fusion_degeneracy():
    cfg = SynthConfig(num_train=0, num_test=10, T=96, D=8, max_instances=4, max_len=12, seed=5)
    videos = generate(cfg).test
    spn_cfg = SPNConfig(hidden_width=16, context=True)
    soi_cfg = SoIConfig(3, context=True, hidden_width=16)
    single = build_detector(spn_cfg, soi_cfg, 8, "single", seed=1)
    late = Detector("late", spn_cfg, soi_cfg, 8, [single.streams[0]] * 2)
    worst, same = 0.0, True
    for v in videos:
        a = detect(single, v.stream_a).detections
        b = detect(late, v.stream_a, v.stream_a).detections
        for (ra, ca, sa), (rb, cb, sb) in zip(a, b):
            same &= ca == cb and ra.shape == rb.shape
            if same and len(ra):
                worst = max(worst, float(np.abs(ra - rb).max()))
                same &= bool(np.array_equal(np.argsort(-sa, kind="stable"), np.argsort(-sb, kind="stable")))
        same &= len(a) == len(b)
    ok = same and worst <= 1e-6
    report(5, ok, f"{len(videos)} videos, max segment diff {worst:.1e}, labels/order identical={same}")
    assert same and worst <= 1e-6


# --------------------------------------------------------------------------
# 6. end-to-end benchmark


@pytest.mark.slow
def test_criterion_6_benchmark(benchmark):
    spn_cfg = SPNConfig(hidden_width=64, context=True, variant="multi-dilated")
    soi_cfg = SoIConfig(benchmark.config.num_classes, context=True, hidden_width=64)
    train_cfg = TrainConfig(lr=1e-4, steps=3000, seed=0)
    start = time.perf_counter()
    det = build_detector(spn_cfg, soi_cfg, benchmark.config.D, "late", seed=0)
    train(det, benchmark.train, train_cfg)
    res = evaluate_dataset(det, benchmark.test)
    elapsed = time.perf_counter() - start
    m50, ar100 = res.mean_ap(0.5), res.ar[100]
    write_manifest("benchmark", {"mAP@0.5": m50, "AR": {str(k): v for k, v in res.ar.items()}, "seconds": elapsed,
                                 "steps": train_cfg.steps, "hidden_width": 64, "mode": "late"})
    ok = m50 >= 0.60 and ar100 >= 0.70 and elapsed < 900
    report(6, ok, f"mAP@0.5 {m50:.3f} (>=0.60), AR@100 {ar100:.3f} (>=0.70), {elapsed:.0f}s (<900)")
    assert m50 >= 0.60
    assert ar100 >= 0.70
    assert elapsed < 900


# --------------------------------------------------------------------------
# 7. ablation trend

ABLATION_STEPS = 1500


def ablation_run(data, variant: str, context: bool, seed: int) -> dict:
    spn_cfg = SPNConfig(hidden_width=64, context=context, variant=variant)
    soi_cfg = SoIConfig(data.config.num_classes, context=context, hidden_width=64)
    det = build_detector(spn_cfg, soi_cfg, data.config.D, "single", seed=seed)
    train(det, data.train, TrainConfig(lr=1e-4, steps=ABLATION_STEPS, seed=seed))
    res = evaluate_dataset(det, data.test)
    return {"AR@50": res.ar[50], "mAP@0.5": res.mean_ap(0.5)}


@pytest.mark.slow
def test_criterion_7_ablation(benchmark):
    seeds = (0, 1, 2)
    runs = {
        name: [ablation_run(benchmark, variant, ctx, s) for s in seeds]
        for name, variant, ctx in (
            ("multi-dilated+context", "multi-dilated", True),
            ("single+context", "single", True),
            ("multi-dilated", "multi-dilated", False),
        )
    }
    mean = {name: {k: float(np.mean([r[k] for r in rs])) for k in rs[0]} for name, rs in runs.items()}
    ar_gap = mean["multi-dilated+context"]["AR@50"] - mean["single+context"]["AR@50"]
    ctx_gap = mean["multi-dilated+context"]["mAP@0.5"] - mean["multi-dilated"]["mAP@0.5"]
    soft_ok = ar_gap >= 0 and ctx_gap >= -0.02
    hard_ok = ar_gap >= -0.05 and ctx_gap >= -0.02 - 0.05
    write_manifest("ablation", {"seeds": list(seeds), "steps": ABLATION_STEPS, "mode": "single",
                                "runs": runs, "mean": mean, "ar50_gap": ar_gap, "map50_context_gap": ctx_gap,
                                "trend_holds": soft_ok})
    report(7, hard_ok, f"AR@50 MultiDilated-Single {ar_gap:+.3f}, mAP@0.5 context on-off {ctx_gap:+.3f}, trend holds={soft_ok}")
    assert hard_ok


# --------------------------------------------------------------------------
# 8. determinism


def test_criterion_8_determinism(tmp_path):
    synth = {"num_train": 6, "num_test": 3, "T": 64, "D": 6, "num_classes": 2, "max_instances": 3, "max_len": 8, "seed": 21}
    (tmp_path / "synth.json").write_text(json.dumps(synth))
    assert cli.main(["synth", "--config", str(tmp_path / "synth.json"), "--out", str(tmp_path / "data")]) == 0
    data = str(tmp_path / "data")
    for run in ("a", "b"):
        out = tmp_path / run
        out.mkdir()
        assert cli.main(["train", "--data", data, "--hidden", "16", "--steps", "40", "--out", str(out / "m.talc")]) == 0
        assert cli.main(["propose", "--ckpt", str(out / "m.talc"), "--data", data, "--out", str(out / "p.jsonl")]) == 0
        assert cli.main(["detect", "--ckpt", str(out / "m.talc"), "--data", data, "--out", str(out / "d.jsonl")]) == 0
        assert cli.main(["eval-proposals", "--proposals", str(out / "p.jsonl"), "--data", data, "--out", str(out / "ar.csv")]) == 0
        assert cli.main(["eval-detections", "--detections", str(out / "d.jsonl"), "--data", data, "--out", str(out / "ap.csv")]) == 0
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in ("m.talc", "ar.csv", "ap.csv")}
    report(8, all(same.values()), f"byte-identical {same}")
    assert all(same.values())
