"""Acceptance suite: one test per criterion, summarized at the end of the pytest run.

Criteria 8 to 11 drive the installed command line end to end and share the
trained runs through module-scoped fixtures, so the whole file takes roughly
three training runs of wall time.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import naive_conv2d, naive_tconv2d, numeric_grad, rel_err, away_from_zero
from segxplain import data as D
from segxplain import lrp as L
from segxplain import network as N
from segxplain import tensor as T
from segxplain import training as TR

criterion = pytest.mark.criterion


def _random_geometry(rng, h, w, exact=False):
    """A geometry giving a non-empty output on an h x w input (exact: no cropped remainder)."""
    while True:
        geom = T.ConvGeometry(tuple(rng.integers(1, 5, 2)), tuple(rng.integers(1, 4, 2)), tuple(rng.integers(0, 3, 2)))
        span = [h + 2 * geom.padding[0] - geom.kernel[0], w + 2 * geom.padding[1] - geom.kernel[1]]
        if min(span) < 0 or max(geom.padding) >= min(geom.kernel):
            continue
        if exact and (span[0] % geom.stride[0] or span[1] % geom.stride[1]):
            continue
        return geom


# --- 1 ----------------------------------------------------------------------------

@criterion(1, "conv2d/tconv2d match naive oracles on 200 random shapes within 1e-5 in < 10 s")
def test_convolution_oracle():
    rng = np.random.default_rng(101)
    worst, started = 0.0, time.perf_counter()
    for _ in range(200):
        n, c, o, h, w = rng.integers(1, 9, 5)
        geom = _random_geometry(rng, h, w)
        x = rng.normal(size=(n, c, h, w)).astype(np.float32)
        wc = rng.normal(size=(o, c, *geom.kernel)).astype(np.float32)
        b = rng.normal(size=o).astype(np.float32)
        got = T.conv2d(x, wc, b, geom)
        worst = max(worst, rel_err(got, naive_conv2d(x, wc, b, geom.stride, geom.padding)))
        wt = rng.normal(size=(c, o, *geom.kernel)).astype(np.float32)
        try:
            got = T.tconv2d(x, wt, b, geom)
        except T.ShapeError:
            continue  # heavy padding can crop a transposed output to nothing
        worst = max(worst, rel_err(got, naive_tconv2d(x, wt, b, geom.stride, geom.padding)))
    elapsed = time.perf_counter() - started
    print(f"worst relative error {worst:.2e}, {elapsed:.2f} s")
    assert worst <= 1e-5
    assert elapsed < 10


# --- 2 ----------------------------------------------------------------------------

def _check_conv_grads(rng, op, backward, transposed):
    n, c, o = rng.integers(1, 4, 3)
    h, w = rng.integers(2, 6, 2)
    geom = _random_geometry(rng, h, w)
    x = rng.normal(size=(n, c, h, w))
    wt = rng.normal(size=(c, o, *geom.kernel) if transposed else (o, c, *geom.kernel))
    b = rng.normal(size=o)
    try:
        probe = rng.normal(size=op(x, wt, b, geom).shape)
    except T.ShapeError:
        return 0.0
    loss = lambda: float(np.sum(op(x, wt, b, geom) * probe))  # noqa: E731
    grads = backward(x, wt, geom, probe)
    return max(rel_err(grads.grad_input, numeric_grad(loss, x)),
               rel_err(grads.grad_weights, numeric_grad(loss, wt)),
               rel_err(grads.grad_bias, numeric_grad(loss, b)))


def _check_activation_grads(rng):
    worst = 0.0
    for kind in T.ACTIVATIONS:
        pre = away_from_zero(rng.normal(size=(2, 3, 3, 3)))
        probe = rng.normal(size=pre.shape)
        loss = lambda: float(np.sum(T.activation(pre, kind) * probe))  # noqa: E731
        worst = max(worst, rel_err(T.activation_backward(pre, kind, probe), numeric_grad(loss, pre)))
    return worst


def _check_loss_grads(rng):
    shape = (2, 1, 2, 2)
    real = rng.uniform(0.05, 0.95, shape)
    fake = rng.uniform(0.05, 0.95, shape)
    _, g_real, g_fake = TR.discriminator_loss(real, fake)
    d_loss = lambda: TR.discriminator_loss(real, fake)[0]  # noqa: E731
    worst = max(rel_err(g_real, numeric_grad(d_loss, real)), rel_err(g_fake, numeric_grad(d_loss, fake)))

    mask = rng.uniform(-1, 1, (2, 1, 4, 4))
    truth = np.where(rng.random(mask.shape) < 0.5, -1.0, 1.0)
    mask = truth + away_from_zero(mask - truth, 0.05)
    lam = 100.0
    g_loss = lambda: (lambda r: r[0] + lam * r[1])(TR.generator_loss(fake, mask, truth, lam))  # noqa: E731
    _, _, g_d, g_mask = TR.generator_loss(fake, mask, truth, lam)
    return max(worst, rel_err(g_d, numeric_grad(g_loss, fake)), rel_err(g_mask, numeric_grad(g_loss, mask)))


@criterion(2, "backward ops and both loss gradients match central differences within 1e-5 in < 30 s")
def test_gradient_checks():
    rng = np.random.default_rng(202)
    worst, started = 0.0, time.perf_counter()
    for _ in range(50):
        worst = max(worst,
                    _check_conv_grads(rng, T.conv2d, T.conv2d_backward, transposed=False),
                    _check_conv_grads(rng, T.tconv2d, T.tconv2d_backward, transposed=True),
                    _check_activation_grads(rng),
                    _check_loss_grads(rng))
    elapsed = time.perf_counter() - started
    print(f"worst relative error {worst:.2e}, {elapsed:.2f} s")
    assert worst <= 1e-5
    assert elapsed < 30


# --- 3 ----------------------------------------------------------------------------

@criterion(3, "<conv(x), y> == <x, tconv(y)> within 1e-4 on 100 random cases")
def test_adjointness():
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(100):
        n, c, o = rng.integers(1, 6, 3)
        h, w = rng.integers(1, 10, 2)
        geom = _random_geometry(rng, h, w, exact=True)
        x = rng.normal(size=(n, c, h, w)).astype(np.float32)
        wt = rng.normal(size=(o, c, *geom.kernel)).astype(np.float32)
        cx = T.conv2d(x, wt, None, geom)
        y = rng.normal(size=cx.shape).astype(np.float32)
        lhs = np.sum(cx.astype(np.float64) * y)
        rhs = np.sum(x.astype(np.float64) * T.tconv2d(y, wt, None, geom))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12))
    print(f"worst relative mismatch {worst:.2e}")
    assert worst <= 1e-4


# --- 4 ----------------------------------------------------------------------------

@criterion(4, "relevance hand example a=[1,2], w=[0.5,0.25] gives [0.5, 0.5]")
def test_lrp_hand_example():
    a = np.array([1.0, 2.0]).reshape(1, 2, 1, 1)
    w = np.array([0.5, 0.25]).reshape(1, 2, 1, 1)
    unit = T.ConvGeometry((1, 1), (1, 1), (0, 0))
    r_prev = L.propagate_linear("conv", a, w, np.zeros(1), unit, np.ones((1, 1, 1, 1)), L.LrpConfig(epsilon=0.0))
    print("R_prev =", r_prev.ravel())
    assert r_prev.ravel().tolist() == [0.5, 0.5]


# --- 5, 6 -------------------------------------------------------------------------

def _desk_generator(seed, zero_bias=False, std=0.1):
    spec = N.build_generator("desk-32")
    params = N.init_params(spec, seed, std=std)
    rng = np.random.default_rng(seed)
    for b in params.biases.values():
        b[...] = 0 if zero_bias else rng.normal(0, 0.05, b.shape)
    x = rng.uniform(-1, 1, (1, 3, 32, 32)).astype(np.float32)
    return spec, params, x


@criterion(5, "desk-32 conservation: every transition leaks <= 1e-3 with zero biases, eps 1e-12, in < 30 s")
def test_lrp_conservation():
    started, worst = time.perf_counter(), 0.0
    config = L.LrpConfig(epsilon=1e-12, target=L.RelevanceTarget.full_output())
    for seed in range(5):
        spec, params, x = _desk_generator(seed, zero_bias=True)
        _, report = L.explain(spec, params, x, config)
        assert all(np.isfinite(v) for v in report.sums.values())
        worst = max(worst, report.max_leakage)
    elapsed = time.perf_counter() - started
    print(f"worst transition leakage {worst:.2e}, {elapsed:.2f} s")
    assert worst <= 1e-3
    assert elapsed < 30


@criterion(6, "relevance is linear in the seed and scales with it, within 1e-4")
def test_lrp_linearity_and_scale():
    config = L.LrpConfig()
    worst_lin = worst_scale = 0.0
    for seed in range(3):
        spec, params, x = _desk_generator(seed)
        _, cache = N.forward(spec, params, x)
        rng = np.random.default_rng(100 + seed)
        s1, s2 = (rng.normal(size=(1, 1, 32, 32)).astype(np.float32) for _ in range(2))
        m1, m2 = (L.propagate(spec, params, cache, s, config) for s in (s1, s2))
        m12 = L.propagate(spec, params, cache, s1 + s2, config)
        scaled = L.propagate(spec, params, cache, np.float32(3.5) * s1, config)
        for name in m1.order:
            worst_lin = max(worst_lin, rel_err(m12[name], m1[name] + m2[name]))
            worst_scale = max(worst_scale, rel_err(scaled[name], 3.5 * m1[name]))
    print(f"linearity {worst_lin:.2e}, scale {worst_scale:.2e}")
    assert worst_lin <= 1e-4
    assert worst_scale <= 1e-4


# --- 7 ----------------------------------------------------------------------------

@criterion(7, "dice == 2J/(1+J) on 1000 random pairs; hand case gives J 1/3, dice 0.5, acc 0.5")
def test_metric_identities():
    rng = np.random.default_rng(707)
    worst = 0.0
    for _ in range(1000):
        h, w = rng.integers(1, 17, 2)
        p_fg, t_fg = rng.random(2)
        pred = np.where(rng.random((1, h, w)) < p_fg, 1.0, -1.0)
        truth = np.where(rng.random((1, h, w)) < t_fg, 1.0, -1.0)
        m = D.metrics(D.confusion(pred, truth))
        if m.flag != "both_empty":
            worst = max(worst, abs(m.dice - 2 * m.jaccard / (1 + m.jaccard)))
    truth = np.array([[[1.0, 1.0], [-1.0, -1.0]]])
    pred = np.array([[[-1.0, 1.0], [-1.0, 1.0]]])
    counts = D.confusion(pred, truth)
    hand = D.metrics(counts)
    print(f"worst identity gap {worst:.1e}; hand case {hand}")
    assert worst <= 1e-9
    assert (counts.tp, counts.fp, counts.fn, counts.tn) == (1, 1, 1, 1)
    assert hand.jaccard == pytest.approx(1 / 3, abs=1e-12)
    assert hand.dice == pytest.approx(0.5, abs=1e-12)
    assert hand.accuracy == pytest.approx(0.5, abs=1e-12)


# --- 8 to 11: command line, end to end --------------------------------------------

def _cli(*args, cwd):
    proc = subprocess.run([sys.executable, "-m", "segxplain", *args], cwd=cwd, capture_output=True, text=True)
    assert proc.returncode == 0, f"{args[0]} failed ({proc.returncode}):\n{proc.stderr}"
    return proc.stdout


def _desk_run(root: Path, kind: str) -> dict:
    """gen-data, train and eval as in the acceptance recipe, then infer and explain."""
    root.mkdir(parents=True)
    started = time.perf_counter()
    _cli("gen-data", "--kind", kind, "--count", "80", "--size", "32", "--seed", "1", "--out", "data", cwd=root)
    _cli("train", "--manifest", "data/train.tsv", "--run", "run", "--profile", "desk-32",
         "--epochs", "200", "--seed", "1", cwd=root)
    out = _cli("eval", "--manifest", "data/test.tsv", "--checkpoint", "run/gen.ckpt", cwd=root)
    elapsed = time.perf_counter() - started
    header, values = out.strip().splitlines()[-2:]
    scores = dict(zip(header.split("\t")[1:], values.split("\t")[1:]))
    _cli("infer", "--checkpoint", "run/gen.ckpt", "--manifest", "data/test.tsv", "--out", "pred", cwd=root)
    first_test = (root / "data/test.tsv").read_text().split("\t", 2)[1]
    explain_out = _cli("explain", "--checkpoint", "run/gen.ckpt", "--image", f"data/{first_test}",
                       "--out", "explain", "--all-layers", "--raw", cwd=root)
    return {"root": root, "seconds": elapsed, "dice": float(scores["dice"]),
            "accuracy": float(scores["accuracy"]), "explain_stdout": explain_out,
            "explained_id": Path(first_test).stem}


@pytest.fixture(scope="module")
def instrument_run(tmp_path_factory):
    return _desk_run(tmp_path_factory.mktemp("accept") / "instrument", "instrument")


@pytest.fixture(scope="module")
def instrument_repeat(tmp_path_factory):
    return _desk_run(tmp_path_factory.mktemp("accept") / "instrument_repeat", "instrument")


@pytest.fixture(scope="module")
def polyp_run(tmp_path_factory):
    return _desk_run(tmp_path_factory.mktemp("accept") / "polyp", "polyp")


@pytest.mark.slow
@criterion(8, "instrument desk run: dice >= 0.75, accuracy >= 0.90, gen-data+train+eval <= 10 min")
def test_end_to_end_instrument(instrument_run):
    r = instrument_run
    print(f"dice {r['dice']:.4f}  accuracy {r['accuracy']:.4f}  runtime {r['seconds']:.0f} s")
    assert r["dice"] >= 0.75
    assert r["accuracy"] >= 0.90
    assert r["seconds"] <= 600


@pytest.mark.slow
@criterion(9, "polyp desk run scores a strictly lower dice than the instrument run")
def test_polyp_harder_than_instrument(instrument_run, polyp_run):
    print(f"polyp dice {polyp_run['dice']:.4f} vs instrument dice {instrument_run['dice']:.4f}")
    assert polyp_run["dice"] < instrument_run["dice"]


@pytest.mark.slow
@criterion(10, "repeating the instrument run reproduces every output byte for byte")
def test_determinism(instrument_run, instrument_repeat):
    a, b = instrument_run["root"], instrument_repeat["root"]
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    kinds = {"gen.ckpt", "disc.ckpt", "report.txt"}
    assert kinds <= {f.name for f in files}
    assert any(f.name.endswith("_mask.png") for f in files)
    assert any("_lrp_" in f.name for f in files)
    differing = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    missing = [str(f) for f in files if not (b / f).is_file()]
    print(f"{len(files)} files compared; differing {differing}; missing {missing}")
    assert not differing and not missing


@pytest.mark.slow
@criterion(11, "explain --all-layers writes a heatmap per layer plus the input map and finite sums")
def test_explain_smoke(instrument_run):
    root, ident = instrument_run["root"], instrument_run["explained_id"]
    spec = N.build_generator("desk-32")
    # each heatmap keeps its layer's own spatial resolution
    expected = {f"{ident}_lrp_input.png": (32, 32)}
    for layer, (_, h, w) in zip(spec.layers, spec.shape_chain()):
        expected[f"{ident}_lrp_L{layer.index}.png"] = (h, w)
    for name, hw in expected.items():
        rgb = D.load_image(root / "explain" / name)
        assert rgb.shape == (1, 3, *hw)
    raw = L.load_relevance(root / "explain" / f"{ident}_lrp.bin")
    assert set(raw) == {"input", *(layer.name for layer in spec.layers)}
    assert all(np.isfinite(v).all() for v in raw.values())
    report_lines = [ln for ln in instrument_run["explain_stdout"].splitlines() if ln[:1].isupper() or ln.startswith("input")]
    sums = [float(ln.split("\t")[1]) for ln in report_lines if "\t" in ln and ln.split("\t")[1] != "sum_out"]
    print(instrument_run["explain_stdout"])
    assert len(sums) == len(spec.layers) + 1
    assert all(np.isfinite(sums))
