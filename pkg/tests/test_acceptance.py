"""End-to-end acceptance checks, one group per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
The full-scale training run (2000 iterations, batch 128) takes hours, so by
default criterion 5 checks a recorded run in ``tests/data/full_run.json``;
set SKETCHGAN_FULL_TRAINING=1 to re-run it and overwrite the record.
"""
import hashlib
import json
import math
import os
import platform
import time
from pathlib import Path

import numpy as np
import pytest

import naive
from sketchgan import data, invariance, nn, ops, retrieval, train
from sketchgan.gradcheck import grad_check
from sketchgan.tensor import Tensor, backward
from test_nn import HAND_COUNT, _composite_check

FULL_RUN_RECORD = Path(__file__).parent / "data" / "full_run.json"
FULL_RUN_BUDGET_S = 2 * 3600 * 1.1  # "about two hours", read as up to 10% over
SMOKE_BUDGET_S = 5 * 60
DATASET_SEED = 17


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=float), requires_grad=grad)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc") / "ds"
    data.generate_dataset(2000, DATASET_SEED, out)
    return out


@pytest.fixture(scope="module")
def store(dataset_dir):
    return data.SampleStore.from_manifest(data.DatasetManifest.read(dataset_dir))


def smoke_config(seed=0):
    return train.TrainConfig(iterations=200, batch_size=32, seed=seed)


@pytest.fixture(scope="module")
def smoke_runs(store):
    """Smoke-trained (wall seconds, TrainResult) for both architectures."""
    runs = {}
    for arch in ("sketch", "thin"):
        cfg = smoke_config()
        g, d = train.build_pair(arch, cfg)
        t0 = time.perf_counter()
        result = train.train(store, g, d, cfg)
        runs[arch] = (time.perf_counter() - t0, result)
    return runs


# -- 1 -------------------------------------------------------------------------

def test_1_oracle_equivalence(report):
    rng = np.random.default_rng(100)
    t0 = time.perf_counter()
    worst = {}
    for _ in range(20):
        k = int(rng.choice([1, 3, 5]))
        s = int(rng.integers(1, 3))
        n, c, oc = (int(v) for v in rng.integers(1, 4, size=3))
        x = rng.standard_normal((n, c, int(rng.integers(k, 10)), int(rng.integers(k, 10))))
        w, b = rng.standard_normal((oc, c, k, k)), rng.standard_normal(oc)
        err = np.abs(ops.conv2d(T(x), T(w), T(b), s, k // 2).values - naive.conv2d(x, w, b, s, k // 2)).max()
        worst["conv2d"] = max(worst.get("conv2d", 0.0), err)

        up = int(rng.integers(1, 3))
        k = int(rng.choice([3, 5, 9]))
        x = rng.standard_normal((n, c, int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        w = rng.standard_normal((oc, c, k, k))
        err = np.abs(ops.conv2d_transpose(T(x), T(w), T(b), up).values
                     - naive.conv2d_transpose(x, w, b, up, k // 2)).max()
        worst["conv2d_transpose"] = max(worst.get("conv2d_transpose", 0.0), err)

        x = rng.standard_normal((int(rng.integers(2, 5)), c, 3, 4)) * 2 + 0.5
        gamma, beta = rng.standard_normal(c), rng.standard_normal(c)
        got = ops.batch_norm(T(x), T(gamma), T(beta), ops.BatchNormState(c), "train").values
        err = np.abs(got - naive.batch_norm_train(x, gamma, beta, 1e-5)[0]).max()
        worst["batch_norm"] = max(worst.get("batch_norm", 0.0), err)

        i, o = (int(v) for v in rng.integers(1, 40, size=2))
        x, w, b = rng.standard_normal((n, i)), rng.standard_normal((o, i)), rng.standard_normal(o)
        err = np.abs(ops.fully_connected(T(x), T(w), T(b)).values - naive.fully_connected(x, w, b)).max()
        worst["fully_connected"] = max(worst.get("fully_connected", 0.0), err)
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-12 for v in worst.values()) and elapsed < 60
    report(1, ok, f"20 instances/op, max err {max(worst.values()):.1e}, {elapsed:.1f}s")
    assert ok, (worst, elapsed)


# -- 2 -------------------------------------------------------------------------

def _op_cases(rng):
    x4 = T(rng.standard_normal((2, 2, 6, 6)))
    w = T(rng.standard_normal((3, 2, 3, 3)))
    b3 = T(rng.standard_normal(3))
    tx = T(rng.standard_normal((2, 3, 3, 3)))
    tw = T(rng.standard_normal((2, 3, 5, 5)))
    b2 = T(rng.standard_normal(2))
    g2, be2 = T(rng.standard_normal(2)), T(rng.standard_normal(2))
    fx, fw, fb = T(rng.standard_normal((4, 6))), T(rng.standard_normal((5, 6))), T(rng.standard_normal(5))
    relu_in = rng.standard_normal(40)
    relu_in[np.abs(relu_in) < 0.05] = 0.5

    def bn(mode):
        def f(xx, gg, bb):
            return ops.batch_norm(xx, gg, bb, ops.BatchNormState(2, np.array([0.1, -0.3]), np.array([1.2, 0.8])), mode)
        return f

    return {
        "conv2d.x": (lambda t: ops.conv2d(t, w, b3, 2, 1), x4),
        "conv2d.w": (lambda t: ops.conv2d(x4, t, b3, 2, 1), w),
        "conv2d.b": (lambda t: ops.conv2d(x4, w, t, 2, 1), b3),
        "conv2d_transpose.x": (lambda t: ops.conv2d_transpose(t, tw, b2, 2), tx),
        "conv2d_transpose.w": (lambda t: ops.conv2d_transpose(tx, t, b2, 2), tw),
        "conv2d_transpose.b": (lambda t: ops.conv2d_transpose(tx, tw, t, 2), b2),
        "batch_norm.train.x": (lambda t: bn("train")(t, g2, be2), T(rng.standard_normal((3, 2, 3, 3)))),
        "batch_norm.train.gamma": (lambda t: bn("train")(T(np.arange(54.0).reshape(3, 2, 3, 3) % 7), t, be2), g2),
        "batch_norm.eval.x": (lambda t: bn("eval")(t, g2, be2), T(rng.standard_normal((3, 2, 3, 3)))),
        "fully_connected.x": (lambda t: ops.fully_connected(t, fw, fb), fx),
        "fully_connected.w": (lambda t: ops.fully_connected(fx, t, fb), fw),
        "relu": (ops.relu, T(relu_in)),
        "sigmoid": (ops.sigmoid, T(rng.uniform(-5, 5, 30))),
        "clamped_log": (ops.clamped_log, T(rng.uniform(0.05, 0.95, 20))),
        "clamped_log1m": (ops.clamped_log1m, T(rng.uniform(0.05, 0.95, 20))),
        "mean": (ops.mean, T(rng.standard_normal(12))),
    }


def test_2_gradient_suite(report):
    t0 = time.perf_counter()
    per_op = {name: grad_check(f, x) for name, (f, x) in _op_cases(np.random.default_rng(200)).items()}
    composite = {s().name: _composite_check(s, seed=0) for s in (nn.sketch_discriminator, nn.thin_discriminator)}
    elapsed = time.perf_counter() - t0
    ok = max(per_op.values()) < 1e-4 and max(composite.values()) < 1e-3 and elapsed < 300
    report(2, ok, f"{len(per_op)} op checks max {max(per_op.values()):.1e}, "
                  f"composite max {max(composite.values()):.1e}, {elapsed:.1f}s")
    assert ok, (per_op, composite, elapsed)


# -- 3 -------------------------------------------------------------------------

def test_3_architecture_fidelity(report):
    ok = True
    notes = []
    for arch, rounded in (("sketch", 33_000), ("thin", 50_000)):
        gspec, dspec = nn.ARCHITECTURES[arch]
        g, d = nn.build_model(gspec()), nn.build_model(dspec())
        x = Tensor(np.random.default_rng(0).random((3, 1, 64, 64)))
        chain = d.spec.shape_chain()
        ok &= d.forward(x, "eval").shape == (3, 1)
        ok &= 1024 in [int(np.prod(s)) for s in chain] and chain[-1] == (1,)
        z = train.sample_latent(3, 2, np.random.default_rng(0))
        ok &= g.forward(z, "eval").shape == (3, 1, 64, 64)
        counts = {m.spec.name: nn.count_params(m) for m in (g, d)}
        ok &= all(counts[k] == HAND_COUNT[k] for k in counts)
        total = sum(counts.values())
        notes.append(f"{arch} D={counts[d.spec.name]} G={counts[g.spec.name]} total={total} "
                     f"vs ~{rounded // 1000}k ({'agrees' if round(total, -3) == rounded else 'differs'})")
        print(arch, nn.param_breakdown(d), nn.param_breakdown(g))
    report(3, ok, ", ".join(notes))
    assert ok


# -- 4 -------------------------------------------------------------------------

def test_4_loss_identities(report, store):
    half = T(np.full((4, 1), 0.5))
    id_err = max(abs(train.discriminator_loss(half, half).item() - math.log(2)),
                 abs(train.generator_loss(half).item() - math.log(2)))
    steps = []
    for arch in ("sketch", "thin"):
        cfg = train.TrainConfig(batch_size=16)
        g, d = train.build_pair(arch, cfg)
        rng = np.random.default_rng(4)
        x = store.sample(16, rng)
        fake = Tensor(g.forward(train.sample_latent(16, 2, rng), "eval").values)

        def j_d():
            return train.discriminator_loss(d.forward(x, "eval"), d.forward(fake, "eval"))

        before = j_d()
        backward(before)
        train.adam_step(d.params, {k: p.grad for k, p in d.params.items()}, train.AdamState(), lr=1e-5)
        steps.append((before.item(), j_d().item()))
    ok = id_err <= 1e-12 and all(after <= b for b, after in steps)
    report(4, ok, f"|J - ln2| = {id_err:.1e}; J_D before/after small step "
                  + ", ".join(f"{b:.6f}->{a:.6f}" for b, a in steps))
    assert ok


# -- 5 -------------------------------------------------------------------------

def _loss_digest(history) -> str:
    h = hashlib.sha256()
    for rec in history:
        h.update(repr(rec.row()).encode())
    return h.hexdigest()


@pytest.mark.slow
def test_5_smoke_training(report, store, smoke_runs):
    elapsed, result = smoke_runs["sketch"]
    finite = all(math.isfinite(r.j_d) and math.isfinite(r.j_g) for r in result.history)
    # bitwise reproducibility: a fresh run with the same seed, compared on weights and losses
    cfg = train.TrainConfig(iterations=20, batch_size=32, seed=0)
    again = [train.train(store, *train.build_pair("sketch", cfg), cfg) for _ in range(2)]
    same = (_loss_digest(again[0].history) == _loss_digest(again[1].history)
            and nn.checkpoint_bytes(again[0].d) == nn.checkpoint_bytes(again[1].d)
            and nn.checkpoint_bytes(again[0].g) == nn.checkpoint_bytes(again[1].g)
            and [r.row() for r in again[0].history] == [r.row() for r in result.history[:20]])
    ok = elapsed < SMOKE_BUDGET_S and finite and len(result.history) == 200 and same
    report(5, ok, f"smoke sketch 200x32 in {elapsed:.0f}s (< {SMOKE_BUDGET_S}s), finite={finite}, "
                  f"bitwise reproducible={same}")
    assert ok


def _run_full_training(store) -> dict:
    cfg = train.TrainConfig(seed=0)
    g, d = train.build_pair("sketch", cfg)
    t0 = time.perf_counter()
    result = train.train(store, g, d, cfg)
    wall = time.perf_counter() - t0
    return {
        "architecture": "sketch",
        "config": dict(line.split("=", 1) for line in cfg.to_lines()),
        "dataset_seed": DATASET_SEED,
        "dataset_hash": store.manifest_hash,
        "wall_seconds": wall,
        "records": len(result.history),
        "finite_records": sum(math.isfinite(r.j_d) and math.isfinite(r.j_g) for r in result.history),
        "loss_digest": _loss_digest(result.history),
        "first_rows": [r.row() for r in result.history[:3]],
        "machine": f"{platform.machine()} cpus={os.cpu_count()}",
    }


@pytest.mark.slow
def test_5_full_scale_training(report, store):
    if os.environ.get("SKETCHGAN_FULL_TRAINING") == "1":
        rec = _run_full_training(store)
        FULL_RUN_RECORD.parent.mkdir(exist_ok=True)
        FULL_RUN_RECORD.write_text(json.dumps(rec, indent=1) + "\n")
    elif FULL_RUN_RECORD.exists():
        rec = json.loads(FULL_RUN_RECORD.read_text())
    else:
        pytest.skip("no recorded full-scale run; set SKETCHGAN_FULL_TRAINING=1")
    assert rec["dataset_hash"] == store.manifest_hash, "record was made on a different dataset"
    # the recorded run must be the one this code produces: replay its first iterations
    cfg = train.TrainConfig(iterations=3, seed=0)
    replay = train.train(store, *train.build_pair("sketch", cfg), cfg)
    replay_ok = [list(r.row()) for r in replay.history] == [list(r) for r in rec["first_rows"]]
    finite = rec["records"] == 2000 and rec["finite_records"] == 2000
    in_time = rec["wall_seconds"] <= FULL_RUN_BUDGET_S
    report(5, finite and in_time and replay_ok,
           f"full 2000x128 run {rec['wall_seconds'] / 3600:.2f} h on {rec['machine']} "
           f"(budget {FULL_RUN_BUDGET_S / 3600:.1f} h), {rec['finite_records']}/2000 finite, replay match={replay_ok}")
    assert finite and replay_ok
    if not in_time:
        # the budget is kept as stated; a slow machine is reported, not hidden
        pytest.xfail(f"full-scale run took {rec['wall_seconds'] / 3600:.2f} h on {rec['machine']}, "
                     f"over the {FULL_RUN_BUDGET_S / 3600:.1f} h budget")


# -- 6 -------------------------------------------------------------------------

@pytest.mark.slow
def test_6_retrieval_protocol(report, store, smoke_runs):
    enc = retrieval.make_encoder(smoke_runs["sketch"][1].d)
    index = retrieval.build_index(enc, store)
    rng = np.random.default_rng(600)
    queries = rng.choice(len(store), size=50, replace=False)
    self_ok = oracle_ok = True
    for qi in queries:
        q = index.embedding(store.ids[qi])
        got = retrieval.top_k(index, q, len(index))
        self_ok &= got[0][0] == store.ids[qi] and abs(got[0][1] - 1) <= 1e-9
        oracle_ok &= [i for i, _ in got] == naive.rank(index.ids, index.vectors, q.vector)
    pairs = store.duplicate_pairs()
    hits = sum(dup in [i for i, _ in retrieval.top_k(index, index.embedding(src), 9)] for src, dup in pairs)
    frac = hits / len(pairs)
    ok = self_ok and oracle_ok and frac >= 0.6
    report(6, ok, f"50 queries rank-1 self={self_ok}, brute-force match={oracle_ok}, "
                  f"near-duplicates in top 9: {hits}/{len(pairs)} = {frac:.2f} (floor 0.60)")
    assert ok


# -- 7 -------------------------------------------------------------------------

def _raw_pixel_curve(images, angles):
    """Independent normalised correlation of each probe with its rotated copies (scipy resampling)."""
    from scipy import ndimage

    out = np.empty((len(images), len(angles)))
    for i, img in enumerate(images):
        base = img / np.linalg.norm(img)
        for j, a in enumerate(angles):
            t = np.radians(a)
            m = np.array([[np.cos(t), np.sin(t)], [-np.sin(t), np.cos(t)]])
            centre = np.array([31.5, 31.5])
            moved = ndimage.affine_transform(img, m, offset=centre - m @ centre, order=1,
                                             mode="grid-constant", cval=0.0)
            out[i, j] = moved.ravel() @ base.ravel() / np.linalg.norm(moved)
    return out


@pytest.mark.slow
def test_7_invariance_protocol(report, store, smoke_runs, tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    counts = {k: len(invariance.SweepSpec(k).points()) for k in invariance.SWEEP_KINDS}
    per_kind = {}
    identity_err = 0.0
    for kind in invariance.SWEEP_KINDS:
        spec = invariance.SweepSpec(kind, probes=100, seed=0)
        per_kind[kind] = {}
        for arch in ("sketch", "thin"):
            rep = invariance.run_sweep(retrieval.make_encoder(smoke_runs[arch][1].d), store, spec, label=arch)
            identity_err = max(identity_err, np.abs(rep.value_at(spec.identity) - 1).max())
            rep.write_csv(out / f"{arch}_{kind}.csv")
            per_kind[kind][arch] = rep
    invariance.write_comparison_csv(per_kind, out / "comparison.csv")
    ordering = invariance.ordering_summary(per_kind, "sketch", "thin")

    raw_spec = invariance.SweepSpec("rotation", probes=5, seed=1)
    raw = invariance.run_sweep(retrieval.RawPixelEncoder(), store, raw_spec)
    idx = invariance.choose_probes(len(store), 5, 1)
    ref = _raw_pixel_curve(store.images[idx, 0], [p for p, _ in raw.points])
    raw_err = np.abs(raw.raw - ref).max()

    ok = counts == {"rotation": 41, "scale": 21, "shift": 441} and identity_err <= 1e-6 and raw_err <= 1e-10
    order_txt = ", ".join(f"{k} {v:+.3f} ({'holds' if v > 0 else 'does not hold'})" for k, v in ordering.items())
    report(7, ok, f"points {counts['rotation']}/{counts['scale']}/{counts['shift']}, identity err {identity_err:.1e}, "
                  f"raw-pixel oracle err {raw_err:.1e}; sketch-thin mean similarity {order_txt} "
                  f"[reported only, curves in {out}]")
    assert ok


# -- 8 -------------------------------------------------------------------------

def test_8_io_round_trips(report, tmp_path):
    x = Tensor(np.random.default_rng(8).random((4, 1, 64, 64)))
    bitwise = True
    for spec_fn in (nn.sketch_discriminator, nn.thin_discriminator, nn.sketch_generator, nn.thin_generator):
        m = nn.build_model(spec_fn(), seed=3)
        inp = x if m.spec.is_discriminator else train.sample_latent(4, 2, np.random.default_rng(1))
        m.forward(inp, "train")  # move the running statistics away from their defaults
        path = tmp_path / f"{m.spec.name}.ckpt"
        nn.save_checkpoint(m, path)
        back = nn.load_checkpoint(path)
        bitwise &= np.array_equal(m.forward(inp, "eval").values, back.forward(inp, "eval").values)

    img = np.random.default_rng(9).random((1, 1, 64, 64))
    data.save_image(Tensor(img), tmp_path / "img.pgm")
    img_err = np.abs(data.load_image(tmp_path / "img.pgm").values - img).max()

    hashes = [data.generate_dataset(50, 3, tmp_path / f"ds{i}").compute_hash() for i in range(2)]
    same_files = all((tmp_path / "ds0" / p.name).read_bytes() == p.read_bytes() for p in (tmp_path / "ds1").iterdir())
    ok = bitwise and img_err <= 1 / 255 and hashes[0] == hashes[1] and same_files
    report(8, ok, f"checkpoint forward bitwise={bitwise}, image err {img_err:.2e} (<= {1 / 255:.2e}), "
                  f"manifest hash reproducible={hashes[0] == hashes[1]}")
    assert ok
