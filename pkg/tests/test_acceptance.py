"""Acceptance gate: one test per headline criterion, each reported PASS/FAIL in the summary."""

import math
import time

import numpy as np
import pytest

from contextflow import diffcore as dc
from contextflow.bijections import (
    ActNorm,
    BoundedLogit,
    Conv1x1,
    Coupling,
    PermuteAxes,
    Squeeze,
    Standardize,
)
from contextflow.datasets import Dataset, rotate_context, split_dataset, two_moons_context, write_idx, load_mnist
from contextflow.diffcore import Tensor
from contextflow.encoders import ContextEncoder, ContextSpec, VarSpec
from contextflow.flowmodel import FlowConfig, FlowModel
from contextflow.gmmhead import loss as gmm_loss
from contextflow.trainer import TrainConfig, average_precision, auroc, evaluate, f1_score, fit, lr_at

from conftest import randomize, rotation_context, small_model

CTX = 3


def _randomize_layer(layer, rng, scale=0.2):
    for _, p in layer.named_params():
        p.data += scale * rng.standard_normal(p.shape)
    if isinstance(layer, ActNorm):
        layer.initialized = 1.0


def _layer_cases():
    """(label, layer, input shape, needs context) for every bijection family."""
    rng = dc.make_rng(7)
    cases = []
    for mode in ("none", "additive", "concat"):
        ctx = CTX if mode == "concat" else 0
        for mask in ("half", "alternate"):
            cases.append((f"coupling-dense-{mask}-{mode}", Coupling((5,), rng, 1, mask, "dense", mode=mode, ctx_dim=ctx), (5,)))
        cases.append((f"coupling-dense-seq-{mode}", Coupling((3, 4), rng, 0, "half", "dense", mode=mode, ctx_dim=ctx), (3, 4)))
        for mask in ("half", "checkerboard"):
            cases.append((f"coupling-conv-{mask}-{mode}",
                          Coupling((2, 4, 4), rng, 0, mask, "conv", hidden_channels=4, mode=mode, ctx_dim=ctx), (2, 4, 4)))
        cases.append((f"actnorm-{mode}", ActNorm((3, 4), rng, mode=mode, ctx_dim=ctx), (3, 4)))
        cases.append((f"conv1x1-{mode}", Conv1x1((3, 2, 2), rng, mode=mode, ctx_dim=ctx), (3, 2, 2)))
        cases.append((f"dense-mix-{mode}", Conv1x1((4,), rng, mode=mode, ctx_dim=ctx), (4,)))
    cases.append(("squeeze-2d", Squeeze((2, 4, 4)), (2, 4, 4)))
    cases.append(("squeeze-1d", Squeeze((3, 8)), (3, 8)))
    cases.append(("permute", PermuteAxes((3, 5), (1, 0)), (3, 5)))
    cases.append(("standardize", Standardize((4,), 1.5, 2.5), (4,)))
    cases.append(("bounded-logit", BoundedLogit((4,), 0.0, 8.0), (4,)))
    for label, layer, shape in cases:
        if layer.mode == "additive":
            layer.attach_specialist(CTX, rng, 8)
        _randomize_layer(layer, rng)
    return cases


def test_invertibility(criterion):
    with criterion("invertibility: layers and (2,2) models, 1000 inputs, max err < 1e-8") as c:
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        worst = {}
        for label, layer, shape in _layer_cases():
            v = rng.standard_normal((1000,) + shape)
            if label == "bounded-logit":
                v = rng.uniform(0.01, 7.99, v.shape)
            cond = Tensor(rng.standard_normal((1000, CTX)))
            u = layer.inverse(Tensor(v), cond).output
            back = layer.forward(u, cond).data
            worst[label] = float(np.max(np.abs(back - v)))

        models = {
            "vector-additive": small_model((4,)),
            "image-split": small_model((1, 4, 4), net="conv", hidden_channels=4, split_prior=[True, False]),
            "sequence-permute": small_model((8, 4), permute_axes=[1, 0], data_transform="standardize"),
            "vector-concat": small_model((4,), conditioning="concat"),
        }
        for label, model in models.items():
            if model.config.conditioning == "additive":
                model.attach_specialist()
            randomize(model, 0.1, seed=3)
            v = rng.standard_normal((1000,) + model.config.input_shape)
            ctx = rotation_context(1000)
            cond, _ = model.encode_context(ctx, dc.make_rng(0), train=False)
            u, zs, _ = model.to_latent(v, cond)
            back = model.from_latent(u, zs, cond).data
            worst[f"model-{label}"] = float(np.max(np.abs(back - v)))
        top = max(worst, key=worst.get)
        c.detail = f"worst {top} = {worst[top]:.2e} ({time.perf_counter() - t0:.1f}s)"
        assert worst[top] < 1e-8, worst
        assert time.perf_counter() - t0 < 60


def _numerical_jacobian(f, v, eps=1e-6):
    d = v.size
    jac = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = eps
        up = f((v.reshape(-1) + e).reshape(v.shape)).reshape(-1)
        down = f((v.reshape(-1) - e).reshape(v.shape)).reshape(-1)
        jac[:, i] = (up - down) / (2 * eps)
    return jac


def test_logdet_oracle(criterion):
    with criterion("log-det vs numerical Jacobian, dim <= 8, rel 1e-4") as c:
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        worst = 0.0
        for label, layer, shape in _layer_cases():
            if int(np.prod(shape)) > 8:
                continue
            for _ in range(3):
                v = rng.standard_normal((1,) + shape)
                if label == "bounded-logit":
                    v = rng.uniform(0.5, 7.5, v.shape)
                cond = Tensor(rng.standard_normal((1, CTX)))
                analytic = float(layer.inverse(Tensor(v), cond).logdet.data[0])
                jac = _numerical_jacobian(lambda x: layer.inverse(Tensor(x), cond).output.data, v)
                _, num = np.linalg.slogdet(jac)
                worst = max(worst, abs(analytic - num) / max(1.0, abs(num)))
        # summed over a full model (no split prior: every layer is a bijection)
        model_cases = (
            ((4,), {}),
            ((2, 2, 2), dict(net="conv", hidden_channels=4, blocks=1)),
            ((2, 2, 2), dict(net="conv", hidden_channels=4, squeeze=False, mask="checkerboard")),
            ((4, 2), dict(permute_axes=[1, 0], blocks=1)),
        )
        for shape, kw in model_cases:
            model = small_model(shape, **kw)
            model.attach_specialist()
            randomize(model, 0.1, seed=5)
            ctx = rotation_context(1)
            cond, _ = model.encode_context(ctx, dc.make_rng(0), train=False)
            for _ in range(3):
                v = rng.standard_normal((1,) + shape)
                _, _, logdet = model.to_latent(v, cond)
                jac = _numerical_jacobian(lambda x: model.to_latent(x, cond)[0].data, v)
                _, num = np.linalg.slogdet(jac)
                worst = max(worst, abs(float(logdet.data[0]) - num) / max(1.0, abs(num)))
        c.detail = f"worst rel err {worst:.2e} ({time.perf_counter() - t0:.1f}s)"
        assert worst < 1e-4


def test_gradient_suite(criterion):
    with criterion("loss gradients vs central differences, D=4, rel < 1e-4") as c:
        t0 = time.perf_counter()
        rng = np.random.default_rng(2)
        x = rng.standard_normal((6, 4))
        labels = np.array([0, 1, -1, 1, 0, 1])
        ctx = rotation_context(6)
        worst = 0.0
        variational_ctx = [dict(name="rotation", cardinality=8, encoder="variational")]
        setups = [
            ("generalist", small_model((4,)), None),
            ("specialist", small_model((4,), context=variational_ctx), "attach"),
            ("concat", small_model((4,), conditioning="concat", context=variational_ctx), None),
            ("variational-data", small_model((4,), data_dequantizer="variational", data_cardinality=4), None),
        ]
        counted = 0
        for label, model, how in setups:
            if how == "attach":
                model.attach_specialist()
            randomize(model, 0.1, seed=11)
            data = x if model.config.data_dequantizer == "none" else rng.integers(0, 4, (6, 4)).astype(float)
            params = [p for p in model.params() if p.requires_grad]
            counted += sum(p.size for p in params)

            def f():
                lp = model.log_prob(data, ctx, dc.make_rng(99))
                return gmm_loss(lp.total, labels)

            worst = max(worst, dc.finite_diff_check(f, params, eps=1e-6))
        c.detail = f"worst rel err {worst:.2e} over {counted} entries ({time.perf_counter() - t0:.1f}s)"
        assert worst < 1e-4


def test_decoupling_contract(criterion):
    with criterion("decoupling: attach keeps log_prob (<1e-9), 100 steps keep fingerprint") as c:
        t0 = time.perf_counter()
        model = small_model((4,), classes=1)
        randomize(model, 0.1, seed=4)
        rng = np.random.default_rng(3)
        batches = [(rng.standard_normal((32, 4)), rotation_context(32, seed=i)) for i in range(100)]
        before = [model.log_prob(x, None, dc.make_rng(i)).total.data for i, (x, _) in enumerate(batches)]
        fp = model.fingerprint()
        model.attach_specialist()
        after = [model.log_prob(x, ctx, dc.make_rng(i)).total.data for i, (x, ctx) in enumerate(batches)]
        diff = max(float(np.max(np.abs(a - b))) for a, b in zip(before, after))
        assert model.fingerprint() == fp
        train = Dataset(rng.standard_normal((800, 4)), rotation_context(800))
        log = fit(model, train, TrainConfig(batch_size=8, total_epochs=2, warmup_epochs=1,
                                            phase="specialist", max_steps=100))
        c.detail = f"max diff {diff:.1e}, steps {log.steps} ({time.perf_counter() - t0:.1f}s)"
        assert diff < 1e-9
        assert log.steps == 100
        assert model.fingerprint() == fp == model.generalist_fingerprint


def _elbo_model(k: int) -> FlowModel:
    return FlowModel(FlowConfig(
        input_shape=(1,), blocks=1, sub_blocks=2, classes=1, components=4,
        data_dequantizer="variational", data_cardinality=k, data_transform="logit",
        data_range=[0.0, float(k)], encoder_hidden=16, width_factor=8, seed=k,
    ))


def test_elbo_validity(criterion):
    with criterion("ELBO <= -ln K + 3 SE and within 0.1 nats, K in {2,4,8}") as c:
        t0 = time.perf_counter()
        notes = []
        ok = True
        for k in (2, 4, 8):
            model = _elbo_model(k)
            rng = np.random.default_rng(k)
            train = Dataset(rng.integers(0, k, (4096, 1)).astype(float))
            fit(model, train, TrainConfig(batch_size=256, total_epochs=40, warmup_epochs=2,
                                          decay_every=30, lr_init=1e-2, lr_warm_start=1e-3, seed=k))
            x = rng.integers(0, k, (100_000, 1)).astype(float)
            elbo = model.log_prob(x, None, dc.make_rng(1), train=False).marginal().data
            mean, se = float(elbo.mean()), float(elbo.std(ddof=1) / math.sqrt(len(elbo)))
            exact = -math.log(k)
            notes.append(f"K={k}: {mean:.4f} vs {exact:.4f} (se {se:.1e})")
            ok &= mean <= exact + 3 * se and exact - mean < 0.1
        c.detail = "; ".join(notes) + f" ({time.perf_counter() - t0:.0f}s)"
        assert ok, notes


def test_surjection_consistency(criterion):
    with criterion("encoders decode their own samples, 1e4 draws each") as c:
        rng = dc.make_rng(5)
        specs = [
            VarSpec("u", cardinality=10, encoder="uniform"),
            VarSpec("u_bin", cardinality=10, mapping="binary", encoder="uniform"),
            VarSpec("oh", cardinality=10, mapping="one-hot", encoder="uniform"),
            VarSpec("arg", cardinality=10, encoder="argmax"),
            VarSpec("var", cardinality=10, encoder="variational"),
            VarSpec("var_oh", cardinality=10, mapping="one-hot", encoder="variational"),
        ]
        enc = ContextEncoder(ContextSpec(specs), rng)
        # random (non-zero) encoder parameters exercise the learned noise
        for p in enc.params():
            p.data += 0.5 * np.random.default_rng(0).standard_normal(p.shape)
        x = {s.name: np.random.default_rng(1).integers(0, 10, 10_000) for s in specs}
        out = enc.encode(x, rng)
        dec = enc.decode(out.v.data)
        rates = {s.name: float(np.mean(dec[s.name] == x[s.name])) for s in specs}
        c.detail = str(rates)
        assert all(r == 1.0 for r in rates.values())
        assert np.all(np.isfinite(out.log_q.data))


def test_metric_formulas(criterion):
    with criterion("F1(88.64, 99.19) = 93.62, AuROC 0.75, AP 0.8333") as c:
        f1 = 100 * f1_score(0.8864, 0.9919)
        roc = auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        ap = average_precision([4, 3, 2, 1], [1, 0, 1, 0])
        c.detail = f"F1 {f1:.4f}, AuROC {roc}, AP {ap:.4f}"
        assert abs(f1 - 93.62) <= 0.01
        assert roc == pytest.approx(0.75, abs=1e-12)
        assert ap == pytest.approx(0.5 * 1 + 0.5 * (2 / 3), abs=1e-12)


def test_schedule(criterion):
    with criterion("lr_at: warm-up from 1e-4, plateaus 1e-3/1e-4/1e-5/1e-6") as c:
        cfg = TrainConfig()
        expected = []
        for e in range(48):
            if e < 4:
                expected.append(1e-4 + (e / 4) * (1e-3 - 1e-4))
            else:
                expected.append({0: 1e-3, 1: 1e-4, 2: 1e-5, 3: 1e-6}[e // 12])
        got = [lr_at(e, 0.0, cfg) for e in range(48)]
        err = max(abs(g - x) / x for g, x in zip(got, expected))
        c.detail = f"max rel err {err:.1e}"
        assert err < 1e-12
        assert got[0] == pytest.approx(1e-4) and got[2] == pytest.approx(5.5e-4)
        assert lr_at(3, 0.999, cfg) < 1e-3


MOONS_MODEL = dict(input_shape=(2,), blocks=2, sub_blocks=3, width_factor=32, classes=1, components=8,
                   context=[dict(name="rotation", cardinality=8, mapping="one-hot")], context_hidden=32)


def test_two_moons_specialist(criterion):
    with criterion("two moons: specialist NLL < generalist in >= 4/5 seeds, fast start") as c:
        t0 = time.perf_counter()
        wins, fast, rows = 0, 0, []
        for seed in range(5):
            data = two_moons_context(4000, 8, dc.make_rng(seed))
            sp = split_dataset(data, seed)
            model = FlowModel(FlowConfig(**MOONS_MODEL, seed=seed))
            gcfg = TrainConfig(batch_size=128, total_epochs=24, warmup_epochs=2, decay_every=12,
                               lr_init=5e-3, lr_warm_start=5e-4, seed=seed)
            glog = fit(model, sp["train"], gcfg)
            g_nll = evaluate(model, sp["test"], "detect", seed=seed).nll
            model.attach_specialist()
            scfg = TrainConfig(batch_size=128, total_epochs=16, warmup_epochs=1, decay_every=12,
                               lr_init=2e-3, lr_warm_start=2e-4, seed=seed, phase="specialist")
            slog = fit(model, sp["train"], scfg)
            s_nll = evaluate(model, sp["test"], "detect", seed=seed).nll
            wins += s_nll < g_nll
            fast += slog.losses[0] <= glog.losses[-1]
            rows.append(f"{g_nll:.3f}->{s_nll:.3f}")
        elapsed = time.perf_counter() - t0
        c.detail = f"wins {wins}/5, fast start {fast}/5, nll {rows} ({elapsed:.0f}s)"
        assert wins >= 4
        assert fast == 5
        assert elapsed < 300


def _mnist_subset():
    mlxtend_data = pytest.importorskip("mlxtend.data", reason="MNIST subset ships with mlxtend")
    x, y = mlxtend_data.mnist_data()
    return x.reshape(-1, 1, 28, 28).astype(np.uint8), y.astype(np.int64)


@pytest.mark.slow
def test_scaled_mnist_rotation(criterion, tmp_path):
    with criterion("scaled MNIST-R: specialist top-1 >= generalist, both > 60%") as c:
        t0 = time.perf_counter()
        x, y = _mnist_subset()
        write_idx(tmp_path / "images.idx.gz", x)
        write_idx(tmp_path / "labels.idx.gz", y)
        full = load_mnist(tmp_path / "images.idx.gz", tmp_path / "labels.idx.gz")
        perm = np.random.default_rng(0).permutation(len(full))
        train = rotate_context(full.data[perm[:2000]], 8, dc.make_rng(1), full.labels[perm[:2000]])
        test = rotate_context(full.data[perm[2000:3000]], 8, dc.make_rng(2), full.labels[perm[2000:3000]])
        cfg = FlowConfig(input_shape=(1, 28, 28), blocks=2, sub_blocks=2, net="conv", hidden_channels=32,
                         classes=10, components=8, data_dequantizer="uniform", data_transform="standardize",
                         context=[dict(name="rotation", cardinality=8)], context_hidden=16)
        model = FlowModel(cfg)
        tcfg = TrainConfig(batch_size=64, total_epochs=20, warmup_epochs=2, decay_every=16, lr_init=6e-3,
                           lr_warm_start=6e-4, clip_norm=100.0)
        fit(model, train, tcfg)
        g_acc = evaluate(model, test, "classify").accuracy
        model.attach_specialist()
        # short low-lr fine-tune; longer specialist runs overfit the 2k images
        scfg = TrainConfig(batch_size=64, total_epochs=4, warmup_epochs=1, decay_every=3, lr_init=1e-3,
                           lr_warm_start=1e-4, clip_norm=100.0, phase="specialist")
        fit(model, train, scfg)
        s_acc = evaluate(model, test, "classify").accuracy
        elapsed = time.perf_counter() - t0
        c.detail = f"generalist {g_acc:.3f}, specialist {s_acc:.3f} ({elapsed / 60:.1f} min)"
        assert s_acc >= g_acc
        assert g_acc > 0.6 and s_acc > 0.6
        assert elapsed < 30 * 60


def test_parameter_census(criterion):
    with criterion("census: additive specialist count < concat model count") as c:
        rows = []
        for shape, kw in (((2,), {}), ((1, 28, 28), dict(net="conv", classes=10)),
                          ((8, 25), dict(permute_axes=[1, 0], sub_blocks=4))):
            ctx = [dict(name="rotation", cardinality=8)]
            add = FlowModel(FlowConfig(input_shape=shape, context=ctx, **kw))
            add.attach_specialist()
            concat = FlowModel(FlowConfig(input_shape=shape, context=ctx, conditioning="concat", **kw))
            n_spec = add.census()["specialist"]
            n_concat = sum(concat.census().values())
            rows.append((shape, n_spec, n_concat))
            assert n_spec < n_concat
        c.detail = "; ".join(f"{s}: {a} < {b}" for s, a, b in rows)
