"""Built-in numerical self-checks on small random fixtures.

Each check returns a :class:`CheckResult`; ``run_all`` drives them for the
``selfcheck`` command. They are cheap enough to run on every install.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .aggregator import AggregatorConfig, forward, init_params
from .embedder import ToyEmbedder, ToyFeaturizer
from .losses import LossConfig, total_loss
from .metrics import auroc_binary, auroc_pairs_oracle
from .numerics import Tensor, parameter
from .pseudo import ClassRates, fit_thresholds, tie_mass

GRAD_TOL = 1e-4
TINY_CORPUS = ("CCO", "c1ccccc1", "CCN(C)C", "OC=O", "CCCl", "CC(=O)OC")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 1e-3) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x + 1e-300) + x, x)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """One scalar-loss closure per differentiable op, on fresh random inputs."""
    a = parameter(rng.standard_normal((3, 4)), "a")
    b = parameter(rng.standard_normal((3, 4)), "b")
    w = parameter(rng.standard_normal((4, 5)), "w")
    bb = parameter(rng.standard_normal((2, 3, 4)), "bb")
    r = parameter(_away_from_zero(rng, (3, 4)), "r")
    pos = parameter(rng.uniform(0.2, 2.0, (3, 4)), "pos")
    mask = rng.random((3, 4)) < 0.7
    mask[:, 0] = True
    g = parameter(1.0 + 0.1 * rng.standard_normal(4), "gain")
    beta = parameter(0.1 * rng.standard_normal(4), "bias")
    d, heads = 4, 2
    attn = nx.AttentionWeights(*(parameter(rng.standard_normal((d, d)) / 2, f"w{i}") for i in range(4)))
    q = parameter(rng.standard_normal((2, 1, d)), "q")
    kv = parameter(rng.standard_normal((2, 2, d)), "kv")
    key_mask = np.array([[True, True], [True, False]])

    def dot(t: Tensor) -> Tensor:
        c = np.random.default_rng(7).standard_normal(t.shape)
        return nx.tsum(t * c)

    return {
        "add": (lambda: dot(a + b), [a, b]),
        "mul": (lambda: dot(a * b), [a, b]),
        "relu": (lambda: dot(nx.relu(r)), [r]),
        "sigmoid": (lambda: dot(nx.sigmoid(a)), [a]),
        "log": (lambda: dot(nx.log(pos)), [pos]),
        "exp": (lambda: dot(nx.exp(a)), [a]),
        "clip": (lambda: dot(nx.clip(a, -0.5, 0.5)), [a]),
        "matmul": (lambda: dot(a @ w), [a, w]),
        "matmul_batched": (lambda: dot(bb @ w), [bb, w]),
        "reshape": (lambda: dot(nx.reshape(a, (4, 3)) * 1.0), [a]),
        "swapaxes": (lambda: dot(nx.swapaxes(bb, 0, 2)), [bb]),
        "concat": (lambda: dot(nx.concat([a, b], axis=-1)), [a, b]),
        "take": (lambda: dot(nx.take(a, np.array([0, 2, 2]), axis=1)), [a]),
        "sum": (lambda: dot(nx.tsum(bb, axis=1)), [bb]),
        "mean": (lambda: dot(nx.mean(bb, axis=-1)), [bb]),
        "softmax": (lambda: dot(nx.softmax_rows(a, mask)), [a]),
        "layer_norm": (lambda: dot(nx.layer_norm(a, g, beta)), [a, g, beta]),
        "masked_max": (lambda: dot(nx.masked_extreme(a, mask, axis=1, kind="max")), [a]),
        "masked_min": (lambda: dot(nx.masked_extreme(a, mask, axis=1, kind="min")), [a]),
        "attention": (
            lambda: dot(nx.multi_head_attention(q, kv, kv, heads, key_mask, attn)),
            [q, kv, *attn.tensors()],
        ),
    }


def tiny_model(rng: np.random.Generator, variant: str = "ca", n_labels: int = 5):
    feat = ToyFeaturizer.from_corpus(list(TINY_CORPUS), n_buckets=4)
    emb = ToyEmbedder.create(feat, d_e=6, seed=int(rng.integers(1 << 30)))
    lora = emb.attach_lora(2, 4.0, rng)
    lora.b.data = rng.normal(0.0, 0.1, lora.b.shape)
    cfg = AggregatorConfig(d_e=6, d_p=4, d_h=4, heads=2, n_labels=n_labels, variant=variant)
    params = init_params(cfg, rng)
    # large enough that the two rows of a pair attend differently
    for p in params.values():
        p.data = p.data + 0.6 * rng.standard_normal(p.shape)
    return cfg, params, emb


def model_loss_case(rng: np.random.Generator, variant: str = "ca"):
    """Full loss (BCE on pairs, BCE + distillation on singles) through LoRA."""
    n_labels = 5
    cfg, params, emb = tiny_model(rng, variant, n_labels)
    feats = np.array([emb.featurizer.features(s) for s in TINY_CORPUS])
    # several distinct pairs so attention over keys is never flat for every row
    idx = np.array([[0, 1], [2, 3], [4, 5], [1, 3], [2, -1], [5, -1]])
    valid = idx >= 0
    n = len(idx)
    labels = (rng.random((n, n_labels)) < 0.4).astype(float)
    is_single = ~valid[:, 1]
    teacher = rng.uniform(0.05, 0.95, (n, 3))
    loss_cfg = LossConfig(0.5, True, [0, 2, 4])
    lora = emb.lora

    def loss_fn() -> Tensor:
        safe = np.where(valid, idx, 0)
        base = (feats[safe] @ emb.w_feat.T) * valid[..., None]
        f = Tensor(feats[safe] * valid[..., None])
        E = Tensor(base) + ((f @ nx.swapaxes(lora.a, 0, 1)) @ nx.swapaxes(lora.b, 0, 1)) * lora.scale
        res = forward(params, cfg, E, valid)
        return total_loss(res.logits, res.probs, labels, is_single, loss_cfg, teacher, np.ones(n, bool)).total

    return loss_fn, [*params.values(), lora.a, lora.b], [*params.keys(), "lora_a", "lora_b"]


def check_gradients(seed: int = 0, instances: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(instances):
        for name, (fn, ps) in op_cases(rng).items():
            err = nx.grad_check(fn, ps)["*"]
            worst[name] = max(worst.get(name, 0.0), err)
        for variant in ("ca", "pna"):
            fn, ps, names = model_loss_case(rng, variant)
            err = nx.grad_check(fn, ps, names=names)["*"]
            worst[f"model_{variant}"] = max(worst.get(f"model_{variant}", 0.0), err)
    bad = {k: v for k, v in worst.items() if not v < GRAD_TOL}
    detail = ", ".join(f"{k}={v:.1e}" for k, v in bad.items()) or f"max rel err {max(worst.values()):.1e}"
    return CheckResult("gradients", not bad, detail)


def check_permutation(seed: int = 0, draws: int = 50) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(draws):
        cfg, params, _ = tiny_model(rng, "ca" if i % 2 == 0 else "pna")
        E = rng.standard_normal((2, cfg.d_e))
        valid = np.array([True, True])
        a = forward(params, cfg, Tensor(E), valid)
        b = forward(params, cfg, Tensor(E[::-1].copy()), valid)
        worst = max(worst, np.abs(a.z.data - b.z.data).max(), np.abs(a.probs.data - b.probs.data).max())
    return CheckResult("permutation_invariance", bool(worst < 1e-12), f"max diff {worst:.1e}")


def check_padding(seed: int = 0, draws: int = 50) -> CheckResult:
    rng = np.random.default_rng(seed)
    ok = True
    for i in range(draws):
        cfg, params, _ = tiny_model(rng, "ca" if i % 2 == 0 else "pna")
        e1 = rng.standard_normal(cfg.d_e)
        valid = np.array([True, False])
        clean = forward(params, cfg, Tensor(np.stack([e1, np.zeros(cfg.d_e)])), valid)
        E = parameter(np.stack([e1, rng.standard_normal(cfg.d_e) * 10]))
        noisy = forward(params, cfg, E, valid)
        (g,) = nx.backward(nx.tsum(noisy.z * rng.standard_normal(cfg.d_h)), [E])
        ok &= bool(np.array_equal(clean.z.data, noisy.z.data)) and not np.any(g[1])
    return CheckResult("pad_independence", ok)


def check_auroc(seed: int = 0, draws: int = 200) -> CheckResult:
    rng = np.random.default_rng(seed)
    ok = True
    for i in range(draws):
        n = int(rng.integers(2, 60))
        scores = rng.integers(0, 4, n).astype(float) if i % 2 else rng.random(n)
        labels = rng.random(n) < rng.uniform(0.1, 0.9)
        a, b = auroc_binary(scores, labels), auroc_pairs_oracle(scores, labels)
        ok &= a == b
        if isinstance(a, float):
            ok &= auroc_binary(np.exp(3 * scores) + 1, labels) == a
    return CheckResult("auroc_oracle", bool(ok))


def check_thresholds(seed: int = 0, draws: int = 50) -> CheckResult:
    rng = np.random.default_rng(seed)
    ok = True
    for i in range(draws):
        m = int(rng.choice([10, 100, 1000]))
        L = 6
        preds = rng.random((m, L))
        if i % 3 == 0:
            preds = np.round(preds, 1)
        gamma = rng.random(L)
        gamma[0], gamma[1] = 0.0, 1.0
        th = fit_thresholds(preds, ClassRates(gamma, 1))
        frac = th.select(preds).mean(axis=0)
        ties = tie_mass(preds, th)
        ok &= bool(np.all(frac >= gamma - 1 / m - 1e-12) and np.all(frac <= gamma + 1 / m + ties + 1e-12))
        ok &= frac[0] == 0.0 and frac[1] == 1.0
    return CheckResult("threshold_calibration", bool(ok))


CHECKS: dict[str, Callable[..., CheckResult]] = {
    "gradients": check_gradients,
    "permutation_invariance": check_permutation,
    "pad_independence": check_padding,
    "auroc_oracle": check_auroc,
    "threshold_calibration": check_thresholds,
}


def run_all(seed: int = 0) -> list[CheckResult]:
    return [fn(seed) for fn in CHECKS.values()]
