"""Central finite-difference checks for the autodiff ops and the full WR loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class GradCheckResult:
    name: str
    passed: bool
    max_abs_err: float
    max_rel_err: float
    n_checked: int
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<24} entries={self.n_checked:<6} "
                f"max_abs={self.max_abs_err:.2e} max_rel={self.max_rel_err:.2e} "
                f"({self.seconds:.2f}s)")


def numerical_gradient(f: Callable[[], float], x: Tensor, eps: float = 1e-5,
                       entries: np.ndarray | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x`` (perturbed in place and restored)."""
    grad = np.zeros(x.size, dtype=np.float64)
    flat = x.data.reshape(-1)
    idx = np.arange(x.size) if entries is None else entries
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        grad[i] = (up - down) / (2 * eps)
    return grad.reshape(x.shape)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], name: str = "loss",
                    eps: float = 1e-5, rtol: float = 1e-4, atol: float = 1e-8,
                    max_entries_per_param: int | None = None,
                    rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare backward() against central differences.

    An entry passes when ``|analytic - numeric| <= atol + rtol * |numeric|``.
    Inputs must be 64-bit for the default tolerances to be meaningful.
    """
    start = time.perf_counter()
    ad.zero_grads(params)
    ad.backward(loss_fn())
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]
    ad.zero_grads(params)

    def f() -> float:
        with ad.no_grad():
            return loss_fn().item()

    rng = rng or np.random.default_rng(0)
    worst_abs = worst_rel = 0.0
    ok = True
    checked = 0
    for p, a in zip(params, analytic):
        entries = None
        if max_entries_per_param is not None and p.size > max_entries_per_param:
            entries = np.sort(rng.choice(p.size, max_entries_per_param, replace=False))
        num = numerical_gradient(f, p, eps, entries)
        sel = np.arange(p.size) if entries is None else entries
        a_flat, n_flat = a.reshape(-1)[sel], num.reshape(-1)[sel]
        err = np.abs(a_flat - n_flat)
        checked += len(sel)
        if len(sel):
            worst_abs = max(worst_abs, float(err.max()))
            # relative error is only meaningful where the rtol term dominates atol
            big = np.abs(n_flat) > atol / rtol
            if big.any():
                worst_rel = max(worst_rel, float((err[big] / np.abs(n_flat[big])).max()))
            ok = ok and bool(np.all(err <= atol + rtol * np.abs(n_flat)))
    return GradCheckResult(name, ok, worst_abs, worst_rel, checked, time.perf_counter() - start)


# op suite -----------------------------------------------------------------------

def _uniform(rng, shape, lo=-2.0, hi=2.0):
    return ad.parameter(rng.uniform(lo, hi, size=shape), dtype=np.float64)


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.uniform(gap, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return ad.parameter(x, dtype=np.float64)


def op_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """(name, scalar loss closure, inputs) for each differentiable op."""
    cases = []
    fixed: dict[tuple, np.ndarray] = {}

    def rng_fixed(shape):
        if shape not in fixed:
            fixed[shape] = np.random.default_rng(len(fixed) + 11).uniform(-1, 1, size=shape)
        return fixed[shape]

    def weighted(t):
        # a random linear functional keeps every output entry in play
        return ad.sum(t * ad.tensor(rng_fixed(t.shape), dtype=np.float64))

    a, b = _uniform(rng, (3, 4)), _uniform(rng, (3, 4))
    cases.append(("add", lambda: weighted(a + b), [a, b]))
    row = _uniform(rng, (4,))
    cases.append(("add_broadcast", lambda: weighted(a + row), [a, row]))
    cases.append(("sub", lambda: weighted(a - b), [a, b]))
    cases.append(("mul", lambda: weighted(a * b), [a, b]))
    den = _away_from_zero(rng, (3, 4), 0.5)
    cases.append(("div", lambda: weighted(a / den), [a, den]))
    r = _away_from_zero(rng, (3, 4))
    cases.append(("relu", lambda: weighted(ad.relu(r)), [r]))
    cases.append(("exp", lambda: weighted(ad.exp(a)), [a]))
    pos = _uniform(rng, (3, 4), 0.2, 2.0)
    cases.append(("log", lambda: weighted(ad.log(pos)), [pos]))
    cases.append(("sqrt", lambda: weighted(ad.sqrt(pos)), [pos]))
    cl = _away_from_zero(rng, (3, 4))
    cases.append(("clip", lambda: weighted(ad.clip(cl, -0.05, 1.0)), [cl]))
    m1, m2 = _uniform(rng, (2, 3, 5)), _uniform(rng, (2, 5, 4))
    cases.append(("matmul", lambda: ad.sum(ad.matmul(m1, m2) * ad.tensor(rng_fixed((2, 3, 4)))),
                  [m1, m2]))
    wm = _uniform(rng, (5, 4))
    cases.append(("matmul_weight", lambda: ad.sum(ad.matmul(m1, wm) * ad.tensor(rng_fixed((2, 3, 4)))),
                  [m1, wm]))
    cases.append(("sum_axis", lambda: ad.sum(ad.sum(a, axis=0) * ad.tensor(rng_fixed((4,)))), [a]))
    cases.append(("mean", lambda: ad.sum(ad.mean(a, axis=-1) * ad.tensor(rng_fixed((3,)))), [a]))
    cases.append(("reshape_transpose",
                  lambda: ad.sum(a.reshape(2, 6).T * ad.tensor(rng_fixed((6, 2)))), [a]))
    cases.append(("concat", lambda: ad.sum(ad.concat([a, b], axis=0) * ad.tensor(rng_fixed((6, 4)))),
                  [a, b]))
    cases.append(("index", lambda: ad.sum(a[np.array([0, 2, 0]), :] * ad.tensor(rng_fixed((3, 4)))),
                  [a]))
    emb = _uniform(rng, (6, 4))
    ids = np.array([[1, 5, 1], [0, 2, 3]])
    cases.append(("embedding", lambda: ad.sum(ad.embedding(emb, ids) * ad.tensor(rng_fixed((2, 3, 4)))),
                  [emb]))
    pick_ids = np.array([0, 3, 1])
    cases.append(("pick", lambda: ad.sum(ad.pick(a, pick_ids) * ad.tensor(rng_fixed((3,)))), [a]))
    cases.append(("softmax", lambda: weighted(ad.softmax(a, axis=-1)), [a]))
    cases.append(("log_softmax", lambda: weighted(ad.log_softmax(a, axis=-1)), [a]))
    gain, bias = _uniform(rng, (4,)), _uniform(rng, (4,))
    cases.append(("layer_norm", lambda: weighted(ad.layer_norm(a, gain, bias, 1e-5)),
                  [a, gain, bias]))
    mask = rng.random((3, 4)) < 0.3
    cases.append(("masked_fill", lambda: weighted(ad.masked_fill(a, mask, -3.0)), [a]))

    def dropped():
        return weighted(ad.dropout(a, 0.3, np.random.default_rng(5), training=True))

    cases.append(("dropout", dropped, [a]))
    return cases


def run_op_suite(seed: int = 0, rtol: float = 1e-4, eps: float = 1e-5) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    with ad.precision(64):
        return [check_gradients(fn, inputs, name, eps=eps, rtol=rtol)
                for name, fn, inputs in op_cases(rng)]


def run_model_check(seed: int = 0, rtol: float = 1e-3, eps: float = 1e-5,
                    max_entries_per_param: int | None = None,
                    g_mapping: str = "linear_projection") -> GradCheckResult:
    """WR loss gradient on a 2+2 layer, d_model=8, vocab=20 model at 64-bit precision."""
    from .data import EncodedTriple
    from .losses import WRLossConfig, decode_anchors, wr_loss_with_negatives
    from .model import ModelConfig, Seq2SeqTransformer

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(vocab_size=20, d_model=8, n_heads=2, n_enc_layers=2, n_dec_layers=2,
                      d_ffn=16, max_len=10, dropout=0.0, g_mapping=g_mapping, seed=seed)
    with ad.precision(64):
        model = Seq2SeqTransformer(cfg, dtype=np.float64)

        def seq(lo, hi):
            return tuple(int(t) for t in rng.integers(5, 20, size=int(rng.integers(lo, hi + 1))))

        triples = [EncodedTriple(seq(2, 6), seq(1, 5), (seq(1, 5),), f"s{i}") for i in range(3)]
        negatives = [t.negatives[0] for t in triples]
        anchors = decode_anchors(model, [t.context for t in triples])
        loss_cfg = WRLossConfig(lam=1.0)

        def loss():
            return wr_loss_with_negatives(model, triples, negatives, loss_cfg,
                                          anchors=anchors).total

        return check_gradients(loss, model.parameters(), f"wr_loss[{g_mapping}]", eps=eps,
                               rtol=rtol, atol=1e-8,
                               max_entries_per_param=max_entries_per_param, rng=rng)
