"""Programmatic invariant suite behind the `selftest` command.

Runs the gradient checks and independent oracles that the test suite
also exercises, without needing pytest: finite differences against the
tape, closed-form and Monte Carlo KL, brute-force sampling filters,
brute-force ROUGE, the annealing shape, and tokenizer round-trips.
"""

from __future__ import annotations

import math
from collections import Counter

import numpy as np

from . import autograd as ag
from . import corpus as cp
from . import evaluation as ev
from . import latent as lt
from . import sampling as sp
from . import training as tr
from .autograd import ParameterSet, Tensor
from .model import StoryVAE
from .transformer import ModelConfig


def _check_unary_ops(report) -> bool:
    rng = np.random.default_rng(11)
    builders = {
        "gelu": ag.gelu,
        "exp": lambda t: ag.exp(ag.mul_scalar(t, 0.3)),
        "softmax": lambda t: ag.softmax(t),
        "log_softmax": lambda t: ag.log_softmax(t),
        "transpose": ag.transpose,
    }
    ok = True
    for name, build in builders.items():
        params = ParameterSet()
        params.add("x", Tensor(rng.standard_normal((5, 7)), dtype=np.float64))
        result = ag.grad_check(lambda p=params, b=build: ag.sum_all(ag.mul(b(p["x"]), b(p["x"]))), params)
        ok &= result.passed
        report(f"{'ok' if result.passed else 'FAIL'} gradient {name} (max rel err {result.max_rel_error:.2e})")
    return ok


def _check_matmul(report) -> bool:
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    got = ag.matmul(a, b).data
    naive = np.zeros((2, 1))
    for i in range(2):
        for j in range(1):
            for k in range(2):
                naive[i, j] += a.data[i, k] * b.data[k, j]
    ok = np.allclose(got, naive) and np.allclose(got, [[3.0], [7.0]])
    report(f"{'ok' if ok else 'FAIL'} matmul against triple-loop oracle")
    return ok


def _check_kl(report) -> bool:
    rng = np.random.default_rng(5)
    ok = True
    q = lt.DiagonalGaussian(Tensor([1.0]), Tensor([0.0]))
    p = lt.DiagonalGaussian(Tensor([0.0]), Tensor([0.0]))
    ok &= abs(float(lt.kl_divergence(q, p).data) - 0.5) < 1e-6
    q2 = lt.DiagonalGaussian(Tensor([0.0]), Tensor([0.5]))
    ok &= abs(float(lt.kl_divergence(q2, p).data) - (math.e - 2.0) / 2.0) < 1e-6
    for _ in range(3):
        mu_q, mu_p = rng.standard_normal(4), rng.standard_normal(4)
        ls_q, ls_p = rng.standard_normal(4) * 0.3, rng.standard_normal(4) * 0.3
        analytic = float(lt.kl_divergence(
            lt.DiagonalGaussian(Tensor(mu_q), Tensor(ls_q)),
            lt.DiagonalGaussian(Tensor(mu_p), Tensor(ls_p)),
        ).data)
        estimate, stderr = lt.kl_monte_carlo(mu_q, ls_q, mu_p, ls_p, 1_000_000, rng)
        ok &= abs(analytic - estimate) < 3.0 * stderr
    report(f"{'ok' if ok else 'FAIL'} KL closed forms and Monte Carlo agreement")
    return ok


def _check_schedule(report) -> bool:
    schedule = tr.TrainingSchedule(total_steps=64, cycle_length=8)
    values = [tr.beta_at(s, schedule) for s in range(16)]
    ok = (
        values[0] == 0.0 and values[4] == 0.0 and values[5] == 0.5
        and values[6] == 1.0 and values[7] == 1.0 and values[8:] == values[:8]
    )
    report(f"{'ok' if ok else 'FAIL'} annealing schedule shape")
    return ok


def _brute_force_filter(logits, k, p, temperature):
    probs = np.exp(np.asarray(logits, np.float64) / temperature - np.max(logits / temperature))
    probs = probs / probs.sum()
    order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))[:k]
    kept, cum = [], 0.0
    for idx in order:
        kept.append(idx)
        cum += probs[idx]
        if cum >= p:
            break
    out = np.zeros_like(probs)
    out[kept] = probs[kept]
    return out / out.sum()


def _check_sampler(report) -> bool:
    rng = np.random.default_rng(7)
    ok = True
    for _ in range(20):
        logits = rng.standard_normal(10) * 2.0
        k = int(rng.integers(1, 11))
        p = float(rng.uniform(0.05, 1.0))
        cfg = sp.SamplerConfig(top_k=k, top_p=p, temperature=1.0, max_new_tokens=1)
        got = sp.filter_logits(logits, cfg)
        want = _brute_force_filter(logits, k, p, 1.0)
        ok &= np.array_equal(got > 0, want > 0) and np.allclose(got, want, atol=1e-9)
    report(f"{'ok' if ok else 'FAIL'} top-k/top-p filter against brute force")
    return ok


def _check_rouge(report) -> bool:
    rng = np.random.default_rng(3)
    vocab = ["sun", "moon", "star", "sky", "sea"]
    ok = True
    s = ev.rouge_scores("the cat sat", "the cat", 1)
    ok &= abs(s.precision - 2 / 3) < 1e-12 and s.recall == 1.0 and abs(s.f1 - 0.8) < 1e-12
    for _ in range(10):
        a = " ".join(rng.choice(vocab, size=rng.integers(1, 8)))
        b = " ".join(rng.choice(vocab, size=rng.integers(1, 8)))
        mine = ev.rouge_scores(a, b, 1)
        ca, cb = Counter(a.split()), Counter(b.split())
        overlap = sum(min(ca[w], cb[w]) for w in ca)
        p = overlap / sum(ca.values())
        r = overlap / sum(cb.values())
        ok &= abs(mine.precision - p) < 1e-12 and abs(mine.recall - r) < 1e-12
    report(f"{'ok' if ok else 'FAIL'} ROUGE against brute-force counts")
    return ok


def _check_roundtrip(report) -> bool:
    rng = np.random.default_rng(13)
    texts = ["hello world", "ααβ", "emoji 🙂 test", "", "aaaa bbbb aaaa"]
    vocab = cp.fit_vocabulary([t for t in texts if t], 280)
    ok = all(vocab.decode(vocab.encode(t)) == t for t in texts)
    for _ in range(50):
        s = "".join(chr(int(c)) for c in rng.integers(32, 1000, size=rng.integers(0, 30)))
        ok &= vocab.decode(vocab.encode(s)) == s
    report(f"{'ok' if ok else 'FAIL'} tokenizer round-trips")
    return ok


def _check_model_gradients(report) -> bool:
    cfg = ModelConfig(
        d=4, layers=1, encoder_layers=1, heads=2, latent_dim=4,
        vocab_size=8, max_seq_len=8, injection_modes=("input", "psa", "softmax"),
    )
    model = StoryVAE.create(cfg, seed=2, dtype=np.float64)
    ag.rescale_for_grad_check(model.params, np.random.default_rng(21))
    example = cp.EncodedExample(
        prior_input=np.array([1, 2]),
        posterior_input=np.array([1, 2, 7, 3]),
        decoder_input=np.array([1, 2, 7, 3]),
        targets=np.array([2, 7, 3, 7]),
        loss_mask=np.array([False, False, True, True]),
        pair=None,
    )
    noise = np.random.default_rng(4).standard_normal(cfg.latent_dim)
    result = ag.grad_check(lambda: model.cvae_loss(example, noise, beta=0.7)[0], model.params, eps=1e-5)
    report(
        f"{'ok' if result.passed else 'FAIL'} full objective gradient check "
        f"(max rel err {result.max_rel_error:.2e} at {result.worst_parameter})"
    )
    return result.passed


def run_all(report=print) -> int:
    """Run every check; returns the number of failures."""
    checks = [
        _check_matmul,
        _check_unary_ops,
        _check_kl,
        _check_schedule,
        _check_sampler,
        _check_rouge,
        _check_roundtrip,
        _check_model_gradients,
    ]
    failures = 0
    for check in checks:
        try:
            if not check(report):
                failures += 1
        except Exception as e:  # a crash counts as a failed check
            report(f"FAIL {check.__name__}: {type(e).__name__}: {e}")
            failures += 1
    return failures
