"""Finite-difference verification of every primitive, loss and encoder parameter group."""
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import losses as L
from .autograd import Tensor
from .encoders import Discriminator, TextEncoder, VisualEncoder

TOL = 1e-4
MAX_COORDS = 24


def _bogus(x, amount=1e-3):
    """Zero in the forward pass, a constant in the backward pass (negative control)."""
    def bw(g):
        ag._accum(x, np.full(x.shape, amount) * g)
    return ag._node(np.zeros(()), (x,), "bogus", bw)


@dataclass
class ComponentResult:
    name: str
    instances: int = 0
    max_rel_error: float = 0.0
    failures: list = field(default_factory=list)  # (instance seed, flat coordinate, analytic, numeric)

    @property
    def passed(self):
        return not self.failures


# Each builder takes an rng and returns (f, x): f maps the tensor x to a scalar.

def _unary(op, lo=-2.0, hi=2.0):
    def build(rng):
        x = Tensor(rng.uniform(lo, hi, (3, 4)))
        r = rng.standard_normal((3, 4))
        return (lambda t: (op(t) * r).sum()), x
    return build


def _binary(op, which):
    def build(rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        r = rng.standard_normal((3, 4))
        if which == 0:
            return (lambda t: (op(t, Tensor(b)) * r).sum()), Tensor(a)
        return (lambda t: (op(Tensor(a), t) * r).sum()), Tensor(b)
    return build


def _matmul(rng):
    a, b = rng.standard_normal((3, 5)), Tensor(rng.standard_normal((5, 2)))
    r = rng.standard_normal((3, 2))
    return (lambda t: ((t @ b) * r).sum()), Tensor(a)


def _mean_rows(rng):
    x = Tensor(rng.standard_normal((4, 3)))
    r = rng.standard_normal(3)
    return (lambda t: (t.mean(axis=0) * r).sum()), x


def _embedding(rng):
    table = Tensor(rng.standard_normal((7, 3)))
    ids = rng.integers(0, 7, size=9)
    r = rng.standard_normal((9, 3))
    return (lambda t: (ag.embedding(t, ids) * r).sum()), table


def _concat(rng):
    a, b = rng.standard_normal((3, 2)), Tensor(rng.standard_normal((3, 4)))
    r = rng.standard_normal((3, 6))
    return (lambda t: (ag.concat([t, b], axis=1) * r).sum()), Tensor(a)


def _batch_norm(training):
    def build(rng):
        x = Tensor(rng.standard_normal((6, 4)) * 2 + 1)
        gamma = Tensor(rng.uniform(0.5, 1.5, 4))
        beta = Tensor(rng.standard_normal(4))
        rm, rv = rng.standard_normal(4), rng.uniform(0.5, 2.0, 4)
        r = rng.standard_normal((6, 4))
        f = lambda t: (ag.batch_norm(t, gamma, beta, rm, rv, training=training, update_stats=False) * r).sum()
        return f, x
    return build


def _softmax(rng):
    x = Tensor(rng.standard_normal((3, 5)))
    r = rng.standard_normal((3, 5))
    return (lambda t: (ag.softmax_rows(t) * r).sum()), x


def _l2norm(rng):
    x = Tensor(rng.standard_normal((3, 5)))
    r = rng.standard_normal((3, 5))
    return (lambda t: (ag.l2_normalize_rows(t) * r).sum()), x


def _lstm(rng):
    T, B, H = 4, 3, 3
    xp = rng.standard_normal((T * B, 4 * H))
    w = Tensor(rng.standard_normal((H, 4 * H)) * 0.5)
    lengths = np.array([4, 2, 3])
    mask = (np.arange(T)[:, None] < lengths[None, :]).astype(float)
    r = rng.standard_normal((B, H))
    return (lambda t: (ag.lstm_sequence(Tensor(xp), t, mask) * r).sum()), w


def _labels(rng, B, C):
    y = rng.integers(0, C, size=B)
    y[:2] = y[0]  # at least one repeated identity, so q has a multi-match row
    return y


def _id_loss(wrt):
    def build(rng):
        B, C, E = 6, 4, 5
        emb = Tensor(rng.standard_normal((B, E)))
        W, b = Tensor(rng.standard_normal((C, E))), Tensor(rng.standard_normal(C) * 0.1)
        y = _labels(rng, B, C)
        if wrt == "emb":
            return (lambda t: L.identification_loss(t, y, L.ClassifierHead(W, b))), emb
        if wrt == "W":
            return (lambda t: L.identification_loss(emb, y, L.ClassifierHead(t, b))), W
        return (lambda t: L.identification_loss(emb, y, L.ClassifierHead(W, t))), b
    return build


def _cmpm(wrt):
    def build(rng):
        phi, tau = Tensor(rng.standard_normal((4, 8))), Tensor(rng.standard_normal((4, 8)))
        q = L.true_matching_distribution(_labels(rng, 4, 3))

        def f(t):
            a, b = (t, tau) if wrt == "phi" else (phi, t)
            return L.cmpm_loss(L.matching_probabilities(a, ag.l2_normalize_rows(b)), q)
        return f, (phi if wrt == "phi" else tau)
    return build


def _projection(direction, wrt):
    def build(rng):
        phi, tau = Tensor(rng.standard_normal((5, 6))), Tensor(rng.standard_normal((5, 6)))
        q = L.true_matching_distribution(_labels(rng, 5, 3))

        def f(t):
            p_, t_ = (t, tau) if wrt == "phi" else (phi, t)
            return L.projection_matching_loss(p_, t_, q) if direction == "v2t" else L.projection_matching_loss(t_, p_, q)
        return f, (phi if wrt == "phi" else tau)
    return build


def _adv(kind, wrt):
    def build(rng):
        dv, dt = Tensor(rng.uniform(0.05, 0.95, (5, 1))), Tensor(rng.uniform(0.05, 0.95, (5, 1)))
        fn = L.discriminator_loss if kind == "disc" else L.generator_adversarial_loss
        if wrt == "visual":
            return (lambda t: fn(t, dt)), dv
        return (lambda t: fn(dv, t)), dt
    return build


def _soft_bce(rng):
    d = Tensor(rng.uniform(0.05, 0.95, (6, 1)))
    targets = np.r_[rng.uniform(0.8, 1.2, 3), rng.uniform(0.0, 0.3, 3)]
    return (lambda t: L.soft_target_bce(t, targets)), d


def _visual_param(name):
    def build(rng):
        enc = VisualEncoder(rng, 5, hidden=6, out_dim=4)
        for k, p in enc.parameters().items():
            if k.startswith("b"):
                p.data = rng.standard_normal(p.shape) * 0.1
        obs = rng.standard_normal((3, 5))
        r = rng.standard_normal((3, 4))
        p = enc.parameters()[name]

        def f(t):
            setattr(enc, name, t)
            return (enc(obs) * r).sum()
        return f, p
    return build


def _text_param(name):
    def build(rng):
        enc = TextEncoder(rng, vocab_size=9, word_dim=4, hidden=3, out_dim=4, frozen=False)
        for d in ("fwd", "bwd"):
            enc.lstm[d]["b"].data = rng.standard_normal(12) * 0.1
        tokens = rng.integers(1, 9, size=(3, 5))
        lengths = np.array([5, 2, 4])
        r = rng.standard_normal((3, 4))
        holder, _, key = name.partition(".")
        p = enc.parameters()[name]

        def f(t):
            if key:
                enc.lstm[holder][key] = t
            elif name == "table":
                enc.table = t
            else:
                setattr(enc, name, t)
            return (enc(tokens, lengths) * r).sum()
        return f, p
    return build


def _disc_param(name):
    def build(rng):
        d = Discriminator(rng, in_dim=5, hidden=4)
        d.beta.data = rng.standard_normal(4) * 0.1
        emb = rng.standard_normal((6, 5))
        r = rng.standard_normal((6, 1))
        p = d.parameters()[name]
        # training-mode BN cancels b1 exactly, so its gradient is only visible in eval mode
        training = name != "b1"

        def f(t):
            setattr(d, name, t)
            return (d(emb, training=training, update_stats=False) * r).sum()
        return f, p
    return build


def _disc_input(rng):
    d = Discriminator(rng, in_dim=5, hidden=4)
    r = rng.standard_normal((6, 1))
    return (lambda t: (d(t, training=True, update_stats=False) * r).sum()), Tensor(rng.standard_normal((6, 5)))


COMPONENTS = {
    "add": _binary(lambda a, b: a + b, 0),
    "mul": _binary(lambda a, b: a * b, 1),
    "scale": _unary(lambda t: ag.scale(t, -1.7)),
    "log": _unary(ag.log, 0.2, 3.0),
    "exp": _unary(ag.exp),
    "sigmoid": _unary(ag.sigmoid),
    "tanh": _unary(ag.tanh),
    "leaky_relu": _unary(lambda t: ag.leaky_relu(t, 0.2)),
    "matmul": _matmul,
    "mean": _mean_rows,
    "embedding": _embedding,
    "concat": _concat,
    "batch_norm_train": _batch_norm(True),
    "batch_norm_eval": _batch_norm(False),
    "softmax_rows": _softmax,
    "l2_normalize_rows": _l2norm,
    "lstm_sequence": _lstm,
    "identification_loss/emb": _id_loss("emb"),
    "identification_loss/W": _id_loss("W"),
    "identification_loss/b": _id_loss("b"),
    "cmpm_loss/phi": _cmpm("phi"),
    "cmpm_loss/tau": _cmpm("tau"),
    "matching_v2t/phi": _projection("v2t", "phi"),
    "matching_v2t/tau": _projection("v2t", "tau"),
    "matching_t2v/phi": _projection("t2v", "phi"),
    "matching_t2v/tau": _projection("t2v", "tau"),
    "discriminator_loss/visual": _adv("disc", "visual"),
    "discriminator_loss/text": _adv("disc", "text"),
    "generator_adversarial_loss/visual": _adv("gen", "visual"),
    "generator_adversarial_loss/text": _adv("gen", "text"),
    "soft_target_bce": _soft_bce,
    "discriminator/input": _disc_input,
}
COMPONENTS.update({f"visual_encoder/{k}": _visual_param(k) for k in ("W1", "b1", "W2", "b2", "W3", "b3")})
COMPONENTS.update({f"text_encoder/{k}": _text_param(k) for k in
                   ("table", "fwd.W_ih", "fwd.W_hh", "fwd.b", "bwd.W_ih", "bwd.W_hh", "bwd.b", "W_proj", "b_proj")})
COMPONENTS.update({f"discriminator/{k}": _disc_param(k) for k in ("W1", "b1", "gamma", "beta", "W2", "b2")})


def check_component(name, seed=0, instances=3, tol=TOL, corrupt=False):
    res = ComponentResult(name)
    for i in range(instances):
        inst_seed = [seed, i, len(name), sum(name.encode())]
        rng = np.random.default_rng(inst_seed)
        f, x = COMPONENTS[name](rng)
        if corrupt:
            base = f
            f = lambda t, base=base: base(t) + _bogus(t)
        coords = None
        if x.size > MAX_COORDS:
            coords = np.sort(rng.choice(x.size, MAX_COORDS, replace=False))
        rep = ag.grad_check(f, x, tol=tol, coords=coords)
        res.instances += 1
        res.max_rel_error = max(res.max_rel_error, rep.max_rel_error)
        idx = np.arange(x.size) if coords is None else coords
        for k in np.flatnonzero(rep.rel_errors >= tol):
            res.failures.append((i, int(idx[k]), float(rep.analytic[k]), float(rep.numeric[k])))
    return res


def run_all(seed=0, instances=3, tol=TOL, corrupt=()):
    t0 = time.perf_counter()
    results = [check_component(n, seed, instances, tol, n in corrupt) for n in COMPONENTS]
    return results, time.perf_counter() - t0


def format_report(results, elapsed, tol=TOL):
    lines = [f"{'component':40s} {'instances':>9s} {'max_rel_error':>14s}  status"]
    for r in results:
        lines.append(f"{r.name:40s} {r.instances:9d} {r.max_rel_error:14.3e}  {'ok' if r.passed else 'FAIL'}")
    total = sum(r.instances for r in results)
    failed = [r for r in results if not r.passed]
    for r in failed:
        for inst, coord, a, n in r.failures[:10]:
            lines.append(f"  {r.name}: instance {inst} coordinate {coord} analytic {a:.10g} numeric {n:.10g}")
    lines.append(f"{total} instances, {len(results) - len(failed)}/{len(results)} components pass at tol {tol:g}, "
                 f"{elapsed:.1f}s")
    return "\n".join(lines)
