"""SGD with momentum, Adam, and a divide-by-ten plateau schedule.

Both optimizers use coupled weight decay (decay * theta added to the gradient).
Parameters with ``requires_grad == False`` (a frozen word table) are skipped.
"""
import numpy as np

from .errors import ContractError, NumericalError

LR_FLOOR = 2e-6


class Optimizer:
    kind = None

    def __init__(self, params, lr, weight_decay=4e-4):
        self.params = dict(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.state = {}

    def _grads(self):
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            if p.grad is None:
                raise ContractError(f"no gradient for registered parameter {name!r}")
            yield name, p, p.grad + self.weight_decay * p.data

    def _commit(self, name, p, new):
        if not np.isfinite(new).all():
            raise NumericalError(f"optimizer step made {name!r} non-finite")
        p.data = new

    def state_arrays(self):
        """Flat name -> array view of the optimizer state, for checkpoints."""
        out = {"lr": np.array([self.lr])}
        for pname, st in self.state.items():
            for k, v in st.items():
                out[f"{pname}/{k}"] = np.asarray(v, dtype=np.float64)
        return out

    def load_state_arrays(self, arrays):
        self.lr = float(arrays["lr"][0])
        self.state = {}
        for key, v in arrays.items():
            if key == "lr":
                continue
            pname, k = key.rsplit("/", 1)
            val = float(v.reshape(-1)[0]) if k == "t" else np.array(v)
            self.state.setdefault(pname, {})[k] = val


class SGDMomentum(Optimizer):
    kind = "sgd_momentum"

    def __init__(self, params, lr, momentum=0.9, weight_decay=4e-4):
        super().__init__(params, lr, weight_decay)
        self.momentum = float(momentum)

    def step(self):
        for name, p, g in list(self._grads()):
            st = self.state.setdefault(name, {"v": np.zeros_like(p.data)})
            st["v"] = self.momentum * st["v"] + g
            self._commit(name, p, p.data - self.lr * st["v"])


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=4e-4):
        super().__init__(params, lr, weight_decay)
        self.beta1, self.beta2 = map(float, betas)
        self.eps = float(eps)

    def step(self):
        for name, p, g in list(self._grads()):
            st = self.state.setdefault(name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0.0})
            st["t"] += 1.0
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * g * g
            m_hat = st["m"] / (1.0 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1.0 - self.beta2 ** st["t"])
            self._commit(name, p, p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


class PlateauScheduler:
    """Divide every optimizer's lr by ``factor`` after ``patience`` stalled evaluations.

    A metric counts as an improvement when it beats the best seen by more
    than ``threshold`` relative to |best|.
    """

    def __init__(self, optimizers, patience=3, threshold=1e-3, factor=10.0, floor=LR_FLOOR):
        self.optimizers = list(optimizers)
        self.patience = patience
        self.threshold = threshold
        self.factor = factor
        self.floor = floor
        self.best = None
        self.stalled = 0
        self.history = []

    def step(self, metric):
        metric = float(metric)
        self.history.append(metric)
        if self.best is None or self.best - metric > self.threshold * abs(self.best):
            self.best = metric
            self.stalled = 0
        else:
            self.stalled += 1
            if self.stalled >= self.patience:
                for opt in self.optimizers:
                    opt.lr = min(opt.lr, max(opt.lr / self.factor, self.floor))
                self.stalled = 0
        return self.lr

    @property
    def lr(self):
        return self.optimizers[0].lr if self.optimizers else None
