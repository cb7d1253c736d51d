"""l-inf bounded adversarial examples: FGSM, PGD, CW and transfer (black-box) FGSM.

Every attack works on a batch ``x`` of shape (N, C, T) and returns an
``AdversarialSet``. Perturbations are built in delta space and then added
to ``x`` once, so the stored ``delta`` is exact (FGSM deltas are exactly
``{-eps, 0, +eps}``) and ``x_adv == x + delta`` bitwise.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

PHASES = ("train", "test-whitebox", "test-blackbox")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    alpha: float = 0.01
    n_iter: int = 30
    random_start: bool = True
    kappa: float = 0.0
    cw_steps: int = 60
    cw_binary_steps: int = 9
    cw_c_init: float = 1.0
    cw_c_min: float = 1e-3
    cw_c_max: float = 1e6
    cw_lr: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be nonnegative")
        # a zero step is only meaningful with a zero budget
        if self.alpha < 0 or (self.alpha == 0 and self.epsilon > 0):
            raise ConfigError("alpha must be positive")
        if self.alpha > self.epsilon:
            raise ConfigError("PGD step alpha must not exceed epsilon")
        if self.n_iter < 1:
            raise ConfigError("n_iter must be at least 1")
        if self.kappa < 0:
            raise ConfigError("kappa must be nonnegative")
        if self.cw_steps < 1 or self.cw_binary_steps < 1:
            raise ConfigError("CW step counts must be positive")
        if not 0 < self.cw_c_min <= self.cw_c_init <= self.cw_c_max:
            raise ConfigError("need 0 < cw_c_min <= cw_c_init <= cw_c_max")
        if not self.cw_lr > 0:
            raise ConfigError("cw_lr must be positive")


@dataclass(frozen=True)
class AdversarialRecord:
    x: np.ndarray
    x_adv: np.ndarray
    y: int
    y_adv: int
    success: bool
    l2_norm: float
    linf_norm: float


@dataclass(frozen=True, eq=False)
class AdversarialSet:
    """Batch of attack results.

    ``y_clean`` and ``y_adv`` are the *target* model's predictions on ``x``
    and ``x_adv``; for transfer attacks they differ from the model the
    perturbation was computed on.
    """

    attack: str
    x: np.ndarray
    delta: np.ndarray
    x_adv: np.ndarray
    y: np.ndarray
    y_clean: np.ndarray
    y_adv: np.ndarray
    ids: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.y)

    @property
    def success(self):
        return self.y_adv != self.y

    @property
    def l2_norm(self):
        return np.sqrt(np.sum(self.delta.reshape(len(self), -1) ** 2, axis=1))

    @property
    def linf_norm(self):
        if len(self) == 0:
            return np.zeros(0)
        return np.abs(self.delta.reshape(len(self), -1)).max(axis=1)

    def subset(self, index):
        extra = {k: v[index] for k, v in self.extra.items()}
        return AdversarialSet(
            self.attack, self.x[index], self.delta[index], self.x_adv[index], self.y[index],
            self.y_clean[index], self.y_adv[index], self.ids[index], extra,
        )

    def record(self, i):
        return AdversarialRecord(
            x=self.x[i], x_adv=self.x_adv[i], y=int(self.y[i]), y_adv=int(self.y_adv[i]),
            success=bool(self.success[i]), l2_norm=float(self.l2_norm[i]), linf_norm=float(self.linf_norm[i]),
        )

    def records(self):
        return [self.record(i) for i in range(len(self))]

    def summary(self):
        """Per-record norms and flags, in the shape of the JSON sidecar."""
        l2, linf, ok = self.l2_norm, self.linf_norm, self.success
        return {
            "attack": self.attack,
            "records": [
                {"id": int(self.ids[i]), "y": int(self.y[i]), "y_adv": int(self.y_adv[i]),
                 "success": bool(ok[i]), "l2_norm": float(l2[i]), "linf_norm": float(linf[i])}
                for i in range(len(self))
            ],
        }

    def save_sidecar(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=1, sort_keys=True)


def _prepare(x, y, ids):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if ids is None:
        ids = np.arange(len(y), dtype=np.int64)
    return x, y, np.asarray(ids, dtype=np.int64)


def _finish(name, x, delta, y, ids, target, extra=None):
    x_adv = x + delta
    return AdversarialSet(
        attack=name, x=x, delta=delta, x_adv=x_adv, y=y,
        y_clean=target.predict(x), y_adv=target.predict(x_adv), ids=ids, extra=extra or {},
    )


def fgsm(model, x, y, config=AttackConfig(), ids=None, target=None):
    """One signed-gradient step of size epsilon on the cross-entropy loss.

    ``target`` (default: ``model``) is the classifier whose predictions
    decide success.
    """
    x, y, ids = _prepare(x, y, ids)
    grad = M.input_gradient(model, x, y)
    delta = config.epsilon * np.sign(grad)
    return _finish("fgsm", x, delta, y, ids, target or model)


def pgd(model, x, y, config=AttackConfig(), ids=None, rng=None):
    """Random start in the eps-box, then ``n_iter`` signed steps of size alpha,
    each followed by projection back into the box around ``x``."""
    x, y, ids = _prepare(x, y, ids)
    eps = config.epsilon
    if config.random_start:
        rng = np.random.default_rng(config.seed if rng is None else rng)
        delta = rng.uniform(-eps, eps, size=x.shape)
    else:
        delta = np.zeros_like(x)
    for _ in range(config.n_iter):
        grad = M.input_gradient(model, x + delta, y)
        delta = np.clip(delta + config.alpha * np.sign(grad), -eps, eps)
    return _finish("pgd", x, delta, y, ids, model)


def logit_margin(logits, y):
    """Z_y - max_{i != y} Z_i and the runner-up index."""
    n = len(y)
    other = logits.copy()
    other[np.arange(n), y] = -np.inf
    j = np.argmax(other, axis=1)
    return logits[np.arange(n), y] - other[np.arange(n), j], j


def cw_hinge(model, x, y, kappa=0.0):
    """max(Z_y - max_{i != y} Z_i, -kappa) on the pre-softmax logits."""
    x, y, _ = _prepare(x, y, None)
    margin, _ = logit_margin(M.forward(model, x), y)
    return np.maximum(margin, -kappa)


def _cw_objective(model, x, y, delta, c, kappa):
    n = len(y)
    active = {}

    def grad_fn(logits):
        margin, j = logit_margin(logits, y)
        g = np.zeros_like(logits)
        g[np.arange(n), y] = 1.0
        g[np.arange(n), j] = -1.0
        active["margin"] = margin
        return g * (c * (margin > -kappa))[:, None]

    _, grad = M.logits_and_gradient(model, x + delta, grad_fn)
    margin = active["margin"]
    norm = np.sqrt(np.sum(delta.reshape(n, -1) ** 2, axis=1))
    safe = np.where(norm > 0, norm, 1.0)
    grad = grad + delta / safe[:, None, None]
    obj = norm + c * np.maximum(margin, -kappa)
    return obj, margin, grad, norm


def _cw_hit(margin, kappa):
    return (margin < 0) & (margin <= -kappa)


def cw(model, x, y, config=AttackConfig(), ids=None):
    """Minimize ||delta||_2 + c * hinge(x + delta) with a per-example binary
    search over c, then clip the best perturbation into the eps-box.

    The inner solver is plain gradient descent whose per-example step halves
    (and the step is rejected) whenever the objective would increase. ``c``
    doubles until the first success, then bisects. Success at a given ``c``
    means some iterate reached a logit margin below zero and at most
    ``-kappa``; the smallest such delta is kept. Examples never fooled keep
    the last iterate. ``extra["success_preclip"]`` records success before
    the clip; ``y_adv`` is evaluated after it.
    """
    x, y, ids = _prepare(x, y, ids)
    n = len(y)
    kappa = config.kappa
    c = np.full(n, float(config.cw_c_init))
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    best_l2 = np.full(n, np.inf)
    best = np.zeros_like(x)
    last = np.zeros_like(x)

    for _ in range(config.cw_binary_steps):
        delta = np.zeros_like(x)
        lr = np.full(n, config.cw_lr)
        obj, margin, grad, norm = _cw_objective(model, x, y, delta, c, kappa)
        found = _cw_hit(margin, kappa)
        improve = found & (norm < best_l2)
        best[improve], best_l2[improve] = delta[improve], norm[improve]
        for _ in range(config.cw_steps):
            cand = delta - lr[:, None, None] * grad
            c_obj, c_margin, c_grad, c_norm = _cw_objective(model, x, y, cand, c, kappa)
            hit = _cw_hit(c_margin, kappa)
            improve = hit & (c_norm < best_l2)
            best[improve], best_l2[improve] = cand[improve], c_norm[improve]
            found |= hit
            accept = c_obj <= obj
            delta[accept], obj[accept], grad[accept] = cand[accept], c_obj[accept], c_grad[accept]
            lr[~accept] *= 0.5
        last = delta
        hi = np.where(found, np.minimum(hi, c), hi)
        lo = np.where(found, lo, np.maximum(lo, c))
        c = np.where(np.isfinite(hi), 0.5 * (lo + hi), 2.0 * c)
        c = np.clip(c, config.cw_c_min, config.cw_c_max)

    success_preclip = np.isfinite(best_l2)
    chosen = np.where(success_preclip[:, None, None], best, last)
    delta = np.clip(chosen, -config.epsilon, config.epsilon)
    out = _finish("cw", x, delta, y, ids, model, {"success_preclip": success_preclip})
    logger.debug("cw: %d/%d fooled before clipping, %d after", success_preclip.sum(), n, out.success.sum())
    return out


def train_substitute(target, layers, probe_x, config=M.TrainConfig(), holdout_fraction=0.2, seed=0):
    """Fit ``layers`` on probes labeled by ``target``'s argmax (never ground truth).

    Returns ``(substitute, agreement)`` where agreement is measured on a
    random held-out fraction of the probes (on the training probes when the
    holdout would be empty).
    """
    probe_x = np.asarray(probe_x, dtype=np.float64)
    if probe_x.shape[0] == 0:
        raise DataError("empty probe set")
    labels = target.predict(probe_x)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(probe_x))
    n_hold = int(round(holdout_fraction * len(probe_x)))
    if n_hold >= len(probe_x):
        n_hold = 0
    hold, fit = order[:n_hold], order[n_hold:]
    sub = M.train(layers, probe_x[fit], labels[fit], config, input_shape=target.input_shape)
    check = hold if n_hold else fit
    agreement = float(np.mean(sub.predict(probe_x[check]) == labels[check]))
    return sub, agreement


def blackbox_fgsm(target, substitute, x, y, config=AttackConfig(), ids=None):
    """FGSM computed on ``substitute``; success judged by ``target``."""
    out = fgsm(substitute, x, y, config, ids=ids, target=target)
    return AdversarialSet("blackbox", out.x, out.delta, out.x_adv, out.y, out.y_clean, out.y_adv, out.ids)


def filter_effective(adv, phase):
    """Keep records per the evaluation protocol.

    ``train`` and ``test-whitebox``: clean input correct and adversarial input
    wrong. ``test-blackbox``: clean input correct, whatever the attack did.
    """
    if phase not in PHASES:
        raise ConfigError(f"phase must be one of {PHASES}")
    keep = adv.y_clean == adv.y
    if phase != "test-blackbox":
        keep &= adv.y_adv != adv.y
    return adv.subset(keep)
