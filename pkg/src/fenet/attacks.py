"""Gradient attacks: FGSM, BIM, PGD, through-filter (BPDA) and ensemble-sum.

All attacks work on batches internally and accept three kinds of target:
a bare Network, a (FilterSpec, Network) sub-model (also any object with
.filter/.net), or an ensemble object exposing .submodels and
classify_batch. Through-filter gradients substitute the filter's backward
rule; success is always judged by the attacked model's own prediction.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import filters as flt
from .util import clamp01, rng_from

METHODS = ("fgsm", "bim", "pgd")


@dataclass
class AttackConfig:
    method: str = "pgd"
    radius: float = 8 / 255
    norm: float = np.inf
    steps: int = 20
    step_size: float = None
    random_init: bool = True
    bpda: str = "identity"
    loss_sign: str = "ascend"
    rng_seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.radius < 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        if self.norm in ("inf", "Inf", np.inf):
            self.norm = np.inf
        elif self.norm in (2, 2.0, "2"):
            self.norm = 2.0
        else:
            raise ValueError(f"norm must be 2 or inf, got {self.norm!r}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None:
            if not self.step_size > 0:
                raise ValueError(f"step_size must be positive, got {self.step_size}")
            if self.method in ("bim", "pgd") and self.step_size > self.radius:
                raise ValueError(
                    f"step_size {self.step_size} exceeds radius {self.radius}"
                )
        if self.bpda not in ("off", "identity", "adjoint"):
            raise ValueError(f"bpda must be off, identity or adjoint, got {self.bpda!r}")
        if self.loss_sign not in ("ascend", "paper_literal"):
            raise ValueError(f"loss_sign must be ascend or paper_literal, got {self.loss_sign!r}")
        if self.method in ("fgsm", "bim") and self.norm != np.inf:
            raise ValueError(f"{self.method} is defined for the sup norm only")

    def resolved_step_size(self):
        return self.radius / 10 if self.step_size is None else self.step_size


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success: bool
    queries: int
    final_label: int


# ------------------------------------------------------------- model adapters

class _PlainTarget:
    def __init__(self, net):
        self.net = net

    def grad_batch(self, xb, labels):
        return self.net.grad_input_batch(xb, labels)

    def classify_batch(self, xb):
        return self.net.classify_batch(xb)


class _FilteredTarget:
    def __init__(self, spec, net, bpda_mode):
        if bpda_mode == "off":
            raise ValueError(
                "attacking through a filter needs a backward substitution; "
                "set bpda to 'identity' or 'adjoint'"
            )
        self.spec = spec
        self.net = net
        self.bpda_mode = bpda_mode

    def grad_batch(self, xb, labels):
        zb = flt.apply_batch(self.spec, xb)
        gz = self.net.grad_input_batch(zb, labels)
        in_shape = xb.shape[1:]
        return np.stack(
            [flt.bpda_backward(self.spec, g, in_shape, mode=self.bpda_mode) for g in gz]
        )

    def classify_batch(self, xb):
        return self.net.classify_batch(flt.apply_batch(self.spec, xb))


class _SummedTarget:
    def __init__(self, ensemble, bpda_mode):
        self.parts = [
            _FilteredTarget(sm.filter, sm.net, bpda_mode) for sm in ensemble.submodels
        ]
        self.ensemble = ensemble

    def grad_batch(self, xb, labels):
        total = self.parts[0].grad_batch(xb, labels)
        for part in self.parts[1:]:
            total = total + part.grad_batch(xb, labels)
        return total

    def classify_batch(self, xb):
        return self.ensemble.classify_batch(xb)


def _adapt(model, cfg):
    if hasattr(model, "submodels") and hasattr(model, "classify_batch"):
        return _SummedTarget(model, cfg.bpda)
    if hasattr(model, "grad_input_batch"):
        return _PlainTarget(model)
    if hasattr(model, "filter") and hasattr(model, "net"):
        return _FilteredTarget(model.filter, model.net, cfg.bpda)
    if isinstance(model, (tuple, list)) and len(model) == 2:
        return _FilteredTarget(model[0], model[1], cfg.bpda)
    raise TypeError(f"cannot attack object of type {type(model).__name__}")


# ------------------------------------------------------------- attack engine

def _norms(d, p):
    flat = d.reshape(len(d), -1)
    if p == np.inf:
        return np.abs(flat).max(axis=1)
    return np.linalg.norm(flat, axis=1)


def _project(d, r, p):
    """Ball projection: inside the ball unchanged, outside mapped back to it.

    The sup-norm ball projection is the coordinate-wise clip; the L2 ball
    projection rescales the offset radially onto the sphere.
    """
    if p == np.inf:
        return np.clip(d, -r, r)
    n = _norms(d, 2.0)
    scale = np.ones(len(d))
    out = n >= r
    scale[out] = r / n[out]
    return d * scale.reshape(-1, *([1] * (d.ndim - 1)))


def _direction(g, p):
    if p == np.inf:
        return np.sign(g)
    n = _norms(g, 2.0)
    d = np.zeros_like(g)
    ok = n > 0
    d[ok] = g[ok] / n[ok].reshape(-1, *([1] * (g.ndim - 1)))
    return d


def _init_point(rng, shape, r, p):
    if p == np.inf:
        return rng.uniform(-r, r, size=shape)
    v = rng.standard_normal(shape)
    nv = np.linalg.norm(v)
    if nv == 0:
        return np.zeros(shape)
    u = rng.uniform() ** (1.0 / v.size)
    return v * (r * u / nv)


def run_attack_batch(model, xb, labels, cfg: AttackConfig, image_ids=None, trace=None):
    """Attack a batch; returns a list of AttackResult in input order.

    image_ids key the per-image RNG streams for random initialization, so a
    batch and a rerun of any single image produce the same adversarial.
    """
    target = _adapt(model, cfg)
    xb = np.asarray(xb, dtype=np.float64)
    labels = np.asarray(labels)
    if image_ids is None:
        image_ids = np.arange(len(xb))
    r = float(cfg.radius)
    sgn = 1.0 if cfg.loss_sign == "ascend" else -1.0
    p = cfg.norm

    if cfg.method == "fgsm":
        steps, alpha, random_init = 1, r, False
    else:
        steps, alpha, random_init = cfg.steps, cfg.resolved_step_size(), cfg.random_init
    if cfg.method == "bim":
        random_init = False

    adv = xb.copy()
    grad_calls = 0
    if r > 0:
        if cfg.method == "pgd" and random_init:
            deltas = np.stack(
                [
                    _init_point(rng_from(cfg.rng_seed, int(i)), xb.shape[1:], r, p)
                    for i in image_ids
                ]
            )
            adv = clamp01(xb + deltas)
        for step in range(steps):
            g = sgn * target.grad_batch(adv, labels)
            grad_calls += 1
            moved = adv + alpha * _direction(g, p)
            d = moved - xb
            if cfg.method == "bim":
                d = np.clip(d, -r, r)
            else:
                d = _project(d, r, p)
            adv = clamp01(xb + d)
            if trace is not None:
                trace(step, adv)

    final = target.classify_batch(adv)
    queries = grad_calls + 1
    return [
        AttackResult(
            adversarial=adv[i],
            success=bool(final[i] != labels[i]),
            queries=queries,
            final_label=int(final[i]),
        )
        for i in range(len(adv))
    ]


def _single(model, x, label, cfg, image_id, trace=None):
    return run_attack_batch(
        model, np.asarray(x)[None], [label], cfg, image_ids=[image_id], trace=trace
    )[0]


def fgsm(model, x, label, cfg: AttackConfig, image_id=0) -> AttackResult:
    return _single(model, x, label, replace(cfg, method="fgsm"), image_id)


def bim(model, x, label, cfg: AttackConfig, image_id=0) -> AttackResult:
    return _single(model, x, label, replace(cfg, method="bim"), image_id)


def pgd(model, x, label, cfg: AttackConfig, image_id=0, trace=None) -> AttackResult:
    return _single(model, x, label, replace(cfg, method="pgd"), image_id, trace=trace)


def attack_submodel_bpda(submodel, x, label, cfg: AttackConfig, image_id=0) -> AttackResult:
    """Attack one (filter, network) pair through its BPDA backward rule."""
    if cfg.bpda == "off":
        raise ValueError("bpda must be 'identity' or 'adjoint' for a filtered sub-model")
    return _single(submodel, x, label, cfg, image_id)


def attack_ensemble(ensemble, x, label, cfg: AttackConfig, image_id=0) -> AttackResult:
    """Whole-ensemble attack: step direction sums sub-model gradients."""
    return _single(ensemble, x, label, cfg, image_id)


# ------------------------------------------------------------- transfer study

def transfer_eval(source_model, targets: dict, dataset, epsilons, cfg: AttackConfig):
    """Craft adversarials on the source at each radius, score every target on them.

    Returns rows (epsilon, model_name, accuracy), targets in dict order.
    epsilon == 0 rows report plain clean accuracy.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    xb = dataset.images
    labels = dataset.labels
    ids = np.arange(len(dataset))
    rows = []
    for eps in epsilons:
        if eps == 0:
            adv = xb
        else:
            results = run_attack_batch(
                source_model, xb, labels, replace(cfg, radius=float(eps)), image_ids=ids
            )
            adv = np.stack([res.adversarial for res in results])
        for name, model in targets.items():
            pred = _adapt(model, cfg).classify_batch(adv)
            rows.append((float(eps), name, float(np.mean(pred == labels))))
    return rows


def accuracy_table_csv(rows) -> str:
    """CSV with columns epsilon,model_name,accuracy; epsilon printed in /255 units."""
    lines = ["epsilon,model_name,accuracy"]
    for eps, name, acc in rows:
        lines.append(f"{int(round(eps * 255))},{name},{acc:.6f}")
    return "\n".join(lines) + "\n"
