"""Filtered sub-model ensembles: voting, score averaging, certification.

An ensemble holds (filter, network) pairs that each see their own view of
the image. Vote mode takes the most common label; score mode averages
softmax probabilities. Certification bounds label stability of a single
network around a filtered input via its Lipschitz product bound.
"""

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import filters as flt
from . import model_io, nn
from .attacks import AttackConfig, run_attack_batch
from .util import clamp01, rng_from


@dataclass
class SubModel:
    name: str
    filter: flt.FilterSpec
    net: "nn.Network"

    def check_compatible(self, image_shape):
        out = flt.output_shape(self.filter, image_shape)
        if tuple(out) != tuple(self.net.input_shape):
            raise ValueError(
                f"sub-model {self.name!r}: filter yields {out}, "
                f"network expects {tuple(self.net.input_shape)}"
            )


@dataclass
class RobustnessCertificate:
    submodel_name: str
    margin: float
    lipschitz: float
    radius: float


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class Ensemble:
    def __init__(self, submodels, mode: str = "vote"):
        submodels = tuple(submodels)
        if not submodels:
            raise ValueError("ensemble needs at least one sub-model")
        if mode not in ("vote", "score"):
            raise ValueError(f"mode must be vote or score, got {mode!r}")
        counts = {sm.net.num_classes for sm in submodels}
        if len(counts) != 1:
            raise ValueError(f"sub-models disagree on class count: {sorted(counts)}")
        self.submodels = submodels
        self.mode = mode
        self.num_classes = counts.pop()

    def _member_outputs(self, xb):
        """Per-sub-model softmax probabilities (m, N, n) and labels (m, N)."""
        probs, labels = [], []
        for sm in self.submodels:
            z = sm.net.forward_batch(flt.apply_batch(sm.filter, xb))
            probs.append(_softmax(z))
            labels.append(np.argmax(z, axis=1))
        return np.stack(probs), np.stack(labels)

    def classify_batch(self, xb):
        xb = np.asarray(xb, dtype=np.float64)
        probs, labels = self._member_outputs(xb)
        mean_p = probs.mean(axis=0)
        if self.mode == "score":
            return np.argmax(mean_p, axis=1)
        out = np.empty(xb.shape[0], dtype=np.int64)
        for i in range(xb.shape[0]):
            counts = np.bincount(labels[:, i], minlength=self.num_classes)
            tied = np.flatnonzero(counts == counts.max())
            if len(tied) == 1:
                out[i] = tied[0]
            else:
                out[i] = tied[np.argmax(mean_p[i, tied])]
        return out

    def predict(self, x) -> int:
        return int(self.classify_batch(np.asarray(x)[None])[0])

    def is_stable(self, x) -> bool:
        _, labels = self._member_outputs(np.asarray(x, dtype=np.float64)[None])
        return bool(np.all(labels == labels[0]))

    def accuracy(self, dataset) -> float:
        pred = self.classify_batch(dataset.images)
        return float(np.mean(pred == dataset.labels))


def margin(net, z) -> float:
    """Top-logit lead: f_label - best other logit, zero when the top is tied."""
    f = net.forward_batch(np.asarray(z, dtype=np.float64)[None])[0]
    label = int(np.argmax(f))
    rest = np.delete(f, label)
    return float(f[label] - rest.max())


def certify_submodel(
    sm: SubModel, x, power_seed: int = 0, lipschitz: float = None
) -> RobustnessCertificate:
    """Certified L2 radius around the filtered input, in the network's input space.

    Pass a precomputed ``lipschitz`` when certifying many inputs against the
    same network; the power iteration is input-independent.
    """
    z = flt.apply(sm.filter, np.asarray(x, dtype=np.float64))
    delta = margin(sm.net, z)
    lip = sm.net.lipschitz_upper_bound(seed=power_seed) if lipschitz is None else float(lipschitz)
    if delta > 0:
        radius = delta / (math.sqrt(2.0) * lip) if lip > 0 else math.inf
    else:
        radius = 0.0
    return RobustnessCertificate(sm.name, delta, lip, radius)


def pairwise_bound(c1: RobustnessCertificate, c2: RobustnessCertificate) -> float:
    """Sensitivity-product threshold below which both sub-models cannot flip."""
    if c1.margin == 0 or c2.margin == 0:
        return 0.0
    return (c1.margin * c2.margin) / (2.0 * c1.lipschitz * c2.lipschitz)


# -------------------------------------------------------------- training aids


def _derived_seed(seed, tag, i):
    return int(rng_from(seed, tag, i).integers(2**31))


def gaussian_noise_submodels(
    base_net_spec, dataset, sigma: float = 0.02, count: int = 3, seed: int = 0,
    train_cfg: "nn.TrainConfig" = None,
):
    """Train identity-filter sub-models on Gaussian-noised copies of the data."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if train_cfg is None:
        train_cfg = nn.TrainConfig()

    def noised(net, rng, xb, yb):
        if sigma == 0:
            return xb
        return clamp01(xb + rng.normal(0.0, sigma, size=xb.shape))

    subs = []
    for i in range(count):
        net = nn.build_network(
            base_net_spec,
            dataset.image_shape,
            dataset.num_classes,
            seed=_derived_seed(seed, 0x474E, i),
        )
        cfg = replace(train_cfg, rng_seed=_derived_seed(seed, 0x4754, i))
        trained = nn.train(net, dataset, cfg, augment=noised)
        subs.append(SubModel(f"gauss{i}", flt.filter_spec("identity"), trained))
    return subs


def adversarial_train(net_spec, dataset, attack_cfg: AttackConfig = None,
                      train_cfg: "nn.TrainConfig" = None) -> "nn.Network":
    """SGD where every minibatch is replaced by its PGD adversarial examples."""
    if attack_cfg is None:
        attack_cfg = AttackConfig(method="pgd", radius=8 / 255, steps=4)
    if train_cfg is None:
        train_cfg = nn.TrainConfig()
    if attack_cfg.step_size is None and attack_cfg.radius > 0:
        step = min(2.5 * attack_cfg.radius / attack_cfg.steps, attack_cfg.radius)
        attack_cfg = replace(attack_cfg, step_size=step)

    def adversarial(net, rng, xb, yb):
        if attack_cfg.radius == 0:
            return xb
        ids = rng.integers(2**31, size=len(xb))
        results = run_attack_batch(net, xb, yb, attack_cfg, image_ids=ids)
        return np.stack([res.adversarial for res in results])

    net = nn.build_network(
        net_spec, dataset.image_shape, dataset.num_classes, seed=train_cfg.rng_seed
    )
    return nn.train(net, dataset, train_cfg, augment=adversarial)


# ------------------------------------------------------------------ manifests

DEFAULT_ENSEMBLES = {
    "mincorr": (("original", "discretize"), ("lowpass", "lowpass"), ("octree16", "octree16")),
    "maxcorr": (("original", "discretize"), ("highpass", "highpass"), ("grayscale", "grayscale")),
}


def default_ensemble_plan(kind: str):
    """Named (sub-model name, FilterSpec) pairs for the two stock ensembles."""
    if kind not in DEFAULT_ENSEMBLES:
        raise ValueError(f"unknown ensemble plan {kind!r}")
    bank = flt.default_filters()
    return [(name, bank[key]) for name, key in DEFAULT_ENSEMBLES[kind]]


def save_manifest(path, ensemble: Ensemble, model_paths) -> None:
    """Write the ensemble layout: mode plus (name, filter, model file) triples.

    model_paths maps sub-model name to the network file; networks are saved
    separately so a manifest can mix and match trained models.
    """
    entries = []
    for sm in ensemble.submodels:
        entries.append(
            {
                "name": sm.name,
                "filter": {"kind": sm.filter.kind, "params": dict(sm.filter.params)},
                "model": str(model_paths[sm.name]),
            }
        )
    doc = {"mode": ensemble.mode, "submodels": entries}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> Ensemble:
    """Rebuild an ensemble from a manifest; model paths resolve relative to it."""
    with open(path) as fh:
        doc = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    subs = []
    for entry in doc["submodels"]:
        spec = flt.filter_spec(entry["filter"]["kind"], **entry["filter"]["params"])
        model_path = entry["model"]
        if not os.path.isabs(model_path):
            model_path = os.path.join(base, model_path)
        subs.append(SubModel(entry["name"], spec, model_io.load_network(model_path)))
    return Ensemble(subs, mode=doc["mode"])
