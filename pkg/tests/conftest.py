"""Session-wide trained fixtures: one small shape-classification stack.

Training a handful of filtered sub-models once and sharing them keeps the
behavioral tests (attack orderings, certification, ensemble comparisons)
fast enough to run in the default suite.
"""

import numpy as np
import pytest

from fenet import data, ensemble, filters as flt, nn

DESK_ARCH = [
    {"kind": "Conv2D", "out_channels": 8, "kernel": [3, 3], "stride": 1, "padding": "same"},
    {"kind": "ReLU"},
    {"kind": "AvgPool2D", "pool": 2, "stride": 2},
    {"kind": "Conv2D", "out_channels": 16, "kernel": [3, 3], "stride": 1, "padding": "same"},
    {"kind": "ReLU"},
    {"kind": "AvgPool2D", "pool": 2, "stride": 2},
    {"kind": "Flatten"},
    {"kind": "Dense", "out_features": None},
]

DESK_TRAIN_CFG = nn.TrainConfig(
    learning_rates=(0.1, 0.01, 0.001), epochs_per_rate=3, batch_size=32, rng_seed=7
)


def desk_bank():
    """Filter bank sized for the 16x16 desk images."""
    bank = flt.default_filters()
    bank["downsize"] = flt.filter_spec("downsize", target=(8, 8))
    return bank


def filtered_dataset(spec, ds):
    return data.Dataset(
        flt.apply_batch(spec, ds.images),
        np.array(ds.labels),
        num_classes=ds.num_classes,
        class_names=ds.class_names,
    )


def train_submodel(name, spec, train_ds, seed=11):
    fds = filtered_dataset(spec, train_ds)
    net = nn.build_network(DESK_ARCH, fds.image_shape, fds.num_classes, seed=seed)
    return ensemble.SubModel(name, spec, nn.train(net, fds, DESK_TRAIN_CFG))


@pytest.fixture(scope="session")
def desk_train():
    return data.synth_shapes(150, size=16, seed=101)


@pytest.fixture(scope="session")
def desk_test():
    return data.synth_shapes(50, size=16, seed=202)


@pytest.fixture(scope="session")
def desk_submodels(desk_train):
    bank = desk_bank()
    return {
        name: train_submodel(name, bank[name], desk_train, seed=11 + i)
        for i, name in enumerate(sorted(bank))
    }


@pytest.fixture(scope="session")
def desk_source(desk_submodels):
    """The unfiltered network, used as the attack source in transfer studies."""
    return desk_submodels["identity"].net


@pytest.fixture(scope="session")
def desk_mincorr(desk_submodels):
    subs = [
        ensemble.SubModel("original", desk_submodels["discretize"].filter, desk_submodels["discretize"].net),
        desk_submodels["lowpass"],
        desk_submodels["octree16"],
    ]
    return ensemble.Ensemble(subs, mode="vote")


@pytest.fixture(scope="session")
def desk_gauss(desk_train):
    """Gaussian-noise-trained comparison ensemble members."""
    return ensemble.gaussian_noise_submodels(
        DESK_ARCH, desk_train, sigma=0.02, count=3, seed=0, train_cfg=DESK_TRAIN_CFG
    )
