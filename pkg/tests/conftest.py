import warnings

import pytest

from dcscn.cli import _load_split, _streams
from dcscn.config import load_config
from dcscn.network import build
from dcscn.numerics import RngStream

warnings.filterwarnings("ignore", message="r range contains 1")


@pytest.fixture(scope="session")
def pinned_cfg():
    """The shipped default configuration (seed 7)."""
    return load_config()


@pytest.fixture(scope="session")
def pinned_splits(pinned_cfg):
    """Synthetic train/val/test splits exactly as the CLI derives them."""
    streams = _streams(pinned_cfg.seed)
    return {split: _load_split(pinned_cfg, split, streams)
            for split in ("train", "val", "test")}


@pytest.fixture(scope="session")
def pinned_build(pinned_cfg, pinned_splits):
    """The pinned default-config model and trace (shared across tests)."""
    streams = _streams(pinned_cfg.seed)
    return build(pinned_splits["train"], pinned_cfg.build, streams["build"])


@pytest.fixture()
def rng():
    return RngStream(1234)
