from __future__ import annotations

import numpy as np
import pytest

from bitbudget.calibration import ActivationScales, collect_activation_scales
from bitbudget.proxy import ProxyConfig, ProxyModel, encode, load_corpus, train_proxy
from bitbudget.store import ModelStore


@pytest.fixture(scope="session")
def corpus_text() -> str:
    return load_corpus()


@pytest.fixture(scope="session")
def fixture_proxy(corpus_text):
    """The default-recipe trained proxy, shared across the session."""
    model, diag = train_proxy(corpus_text, ProxyConfig(), seed=42)
    return model, diag


@pytest.fixture(scope="session")
def fixture_scales(fixture_proxy, corpus_text) -> ActivationScales:
    model, _ = fixture_proxy
    tokens = encode(corpus_text)
    calib = tokens[: 64 * 32].reshape(-1, 32)
    return collect_activation_scales(model, calib)


@pytest.fixture(scope="session")
def eval_tokens(corpus_text) -> np.ndarray:
    tokens = encode(corpus_text)
    return tokens[tokens.size - 8193:]


@pytest.fixture(scope="session")
def fixture_store_dir(tmp_path_factory, fixture_proxy) -> str:
    from bitbudget.store import save_model

    model, _ = fixture_proxy
    path = tmp_path_factory.mktemp("proxy") / "store"
    save_model(model.to_store(), str(path))
    return str(path)


def desk_config(store_dir: str, out_dir: str, **kw):
    """RunConfig tuned to the 2-layer fixture proxy (early-layer clamp off)."""
    from bitbudget.config import RunConfig

    cfg = RunConfig(store_dir=store_dir, out_dir=out_dir, **kw)
    cfg.clamps.early_layer_count = 0
    return cfg


def random_store(seed: int, shape_map: dict[str, tuple[int, int]]) -> ModelStore:
    rng = np.random.default_rng(seed)
    store = ModelStore()
    for name, (rows, cols) in shape_map.items():
        store.add(name, rng.standard_normal((rows, cols)).astype(np.float32))
    return store
