import copy

import numpy as np
import pytest
import torch

from mmap_st.config import RunConfig, SynthConfig
from mmap_st.ingest import generate_synthetic

torch.set_num_threads(1)


def tiny_config(**train):
    cfg = RunConfig()
    m = cfg.model
    m.input_size, m.vit_patch, m.dim, m.depth, m.heads = 32, 8, 16, 1, 2
    m.fusion_layers, m.fusion_heads, m.global_heads, m.pos_hidden = 1, 2, 2, 8
    cfg.train.epochs = 2
    cfg.train.lr_max = 1e-3
    cfg.train.batch_size = 16
    for k, v in train.items():
        setattr(cfg.train, k, v)
    cfg.bank.k_min, cfg.bank.k_max = 4, 8
    return cfg


def toy_config(input_size=112, epochs=30):
    """Default toy encoder (d=128, depth 4, heads 4, 16 px tokens)."""
    cfg = RunConfig()
    cfg.model.input_size = input_size
    cfg.train.epochs = epochs
    cfg.train.lr_max = 1e-3
    return cfg


def finite_difference_check(loss_fn, params, h=1e-6):
    """Per parameter group: ||analytic - central FD|| / max(norms).

    ``loss_fn`` is a zero-argument callable returning a float64 scalar tensor.
    Groups whose gradient vanishes identically (key biases under softmax shift
    invariance) have no meaningful relative error; for those the absolute FD
    norm is reported instead.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    worst = {}
    for name, p in params.items():
        analytic = p.grad.detach().clone().reshape(-1)
        numeric = torch.zeros_like(analytic)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            with torch.no_grad():
                up = loss_fn().item()
            flat[i] = orig - h
            with torch.no_grad():
                down = loss_fn().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * h)
        if analytic.norm().item() < 1e-12:
            worst[name] = numeric.norm().item()
            continue
        scale = max(analytic.norm().item(), numeric.norm().item())
        worst[name] = (analytic - numeric).norm().item() / scale
    return worst


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def small_bundle():
    return generate_synthetic(SynthConfig(n_slides=3, spots_per_slide=24, n_genes=5,
                                          patch_size=32, n_test_slides=1), seed=11)


@pytest.fixture(scope="session")
def small_stage1(small_bundle):
    from mmap_st.train import run_stage1
    return run_stage1(small_bundle, tiny_config())


@pytest.fixture(scope="session")
def small_stage2(small_bundle, small_stage1):
    from mmap_st.train import run_stage2
    return run_stage2(small_bundle, small_stage1, tiny_config())


@pytest.fixture(scope="session")
def overfit_bundle():
    return generate_synthetic(SynthConfig(n_slides=2, spots_per_slide=100, n_genes=8,
                                          patch_size=112, noise=0.0, n_test_slides=0), seed=0)


@pytest.fixture(scope="session")
def overfit_runs(overfit_bundle):
    """Stage 1 then stage 2 with the toy encoder, 30 epochs each (about two minutes)."""
    import time
    from mmap_st.train import run_stage1, run_stage2
    cfg = toy_config(112, 30)
    t0 = time.perf_counter()
    s1 = run_stage1(overfit_bundle, copy.deepcopy(cfg))
    t1 = time.perf_counter()
    s2 = run_stage2(overfit_bundle, s1, copy.deepcopy(cfg))
    return {"stage1": s1, "stage2": s2, "stage1_seconds": t1 - t0,
            "stage2_seconds": time.perf_counter() - t1}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
