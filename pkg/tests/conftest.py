import numpy as np
import pytest
import torch

from pcenhance.critic import CriticConfig
from pcenhance.generator import GeneratorConfig, collate, prepare_patch
from pcenhance.patches import generate_patches, group_patches
from pcenhance.pointcloud_io import ColorSpace, PointCloud

torch.set_num_threads(1)


def tiny_generator_config(**kw):
    base = dict(k=4, dga_width=4, heads=2, attn_hidden=4, gfp_width=8, grb_width=8, fs_widths=(8, 4))
    base.update(kw)
    return GeneratorConfig(**base)


def tiny_critic_config(**kw):
    base = dict(k=4, widths=(4, 8), mlp_widths=(8,))
    base.update(kw)
    return CriticConfig(**base)


def random_cloud(n, seed=0, color_space=ColorSpace.YCBCR, integer=True):
    rng = np.random.default_rng(seed)
    geo = rng.uniform(0, 100, size=(n, 3))
    attrs = rng.integers(0, 256, size=(n, 3)).astype(float) if integer else rng.uniform(0, 255, size=(n, 3))
    return PointCloud(geo, attrs, color_space)


def patch_batch(cloud, m, ol, num_nei, k, channel=0, count=None, dtype=torch.float32):
    patches = generate_patches(cloud, m, ol)
    groups = group_patches(patches, num_nei)[:count]
    items = [prepare_patch(g, channel, k) for g in groups]
    return items, collate(items, dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report their verdict here; echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
