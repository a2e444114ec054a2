import functools

import numpy as np
import pytest

from artgauss.core import GaussianSet
from artgauss.synth import ArchetypeSpec, generate


def random_set(rng: np.random.Generator, n: int, sh: bool = False) -> GaussianSet:
    q = rng.standard_normal((n, 4))
    return GaussianSet(
        means=rng.uniform(-1, 1, (n, 3)),
        quats=q / np.linalg.norm(q, axis=1, keepdims=True),
        scales=rng.uniform(0.01, 0.1, (n, 3)),
        opacities=rng.uniform(0.05, 1.0, n),
        colors=rng.uniform(0, 1, (n, 3)),
        sh1=rng.standard_normal((n, 9)) * 0.1 if sh else None,
    )


@functools.lru_cache(maxsize=None)
def scene(kind: str, seed: int = 0, **kw):
    return generate(ArchetypeSpec(kind=kind, seed=seed, **kw))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
