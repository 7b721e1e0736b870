"""Shared fixtures: stacks are expensive to render, so build once per session."""

from __future__ import annotations

import numpy as np
import pytest

from focusrl.env import AutofocusEnv, EnvConfig
from focusrl.imaging import FocalStack, Scene, crop, generate_stack, render_scene


def _stack(seed: int, z_min: float, z_max: float, z_star: float) -> FocalStack:
    scene = render_scene(seed=seed, width=256, height=256)
    return generate_stack(
        scene, z_min=z_min, z_max=z_max, spacing=0.3, z_star=z_star, blur_gain=0.5
    )


@pytest.fixture(scope="session")
def tiny_stack() -> FocalStack:
    """21 positions over 30.0-36.0 rad, sharpest at 32.4; the desk-scale task."""
    return _stack(seed=7, z_min=30.0, z_max=36.0, z_star=32.4)


@pytest.fixture(scope="session")
def exp1_stack() -> FocalStack:
    """131 positions over 30.0-69.0 rad."""
    return _stack(seed=101, z_min=30.0, z_max=69.0, z_star=51.0)


@pytest.fixture(scope="session")
def small_scene() -> Scene:
    return render_scene(seed=3, width=96, height=96)


@pytest.fixture()
def tiny_env(tiny_stack) -> AutofocusEnv:
    return AutofocusEnv(EnvConfig(stack=tiny_stack, net_input_size=32))


@pytest.fixture()
def exp1_env(exp1_stack) -> AutofocusEnv:
    return AutofocusEnv(EnvConfig(stack=exp1_stack))


@pytest.fixture(scope="session")
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


# Criterion verdicts registered by tests/test_acceptance.py.  Printed in
# the terminal summary so the one-line-per-criterion report is visible
# even though pytest swallows stdout of passing tests.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
