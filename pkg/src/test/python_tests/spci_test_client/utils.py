# Licensed under the MIT License.
"""
Utility functions for use with tests.
"""
import pathlib
from typing import Dict, Sequence

import numpy as np
import pytest

from .constants import GOLDEN_DIR


def random_tensor(seed: int, shape: Sequence[int], scale: float = 1.0, precision: str = "double"):
    """Seeded standard-normal Tensor."""
    # pylint: disable-next=import-outside-toplevel
    from spci_tensor import DTYPES, Tensor

    data = np.random.default_rng(seed).standard_normal(tuple(shape)) * scale
    return Tensor(data.astype(DTYPES[precision]))


def run_cli(*args: str, cwd=None):
    """Runs the CLI in-process and returns its RunResult."""
    # pylint: disable-next=import-outside-toplevel
    import spci_cli
    import spci_utils

    return spci_utils.run_api(spci_cli.main, ["spci", *args], cwd=cwd)


def parse_report(text: str) -> Dict[str, str]:
    """Reads `name value` lines; the last value wins for repeated names."""
    pairs = {}
    for line in text.splitlines():
        name, _, value = line.partition(" ")
        pairs[name] = value
    return pairs


def golden_or_skip(*parts: str) -> pathlib.Path:
    path = GOLDEN_DIR.joinpath(*parts)
    if not path.exists():
        pytest.skip(f"golden file {path} not recorded yet; run `nox -s golden`")
    return path
