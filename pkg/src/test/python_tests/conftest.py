# Licensed under the MIT License.
"""Makes the flat modules under bundled/tool importable by the tests."""
import os
import sys

from .spci_test_client.constants import TOOL_DIR

if os.fspath(TOOL_DIR) not in sys.path:
    sys.path.insert(0, os.fspath(TOOL_DIR))
