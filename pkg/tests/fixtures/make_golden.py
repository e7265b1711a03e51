"""Regenerate golden.safetensors with the official `safetensors` package,
an independent serializer of the same container format. Run from tests/:

    python3 fixtures/make_golden.py

The committed fixture pins the expected arrays in test_tensorstore.py; keep
both in sync if this script changes.
"""

import os
import sys

from safetensors.numpy import save_file

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from golden_expected import golden_arrays

if __name__ == "__main__":
    arrays, metadata = golden_arrays()
    save_file(arrays, "fixtures/golden.safetensors", metadata=metadata)
    print("wrote fixtures/golden.safetensors")
