import sys
from pathlib import Path

import pytest

# make helpers.py importable regardless of invocation directory
sys.path.insert(0, str(Path(__file__).parent))

from helpers import make_corpus  # noqa: E402


@pytest.fixture
def corpus(tmp_path):
    """Six 2-hop records over eight 120x90 documents, images on disk."""
    return make_corpus(tmp_path / "imgs")
