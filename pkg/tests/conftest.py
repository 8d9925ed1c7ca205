import pytest

import momentloc.numcore as nc


@pytest.fixture(autouse=True)
def _restore_precision():
    """Tests may switch the build-wide float width; always reset afterwards."""
    before = nc.precision()
    yield
    nc.set_precision(before)
