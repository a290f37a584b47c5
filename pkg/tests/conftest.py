import pytest

from splatavatar.humanoid import build_toy_humanoid


@pytest.fixture(scope="session")
def humanoid():
    return build_toy_humanoid()
