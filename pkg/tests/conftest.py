import pytest

from mcae.synth import generate_scene


@pytest.fixture(scope="session")
def scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    return generate_scene(7, root)
