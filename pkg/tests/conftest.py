import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def session_model():
    from tatrack.backbone import random_model

    return random_model(seed=0)


@pytest.fixture(scope="session")
def weights_file(session_model, tmp_path_factory):
    from tatrack.backbone import save_weights

    path = tmp_path_factory.mktemp("weights") / "backbone.tadtw"
    save_weights(session_model, path)
    return path


@pytest.fixture(scope="session")
def small_seq_dir(tmp_path_factory):
    """6-frame translate sequence, small enough for fast CLI runs."""
    from tatrack.synth import make_sequence, write_sequence

    root = tmp_path_factory.mktemp("seq") / "mini"
    imgs, boxes = make_sequence("translate", 6, seed=1, height=96, width=112, target_size=32)
    write_sequence(root, imgs, boxes)
    return root
