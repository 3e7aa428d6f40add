import json

import pytest

TINY_CONFIG = {
    "generator": {"resolution": 32, "latent_dim": 32, "channel_base": 256, "channel_max": 16, "mapping_layers": 2},
    "data": {"real_count": 16, "test_count": 4, "style_count": 4},
    "pretrain": {"steps": 4, "batch_size": 4},
    "encoder": {"steps": 2, "batch_size": 2},
    "finetune": {"iterations": 3, "batch_size": 2},
    "pairs": {"iters": 3},
    "inversion": {"iters": 3, "basis_k": 8},
    "evaluate": {"samples": 8, "semantic_samples": 4},
}


@pytest.fixture(scope="session")
def tiny_workspace(tmp_path_factory):
    import semstyle

    root = tmp_path_factory.mktemp("ws")
    (root / "config.json").write_text(json.dumps(TINY_CONFIG))
    reports = semstyle.bootstrap(str(root))
    return root, reports
