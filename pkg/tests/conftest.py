import pytest

from denoisegan.config import RunConfig
from denoisegan.data import synthesize_dataset

TINY = dict(image_size=16, jitter_size=18, base_width=4, disc_base_width=4, num_res_blocks=1, disc_layers=2,
            cascade_widths=[4, 4, 8, 8, 8], epochs=2)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    synthesize_dataset(root, seed=42, count=4, size=16, heldout=2)
    return root


@pytest.fixture
def tiny_cfg(tiny_data):
    def make(**kw):
        values = dict(TINY, train_manifest=str(tiny_data / "manifest.tsv"),
                      heldout_manifest=str(tiny_data / "heldout.tsv"))
        values.update(kw)
        return RunConfig(**values)

    return make
