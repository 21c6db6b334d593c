import numpy as np
import pytest
from PIL import Image

from figforge.compositor import PanelPool, PoolEntry, write_pool
from figforge.formats import MODALITIES
from figforge.layout import LayoutConfig

PER_MODALITY = 6


def make_pool_dir(root, per_modality=PER_MODALITY, seed=1234):
    """Noise images of assorted sizes, a few per modality, plus an index."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    (root / "img").mkdir(exist_ok=True)
    entries = []
    for m in MODALITIES:
        for k in range(per_modality):
            h, w = rng.integers(40, 160, size=2)
            arr = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
            rel = f"img/{m}_{k}.png"
            Image.fromarray(arr).save(root / rel)
            split = "validation" if k == per_modality - 1 else "train"
            entries.append(PoolEntry(f"{m}-{k}", rel, m, split))
    pool = PanelPool(entries, root=root)
    write_pool(root / "pool.jsonl", pool)
    return pool


@pytest.fixture(scope="session")
def pool(tmp_path_factory):
    return make_pool_dir(tmp_path_factory.mktemp("pool"))


TEMPLATES = (
    LayoutConfig(1, 1),
    LayoutConfig(2, 2, h_margin_range=(0, 20), v_margin_range=(0, 20), border=5),
    LayoutConfig(1, 3, h_margin_range=(5, 15), panel_aspect="4/3", label_position=None),
    LayoutConfig(custom_rows=(2, 1), h_margin_range=(10, 10), v_margin_range=(10, 10), label_position="outside_above"),
    LayoutConfig(3, 2, h_margin_range=(0, 8), v_margin_range=(0, 8), border=3, panel_aspect="3/4", label_position=None),
)


@pytest.fixture(scope="session")
def templates():
    return TEMPLATES


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
