import numpy as np
import pandas as pd
import pytest

from models import (
    BASELINE_SCANS, FRUIT_CLASSES, OBSERVERS, ROTATED_SCANS, SEQUENCES, LearnerConfig, ParamGrid, RunConfig,
)
from phantomgen import default_layout, generate_phantom
from radiomics import FEATURE_NAMES, PROVENANCE_COLUMNS

INFORMATIVE = ("firstorder_Mean", "glcm_Contrast", "ngtdm_Busyness")


@pytest.fixture(scope="session")
def layout():
    return default_layout()


@pytest.fixture(scope="session")
def coarse_layout():
    # same fruit placement on a 2 mm / 4 mm grid: 8x fewer voxels
    return default_layout(dims=(48, 48, 24), spacing=(2.0, 2.0, 4.0))


@pytest.fixture(scope="session")
def base_scan(layout):
    return generate_phantom(layout, seed=42)


def synthetic_frame(seed: int = 0, informative=INFORMATIVE, noise: float = 0.1) -> pd.DataFrame:
    """Feature table with every cell of the default run: a few class-driven features, the rest noise."""
    rng = np.random.default_rng(seed)
    offsets = rng.uniform(0.0, 2.0, size=17)
    cols = [FEATURE_NAMES.index(n) for n in informative]
    cells = [(q, s, o, t) for q in SEQUENCES for s in BASELINE_SCANS for o in OBSERVERS
             for t in ("full_A", "full_B", "partial")]
    cells += [(q, s, o, "rotated_full") for q in SEQUENCES for s in ROTATED_SCANS for o in OBSERVERS]
    rows = []
    for seq, scan, obs, seg in cells:
        values = rng.normal(0.0, 1.0, size=(16, len(FEATURE_NAMES)))
        for sid in range(1, 17):
            cls = (sid - 1) % 4
            values[sid - 1, cols] = cls * 10.0 + offsets[sid] + rng.normal(0.0, noise, size=len(cols))
            prov = {"sample_id": sid, "class": FRUIT_CLASSES[cls], "sequence": seq, "scan_id": scan,
                    "observer": obs, "seg_type": seg}
            rows.append({**prov, **dict(zip(FEATURE_NAMES, values[sid - 1]))})
    return pd.DataFrame(rows, columns=list(PROVENANCE_COLUMNS) + list(FEATURE_NAMES))


@pytest.fixture(scope="session")
def synthetic_table():
    return synthetic_frame()


@pytest.fixture
def quick_config(tmp_path):
    grid = ParamGrid(max_depth=[2], learning_rate=[0.3], n_estimators=[10], l2_reg=[1.0])
    return RunConfig(learner=LearnerConfig(grid=grid, folds=2, min_child_weight=0.0), output_dir=str(tmp_path))
