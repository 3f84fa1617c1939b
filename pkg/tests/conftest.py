import numpy as np
import pytest
from hypothesis import settings

from resboost import synthetic
from resboost.dataset import Dataset, split

settings.register_profile("default", max_examples=100, deadline=None)
settings.load_profile("default")


def make_dataset(X, y, names=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    names = names or tuple(f"f{j}" for j in range(X.shape[1]))
    return Dataset(X, np.asarray(y), tuple(names), tuple(str(i) for i in range(len(y))))


@pytest.fixture(scope="session")
def oracle_split():
    data = synthetic.oracle_task(1200, seed=3)
    return data, *split(data, 0.8, 3)


@pytest.fixture(scope="session")
def oracle_world(oracle_split):
    """Frozen legacy on x1, x2 plus the regions and boundary plans mined from it."""
    from resboost import gbdt, regions
    from resboost.dataset import feature_stats
    from resboost.legacy import FrozenModel

    data, train, val = oracle_split
    cfg = gbdt.GbdtConfig(n_trees=100, max_depth=3, learning_rate=0.05, min_leaf=100)
    model = gbdt.train(train.X[:, :2], train.y, cfg, train.feature_names[:2])
    frozen = FrozenModel.from_gbdt(model)
    stats = feature_stats(train, val)
    regs, _ = regions.mine_regions(frozen, train, max_depth=2, min_leaf=30, k_max=3,
                                   target="signed")
    plans = regions.refinement_plans(regs, stats, 0.1)
    return dict(data=data, train=train, val=val, frozen=frozen, stats=stats,
                regions=regs, plans=plans)
