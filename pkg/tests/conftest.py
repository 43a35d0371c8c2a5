import numpy as np
import pytest

from rashens.data import CLASSIFICATION, REGRESSION, Dataset, FeatureSchema
from rashens.pipeline import RunConfig, run_pipeline

from pathlib import Path

DATA_DIR = Path(__file__).resolve().parent.parent / "data"
WDBC_CSV = DATA_DIR / "wdbc.csv"
HEART_CSV = DATA_DIR / "heart.csv"


def make_classification(n: int, d: int, seed: int,
                        informative=(0, 3, 6), noise=1.0) -> Dataset:
    """Linear-logit synthetic binary task."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    used = [j for j in informative if j < d] or [0]
    logit = sum(1.2 * X[:, j] for j in used) + rng.normal(0, noise, n)
    y = (logit > 0).astype(float)
    names = tuple(f"x{i}" for i in range(d))
    return Dataset(X, y, FeatureSchema(names), CLASSIFICATION)


def make_regression(n: int, d: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = 5.0 + 2.0 * X[:, 0] - X[:, 1] + rng.normal(0, 0.3, n)
    y = np.where(np.abs(y) < 0.1, 0.1, y)  # keep MAPE defined
    names = tuple(f"x{i}" for i in range(d))
    return Dataset(X, y, FeatureSchema(names), REGRESSION)


def planted_groups(n: int, seed: int, b_flip=0.08, c_flip=0.25) -> Dataset:
    """Three disjoint informative feature groups {3r, 3r+1, 3r+2}.

    Per group: f0 = u (random bit), f1 = u xor z (flipped w.p. b_flip),
    f2 = u xor z (flipped w.p. c_flip). The label is z, so a group's pair
    decodes it, the group's third feature denoises, and every feature is
    useless outside its own group.
    """
    rng = np.random.default_rng(seed)
    z = rng.integers(0, 2, n)
    cols = []
    for _ in range(3):
        u = rng.integers(0, 2, n)
        b = u ^ z ^ (rng.random(n) < b_flip)
        c = u ^ z ^ (rng.random(n) < c_flip)
        cols += [u, b.astype(int), c.astype(int)]
    X = np.column_stack(cols).astype(float)
    names = tuple(f"g{r}f{i}" for r in range(3) for i in range(3))
    return Dataset(X, z.astype(float), FeatureSchema(names), CLASSIFICATION)


def xor_dataset() -> Dataset:
    X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    y = np.array([0.0, 1.0, 1.0, 0.0])
    return Dataset(X, y, FeatureSchema(("a", "b")), CLASSIFICATION)


@pytest.fixture(scope="session")
def wdbc_run(tmp_path_factory):
    """Desk-scale WDBC pipeline run shared by the drift/stratification
    criteria and the machinery-evidence tests."""
    out = tmp_path_factory.mktemp("wdbc_run")
    config = RunConfig(dataset=str(WDBC_CSV), target="target",
                       task=CLASSIFICATION, out_dir=str(out), seed=20240811,
                       n_models=3000)
    return run_pipeline(config)


@pytest.fixture(scope="session")
def synth_run(tmp_path_factory):
    """Small persisted synthetic run for server/CLI contract tests."""
    from rashens.data import save_csv
    out = tmp_path_factory.mktemp("synth_run")
    csv_path = out / "synth.csv"
    ds = make_classification(420, 9, seed=5)
    save_csv(ds, csv_path, target_name="y")
    config = RunConfig(dataset=str(csv_path), target="y", task=CLASSIFICATION,
                       out_dir=str(out / "run"), seed=31, n_models=400,
                       s_max=4, epsilon=0.05, k_max=6, max_expansions=6,
                       drift_levels=(0.0, 0.8), drift_repeats=3)
    return run_pipeline(config)
