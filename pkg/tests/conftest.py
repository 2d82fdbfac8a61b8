import os
import sys

# Small dense problems; BLAS threading only adds spin-wait overhead on the
# test machine. Must be set before numpy loads.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(scope="session")
def repo_root():
    return os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture(scope="session")
def cli_experiment(repo_root, tmp_path_factory):
    """Run `mpctune tune` once per bundled config and cache the output dir.

    The heavy closed-loop experiments are shared between the CLI tests and
    the acceptance suite so each protocol runs exactly once per session.
    """
    from mpctune import cli

    cache = {}

    def run(config_name):
        if config_name not in cache:
            out = tmp_path_factory.mktemp(f"run_{config_name}")
            config = os.path.join(repo_root, "configs", f"{config_name}.json")
            code = cli.main(["tune", "--config", config, "--out", str(out)])
            assert code == 0, f"tune failed for {config_name}"
            cache[config_name] = out
        return cache[config_name]

    return run


def read_results_csv(out_dir):
    """results.csv rows as a list of dicts with floats."""
    import csv

    with open(os.path.join(out_dir, "results.csv")) as fh:
        rows = list(csv.DictReader(fh))
    return [{k: float(v) for k, v in row.items()} for row in rows]
