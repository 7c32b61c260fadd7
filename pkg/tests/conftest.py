"""Shared fixtures: the trained 8-Gaussians ensemble and the acceptance log."""

import dataclasses
import time

import pytest

from prflow.trainer import TrainConfig, make_dataset, train

ACCEPTANCE_SEEDS = (0, 1, 2)
FIXED_LAMBDAS = (0.1, 1.0, 10.0)

# criterion id -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE_LOG = {}


def record(criterion, passed, detail):
    ACCEPTANCE_LOG[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LOG:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE_LOG, key=str):
        passed, detail = ACCEPTANCE_LOG[criterion]
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")


@dataclasses.dataclass
class SeedEnsemble:
    """Models trained on one seed's data; ``seconds`` holds wall-clock per run."""

    seed: int
    target: object
    dataset: object
    models: dict
    seconds: dict


class EnsembleCache:
    """Trains each seed's ensemble on first use and keeps it for the session."""

    def __init__(self):
        self._done = {}

    def base_config(self, seed):
        return TrainConfig(seed=seed)

    def __call__(self, seed) -> SeedEnsemble:
        if seed not in self._done:
            self._done[seed] = self._train(seed)
        return self._done[seed]

    def _train(self, seed):
        base = self.base_config(seed)
        dataset, target = make_dataset(base)
        runs = {f"pr_{lam:g}": dataclasses.replace(base, lam=lam) for lam in FIXED_LAMBDAS}
        runs["auc"] = dataclasses.replace(base, objective="auc")
        runs["kl"] = dataclasses.replace(base, objective="mle", epochs=base.warm_start + base.epochs)
        models, seconds, cache = {}, {}, {}
        for name, cfg in runs.items():
            t0 = time.perf_counter()
            flow, disc, _ = train(cfg, dataset, target, prep_cache=cache)
            models[name] = (flow, disc)
            seconds[name] = time.perf_counter() - t0
        return SeedEnsemble(seed, target, dataset, models, seconds)


@pytest.fixture(scope="session")
def ensembles():
    return EnsembleCache()
