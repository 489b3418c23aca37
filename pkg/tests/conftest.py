import hashlib
import json
import time

import pytest
import torch

from shortcutlab import evaluation as E
from shortcutlab import pipeline as P
from shortcutlab.model import load_checkpoint, save_checkpoint

# name -> (passed, detail), filled by the acceptance suite
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


class RunCache:
    """Full-size trained models, stored under the pytest cache keyed by their config."""

    def __init__(self, root):
        self.root = root
        self.seconds = {}
        self.acac = {}

    def bench(self, cfg: P.ExperimentConfig) -> P.Workbench:
        key = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
        path = self.root / f"model-{key}.npz"
        bench = P.workbench(cfg)
        if path.exists():
            model, meta = load_checkpoint(path, dtype=torch.float64)
            self.seconds[cfg] = meta["train_seconds"]
        else:
            t0 = time.time()
            model, _ = P.train_model(bench)
            self.seconds[cfg] = time.time() - t0
            save_checkpoint(model, path, P.artifact_header(cfg, train_seconds=self.seconds[cfg]))
            model = model.copy(dtype=torch.float64)
        bench.model = model
        return bench

    def acac_of(self, cfg: P.ExperimentConfig) -> float:
        if cfg not in self.acac:
            self.acac[cfg] = E.acac(P.evaluate_shortcut(self.bench(cfg)))
        return self.acac[cfg]


@pytest.fixture(scope="session")
def runs(request):
    return RunCache(request.config.cache.mkdir("shortcutlab-models"))


