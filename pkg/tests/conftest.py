"""Shared fixtures: the cached desk-scale run and the acceptance report."""
import hashlib
import json
import os
import time
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src" / "s2rm"
CACHE = Path(os.environ.get("S2RM_ACCEPTANCE_CACHE", ROOT / ".cache" / "acceptance"))

DESK_DATA = dict(seqs=500, frames=30, balls=3, views=10, seed=0)
DESK_MODEL = dict(kind="s2gru", n_modules=4, hidden=32, codec_hidden=256)
DESK_TRAIN = dict(epochs=40, batch_size=4, lr=3e-3)
# files whose contents change what the desk run produces
MODEL_SOURCES = ("tensorcore.py", "geometry.py", "attention.py", "codec.py", "recurrent.py", "trainer.py",
                 "worldsim.py")

ACCEPTANCE = []


def recipe_key() -> str:
    h = hashlib.sha256(json.dumps([DESK_DATA, DESK_MODEL, DESK_TRAIN], sort_keys=True).encode())
    for name in MODEL_SOURCES:
        h.update((SRC / name).read_bytes())
    return h.hexdigest()[:16]


def desk_args(root):
    """Write ``desk.ini`` under ``root`` and return the gen-data and train argument lists."""
    ini = "\n".join(["[data]", *(f"{k} = {v}" for k, v in DESK_DATA.items()),
                     "", "[model]", *(f"{k} = {v}" for k, v in DESK_MODEL.items()),
                     "", "[train]", *(f"{k} = {v}" for k, v in DESK_TRAIN.items())])
    root.mkdir(parents=True, exist_ok=True)
    (root / "desk.ini").write_text(ini + "\n")
    data, run = root / "data", root / "run"
    common = ["--config", str(root / "desk.ini"), "--threads", "1"]
    gen = ["gen-data", "--out", str(data), *common]
    train = ["train", "--train", str(data / "train.bin"), "--val", str(data / "val.bin"), "--out", str(run),
             *common, "--seed", str(DESK_DATA["seed"])]
    return gen, train


@pytest.fixture(scope="session")
def desk_run():
    """Data and checkpoint of the desk recipe; trained once, then reused from the cache."""
    from s2rm.cli import main

    root = CACHE / recipe_key()
    data, run = root / "data", root / "run"
    done = root / "done.json"
    if not done.exists():
        gen, train = desk_args(root)
        assert main(gen) == 0
        start = time.perf_counter()
        assert main(train) == 0
        done.write_text(json.dumps(dict(train_seconds=time.perf_counter() - start, gen=gen, train=train)))
    info = json.loads(done.read_text())
    return dict(root=root, data=data, ckpt=run / "ckpt.bin", epochs=run / "epochs.csv", **info)


@pytest.fixture
def acceptance():
    """``record(n, ok, detail)`` logs one criterion outcome and fails the test when ``ok`` is false."""

    def record(n, ok, detail):
        ACCEPTANCE.append((n, bool(ok), detail))
        assert ok, f"criterion {n}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}")
