import hashlib
import os
from pathlib import Path

import pytest

from regionedit import cli

PACKAGE = Path(__file__).resolve().parents[1] / "src" / "regionedit"
CACHE = Path(os.environ.get("REGIONEDIT_CACHE", Path(__file__).resolve().parents[1] / ".cache"))
STAGES = ("data-gen", "pretrain", "train-denoiser", "train-editor", "eval")

# criterion number -> (title, passed, detail), filled in by the acceptance tests
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}

TINY = """\
seed = 0
train_count = 24
eval_count = 4
d = 8
depth = 1
pretrain_epochs = 1
pretrain_batch = 8
T = 4
denoiser_count = 8
denoiser_hidden = 4
denoiser_epochs = 1
denoiser_batch = 4
editor_count = 4
editor_epochs = 1
editor_batch = 2
K = 2
ablation_seeds = 0
ablation_count = 2
ablation_eval = 2
"""


def write_config(root, **extra):
    """Tiny end-to-end config rooted at ``root``; returns its path."""
    lines = TINY + f"data_dir = {root / 'data'}\nout_dir = {root / 'run'}\n"
    lines += "".join(f"{k} = {v}\n" for k, v in extra.items())
    path = root / "tiny.cfg"
    path.write_text(lines)
    return path


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """Config path of a toy run that has been through every training stage."""
    root = tmp_path_factory.mktemp("tiny")
    path = write_config(root)
    for cmd in ("data-gen", "pretrain", "train-denoiser", "train-editor"):
        assert cli.run([cmd, "--config", str(path)]) == 0, cmd
    return path


def source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(PACKAGE.glob("*.py")):
        h.update(path.name.encode() + b"\0" + path.read_bytes())
    return h.hexdigest()[:12]


def cached_run(name: str, settings: str, stages=STAGES) -> Path:
    """Run ``stages`` once per (settings, package source) and reuse the outputs afterwards.

    Returns the config path; each finished stage leaves a ``.done`` stamp so
    an interrupted build resumes where it stopped.
    """
    key = hashlib.sha256((settings + source_digest()).encode()).hexdigest()[:12]
    root = CACHE / f"{name}-{key}"
    root.mkdir(parents=True, exist_ok=True)
    path = root / "run.cfg"
    path.write_text(settings + f"data_dir = {root / 'data'}\nout_dir = {root / 'run'}\n")
    for stage in stages:
        stamp = root / f"{stage}.done"
        if stamp.exists():
            continue
        extra = ["--force"] if stage == "data-gen" else []
        assert cli.run([stage, "--config", str(path)] + extra) == 0, f"{name}: {stage} failed"
        stamp.touch()
    return path


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
