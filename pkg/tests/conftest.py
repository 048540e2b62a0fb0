import contextlib
import io
import re
import shutil
import time
from pathlib import Path

import pytest

from dmskit.cli import main
from dmskit.core import Modality
from dmskit.data import SynthConfig, synth_generate

REPO = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """Three clips per seen class, two modalities."""
    out = tmp_path_factory.mktemp("small_synth")
    synth_generate(SynthConfig(out, per_class=3, test_per_class=2, seed=1,
                               modalities=(Modality.TOP_IR, Modality.FRONT_IR)))
    return out


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The desk-scale pipeline driven through the CLI: synth, train for 20 epochs, eval with a gamma sweep."""
    root = tmp_path_factory.mktemp("desk")
    data = root / "data"
    codes = {"synth": main(["synth", "--out", str(data), "--seed", "0", "--per-class", "50",
                            "--modalities", "top_ir"])}
    cfg = root / "tiny.cfg"
    shutil.copy(REPO / "configs" / "tiny_unimodal.cfg", cfg)
    runs = root / "runs"
    printed = io.StringIO()
    t0 = time.perf_counter()
    with contextlib.redirect_stdout(printed):
        codes["train"] = main(["train", "--config", str(cfg), "--override", f"out_dir={runs}",
                               "--override", f"data.train_manifest={data / 'train.csv'}",
                               "--override", f"data.test_manifest={data / 'test.csv'}"])
    train_seconds = time.perf_counter() - t0
    found = re.search(r"train accuracy: ([0-9.]+)", printed.getvalue())
    codes["eval"] = main(["eval", "--checkpoint", str(runs / "final.ckpt"), "--manifest", str(data / "test.csv"),
                          "--rule", "gamma", "--gamma", "0.5", "--out", str(root / "report.json"),
                          "--sweep", str(root / "sweep.json")])
    return {"root": root, "data": data, "runs": runs, "codes": codes, "train_seconds": train_seconds,
            "train_accuracy": float(found.group(1)) if found else None}
