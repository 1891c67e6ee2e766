"""Smoke test for the `mvcr` extension module.

Build first with `cargo build --release -p mvcr-py`, then run
`python3 python/smoke_test.py`. Set MVCR_LIB to point at a different build.
"""

import os
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent

TINY = """\
model.num_layers = 2
model.hidden_dim = 16
model.heads = 2
model.ffn_dim = 32
mvcr.dims = 4,8
train.total_epochs = 3
train.pretrain_epochs = 1
train.lr_task = 1e-3
train.lr_mse = 1e-2
data.train = 24
data.dev = 16
data.test = 16
"""


def load(tmp):
    lib = pathlib.Path(os.environ.get("MVCR_LIB", ROOT / "target" / "release" / "libmvcr.so"))
    if not lib.exists():
        sys.exit(f"extension not found at {lib}; run `cargo build --release -p mvcr-py`")
    shutil.copy(lib, tmp / "mvcr.so")
    sys.path.insert(0, str(tmp))
    import mvcr

    return mvcr


def main():
    with tempfile.TemporaryDirectory() as d:
        tmp = pathlib.Path(d)
        mvcr = load(tmp)
        print("mvcr", mvcr.__version__)

        cfg = mvcr.parse_config(TINY, overrides=["train.batch_size=8"])
        assert cfg["train.batch_size"] == "8", cfg

        try:
            mvcr.parse_config(TINY + "model.hiden_dim = 8\n")
        except mvcr.MvcrError as e:
            assert "hiden_dim" in str(e)
        else:
            raise AssertionError("unknown key accepted")

        run = tmp / "run"
        summary = mvcr.train(TINY, seed=3, out_dir=str(run))
        assert summary["seed"] == 3
        best = mvcr.evaluate(str(run / "best.ckpt"))
        plugged = mvcr.evaluate(str(run / "model.ckpt"))
        assert best["test_metric"] == plugged["test_metric"] == summary["best_test"]
        report = mvcr.inspect(str(run / "model.ckpt"))
        assert report["params"]["hae"] == 0 and report["plug_out_matches_vanilla"]
        print("train/eval/inspect ok: test", best["test_metric"])

        rows = mvcr.fig1(dims=[8, 16], seed=0, epochs=1, train_size=200)
        assert [r["dim"] for r in rows] == [8, 16], rows
        print("fig1 ok:", [(r["dim"], round(r["mse_clean"], 4)) for r in rows])

        assert "layers" in mvcr.GRID_NAMES
        assert mvcr.builtin_grid("layers").strip()
        print("smoke test passed")


if __name__ == "__main__":
    main()
