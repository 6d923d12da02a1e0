"""
The same pipeline from the command line
=======================================

Every step is also a ``stfuse`` subcommand that reads STFR rasters and JSON
manifests and prints a JSON report. Here the commands run in-process via
``stfuse.cli.run``; in a shell they read ``stfuse synth --scenario dsm ...``.
"""

import json
import tempfile
from contextlib import redirect_stdout
from io import StringIO
from pathlib import Path

from stfuse.cli import run


def stfuse(*args):
    out = StringIO()
    with redirect_stdout(out):
        code = run([str(a) for a in args])
    assert code == 0, args
    return json.loads(out.getvalue())["result"]


with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    b = tmp / "scene"
    stfuse("synth", "--scenario", "dsm", "--out", b)
    stfuse("median", "--stack", b / "dsm.json", "--out", tmp / "median.stfr")
    stfuse("classify", "--image", b / "ortho.stfr", "--dsm", tmp / "median.stfr",
           "--dtm", b / "truth_dtm.stfr", "--out", tmp / "classes.stfr")
    rep = stfuse("dsm-fuse", "--stack", b / "dsm.json", "--ortho", b / "ortho.stfr",
                 "--classmap", tmp / "classes.stfr", "--out", tmp / "fused.stfr",
                 "--truth", b / "truth_dsm.stfr")
    print(f"fused RMSE {rep['rmse_fused']:.3f} vs median {rep['rmse_median']:.3f}")

    # a config file supplies defaults that flags can still override;
    # this scene has no gain/bias drift, so the stack is already consistent
    (tmp / "rrn.cfg").write_text("sigma_s = 2\nradius = 2  # 5x5 window\n")
    stfuse("rrn", "--config", tmp / "rrn.cfg", "--stack", b / "image.json", "--out", tmp / "rrn")
    acc = stfuse("eval", "--metric", "consistency", "--stack", tmp / "rrn" / "rrn.json",
                 "--mask", b / "invariant_mask.stfr")
    print("consistency after rrn:", round(acc["value"], 3))
