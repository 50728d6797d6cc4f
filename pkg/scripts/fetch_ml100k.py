"""Rebuild data/ml-100k/{u.data,u.user,u.item} from a package mirror.

MovieLens-100K ships as brotli parquet inside the pytorch-widedeep wheel,
which pip can fetch through a package index even when grouplens.org is not
reachable. The wheel is downloaded with --no-deps and read with zipfile; it
is never installed. Reading parquet needs pyarrow (not a runtime dependency
of edgecast).

    python scripts/fetch_ml100k.py [--out data/ml-100k]
"""
import argparse
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import pandas as pd

WHEEL = "pytorch-widedeep==1.7.0"
MEMBER = "pytorch_widedeep/datasets/data/MovieLens100k_{}.parquet.brotli"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/ml-100k")
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, WHEEL], check=True
        )
        wheel = next(Path(tmp).glob("*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            frames = {k: pd.read_parquet(io.BytesIO(zf.read(MEMBER.format(k)))) for k in ("data", "users", "items")}
    frames["data"].to_csv(out / "u.data", sep="\t", header=False, index=False)
    frames["users"].to_csv(out / "u.user", sep="|", header=False, index=False)
    items = frames["items"].copy()
    # the original file leaves this column empty
    items["video_release_date"] = ""
    items = items.fillna("")
    with open(out / "u.item", "w", encoding="latin-1") as f:
        for row in items.itertuples(index=False):
            f.write("|".join(str(x) for x in row) + "\n")
    for name in ("u.data", "u.user", "u.item"):
        n = sum(1 for _ in open(out / name, encoding="latin-1"))
        print(f"{out / name}: {n} lines")
    return 0


if __name__ == "__main__":
    sys.exit(main())
