"""Regenerate the correct-gt golden files under tests/data/golden.

The fixture scene comes from the synthetic generator. Before anything is
written, the snow mask is recomputed with the brute-force Sobel oracle and a
plain percentile/threshold rule and must agree exactly with the module.

    python3 tests/make_goldens.py
"""
import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE))

from cloudfcn import cli  # noqa: E402
from cloudfcn.raster_io import Band, read_mask, write_raster  # noqa: E402
from cloudfcn.synthetic import snow_scene  # noqa: E402
from oracles import sobel_loop  # noqa: E402

GOLDEN = HERE / "data" / "golden"
SCENE = "g0"
CONFIG = """\
seed = 0
[paths]
scenes = "scenes"
output = "out"
[scenes]
train = ["g0"]
test = ["g0"]
[qa]
cloud_bits = [[4, 1]]
snow_bits = [[10, 1]]
[gt]
band = "B2"
threshold = "auto"
percentile = 95.0
"""


def write_fixture(root: Path) -> None:
    sc = snow_scene(size=48, seed=5, snow_size=(5, 7), scene_id=SCENE)
    (root / "scenes" / SCENE).mkdir(parents=True, exist_ok=True)
    write_raster(sc.bands[Band.B2], root / "scenes" / SCENE / "B2.csr")
    write_raster(sc.qa, root / "scenes" / SCENE / "QA.csr")
    (root / "pipeline.toml").write_text(CONFIG)


def oracle_snow(root: Path) -> np.ndarray:
    from cloudfcn.raster_io import read_raster

    b2 = read_raster(root / "scenes" / SCENE / "B2.csr").samples / 65535.0
    qa = read_raster(root / "scenes" / SCENE / "QA.csr").samples
    g = sobel_loop(b2)
    cloud = (qa >> 4) & 1 == 1
    t = np.percentile(g[cloud], 95)
    return g > t


def main() -> None:
    write_fixture(GOLDEN)
    rc = cli.main(["correct-gt", "--config", str(GOLDEN / "pipeline.toml")])
    assert rc == 0, rc
    out = GOLDEN / "out" / "gt" / SCENE
    snow = read_mask(out / "snow.pgm").bits
    assert np.array_equal(snow, oracle_snow(GOLDEN)), "module disagrees with the oracle"
    assert snow.any(), "fixture should contain some snow"
    for name in ("default_gt.pgm", "snow.pgm", "corrected_gt.pgm", "stats.txt"):
        (GOLDEN / name).write_bytes((out / name).read_bytes())
    for p in sorted(out.iterdir()):
        p.unlink()
    out.rmdir()
    for p in sorted((GOLDEN / "out").rglob("*"), reverse=True):
        p.unlink() if p.is_file() else p.rmdir()
    (GOLDEN / "out").rmdir()
    print(f"goldens written to {GOLDEN}")


if __name__ == "__main__":
    main()
