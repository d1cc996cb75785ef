"""On-disk synthetic datasets: ``sample_{k}_input.gfd`` / ``sample_{k}_target.gfd``
pairs listed in ``manifest.csv`` together with their quality reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .fields import SyntheticSceneSpec, generate_scene, quality_check, read_gfd, write_gfd

MANIFEST = "manifest.csv"
MANIFEST_COLUMNS = ("sample_id", "seed", "input", "target", "nonzero_fraction",
                    "value_range_ok", "artifact_flag", "accepted")


def sample_seed(seed: int, k: int) -> int:
    """Independent 64-bit seed for sample ``k`` of a dataset seeded with ``seed``."""
    return int(np.random.SeedSequence([seed, k]).generate_state(1, np.uint64)[0])


def write_dataset(out_dir, count: int, spec: SyntheticSceneSpec = SyntheticSceneSpec(),
                  min_cov: float = 0.01, max_cov: float = 0.5) -> list[dict]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for k in range(count):
        s = sample_seed(spec.seed, k)
        inputs, target = generate_scene(replace(spec, seed=s))
        qc = quality_check(target, min_cov, max_cov)
        names = (f"sample_{k}_input.gfd", f"sample_{k}_target.gfd")
        write_gfd(inputs, out / names[0])
        write_gfd(target, out / names[1])
        rows.append({"sample_id": k, "seed": s, "input": names[0], "target": names[1],
                     "nonzero_fraction": repr(qc.nonzero_fraction),
                     "value_range_ok": int(qc.value_range_ok),
                     "artifact_flag": int(qc.artifact_flag), "accepted": int(qc.accepted)})
    with open(out / MANIFEST, "w", newline="") as fh:
        writer = csv.DictWriter(fh, MANIFEST_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


@dataclass(frozen=True)
class Dataset:
    sample_ids: list[int]
    inputs: np.ndarray   # (N, c, h, w) float32, normalized
    targets: np.ndarray  # (N, 1, h, w) float32, normalized
    channel_names: tuple[str, ...]

    def __len__(self):
        return len(self.sample_ids)

    def split(self, val_fraction: float) -> tuple["Dataset", "Dataset"]:
        """Leading samples train, trailing samples validate (ordered by id)."""
        if len(self) < 2:
            raise DataError("need at least two accepted samples to split train/validation")
        n_val = min(len(self) - 1, max(1, int(np.ceil(val_fraction * len(self)))))
        cut = len(self) - n_val
        return self._take(slice(0, cut)), self._take(slice(cut, None))

    def _take(self, sl):
        return Dataset(self.sample_ids[sl], self.inputs[sl], self.targets[sl],
                       self.channel_names)


def load_dataset(data_dir, accepted_only: bool = True) -> Dataset:
    root = Path(data_dir)
    manifest = root / MANIFEST
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    if not manifest.exists():
        raise DataError(f"no {MANIFEST} in {root}")
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(MANIFEST_COLUMNS) - set(rows[0]):
        raise DataError(f"{manifest} lacks columns {sorted(set(MANIFEST_COLUMNS) - set(rows[0]))}")
    ids, xs, ts, names = [], [], [], None
    for row in sorted(rows, key=lambda r: int(r["sample_id"])):
        if accepted_only and not int(row["accepted"]):
            continue
        x = read_gfd(root / row["input"])
        t = read_gfd(root / row["target"])
        if not (x.normalized and t.normalized):
            raise DataError(f"sample {row['sample_id']} is not normalized")
        names = names or x.channel_names
        ids.append(int(row["sample_id"]))
        xs.append(x.values)
        ts.append(t.values)
    if not ids:
        raise DataError(f"no usable samples in {root}")
    try:
        inputs, targets = np.stack(xs), np.stack(ts)
    except ValueError:
        raise DataError("samples differ in shape") from None
    return Dataset(ids, inputs, targets, names)
