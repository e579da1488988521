"""Per-unit predictions with 95% intervals."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True, eq=False)
class PredictionSet:
    """Point predictions and interval bounds for a list of units.

    ``variance`` is the predictive variance on the log (modelling) scale,
    used by the log-normal back-transformation; it may be a scalar for
    models that only provide one.
    """

    ids: tuple[str, ...]
    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    scale: str = "log"
    variance: np.ndarray | None = None

    def __post_init__(self):
        for name in ("point", "lower", "upper"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        object.__setattr__(self, "ids", tuple(self.ids))
        n = len(self.ids)
        if not (len(self.point) == len(self.lower) == len(self.upper) == n):
            raise ValueError("ids, point, lower and upper must have equal length")
        if self.variance is not None:
            v = np.broadcast_to(np.asarray(self.variance, dtype=float), (n,)).copy()
            object.__setattr__(self, "variance", v)
        if self.scale not in ("log", "original"):
            raise ValueError(f"unknown scale {self.scale!r}")

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index) -> "PredictionSet":
        index = np.asarray(index, dtype=np.int64)
        return replace(
            self,
            ids=tuple(self.ids[i] for i in index),
            point=self.point[index],
            lower=self.lower[index],
            upper=self.upper[index],
            variance=None if self.variance is None else self.variance[index],
        )

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "point", "lower95", "upper95"])
        for k, uid in enumerate(self.ids):
            w.writerow([uid, repr(float(self.point[k])), repr(float(self.lower[k])), repr(float(self.upper[k]))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        d = {
            "scale": self.scale,
            "ids": list(self.ids),
            "point": self.point.tolist(),
            "lower95": self.lower.tolist(),
            "upper95": self.upper.tolist(),
        }
        if self.variance is not None:
            d["variance"] = self.variance.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionSet":
        return cls(
            ids=tuple(d["ids"]),
            point=d["point"],
            lower=d["lower95"],
            upper=d["upper95"],
            scale=d["scale"],
            variance=d.get("variance"),
        )
