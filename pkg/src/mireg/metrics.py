"""Registration metrics and instance-level success counting."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geom import RigidTransform


@dataclass(frozen=True)
class SuccessProfile:
    name: str
    re_max: float
    te_max: float

    def __post_init__(self):
        if not (self.re_max > 0 and self.te_max > 0):
            raise ValueError("success thresholds must be positive")


PROFILES = {
    "welding": SuccessProfile("welding", 15.0, 0.2),
    "scan2cad": SuccessProfile("scan2cad", 15.0, 0.1),
}


def get_profile(name: str) -> SuccessProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def rotation_error(R_gt, R_est) -> float:
    """Geodesic angle between two rotations, in degrees.

    Same value as ``arccos((trace(R_gt^T R_est) - 1) / 2)`` but through atan2,
    which keeps full precision near 0 and 180 degrees.
    """
    M = np.asarray(R_gt, dtype=np.float64).T @ np.asarray(R_est, dtype=np.float64)
    c = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    return float(np.degrees(np.arctan2(s, c)))


def translation_error(t_gt, t_est) -> float:
    return float(np.linalg.norm(np.asarray(t_est, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)))


@dataclass
class PairCounts:
    m_suc: int
    m_gt: int
    m_pred: int
    re: list = field(default_factory=list)
    te: list = field(default_factory=list)
    scene_id: str = ""
    runtime_seconds: float = 0.0

    def __post_init__(self):
        if not 0 <= self.m_suc <= min(self.m_gt, self.m_pred):
            raise ValueError("successes must not exceed gt or predicted counts")


def match_instances(pred: Sequence[RigidTransform], gt: Sequence[RigidTransform],
                    profile: SuccessProfile) -> PairCounts:
    """Greedy one-to-one matching, pairs visited by (RE, TE) ascending.

    A pair is accepted when both errors are within the profile and neither
    side has been used. Ties keep (pred, gt) enumeration order.
    """
    cands = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            re = rotation_error(g.rotation, p.rotation)
            te = translation_error(g.translation, p.translation)
            if re <= profile.re_max and te <= profile.te_max:
                cands.append((re, te, i, j))
    cands.sort()
    used_p, used_g = set(), set()
    res, tes = [], []
    for re, te, i, j in cands:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        res.append(re)
        tes.append(te)
    return PairCounts(len(res), len(gt), len(pred), res, tes)


@dataclass
class EvalReport:
    per_pair: list
    mr: float
    mp: float
    mf: float

    CSV_HEADER = ("scene_id", "M_suc", "M_gt", "M_pred", "mean_RE", "mean_TE", "runtime_seconds")

    def to_json(self) -> dict:
        return {
            "mr": self.mr, "mp": self.mp, "mf": self.mf,
            "per_pair": [
                {"scene_id": c.scene_id, "M_suc": c.m_suc, "M_gt": c.m_gt, "M_pred": c.m_pred,
                 "mean_RE": _mean(c.re), "mean_TE": _mean(c.te), "runtime_seconds": c.runtime_seconds}
                for c in self.per_pair
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        for row in self.to_json()["per_pair"]:
            w.writerow([row[k] if row[k] is not None else "" for k in self.CSV_HEADER])
        return buf.getvalue()


def _mean(xs):
    return float(np.mean(xs)) if len(xs) else None


def aggregate(per_pair: Sequence[PairCounts]) -> EvalReport:
    """Per-pair mean recall and precision, and their harmonic mean.

    Pairs with no predictions contribute precision 0; pairs with no ground
    truth contribute recall 0.
    """
    if len(per_pair) == 0:
        raise ValueError("need at least one scene pair")
    rec = [c.m_suc / c.m_gt if c.m_gt else 0.0 for c in per_pair]
    prec = [c.m_suc / c.m_pred if c.m_pred else 0.0 for c in per_pair]
    mr, mp = float(np.mean(rec)), float(np.mean(prec))
    mf = 2 * mr * mp / (mr + mp) if mr + mp > 0 else 0.0
    return EvalReport(list(per_pair), mr, mp, float(mf))
