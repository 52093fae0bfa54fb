"""Pose correction from the matched-filter shift, and localization metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ParameterError
from .geometry import Pose2D, normalize_yaw


class NoPositivesWarning(UserWarning):
    """Raised (as a warning) when a statistic over true positives has no positives."""


@dataclass(frozen=True)
class PoseEstimate:
    pose: Pose2D
    reference_id: int
    score: float
    low_confidence: bool = False
    theta_match: float = 0.0
    reference_pose: Pose2D | None = None
    match: object = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class EvalRecord:
    query_id: int
    estimate: PoseEstimate
    ground_truth: Pose2D
    rte: float
    rre: float
    within_threshold: bool
    scored: Pose2D | None = None

    @classmethod
    def build(cls, query_id: int, estimate: PoseEstimate, gt: Pose2D, threshold: float,
              uncorrected: bool = False) -> "EvalRecord":
        """Score one estimate.

        With ``uncorrected=True`` the matched reference position is scored in
        place of the shift-corrected one (yaw is still reference yaw plus the
        matched rotation).
        """
        est = estimate.pose
        if uncorrected:
            if estimate.reference_pose is None:
                raise ParameterError("uncorrected scoring needs the matched reference pose")
            est = Pose2D(estimate.reference_pose.x, estimate.reference_pose.y, estimate.pose.yaw)
        e = rte(est, gt)
        return cls(query_id, estimate, gt, e, rre(est, gt), e <= threshold, est)

    @property
    def scored_pose(self) -> Pose2D:
        return self.scored if self.scored is not None else self.estimate.pose


@dataclass(frozen=True)
class EvalReport:
    recall_at_1: float
    rte_mean: float | None
    rte_std: float | None
    rre_mean: float | None
    rre_std: float | None
    success_rate: float
    n_queries: int
    tp: int
    fp: int
    threshold: float
    sr_undefined: bool = False

    def summary(self) -> str:
        def fmt(v, spec):
            return "n/a" if v is None else format(v, spec)
        lines = [
            f"queries        {self.n_queries}",
            f"threshold_m    {self.threshold:.3f}",
            f"recall@1       {self.recall_at_1 * 100:.2f} %  (TP {self.tp}, FP {self.fp})",
            f"RTE_m          mean {fmt(self.rte_mean, '.4f')}  std {fmt(self.rte_std, '.4f')}",
            f"RRE_deg        mean {fmt(self.rre_mean, '.4f')}  std {fmt(self.rre_std, '.4f')}",
            f"SR             {self.success_rate * 100:.2f} %" + ("  (no positives)" if self.sr_undefined else ""),
        ]
        return "\n".join(lines) + "\n"


def shift_to_pose(ref_pose: Pose2D, shift: tuple[float, float], theta_match: float) -> Pose2D:
    """Query pose from the matched reference pose and the in-frame shift.

    The shift is expressed in the reference sensor frame, so it is rotated by
    the reference yaw before being added to the reference position.
    """
    (x, y), = ref_pose.apply(np.array([shift], dtype=np.float64))
    return Pose2D(x, y, normalize_yaw(ref_pose.yaw + theta_match))


def rte(est: Pose2D, gt: Pose2D) -> float:
    return math.hypot(gt.x - est.x, gt.y - est.y)


def rre(est: Pose2D, gt: Pose2D) -> float:
    """Absolute yaw difference folded into [0, 180] degrees."""
    # abs of a rounded difference is exactly symmetric; yaws are already in [-180, 180)
    d = abs(gt.yaw - est.yaw) % 360.0
    return min(d, 360.0 - d)


def recall_at_1(records: Sequence[EvalRecord], threshold: float) -> float:
    """Fraction of queries whose top-1 estimate lies within ``threshold`` meters."""
    if not records:
        raise ParameterError("recall@1 of an empty record set is undefined")
    return sum(r.rte <= threshold for r in records) / len(records)


def success_rate(records: Sequence[EvalRecord], max_rte: float = 2.0, max_rre: float = 5.0) -> float:
    """Share of true positives with RTE < ``max_rte`` and RRE < ``max_rre`` (strict).

    With no positives the rate is 0 and a :class:`NoPositivesWarning` is issued.
    """
    if not records:
        warnings.warn("success rate over zero positives, reporting 0", NoPositivesWarning, stacklevel=2)
        return 0.0
    return sum(r.rte < max_rte and r.rre < max_rre for r in records) / len(records)


def aggregate(records: Sequence[EvalRecord], threshold: float, max_rte: float = 2.0,
              max_rre: float = 5.0) -> EvalReport:
    """Recall plus RTE/RRE mean and population std over the within-threshold records."""
    records = list(records)
    recall = recall_at_1(records, threshold)
    pos = [r for r in records if r.rte <= threshold]
    if pos:
        e_t = np.array([r.rte for r in pos])
        e_r = np.array([r.rre for r in pos])
        stats = (float(e_t.mean()), float(e_t.std()), float(e_r.mean()), float(e_r.std()))
        sr = success_rate(pos, max_rte, max_rre)
    else:
        stats = (None, None, None, None)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NoPositivesWarning)
            sr = success_rate(pos, max_rte, max_rre)
    return EvalReport(recall, *stats, sr, len(records), len(pos), len(records) - len(pos), threshold,
                      sr_undefined=not pos)


REPORT_HEADER = "query_id,ref_id,x_est,y_est,yaw_est,x_gt,y_gt,yaw_gt,rte,rre,within,score"


def format_report_rows(records: Iterable[EvalRecord]) -> str:
    """Report CSV body (with header); fixed precision so reruns are byte-identical."""
    lines = [REPORT_HEADER]
    for r in records:
        e, g = r.scored_pose, r.ground_truth
        lines.append(
            f"{r.query_id},{r.estimate.reference_id},{e.x:.6f},{e.y:.6f},{e.yaw:.6f},"
            f"{g.x:.6f},{g.y:.6f},{g.yaw:.6f},{r.rte:.6f},{r.rre:.6f},{int(r.within_threshold)},"
            f"{r.estimate.score:.6f}"
        )
    return "\n".join(lines) + "\n"
