"""Motion quality control: scoring and exclusion of corrupted dynamics.

Each dynamic is scored against a voxelwise median reference volume (NCC)
and by the mean in-plane correlation of its adjacent slices. A dynamic is
kept when both scores reach their thresholds; keep/drop override lists
give the operator a veto in either direction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .grid import ncc

NCC_THRESHOLD = 0.5
CONSISTENCY_THRESHOLD = 0.4


@dataclass
class DynamicScore:
    index: int
    ncc_to_reference: float
    slice_consistency: float
    kept: bool = True
    reason: str = ""


def score_dynamics(dynamics, echo_index: int = 1) -> list:
    """Score every dynamic against the cohort median volume.

    The reference is the voxelwise median across dynamics at the chosen
    echo (median, not mean, so outliers cannot drag their own reference).
    """
    if len(dynamics) < 3:
        raise ConfigError("motion QC needs at least 3 dynamics")
    n_echoes = len(dynamics[0].echoes)
    if not (0 <= echo_index < n_echoes):
        raise ConfigError(f"echo_index {echo_index} out of range for {n_echoes} echoes")
    vols = [np.asarray(d.echoes[echo_index].data, float) for d in dynamics]
    reference = np.median(np.stack(vols), axis=0)
    scores = []
    for d, vol in zip(dynamics, vols):
        scores.append(
            DynamicScore(
                index=d.index,
                ncc_to_reference=ncc(vol, reference),
                slice_consistency=_slice_consistency(vol),
            )
        )
    return scores


def _slice_consistency(vol: np.ndarray) -> float:
    """Mean NCC between adjacent in-plane slice profiles; 1.0 for single-slice."""
    nz = vol.shape[2]
    if nz < 2:
        return 1.0
    vals = [ncc(vol[:, :, k], vol[:, :, k + 1]) for k in range(nz - 1)]
    return float(np.mean(vals))


def apply_qc(
    scores,
    ncc_threshold: float = NCC_THRESHOLD,
    consistency_threshold: float = CONSISTENCY_THRESHOLD,
    keep=(),
    drop=(),
) -> list:
    """Decide kept dynamics. Returns kept indices in score order.

    kept = passing-or-forced-keep, minus forced-drop. Score records are
    updated in place with the decision and its reason.
    """
    for thr in (ncc_threshold, consistency_threshold):
        if not (-1.0 <= thr <= 1.0):
            raise ConfigError(f"threshold {thr} outside [-1, 1]")
    indices = {s.index for s in scores}
    for idx in list(keep) + list(drop):
        if idx not in indices:
            raise ConfigError(f"override index {idx} not among scored dynamics")
    keep, drop = set(keep), set(drop)
    kept = []
    for s in scores:
        reasons = []
        if s.ncc_to_reference < ncc_threshold:
            reasons.append(f"ncc {s.ncc_to_reference:.3f} < {ncc_threshold}")
        if s.slice_consistency < consistency_threshold:
            reasons.append(f"slice consistency {s.slice_consistency:.3f} < {consistency_threshold}")
        decision = not reasons
        if s.index in keep:
            decision, reasons = True, (["forced keep"] if reasons else [])
        if s.index in drop:
            decision, reasons = False, ["forced drop"]
        s.kept = decision
        s.reason = "; ".join(reasons)
        if decision:
            kept.append(s.index)
    return kept


def write_qc_report(scores, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dynamic", "ncc", "slice_consistency", "kept", "reason"])
        for s in scores:
            w.writerow(
                [s.index, f"{s.ncc_to_reference:.6f}", f"{s.slice_consistency:.6f}",
                 int(s.kept), s.reason]
            )


def read_qc_report(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                DynamicScore(
                    index=int(row["dynamic"]),
                    ncc_to_reference=float(row["ncc"]),
                    slice_consistency=float(row["slice_consistency"]),
                    kept=bool(int(row["kept"])),
                    reason=row["reason"],
                )
            )
    return out
