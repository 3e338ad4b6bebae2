"""
Registration quality, deformation regularity and paired statistical testing.
"""

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.special import betainc
from statsmodels.stats.multitest import fdrcorrection

from core.gridfield import DenseField
from core.volume import LandmarkSet, MaskVolume, Volume
from core.warp import BoundaryPolicy, sample_trilinear
from utils.errors import ConfigError, GeometryError
from utils.file_utils import atomic_write_text
from utils.log_utils import get_logger

logger = get_logger(__name__)

MASK_MODE = "mask"
LANDMARK_MODE = "landmark"
ALTERNATIVES = ("greater", "two-sided")


def _mask_values(x: Union[MaskVolume, np.ndarray]) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Volume) else x, dtype=np.float64)


def dice_score(a: Union[MaskVolume, np.ndarray], b: Union[MaskVolume, np.ndarray]) -> float:
    """2|A∩B|/(|A|+|B|) after binarizing at 0.5; two empty masks score 1."""
    av, bv = _mask_values(a), _mask_values(b)
    if av.shape != bv.shape:
        raise GeometryError(f"dice_score: mask shapes differ {av.shape} vs {bv.shape}")
    ab, bb = av >= 0.5, bv >= 0.5
    total = int(ab.sum()) + int(bb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ab, bb).sum()) / total


def mask_centroid(mask: Union[MaskVolume, np.ndarray]) -> np.ndarray:
    """Intensity-weighted centroid Σ x s(x) / Σ s(x) in voxel units."""
    values = _mask_values(mask)
    mass = values.sum()
    if mass <= 0:
        raise GeometryError("centroid of an empty mask is undefined")
    axes = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in values.shape), indexing="ij")
    return np.array([float((ax * values).sum() / mass) for ax in axes])


def centroid_distance(a, b, spacing: Optional[Sequence[float]] = None, mode: str = MASK_MODE) -> float:
    """
    Mean Euclidean centroid distance in millimetres.

    Args:
        a: MaskVolume (mask mode) or LandmarkSet (landmark mode)
        b: Same kind as `a`
        spacing: Voxel spacing in mm; taken from `a` when it is a volume, else 1 mm
        mode: "mask" compares mask centroids, "landmark" averages per-pair distances

    Returns:
        Distance in millimetres
    """
    if spacing is None:
        spacing = a.spacing if isinstance(a, Volume) else (1.0, 1.0, 1.0)
    scale = np.asarray(spacing, dtype=np.float64)
    if mode == MASK_MODE:
        if np.shape(_mask_values(a)) != np.shape(_mask_values(b)):
            raise GeometryError("centroid_distance: mask shapes differ")
        return float(np.linalg.norm((mask_centroid(a) - mask_centroid(b)) * scale))
    if mode == LANDMARK_MODE:
        pa = np.asarray(getattr(a, "points", a), dtype=np.float64).reshape(-1, 3)
        pb = np.asarray(getattr(b, "points", b), dtype=np.float64).reshape(-1, 3)
        if pa.shape != pb.shape:
            raise GeometryError(f"landmark counts differ: {pa.shape[0]} vs {pb.shape[0]}")
        if pa.shape[0] == 0:
            raise GeometryError("landmark sets are empty")
        return float(np.mean(np.linalg.norm((pa - pb) * scale, axis=1)))
    raise ConfigError(f"mode must be '{MASK_MODE}' or '{LANDMARK_MODE}', got {mode!r}")


def landmark_transfer(points: LandmarkSet, field: DenseField) -> LandmarkSet:
    """Map fixed-space landmarks through p' = p + u(p), sampling u trilinearly."""
    outside = points.out_of_bounds(field.dims)
    if np.any(outside):
        bad = ", ".join(points.ids[i] for i in np.flatnonzero(outside))
        raise GeometryError(f"landmarks outside field bounds {field.dims}: {bad}")
    coords = points.points.T
    disp = np.stack([sample_trilinear(field.u[c], coords, BoundaryPolicy.CLAMP) for c in range(3)], axis=1)
    return points.with_points(points.points + disp)


@dataclass
class JacobianReport:
    mean_log_det: float
    std_log_det: float
    folding_percent: float
    excluded: int
    interior_voxels: int

    def to_dict(self) -> dict:
        return asdict(self)


def jacobian_determinant(field: Union[DenseField, np.ndarray]) -> np.ndarray:
    """det(I + ∇u) by central differences on interior voxels, shape (W-2, H-2, D-2)."""
    u = np.asarray(getattr(field, "u", field), dtype=np.float64)
    if u.ndim != 4 or u.shape[0] != 3:
        raise GeometryError(f"expected a (3, W, H, D) field, got {u.shape}")
    if any(n < 3 for n in u.shape[1:]):
        raise GeometryError(f"jacobian_stats needs ≥ 3 voxels per axis, got {u.shape[1:]}")
    interior = (slice(1, -1),) * 3
    J = np.empty((3, 3) + tuple(n - 2 for n in u.shape[1:]))
    for a in range(3):
        hi = list(interior)
        lo = list(interior)
        hi[a] = slice(2, None)
        lo[a] = slice(None, -2)
        for c in range(3):
            J[c, a] = 0.5 * (u[c][tuple(hi)] - u[c][tuple(lo)]) + (1.0 if a == c else 0.0)
    return (J[0, 0] * J[1, 1] * J[2, 2]
            + J[1, 0] * J[2, 1] * J[0, 2]
            + J[0, 1] * J[1, 2] * J[2, 0]
            - J[0, 0] * J[1, 2] * J[2, 1]
            - J[2, 2] * J[1, 0] * J[0, 1]
            - J[0, 2] * J[1, 1] * J[2, 0])


def jacobian_stats(field: Union[DenseField, np.ndarray]) -> JacobianReport:
    """
    Log-determinant statistics over det > 0 voxels and the folding rate.

    Returns:
        JacobianReport; mean/std are NaN when no interior voxel has det > 0
    """
    det = jacobian_determinant(field)
    positive = det > 0
    logs = np.log(det[positive])
    return JacobianReport(
        mean_log_det=float(logs.mean()) if logs.size else float("nan"),
        std_log_det=float(logs.std()) if logs.size else float("nan"),
        folding_percent=100.0 * float(np.count_nonzero(det < 0)) / det.size,
        excluded=int(det.size - np.count_nonzero(positive)),
        interior_voxels=int(det.size),
    )


# ---------------------------------------------------------------------------
# Paired tests
# ---------------------------------------------------------------------------

@dataclass
class PairedTest:
    name: str
    family: str
    n: int
    mean_diff: float
    t_stat: float
    p_value: float
    q_value: float = float("nan")
    reject: bool = False


def student_t_sf(t: float, df: float) -> float:
    """Upper tail P(T > t) via the regularized incomplete beta function."""
    tail = 0.5 * float(betainc(0.5 * df, 0.5, df / (df + t * t)))
    return tail if t >= 0 else 1.0 - tail


def paired_t(a: Sequence[float], b: Sequence[float], alternative: str = "greater"):
    """
    Paired t statistic and p-value for H1: mean(a − b) > 0 (or ≠ 0).

    A zero-variance difference gives p = 1 when the mean difference does not
    favour the alternative and p = 0 when it does.
    """
    if alternative not in ALTERNATIVES:
        raise ConfigError(f"alternative must be one of {ALTERNATIVES}, got {alternative!r}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"paired samples differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        raise ConfigError("paired tests need at least 2 cases")
    diff = a - b
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    n = diff.size
    if sd == 0.0:
        favours = mean > 0 if alternative == "greater" else mean != 0
        t_stat = float(np.copysign(np.inf, mean)) if mean != 0 else 0.0
        return mean, t_stat, 0.0 if favours else 1.0
    t_stat = mean / (sd / np.sqrt(n))
    df = n - 1
    if alternative == "greater":
        p = student_t_sf(t_stat, df)
    else:
        p = float(betainc(0.5 * df, 0.5, df / (df + t_stat * t_stat)))
    return mean, float(t_stat), min(max(p, 0.0), 1.0)


def benjamini_hochberg(p_values: Sequence[float], alpha: float = 0.05):
    """BH step-up q-values and reject flags."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.size == 0:
        return np.zeros(0, dtype=bool), np.zeros(0)
    reject, q = fdrcorrection(p, alpha=alpha, method="indep")
    return np.asarray(reject, dtype=bool), np.asarray(q, dtype=np.float64)


def paired_tests(scores_a: Mapping[str, Sequence[float]], scores_b: Mapping[str, Sequence[float]],
                 families: Optional[Mapping[str, str]] = None, alternative: str = "greater",
                 alpha: float = 0.05) -> List[PairedTest]:
    """
    One paired test per named comparison, with BH-FDR applied within each family.

    Args:
        scores_a: Comparison name → per-case scores of the method under test
        scores_b: Comparison name → per-case scores of the reference, same cases
        families: Comparison name → family label (all in one family when None)
        alternative: "greater" (A better) or "two-sided"
        alpha: FDR level for the reject flags

    Returns:
        PairedTest rows in the order of `scores_a`
    """
    missing = set(scores_a) ^ set(scores_b)
    if missing:
        raise ConfigError(f"comparisons present on only one side: {sorted(missing)}")
    rows = []
    for name in scores_a:
        mean, t_stat, p = paired_t(scores_a[name], scores_b[name], alternative)
        family = (families or {}).get(name, "all")
        rows.append(PairedTest(name, family, len(scores_a[name]), mean, t_stat, p))

    by_family: Dict[str, List[PairedTest]] = {}
    for row in rows:
        by_family.setdefault(row.family, []).append(row)
    for members in by_family.values():
        reject, q = benjamini_hochberg([r.p_value for r in members], alpha)
        for row, qi, ri in zip(members, q, reject):
            row.q_value = float(qi)
            row.reject = bool(ri)
    return rows


def load_case_scores(path: str) -> Dict[str, np.ndarray]:
    """Read a per-case CSV (first column = case id, one column per metric)."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Score file not found: {path}")
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"Score file {path} is empty") from None
        columns: Dict[str, List[float]] = {name.strip(): [] for name in header[1:]}
        for line_no, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise ConfigError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            for name, cell in zip(columns, row[1:]):
                try:
                    columns[name].append(float(cell))
                except ValueError as e:
                    raise ConfigError(f"{path}:{line_no}: {e}") from e
    return {name: np.asarray(values) for name, values in columns.items()}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    dice: Optional[float] = None
    landmark_distance_mm: Optional[float] = None
    mask_distance_mm: Optional[float] = None
    jacobian: Optional[JacobianReport] = None
    tests: List[PairedTest] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "dice": self.dice,
            "landmark_distance_mm": self.landmark_distance_mm,
            "mask_distance_mm": self.mask_distance_mm,
            "jacobian": self.jacobian.to_dict() if self.jacobian else None,
        }
        if self.tests:
            out["tests"] = [asdict(t) for t in self.tests]
        return out

    def flat(self) -> Dict[str, object]:
        row = {
            "dice": self.dice,
            "landmark_distance_mm": self.landmark_distance_mm,
            "mask_distance_mm": self.mask_distance_mm,
        }
        if self.jacobian:
            row.update({f"jacobian_{k}": v for k, v in self.jacobian.to_dict().items()})
        return row


def _json_safe(value):
    """Non-finite floats become None, numpy scalars become Python scalars, recursively."""
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def rows_to_csv(rows: Sequence[Mapping[str, object]]) -> str:
    if not rows:
        return ""
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(rows[0].keys()), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buffer.getvalue()


def save_report(payload, path: str, fmt: str = "json") -> None:
    """
    Write a MetricReport, a list of PairedTest rows or a list of dict rows.

    Args:
        payload: Report object or rows
        path: Destination file
        fmt: "json" or "csv"
    """
    if fmt not in ("json", "csv"):
        raise ConfigError(f"report format must be 'json' or 'csv', got {fmt!r}")
    if isinstance(payload, MetricReport):
        rows = [payload.flat()]
        doc = payload.to_dict()
    else:
        rows = [asdict(r) if isinstance(r, PairedTest) else dict(r) for r in payload]
        doc = rows
    if fmt == "csv":
        atomic_write_text(path, rows_to_csv(rows))
    else:
        text = json.dumps(_json_safe(doc), indent=2, allow_nan=False)
        atomic_write_text(path, text + "\n")
    logger.info(f"📄 Report written to {path}")


def evaluate_registration(field: DenseField, fixed_mask: Optional[MaskVolume] = None,
                          warped_mask: Optional[MaskVolume] = None,
                          fixed_landmarks: Optional[LandmarkSet] = None,
                          moving_landmarks: Optional[LandmarkSet] = None,
                          spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> MetricReport:
    """
    Assemble the metrics available for one registered pair.

    Masks give Dice and the mask centroid distance. Landmarks give the TRE,
    after mapping fixed landmarks into moving space through the field.
    """
    report = MetricReport(jacobian=jacobian_stats(field))
    if fixed_mask is not None and warped_mask is not None:
        report.dice = dice_score(fixed_mask, warped_mask)
        if np.any(fixed_mask.data > 0) and np.any(warped_mask.data > 0):
            report.mask_distance_mm = centroid_distance(fixed_mask, warped_mask, spacing, MASK_MODE)
    if fixed_landmarks is not None and moving_landmarks is not None:
        mapped = landmark_transfer(fixed_landmarks, field)
        report.landmark_distance_mm = centroid_distance(mapped, moving_landmarks, spacing, LANDMARK_MODE)
    return report
