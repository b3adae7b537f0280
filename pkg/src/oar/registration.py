"""Test-time optimization of the displacement network for one cloud pair."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import neuralfield as nf
from .errors import KTooLarge, NonFiniteLoss, TOutOfRange
from .objective import (
    KernelConfig,
    LLRWeights,
    MatchPairs,
    compute_llr_weights,
    find_correspondences,
    total_loss,
)
from .pointcloud_io import NormalizationTransform, PointCloud, normalize, save_cloud, to_target_frame
from .spatial import SpatialIndex

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "total", "mcc", "llr", "match", "lr")


@dataclass
class RegistrationConfig:
    epochs: int = 200
    lr: float = 1e-4
    sigma2: float = 1.0
    k: int = 30
    alpha1: float = 1e4
    alpha2: float = 1e2
    beta: float | None = None  # None: 1.0 when pairs are given, else 0
    seed: int = 0
    omega0: float = nf.DEFAULT_OMEGA0
    kernel: str = "per_coordinate"
    loss: str = "mcc"
    eps: float = 1e-6
    patience: int = 1
    lr_factor: float = 0.1
    min_lr: float = 1e-7
    lr_threshold: float = 1e-4

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        for name in ("lr", "sigma2", "omega0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.k < 1:
            raise ValueError("k must be positive")
        for name in ("alpha1", "alpha2", "eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.loss not in ("mcc", "cd"):
            raise ValueError(f"unknown loss {self.loss!r}")
        KernelConfig(self.sigma2, self.kernel)

    def resolved_beta(self, has_pairs: bool) -> float:
        if self.beta is not None:
            return float(self.beta)
        return 1.0 if has_pairs else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RegistrationResult:
    params: nf.NetworkParams
    deformed: PointCloud               # target's original frame, source order
    displacement: np.ndarray           # (N, 3), normalized frame
    source_normalized: np.ndarray      # (N, 3)
    source_transform: NormalizationTransform
    target_transform: NormalizationTransform
    history: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seconds: float = 0.0

    def history_array(self) -> np.ndarray:
        return np.array([[row[f] for f in HISTORY_FIELDS] for row in self.history], dtype=np.float64)


def _to_pairs_normalized(pairs: MatchPairs | None, tf: NormalizationTransform) -> MatchPairs | None:
    if pairs is None or len(pairs) == 0:
        return pairs
    return MatchPairs(np.asarray(pairs.source_idx, dtype=np.int64), tf.apply(pairs.target_points))


def _finish(params, src_n, src_tf, tgt_tf, history, cfg, t0) -> RegistrationResult:
    disp, _ = nf.forward(params, src_n)
    deformed = to_target_frame(PointCloud(src_n + disp, frame="normalized"), tgt_tf)
    return RegistrationResult(
        params=params, deformed=deformed, displacement=disp, source_normalized=src_n,
        source_transform=src_tf, target_transform=tgt_tf, history=history,
        config=cfg.to_dict(), seconds=time.perf_counter() - t0,
    )


def register(source: PointCloud, target: PointCloud, pairs: MatchPairs | None = None,
             cfg: RegistrationConfig | None = None, callback=None) -> RegistrationResult:
    """Fit the displacement network so the deformed source matches the target.

    ``pairs`` holds optional external correspondences with target positions
    in the target's original frame. ``callback(epoch, row)`` is invoked
    after each epoch if given.
    """
    cfg = cfg or RegistrationConfig()
    t0 = time.perf_counter()
    for name, cloud in (("source", source), ("target", target)):
        if len(cloud) < cfg.k + 1:
            raise KTooLarge(f"{name} has {len(cloud)} points; k={cfg.k} needs at least {cfg.k + 1}")

    src_cloud, src_tf = normalize(source)
    tgt_cloud, tgt_tf = normalize(target)
    src_n, tgt_n = src_cloud.points, tgt_cloud.points
    pairs_n = _to_pairs_normalized(pairs, tgt_tf)
    beta = cfg.resolved_beta(pairs is not None and len(pairs) > 0)
    kcfg = KernelConfig(cfg.sigma2, cfg.kernel)

    weights: LLRWeights = compute_llr_weights(src_n, cfg.k, cfg.eps)
    params = nf.init_network(cfg.seed, cfg.omega0)
    adam = nf.AdamState.zeros(params)
    sched = nf.SchedulerState(lr=cfg.lr, patience=cfg.patience, factor=cfg.lr_factor,
                              min_lr=cfg.min_lr, threshold=cfg.lr_threshold)
    tgt_index = SpatialIndex(tgt_n)
    history: list[dict] = []
    log.info("registering %d source points onto %d target points (%s loss, %d epochs)",
             len(src_n), len(tgt_n), cfg.loss, cfg.epochs)

    for epoch in range(cfg.epochs):
        disp, record = nf.forward(params, src_n)
        deformed = src_n + disp
        if not np.all(np.isfinite(deformed)):
            raise NonFiniteLoss(epoch, _finish(params, src_n, src_tf, tgt_tf, history, cfg, t0))
        corr = find_correspondences(deformed, tgt_n, tgt_index)
        terms = total_loss(deformed, tgt_n, weights, pairs_n, cfg.alpha1, cfg.alpha2, beta,
                           kcfg, cfg.loss, corr)
        grads = nf.backward(params, record, terms.grad)
        if not (np.isfinite(terms.total) and grads.is_finite()):
            raise NonFiniteLoss(epoch, _finish(params, src_n, src_tf, tgt_tf, history, cfg, t0))

        row = {"epoch": epoch, "total": terms.total, "mcc": terms.data, "llr": terms.llr,
               "match": terms.match, "lr": sched.lr}
        history.append(row)
        if callback is not None:
            callback(epoch, row)
        log.debug("epoch %d total=%.6g data=%.6g llr=%.6g lr=%.3g",
                  epoch, terms.total, terms.data, terms.llr, sched.lr)

        new_adam, new_params = nf.adam_step(adam, params, grads, sched.lr)
        if not new_params.is_finite():
            raise NonFiniteLoss(epoch, _finish(params, src_n, src_tf, tgt_tf, history, cfg, t0))
        adam, params = new_adam, new_params
        sched = nf.scheduler_step(sched, terms.total)

    result = _finish(params, src_n, src_tf, tgt_tf, history, cfg, t0)
    log.info("finished in %.1fs", result.seconds)
    return result


def interpolate(source: PointCloud, result: RegistrationResult, t: float) -> PointCloud:
    """Source moved a fraction ``t`` along the learned displacement field."""
    if not 0.0 <= t <= 1.0:
        raise TOutOfRange(f"t must lie in [0, 1], got {t}")
    src_n = result.source_transform.apply(source.points)
    if src_n.shape != result.displacement.shape:
        raise ValueError("source does not match the registration result")
    moved = PointCloud(src_n + t * result.displacement, frame="normalized")
    return to_target_frame(moved, result.target_transform)


def interpolate_from_params(source: PointCloud, params: nf.NetworkParams, t: float,
                            target_transform: NormalizationTransform | None = None,
                            source_transform: NormalizationTransform | None = None) -> PointCloud:
    """Interpolation from a checkpoint; transforms default to the source's own."""
    if not 0.0 <= t <= 1.0:
        raise TOutOfRange(f"t must lie in [0, 1], got {t}")
    if source_transform is None:
        _, source_transform = normalize(source)
    tgt_tf = target_transform or source_transform
    src_n = source_transform.apply(source.points)
    disp, _ = nf.forward(params, src_n)
    return to_target_frame(PointCloud(src_n + t * disp, frame="normalized"), tgt_tf)


@dataclass
class DisplacementTable:
    points: np.ndarray         # normalized source positions
    displacements: np.ndarray  # normalized-frame displacement per point
    source_transform: NormalizationTransform
    target_transform: NormalizationTransform

    def __len__(self) -> int:
        return len(self.points)

    def deformed(self) -> np.ndarray:
        """Deformed positions in the target's original frame."""
        return self.target_transform.invert(self.points + self.displacements)


def export_displacement_field(result: RegistrationResult) -> DisplacementTable:
    return DisplacementTable(result.source_normalized.copy(), result.displacement.copy(),
                             result.source_transform, result.target_transform)


def write_displacement_csv(table: DisplacementTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "nx", "ny", "nz"])
        for p, v in zip(table.points, table.displacements):
            w.writerow([repr(float(c)) for c in (*p, *v)])


def read_displacement_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :3], data[:, 3:6]


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([str(row["epoch"])] + [repr(float(row[f])) for f in HISTORY_FIELDS[1:]])


def save_result(result: RegistrationResult, out_dir, cloud_name: str = "deformed.ply") -> dict:
    """Persist every artifact of a run; returns the written paths by role."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "deformed": out / cloud_name,
        "displacement": out / "displacement.csv",
        "loss": out / "loss.csv",
        "checkpoint": out / "network.oarn",
    }
    save_cloud(result.deformed, paths["deformed"])
    write_displacement_csv(export_displacement_field(result), paths["displacement"])
    write_history_csv(result.history, paths["loss"])
    nf.save_checkpoint(result.params, paths["checkpoint"])
    return {k: str(v) for k, v in paths.items()}
