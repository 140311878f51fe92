"""Data-free replay machinery: representative-feature selection by herding,
the residual drift-compensation projection, exactly-once memory re-projection
at task transitions, and jittered replay-batch augmentation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kanheads import DgLayer, group_index_map
from .losses import DomainLabeledBatch, align_loss
from .numcore import AdamState, ContractViolation, RngStream, adam_step, check_finite

MEMORY_FORMAT_VERSION = 1


@dataclass
class FeatureMemory:
    """Stored representative features, all living in one feature space.

    ``space_task`` records which task's feature space the rows currently live
    in; ``project_memory`` advances it and refuses to run twice for the same
    transition.  Domain-class labels use the 2T coding 2*(task-1) + label.
    """

    features: np.ndarray
    domain_class: np.ndarray
    label: np.ndarray
    source_task: np.ndarray
    budget: int
    space_task: int

    def __post_init__(self):
        self.features = check_finite(np.asarray(self.features, dtype=np.float64), "memory features")
        self.domain_class = np.asarray(self.domain_class, dtype=np.int64)
        self.label = np.asarray(self.label, dtype=np.int64)
        self.source_task = np.asarray(self.source_task, dtype=np.int64)
        m = self.features.shape[0]
        for name, arr in (("domain_class", self.domain_class), ("label", self.label),
                          ("source_task", self.source_task)):
            if arr.shape != (m,):
                raise ContractViolation(f"memory {name} must align with feature rows")
        if m > self.budget:
            raise ContractViolation(f"memory holds {m} rows, budget is {self.budget}")

    def __len__(self) -> int:
        return self.features.shape[0]


def label_quotas(counts: dict[int, int], budget: int) -> dict[int, int]:
    """Distribute ``budget`` slots over labels: budget // L each, remainder to
    the earliest labels, capped at the available count with the slack
    redistributed round-robin."""
    labels = sorted(counts)
    quotas = {lbl: 0 for lbl in labels}
    remaining = budget
    while remaining > 0:
        open_labels = [lbl for lbl in labels if quotas[lbl] < counts[lbl]]
        if not open_labels:
            break
        for lbl in open_labels:
            if remaining == 0:
                break
            quotas[lbl] += 1
            remaining -= 1
    return quotas


def herd_indices(features: np.ndarray, quota: int) -> np.ndarray:
    """Greedy mean-matching selection within one label.

    Step k picks the unselected row whose inclusion brings the selected-set
    mean closest to the full mean; ties resolve to the lowest index.
    """
    rows = np.asarray(features, dtype=np.float64)
    n = rows.shape[0]
    quota = min(quota, n)
    mu = rows.mean(axis=0)
    chosen: list[int] = []
    avail = np.arange(n)
    sum_sel = np.zeros(rows.shape[1])
    for k in range(quota):
        cand = (sum_sel + rows[avail]) / (k + 1)
        d2 = ((cand - mu) ** 2).sum(axis=1)
        j = int(np.argmin(d2))            # first occurrence wins ties
        idx = int(avail[j])
        chosen.append(idx)
        sum_sel += rows[idx]
        avail = np.delete(avail, j)
    return np.asarray(chosen, dtype=np.int64)


def select_indices(features: np.ndarray, domain_class: np.ndarray, budget: int) -> np.ndarray:
    """Herding-based selection of at most ``budget`` rows, per-label quotas."""
    F = np.asarray(features, dtype=np.float64)
    d = np.asarray(domain_class, dtype=np.int64)
    if F.ndim != 2 or F.shape[0] == 0:
        raise ContractViolation("select_features requires a non-empty feature matrix")
    if d.shape != (F.shape[0],):
        raise ContractViolation("domain-class labels must align with feature rows")
    labels, counts = np.unique(d, return_counts=True)
    if budget < labels.size:
        raise ContractViolation(f"budget {budget} below number of distinct labels {labels.size}")
    quotas = label_quotas(dict(zip(labels.tolist(), counts.tolist())), budget)
    picked: list[np.ndarray] = []
    for lbl in sorted(labels.tolist()):
        rows_idx = np.where(d == lbl)[0]
        local = herd_indices(F[rows_idx], quotas[lbl])
        picked.append(rows_idx[local])
    return np.concatenate(picked)


def select_features(features: np.ndarray, domain_class: np.ndarray, budget: int,
                    space_task: int = 0) -> FeatureMemory:
    """Build a FeatureMemory from the herding selection.

    Binary labels and source tasks are recovered from the 2T domain-class
    coding (label = dc % 2, task = dc // 2 + 1).
    """
    idx = select_indices(features, domain_class, budget)
    F = np.asarray(features, dtype=np.float64)[idx]
    dc = np.asarray(domain_class, dtype=np.int64)[idx]
    return FeatureMemory(features=F, domain_class=dc, label=dc % 2,
                         source_task=dc // 2 + 1, budget=budget, space_task=space_task)


class KdcpProjection:
    """Residual single-layer projection p(f) = f + layer(f) mapping the
    previous task's feature space onto the current one.

    The mixing matrix starts at zero, so a fresh projection is exactly the
    identity map; ``source_task``/``target_task`` tag the transition it is
    trained for.
    """

    def __init__(self, layer: DgLayer, source_task: int, target_task: int):
        if layer.d_in != layer.d_out:
            raise ContractViolation("projection layer must map d_f -> d_f")
        self.layer = layer
        self.source_task = int(source_task)
        self.target_task = int(target_task)

    @classmethod
    def init(cls, init_features: np.ndarray, groups: int, source_task: int,
             target_task: int) -> "KdcpProjection":
        """Identity-initialized projection with RBFs placed over ``init_features``.

        Widths start at 4 times the per-group feature spread: wide bumps keep
        the residual correction smooth over the whole occupied region (narrow
        bumps cannot even represent a constant offset).
        """
        feats = np.asarray(init_features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise ContractViolation("projection init requires a non-empty feature sample")
        d_f = feats.shape[1]
        gmap = group_index_map(d_f, groups)
        centers = np.empty(groups)
        widths = np.empty(groups)
        for g in range(groups):
            block = feats[:, gmap == g]
            centers[g] = block.mean()
            widths[g] = min(max(4.0 * block.std(), 0.5), 10.0)
        layer = DgLayer(task_id=max(target_task, 1), d_in=d_f, d_out=d_f, groups=groups,
                        W=np.zeros((d_f, d_f)), centers=centers, widths=widths)
        return cls(layer, source_task, target_task)

    def apply(self, F: np.ndarray) -> np.ndarray:
        F = np.asarray(F, dtype=np.float64)
        return F + self.layer.forward(F)

    def apply_cached(self, F: np.ndarray):
        F = np.asarray(F, dtype=np.float64)
        out, cache = self.layer.forward_cached(F)
        return F + out, cache


def train_projection_step(proj: KdcpProjection, f_teacher: np.ndarray, f_student: np.ndarray,
                          opt: AdamState) -> tuple[float, AdamState]:
    """One Adam step of the alignment objective on the projection parameters.

    Teacher and student features must come from the same raw inputs; only the
    projection layer is updated (the student features are a fixed target).
    """
    t = np.asarray(f_teacher, dtype=np.float64)
    s = np.asarray(f_student, dtype=np.float64)
    if t.shape != s.shape:
        raise ContractViolation(f"projection step shape mismatch: {t.shape} vs {s.shape}")
    projected, cache = proj.apply_cached(t)
    loss, dP = align_loss(projected, s)
    _, grads = proj.layer.backward(dP, cache)
    params, opt = adam_step(proj.layer.param_vector(), grads, opt)
    proj.layer.set_param_vector(params)
    return loss, opt


def project_memory(mem: FeatureMemory, proj: KdcpProjection) -> FeatureMemory:
    """Map every stored row through the projection, advancing the space tag.

    Each transition applies exactly once: the memory must still live in the
    projection's source space.
    """
    if mem.space_task != proj.source_task:
        raise ContractViolation(
            f"memory lives in task-{mem.space_task} space; projection maps "
            f"{proj.source_task} -> {proj.target_task} (already applied?)")
    return FeatureMemory(features=proj.apply(mem.features), domain_class=mem.domain_class.copy(),
                         label=mem.label.copy(), source_task=mem.source_task.copy(),
                         budget=mem.budget, space_task=proj.target_task)


@dataclass
class AugmentConfig:
    """Label-conditional Gaussian jitter for replay batches.

    ``jitter_scale`` = 0 reproduces stored rows exactly; otherwise the noise
    std per label is jitter_scale times that label's per-dimension std over
    the stored rows.
    """

    jitter_scale: float = 0.5
    samples_per_feature: int = 1

    def __post_init__(self):
        if self.jitter_scale < 0.0:
            raise ContractViolation("jitter_scale must be >= 0")
        if self.samples_per_feature < 1:
            raise ContractViolation("samples_per_feature must be >= 1")


def augment_features(mem: FeatureMemory, cfg: AugmentConfig, rng: RngStream,
                     n_samples: int | None = None) -> DomainLabeledBatch:
    """Draw a replay batch: pick stored rows uniformly (so uniformly within
    each label) and jitter them with that label's scaled diagonal std."""
    m = len(mem)
    if m == 0:
        raise ContractViolation("augment_features on empty memory")
    if n_samples is None:
        n_samples = cfg.samples_per_feature * m
    labels = np.unique(mem.domain_class)
    stds = {int(l): mem.features[mem.domain_class == l].std(axis=0) for l in labels}
    idx = rng.integers(0, m, size=n_samples)
    feats = mem.features[idx].copy()
    if cfg.jitter_scale > 0.0:
        noise = rng.normal(size=feats.shape)
        scale = np.stack([stds[int(l)] for l in mem.domain_class[idx]])
        feats += cfg.jitter_scale * scale * noise
    return DomainLabeledBatch(features=feats, domain_class=mem.domain_class[idx].copy(),
                              label=mem.label[idx].copy())


def save_memory(mem: FeatureMemory, path) -> None:
    """Write the documented CSV snapshot (metadata line, header, rows)."""
    path = Path(path)
    d_f = mem.features.shape[1]
    lines = [
        f"dgkan_memory,version={MEMORY_FORMAT_VERSION},space_task={mem.space_task},"
        f"budget={mem.budget},d_f={d_f},rows={len(mem)}",
        ",".join([f"f{i}" for i in range(d_f)] + ["domain_class", "label", "source_task"]),
    ]
    for i in range(len(mem)):
        vals = [repr(float(v)) for v in mem.features[i]]
        vals += [str(int(mem.domain_class[i])), str(int(mem.label[i])), str(int(mem.source_task[i]))]
        lines.append(",".join(vals))
    path.write_text("\n".join(lines) + "\n")


def load_memory(path) -> FeatureMemory:
    """Read a snapshot written by save_memory, validating the version field."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("dgkan_memory,"):
        raise ContractViolation("not a memory snapshot file")
    meta = dict(item.split("=", 1) for item in lines[0].split(",")[1:])
    version = int(meta.get("version", -1))
    if version != MEMORY_FORMAT_VERSION:
        raise ContractViolation(f"unsupported memory snapshot version {version}")
    rows = int(meta["rows"])
    d_f = int(meta["d_f"])
    if len(lines) < 2 + rows:
        raise ContractViolation("truncated memory snapshot")
    feats = np.empty((rows, d_f))
    dc = np.empty(rows, dtype=np.int64)
    lab = np.empty(rows, dtype=np.int64)
    src = np.empty(rows, dtype=np.int64)
    for i in range(rows):
        parts = lines[2 + i].split(",")
        if len(parts) != d_f + 3:
            raise ContractViolation(f"memory snapshot row {i} has {len(parts)} fields, expected {d_f + 3}")
        feats[i] = [float(v) for v in parts[:d_f]]
        dc[i], lab[i], src[i] = int(parts[d_f]), int(parts[d_f + 1]), int(parts[d_f + 2])
    return FeatureMemory(features=feats, domain_class=dc, label=lab, source_task=src,
                         budget=int(meta["budget"]), space_task=int(meta["space_task"]))
