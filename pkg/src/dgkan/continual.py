"""Domain-incremental training orchestration plus the Acc / AUC / average
forgetting metrics and the per-(train step, eval task) score grid.

Per-task flow (the detector head grows one grouped-RBF layer per domain;
baseline heads keep one global parameter set):

* task start: add the new head layer over the new task's current features
  and create a fresh identity projection for the incoming transition;
* task 1 trains on classification (plus within-task contrastive separation
  when enabled); later tasks add the replay-separation and feature
  distillation terms and train the drift projection concurrently;
* task end: re-project the stored memory through the trained projection
  (exactly once per transition), merge-select current-task features into the
  memory under the global budget, and snapshot the frozen teacher.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fskdcp import (AugmentConfig, FeatureMemory, KdcpProjection, augment_features,
                     project_memory, select_indices, train_projection_step)
from .kanheads import (DgkdHead, FeatureExtractor, add_task_layer, make_baseline_head)
from .losses import (DomainLabeledBatch, LossConfig, bce_loss, kd_loss, overall_loss,
                     supcon_loss)
from .numcore import AdamState, ContractViolation, RngStream, adam_step
from .synthbench import TaskStream, dataset


@dataclass
class AblationSwitches:
    use_sc: bool = True
    use_kd: bool = True
    use_kdcp: bool = True
    use_raw_replay: bool = False


@dataclass
class TrainerConfig:
    d_x: int = 8
    d_f: int = 16
    hidden: int = 64
    groups: int = 4
    head_kind: str = "dgkd"              # dgkd | mlp | groupkan
    mlp_hidden: int = 32
    gk_groups: int | None = None         # rational-activation groups (defaults to d_f)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    switches: AblationSwitches = field(default_factory=AblationSwitches)
    memory_budget: int = 500
    batch_size: int = 64
    epochs: int = 20
    main_lr: float = 2e-4
    proj_lr: float = 5e-4
    proj_groups: int | None = None       # defaults to d_f (one RBF per feature dim)
    feature_scale: float = 1.0           # extractor output-layer init multiplier
    replay_batch: int | None = None      # replay rows per step (defaults to batch_size)


class Trainer:
    """Single-writer trainer state for one domain-incremental run."""

    def __init__(self, cfg: TrainerConfig, seed: int):
        self.cfg = cfg
        self.rng = RngStream(seed).substream("trainer")
        self.extractor = FeatureExtractor.init(cfg.d_x, cfg.d_f, cfg.hidden,
                                               self.rng.substream("extractor-init"),
                                               feature_scale=cfg.feature_scale)
        self.teacher: FeatureExtractor | None = None
        if cfg.head_kind == "dgkd":
            self.head = DgkdHead(cfg.d_f, 1, cfg.groups)
        else:
            gk_groups = cfg.gk_groups if cfg.gk_groups is not None else cfg.d_f
            self.head = make_baseline_head(cfg.head_kind, cfg.d_f, 1,
                                           self.rng.substream("head-init"),
                                           hidden=cfg.mlp_hidden, groups=gk_groups)
        self.memory: FeatureMemory | None = None
        self.raw_memory: np.ndarray | None = None
        self.projection: KdcpProjection | None = None
        self.task = 0

    # -- helpers -------------------------------------------------------------

    def _proj_groups(self) -> int:
        return self.cfg.proj_groups if self.cfg.proj_groups is not None else self.cfg.d_f

    def _trains_projection(self) -> bool:
        sw = self.cfg.switches
        return self.task >= 2 and sw.use_kdcp and not sw.use_raw_replay

    def _uses_replay(self) -> bool:
        return self.cfg.switches.use_sc and self.memory is not None and len(self.memory) > 0

    def _replay_view(self) -> FeatureMemory:
        """Memory as seen by the replay path this step.

        With drift compensation on, stored rows are tracked into the current
        (evolving) feature space by the live projection; the permanent
        exactly-once re-projection still happens at the transition.
        """
        if self._trains_projection() and self.projection is not None:
            return FeatureMemory(features=self.projection.apply(self.memory.features),
                                 domain_class=self.memory.domain_class, label=self.memory.label,
                                 source_task=self.memory.source_task, budget=self.memory.budget,
                                 space_task=self.memory.space_task)
        return self.memory

    # -- training ------------------------------------------------------------

    def train_task(self, X: np.ndarray, y: np.ndarray, epochs: int | None = None,
                   batch_size: int | None = None) -> None:
        """Train on one task's data and run the transition bookkeeping."""
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if np.unique(y).size < 2:
            raise ContractViolation("task data must contain both classes")
        epochs = self.cfg.epochs if epochs is None else epochs
        batch_size = self.cfg.batch_size if batch_size is None else batch_size
        self.task += 1
        t = self.task
        rng_task = self.rng.substream("task", t)

        if isinstance(self.head, DgkdHead):
            feats_now = self.extractor.forward(X)
            self.head = add_task_layer(self.head, feats_now, rng_task.substream("layer-init"))

        proj_opt = None
        if self._trains_projection():
            pool = [self.extractor.forward(X) if self.teacher is None else self.teacher.forward(X)]
            if self.memory is not None and len(self.memory) > 0:
                pool.append(self.memory.features)
            self.projection = KdcpProjection.init(np.vstack(pool), self._proj_groups(),
                                                  source_task=t - 1, target_task=t)
            proj_opt = AdamState.init(self.projection.layer.n_params(), lr=self.cfg.proj_lr)

        opt_ext = AdamState.init(self.extractor.n_params(), lr=self.cfg.main_lr)
        opt_head = AdamState.init(_head_param_count(self.head), lr=self.cfg.main_lr)

        n = X.shape[0]
        rng_batch = rng_task.substream("batches")
        rng_replay = rng_task.substream("replay")
        for _ in range(epochs):
            order = rng_batch.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                proj_opt, opt_ext, opt_head = self._train_step(
                    X[idx], y[idx], t, proj_opt, opt_ext, opt_head, rng_replay)

        self._end_of_task(X, y, t)

    def _train_step(self, xb: np.ndarray, yb: np.ndarray, t: int, proj_opt,
                    opt_ext: AdamState, opt_head: AdamState, rng_replay: RngStream):
        cfg = self.cfg
        sw = cfg.switches
        nb = xb.shape[0]

        raw_replay = None
        if sw.use_raw_replay and self.raw_memory is not None and self.memory is not None \
                and len(self.memory) > 0:
            ridx = rng_replay.integers(0, len(self.memory), size=nb)
            raw_replay = (self.raw_memory[ridx], self.memory.domain_class[ridx])

        if raw_replay is not None:
            X_full = np.vstack([xb, raw_replay[0]])
        else:
            X_full = xb
        F_full, cache_ext = self.extractor.forward_cached(X_full)
        F = F_full[:nb]

        teacher_F = None
        if t >= 2 and (sw.use_kd or self._trains_projection()):
            teacher_F = self.teacher.forward(xb)

        if self._trains_projection() and proj_opt is not None:
            _, proj_opt = train_projection_step(self.projection, teacher_F, F, proj_opt)

        logits, cache_head = self.head.forward_cached(F)
        cls, dlogits = bce_loss(logits, yb)
        dF_head, head_grads = self.head.backward(dlogits.reshape(nb, 1), cache_head)

        dF_total = dF_head.copy()
        sc = 0.0
        dF_sc_replay = None
        if sw.use_sc:
            dc_now = 2 * (t - 1) + yb
            if raw_replay is not None:
                sc_feats = F_full
                sc_dc = np.concatenate([dc_now, raw_replay[1]])
            elif self._uses_replay():
                n_rep = cfg.replay_batch if cfg.replay_batch is not None else nb
                rb = augment_features(self._replay_view(), cfg.augment, rng_replay, n_samples=n_rep)
                sc_feats = np.vstack([F, rb.features])
                sc_dc = np.concatenate([dc_now, rb.domain_class])
            else:
                sc_feats = F
                sc_dc = dc_now
            if np.unique(sc_dc).size >= 2:
                batch = DomainLabeledBatch(features=sc_feats, domain_class=sc_dc,
                                           label=np.zeros(sc_feats.shape[0], dtype=np.int64))
                sc, dF_sc = supcon_loss(batch, cfg.loss.tau, normalize=cfg.loss.sc_normalize)
                dF_total += cfg.loss.lambda_sc * dF_sc[:nb]
                if raw_replay is not None:
                    dF_sc_replay = cfg.loss.lambda_sc * dF_sc[nb:]

        kd = 0.0
        if sw.use_kd and t >= 2:
            kd, dF_kd = kd_loss(teacher_F, F)
            dF_total += cfg.loss.lambda_kd * dF_kd

        total = overall_loss(cls, sc, kd, cfg.loss)
        if not np.isfinite(total):
            raise RuntimeError(f"non-finite loss at task {t}: cls={cls} sc={sc} kd={kd}")

        if raw_replay is not None:
            dF_full = np.vstack([dF_total, dF_sc_replay if dF_sc_replay is not None
                                 else np.zeros_like(F_full[nb:])])
        else:
            dF_full = dF_total
        _, ext_grads = self.extractor.backward(dF_full, cache_ext)

        new_ext, opt_ext = adam_step(self.extractor.param_vector(), ext_grads, opt_ext)
        self.extractor.set_param_vector(new_ext)
        new_head, opt_head = adam_step(self.head.param_vector(), head_grads, opt_head)
        self.head.set_param_vector(new_head)
        return proj_opt, opt_ext, opt_head

    def _end_of_task(self, X: np.ndarray, y: np.ndarray, t: int) -> None:
        cfg = self.cfg
        sw = cfg.switches
        feats = self.extractor.forward(X)
        dc = 2 * (t - 1) + y

        if t >= 2 and self.memory is not None and self._trains_projection():
            self.memory = project_memory(self.memory, self.projection)

        if sw.use_raw_replay:
            if self.memory is not None and len(self.memory) > 0:
                old_feats = self.extractor.forward(self.raw_memory)
                pool_F = np.vstack([old_feats, feats])
                pool_dc = np.concatenate([self.memory.domain_class, dc])
                pool_raw = np.vstack([self.raw_memory, X])
            else:
                pool_F, pool_dc, pool_raw = feats, dc, X
            idx = select_indices(pool_F, pool_dc, cfg.memory_budget)
            self.memory = FeatureMemory(features=pool_F[idx], domain_class=pool_dc[idx],
                                        label=pool_dc[idx] % 2, source_task=pool_dc[idx] // 2 + 1,
                                        budget=cfg.memory_budget, space_task=t)
            self.raw_memory = pool_raw[idx]
        else:
            if self.memory is not None and len(self.memory) > 0:
                pool_F = np.vstack([self.memory.features, feats])
                pool_dc = np.concatenate([self.memory.domain_class, dc])
            else:
                pool_F, pool_dc = feats, dc
            idx = select_indices(pool_F, pool_dc, cfg.memory_budget)
            self.memory = FeatureMemory(features=pool_F[idx], domain_class=pool_dc[idx],
                                        label=pool_dc[idx] % 2, source_task=pool_dc[idx] // 2 + 1,
                                        budget=cfg.memory_budget, space_task=t)

        self.teacher = self.extractor.snapshot()

    # -- evaluation ----------------------------------------------------------

    def scores(self, X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Probability scores and logits for one eval set."""
        F = self.extractor.forward(np.asarray(X, dtype=np.float64))
        logits = self.head.forward(F).ravel()
        probs = 1.0 / (1.0 + np.exp(-logits))
        return probs, logits

    def evaluate_all(self, eval_sets: list[tuple[np.ndarray, np.ndarray]]) -> tuple[list[float], list[float]]:
        """Deterministic (acc, auc) per seen task, in task order."""
        accs, aucs = [], []
        for Xe, ye in eval_sets:
            probs, logits = self.scores(Xe, ye)
            accs.append(accuracy(logits, ye))
            aucs.append(auc(probs, ye))
        return accs, aucs


def _head_param_count(head) -> int:
    if isinstance(head, DgkdHead):
        return head.active_layer.n_params()
    return head.n_params()


# -- metrics ------------------------------------------------------------------


def accuracy(logits, labels, threshold: float = 0.5) -> float:
    """Percentage of correct decisions at the given probability threshold."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if z.size == 0:
        raise ContractViolation("accuracy on empty input")
    if z.shape != y.shape:
        raise ContractViolation("accuracy length mismatch")
    logit_cut = np.log(threshold / (1.0 - threshold))
    pred = (z > logit_cut).astype(np.int64)
    return float((pred == y).mean() * 100.0)


def auc(scores, labels) -> float:
    """Mann-Whitney statistic via rank summation, as a percentage.

    Ties get the average rank, which credits half a win per tied pair;
    requires both classes present.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if s.shape != y.shape:
        raise ContractViolation("auc length mismatch")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractViolation("auc requires both classes present")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    i = 0
    rank_base = 1
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        avg = (rank_base + rank_base + (j - i)) / 2.0
        ranks[order[i:j + 1]] = avg
        rank_base += j - i + 1
        i = j + 1
    r_pos = ranks[y == 1].sum()
    u = r_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg) * 100.0)


@dataclass
class ScoreMatrix:
    """Lower-triangular grids of per-task scores after each training step."""

    acc_rows: list[list[float]] = field(default_factory=list)
    auc_rows: list[list[float]] = field(default_factory=list)

    def add_row(self, accs: list[float], aucs: list[float]) -> None:
        t = len(self.acc_rows) + 1
        if len(accs) != t or len(aucs) != t:
            raise ContractViolation(f"row {t} must contain exactly {t} entries")
        self.acc_rows.append([float(v) for v in accs])
        self.auc_rows.append([float(v) for v in aucs])

    def rows(self, metric: str) -> list[list[float]]:
        if metric == "acc":
            return self.acc_rows
        if metric == "auc":
            return self.auc_rows
        raise ContractViolation(f"unknown metric {metric!r}")

    @property
    def num_steps(self) -> int:
        return len(self.acc_rows)

    def entry(self, i: int, j: int, metric: str = "acc") -> float:
        """Score of the model after task i on task j (1-based, j <= i)."""
        return self.rows(metric)[i - 1][j - 1]


def average_forgetting(matrix: ScoreMatrix, t: int, metric: str = "acc") -> float:
    """Mean drop over previous tasks: (1/(t-1)) sum_i first_i - last_i.

    first_i is the diagonal entry (task i right after learning it), last_i
    the entry after task t; undefined before the second task.
    """
    if t < 2:
        raise ContractViolation("AF undefined for first task")
    rows = matrix.rows(metric)
    if t > len(rows):
        raise ContractViolation(f"no row for task {t}")
    drops = [rows[i - 1][i - 1] - rows[t - 1][i - 1] for i in range(1, t)]
    return float(sum(drops) / (t - 1))


def average_accuracy(matrix: ScoreMatrix, t: int, metric: str = "acc") -> float:
    """Mean score over all tasks seen after learning task t."""
    rows = matrix.rows(metric)
    return float(np.mean(rows[t - 1]))


def run_stream(stream: TaskStream, cfg: TrainerConfig, seed: int | None = None,
               epochs: int | None = None) -> tuple[ScoreMatrix, Trainer]:
    """Train through a task stream, evaluating all seen tasks after each one."""
    trainer = Trainer(cfg, stream.seed if seed is None else seed)
    matrix = ScoreMatrix()
    eval_sets = []
    for t in range(len(stream)):
        Xtr, ytr = dataset(stream, t, "train")
        eval_sets.append(dataset(stream, t, "eval"))
        trainer.train_task(Xtr, ytr, epochs=epochs)
        accs, aucs = trainer.evaluate_all(eval_sets)
        matrix.add_row(accs, aucs)
    return matrix, trainer
