"""Experiment configuration, training loop, evaluation, and comparisons.

Everything downstream of a parsed interaction log lives here: the
config/metrics types and their JSON forms, Adam training with early
stopping on a held-out slice of train students, pooled-AUC evaluation
under teacher forcing, the Nemenyi rank test, and the file-emitting
entry points used by the CLI.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .corpus import (
    InteractionLog,
    build_qs_matrix,
    chunk_sequences,
    load_interactions,
    split_train_test,
    subset_students,
)
from .model import VARIANTS, APGKTModel, DKTBaseline, bce_loss
from .modes import mode_matrix
from .skillgraph import build_skill_graph, skill_difficulty

# Published AUC figures used for the rank-test demo; these models are not
# reimplemented here (apgkt-no-modes approximates GIKT, dkt-baseline DKT).
REFERENCE_MODELS = ["DKT", "DKVMN", "GKT", "GIKT", "APGKT"]
REFERENCE_AUC = {
    "assist09": {"DKT": 0.6995, "DKVMN": 0.7112, "GKT": 0.7230, "GIKT": 0.7742, "APGKT": 0.7767},
    "assist09-muti": {"DKT": 0.6961, "DKVMN": 0.7106, "GKT": 0.7320, "GIKT": 0.7763, "APGKT": 0.7817},
    "CSEDM": {"DKT": 0.7543, "DKVMN": 0.7626, "GKT": 0.7647, "GIKT": 0.7836, "APGKT": 0.7902},
    "FrcSub": {"DKT": 0.8891, "DKVMN": 0.8729, "GKT": 0.8748, "GIKT": 0.8982, "APGKT": 0.9059},
    "Math1": {"DKT": 0.8349, "DKVMN": 0.8403, "GKT": 0.8456, "GIKT": 0.8892, "APGKT": 0.8922},
    "Math2": {"DKT": 0.8084, "DKVMN": 0.8159, "GKT": 0.8181, "GIKT": 0.8681, "APGKT": 0.8695},
}
# Single-skill-dominated variants of the same study sets; the multi-skill
# resample of assist09 is kept out of the base comparison.
BASE_DATASETS = ["assist09", "CSEDM", "FrcSub", "Math1", "Math2"]

# Studentized-range q values (two-tailed, infinite df) for the Nemenyi test.
Q_ALPHA = {
    0.05: {2: 1.960, 3: 2.343, 4: 2.569, 5: 2.728, 6: 2.850,
           7: 2.949, 8: 3.031, 9: 3.102, 10: 3.164},
    0.10: {2: 1.645, 3: 2.052, 4: 2.291, 5: 2.459, 6: 2.589,
           7: 2.693, 8: 2.780, 9: 2.855, 10: 2.920},
}


class StageError(RuntimeError):
    """Failure attributed to one named stage of an experiment run."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    """One experiment: data, model variant, and optimization knobs.

    ``lam`` serializes under the JSON key "lambda". ``dataset_name``
    defaults to the log file's stem and labels rows in comparisons.
    """

    log_path: str = ""
    qmatrix_path: str = ""
    dataset_name: str = ""
    variant: str = "apgkt"
    d: int = 100
    d_m: int = 100
    n_layers: int = 2
    neighbor_cap: int = 10
    k: int = 5
    att_bound: float = 0.5
    lam: float = 1.0
    recap: str = "soft"
    activation: str = "tanh"
    decoder_activation: str = "tanh"
    lr: float = 0.003
    lr_decay: float = 1.0
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    ratio: float = 0.8
    max_seq_len: int = 200

    _JSON_KEYS = {"lam": "lambda"}

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.recap not in ("hard", "soft"):
            raise ValueError(f"recap must be 'hard' or 'soft', got {self.recap!r}")
        positive = {"d": self.d, "d_m": self.d_m, "k": self.k, "lr": self.lr,
                    "batch_size": self.batch_size, "max_epochs": self.max_epochs,
                    "patience": self.patience, "max_seq_len": self.max_seq_len}
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.n_layers < 0 or self.neighbor_cap < 1:
            raise ValueError("n_layers must be >= 0 and neighbor_cap >= 1")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 < self.ratio < 1.0:
            raise ValueError(f"split ratio must be in (0, 1), got {self.ratio}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            out[self._JSON_KEYS.get(f.name, f.name)] = getattr(self, f.name)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        inverse = {v: k for k, v in cls._JSON_KEYS.items()}
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in data.items():
            name = inverse.get(key, key)
            if name not in known:
                raise ValueError(f"unknown config key: {key!r}")
            kwargs[name] = value
        config = cls(**kwargs)
        config.validate()
        return config

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        ).hexdigest()[:16]


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return ExperimentConfig.from_json(path.read_text(encoding="utf-8"))


@dataclass
class MetricsReport:
    """Per-epoch training trace plus final evaluation of one run."""

    dataset: str = ""
    variant: str = ""
    seed: int = 0
    config_hash: str = ""
    train_bce: list = field(default_factory=list)
    train_reloss: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    val_metric_name: str = "auc"
    best_epoch: int = -1
    epochs_run: int = 0
    test_auc: float | None = None
    wall_clock_seconds: float = 0.0

    def validate(self) -> None:
        if self.test_auc is not None and not 0.0 <= self.test_auc <= 1.0:
            raise ValueError(f"AUC out of range: {self.test_auc}")

    def to_json(self) -> str:
        self.validate()
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        data = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown report keys: {sorted(unknown)}")
        report = cls(**data)
        report.validate()
        return report


def compute_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outranks a random negative (ties ½)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class NemenyiResult:
    average_ranks: np.ndarray  # [k], 1 = best
    critical_difference: float
    alpha: float


def nemenyi_test(auc_table: np.ndarray, alpha: float = 0.05) -> NemenyiResult:
    """Average ranks across datasets plus the critical difference.

    ``auc_table`` is [models, datasets]; higher AUC ranks better (rank 1),
    ties get average ranks. CD = q_alpha * sqrt(k (k+1) / (6 N)).
    """
    table = np.asarray(auc_table, dtype=float)
    if table.ndim != 2:
        raise ValueError(f"AUC table must be 2-D, got shape {table.shape}")
    k, n = table.shape
    if k < 2 or n < 2:
        raise ValueError(f"need >= 2 models and >= 2 datasets, got {k}x{n}")
    if not np.isfinite(table).all():
        raise ValueError("AUC table contains non-finite entries")
    if alpha not in Q_ALPHA:
        raise ValueError(f"alpha must be one of {sorted(Q_ALPHA)}, got {alpha}")
    if k not in Q_ALPHA[alpha]:
        raise ValueError(f"q table covers 2..10 models, got {k}")
    ranks = np.column_stack([rankdata(-table[:, j], method="average") for j in range(n)])
    cd = Q_ALPHA[alpha][k] * math.sqrt(k * (k + 1) / (6.0 * n))
    return NemenyiResult(ranks.mean(axis=1), float(cd), alpha)


def reference_rank_table(alpha: float = 0.05) -> tuple[list[str], np.ndarray, NemenyiResult]:
    """Nemenyi over the published AUC figures on the five base datasets."""
    table = np.array(
        [[REFERENCE_AUC[ds][m] for ds in BASE_DATASETS] for m in REFERENCE_MODELS]
    )
    return REFERENCE_MODELS, table, nemenyi_test(table, alpha)


def make_batches(
    log: InteractionLog,
    batch_size: int,
    student_order: Sequence[str] | None = None,
) -> list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """Group student sequences into padded (questions, answers, mask) tensors.

    Padding is a suffix of question id 0 / answer 0 with mask False; padded
    steps never contribute to losses or metrics.
    """
    students = list(student_order) if student_order is not None else log.students
    batches = []
    for lo in range(0, len(students), batch_size):
        chunk = [log.sequences[s] for s in students[lo : lo + batch_size]]
        T = max(len(seq) for seq in chunk)
        B = len(chunk)
        questions = torch.zeros(B, T, dtype=torch.long)
        answers = torch.zeros(B, T, dtype=torch.long)
        mask = torch.zeros(B, T, dtype=torch.bool)
        for b, seq in enumerate(chunk):
            questions[b, : len(seq)] = torch.tensor([r.question_id for r in seq])
            answers[b, : len(seq)] = torch.tensor([r.correct for r in seq])
            mask[b, : len(seq)] = True
        batches.append((questions, answers, mask))
    return batches


def build_model(config: ExperimentConfig, log: InteractionLog, train_log: InteractionLog):
    """Construct the configured variant with graph artifacts from the train split.

    ``log`` supplies the question/skill universe (identical across splits);
    ``train_log`` supplies the interactions used for difficulty estimates.
    """
    if config.variant == "dkt-baseline":
        return DKTBaseline(log.n_q, config.d)
    qs = build_qs_matrix(log)
    ss = build_skill_graph(qs).ss
    diff = skill_difficulty(train_log, qs)
    mode_mat = mode_matrix(log.question_skills, ss, diff, log.max_skills_per_question)
    return APGKTModel(
        n_q=log.n_q,
        n_s=log.n_s,
        question_skills=log.question_skills,
        mode_mat=mode_mat,
        d=config.d,
        d_m=config.d_m,
        n_layers=config.n_layers,
        neighbor_cap=config.neighbor_cap,
        k=config.k,
        att_bound=config.att_bound,
        recap=config.recap,
        activation=config.activation,
        decoder_activation=config.decoder_activation,
        variant=config.variant,
        neighbor_seed=config.seed,
    )


def _epoch_pass(model, batches, lam, optimizer=None):
    """One pass over the batches; returns (mean bce per step, mean reloss)."""
    total_bce, total_steps, relosses = 0.0, 0, []
    for questions, answers, mask in batches:
        if optimizer is not None:
            optimizer.zero_grad()
        p, reloss = model(questions, answers, mask)
        bce = bce_loss(p[mask], answers[mask].to(p.dtype))
        n_steps = int(mask.sum())
        loss = bce / n_steps + lam * reloss
        if not torch.isfinite(loss):
            raise StageError("train", "loss became non-finite (divergence); "
                             "lower the learning rate or check the data")
        if optimizer is not None:
            loss.backward()
            optimizer.step()
        total_bce += float(bce.detach())
        total_steps += n_steps
        relosses.append(float(reloss.detach()))
    return total_bce / total_steps, sum(relosses) / len(relosses)


def _collect_predictions(model, batches) -> tuple[np.ndarray, np.ndarray]:
    scores, labels = [], []
    with torch.no_grad():
        for questions, answers, mask in batches:
            p, _ = model(questions, answers, mask)
            scores.append(p[mask].numpy())
            labels.append(answers[mask].numpy())
    return np.concatenate(scores), np.concatenate(labels)


def train_model(
    config: ExperimentConfig, train_log: InteractionLog
) -> tuple[torch.nn.Module, MetricsReport]:
    """Adam training with early stopping on held-out train students.

    The last 10% of train students (at least one, at most all-but-one) form
    the validation slice scored by AUC; when the slice has a single outcome
    class the negated mean BCE substitutes. The best-validation parameters
    are restored before returning. Deterministic given ``config.seed``.
    """
    config.validate()
    train_log.validate()
    torch.manual_seed(config.seed)
    start = time.perf_counter()

    students = train_log.students
    if len(students) >= 2:
        n_val = min(max(1, int(np.floor(0.1 * len(students) + 0.5))), len(students) - 1)
        fit_log = subset_students(train_log, students[:-n_val])
        val_log = subset_students(train_log, students[-n_val:])
    else:
        # single-student logs (overfit smoke tests) validate on themselves
        fit_log, val_log = train_log, train_log

    model = build_model(config, train_log, train_log)
    fit_chunked = chunk_sequences(fit_log, config.max_seq_len)
    val_batches = make_batches(
        chunk_sequences(val_log, config.max_seq_len), config.batch_size
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=config.lr_decay)

    report = MetricsReport(
        dataset=config.dataset_name or Path(config.log_path).stem or "in-memory",
        variant=config.variant,
        seed=config.seed,
        config_hash=config.config_hash(),
    )
    lam = 0.0 if not getattr(model, "use_modes", False) else config.lam
    best_score, best_state, best_epoch, stale = -float("inf"), None, -1, 0
    fit_students = fit_chunked.students
    for epoch in range(config.max_epochs):
        order = np.random.default_rng(config.seed + 7919 * (epoch + 1)).permutation(
            len(fit_students)
        )
        batches = make_batches(
            fit_chunked, config.batch_size, [fit_students[i] for i in order]
        )
        model.train()
        epoch_bce, epoch_reloss = _epoch_pass(model, batches, lam, optimizer)
        scheduler.step()
        model.eval()
        scores, labels = _collect_predictions(model, val_batches)
        try:
            val_score = compute_auc(scores, labels)
            report.val_metric_name = "auc"
        except ValueError:
            p = np.clip(scores, 1e-7, 1 - 1e-7)
            val_score = float(
                (labels * np.log(p) + (1 - labels) * np.log(1 - p)).mean()
            )
            report.val_metric_name = "neg_bce"
        report.train_bce.append(epoch_bce)
        report.train_reloss.append(epoch_reloss)
        report.val_metric.append(val_score)
        report.epochs_run = epoch + 1
        if val_score > best_score:
            best_score, best_epoch, stale = val_score, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    report.best_epoch = best_epoch
    report.wall_clock_seconds = time.perf_counter() - start
    return model, report


def evaluate_auc(
    model: torch.nn.Module, test_log: InteractionLog, config: ExperimentConfig
) -> float:
    """Pooled AUC over all test interactions under teacher forcing."""
    test_log.validate()
    model.eval()
    batches = make_batches(
        chunk_sequences(test_log, config.max_seq_len), config.batch_size
    )
    scores, labels = _collect_predictions(model, batches)
    return compute_auc(scores, labels)


def _plot_loss_curves(report: MetricsReport, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = range(1, len(report.train_bce) + 1)
    ax.plot(epochs, report.train_bce, label="train bce")
    if any(report.train_reloss):
        ax.plot(epochs, report.train_reloss, label="train reconstruction")
    ax.plot(epochs, report.val_metric, label=f"val {report.val_metric_name}")
    ax.set_xlabel("epoch")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_ranks(models: list[str], result: NemenyiResult, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    order = np.argsort(result.average_ranks)
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.barh(
        [models[i] for i in order][::-1],
        [result.average_ranks[i] for i in order][::-1],
    )
    ax.set_xlabel(
        f"average rank (CD={result.critical_difference:.3f} at alpha={result.alpha})"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def run_experiment(
    config: ExperimentConfig, out_dir: str | Path, plots: bool = True
) -> MetricsReport:
    """split -> graph/train -> evaluate -> emit metrics.json and checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for label, p in (("log", config.log_path), ("qmatrix", config.qmatrix_path)):
        if not p or not Path(p).exists():
            raise FileNotFoundError(f"missing dataset {label} file: {p or '<unset>'}")
    try:
        log = load_interactions(config.log_path, config.qmatrix_path)
    except ValueError as exc:
        raise StageError("load", str(exc)) from exc
    try:
        train, test = split_train_test(log, config.ratio, config.seed)
    except ValueError as exc:
        raise StageError("split", str(exc)) from exc
    model, report = train_model(config, train)
    try:
        report.test_auc = evaluate_auc(model, test, config)
    except ValueError as exc:
        raise StageError("evaluate", str(exc)) from exc
    try:
        (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
        torch.save(
            {
                "state_dict": model.state_dict(),
                "config": config.to_dict(),
                "config_hash": config.config_hash(),
            },
            out / "checkpoint.pt",
        )
        if plots:
            _plot_loss_curves(report, out / "loss_curves.png")
    except OSError as exc:
        raise StageError("report", str(exc)) from exc
    return report


def compare_runs(
    reports: Sequence[MetricsReport], out_dir: str | Path, alpha: float = 0.05,
    plots: bool = True,
) -> tuple[list[str], list[str], np.ndarray, NemenyiResult]:
    """Pivot run reports into an AUC table and write comparison files.

    Rows are model variants, columns datasets; every (variant, dataset)
    cell must be present exactly once with a recorded test AUC.
    """
    cells: dict[tuple[str, str], float] = {}
    for r in reports:
        if r.test_auc is None:
            raise ValueError(f"run {r.variant}/{r.dataset} has no test AUC")
        key = (r.variant, r.dataset)
        if key in cells:
            raise ValueError(f"duplicate run for {key}")
        cells[key] = r.test_auc
    models = sorted({m for m, _ in cells})
    datasets = sorted({d for _, d in cells})
    table = np.empty((len(models), len(datasets)))
    for i, m in enumerate(models):
        for j, ds in enumerate(datasets):
            if (m, ds) not in cells:
                raise ValueError(f"missing run for model {m!r} on dataset {ds!r}")
            table[i, j] = cells[(m, ds)]
    result = nemenyi_test(table, alpha)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_auc_table(models, datasets, table, out / "auc_table.csv")
    write_nemenyi_csv(models, result, out / "nemenyi.csv")
    if plots:
        _plot_ranks(models, result, out / "nemenyi.png")
    return models, datasets, table, result


def write_auc_table(
    models: Sequence[str], datasets: Sequence[str], table: np.ndarray, path: str | Path
) -> None:
    lines = ["model," + ",".join(datasets)]
    for i, m in enumerate(models):
        lines.append(m + "," + ",".join(f"{v:.6f}" for v in table[i]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_nemenyi_csv(
    models: Sequence[str], result: NemenyiResult, path: str | Path
) -> None:
    lines = ["model,avg_rank"]
    for m, rank in zip(models, result.average_ranks):
        lines.append(f"{m},{rank:.6f}")
    lines.append(f"CD,{result.critical_difference:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
