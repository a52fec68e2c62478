"""Adam, data splitting, the training loop and a grid/random search harness."""

from __future__ import annotations

import configparser
import csv
import io
import itertools
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .dataio import Cohort
from .metrics import EvaluationResult, concordance_index
from .preprocess import FeatureEncoder
from .survival import cox_loss, regularized_loss
from .widedeep import ModelConfig, WideDeepModel

log = logging.getLogger(__name__)

MAX_SPLIT_RETRIES = 100


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    learning_rate: float = 1e-3
    lr_schedule: str = "step"  # "constant" or "step"
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 40
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-4
    batch_mode: str = "minibatch"  # "full" or "minibatch"
    batch_size: int = 64
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    n_repeats: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be three numbers summing to 1, got {self.split_fractions}")
        if min(self.split_fractions) <= 0:
            raise ValueError("every split fraction must be positive")
        if self.lr_schedule not in ("constant", "step"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.batch_mode not in ("full", "minibatch"):
            raise ValueError(f"unknown batch_mode {self.batch_mode!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ad.ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.step += 1
    t = state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()

    def step(self, lr: float) -> None:
        data = {k: p.data for k, p in self.params.items()}
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        adam_step(data, grads, self.state, lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# data


@dataclass
class SurvivalData:
    """Model-ready arrays; ``features`` or ``clouds`` may be None for one-sided models."""

    times: np.ndarray
    events: np.ndarray
    features: np.ndarray | None = None
    clouds: np.ndarray | None = None

    def __len__(self) -> int:
        return self.times.size

    def take(self, idx) -> "SurvivalData":
        return SurvivalData(
            self.times[idx],
            self.events[idx],
            None if self.features is None else self.features[idx],
            None if self.clouds is None else self.clouds[idx],
        )


def split_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    return n - n_val - n_test, n_val, n_test


def split_dataset(events, fractions=(0.8, 0.1, 0.1), seed=0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random train/validation/test index split where every part has an event.

    Permutations are redrawn (up to a fixed number of retries) until all three
    parts contain at least one event.
    """
    events = np.asarray(events)
    n = events.size
    sizes = split_sizes(n, fractions)
    if min(sizes) < 1:
        raise ValueError(f"{n} subjects are too few for split fractions {tuple(fractions)}")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_SPLIT_RETRIES):
        perm = rng.permutation(n)
        parts = np.split(perm, [sizes[0], sizes[0] + sizes[1]])
        if all(events[p].sum() > 0 for p in parts):
            return tuple(np.sort(p) for p in parts)
    raise ValueError(f"could not draw a split with events in every part after {MAX_SPLIT_RETRIES} attempts")


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_c_index: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)
    selected_epoch: int = 0
    test_c_index: float | None = None
    wall_seconds: float = 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "learning_rate", "train_loss", "val_c_index"])
        for i, (lr, loss) in enumerate(zip(self.learning_rate, self.train_loss)):
            val = self.val_c_index[i] if i < len(self.val_c_index) else float("nan")
            w.writerow([i + 1, repr(lr), repr(loss), repr(val)])
        return buf.getvalue()

    def summary(self) -> dict:
        best_val = self.val_c_index[self.selected_epoch - 1] if self.val_c_index else None
        return {
            "epochs": len(self.train_loss),
            "selected_epoch": self.selected_epoch,
            "best_val_c_index": best_val,
            "final_train_loss": self.train_loss[-1] if self.train_loss else None,
            "test_c_index": self.test_c_index,
            "wall_seconds": self.wall_seconds,
        }


def _batches(n: int, events: np.ndarray, config: TrainConfig, rng: np.random.Generator):
    if config.batch_mode == "full":
        return [np.arange(n)]
    perm = rng.permutation(n)
    chunks = [perm[i : i + config.batch_size] for i in range(0, n, config.batch_size)]
    if len(chunks) > 1 and chunks[-1].size < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    # the partial likelihood needs an event inside the batch
    kept = [c for c in chunks if events[c].sum() > 0]
    if len(kept) < len(chunks):
        log.debug("skipped %d event-free mini-batches", len(chunks) - len(kept))
    return kept


def evaluate(model: WideDeepModel, data: SurvivalData) -> EvaluationResult:
    scores = model.predict(data.features, data.clouds)
    return concordance_index(scores, (data.times, data.events))


def _val_c_index(model: WideDeepModel, data: SurvivalData) -> float:
    try:
        return evaluate(model, data).c_index
    except ValueError:
        return float("nan")


def fit(
    model: WideDeepModel,
    train: SurvivalData,
    config: TrainConfig,
    val: SurvivalData | None = None,
) -> tuple[dict[str, np.ndarray], TrainReport]:
    """Minimize the regularized Cox loss with Adam.

    Parameters from the epoch with the highest validation c-index (earliest on
    ties) are loaded back into ``model`` and returned. Without validation data
    the final epoch is kept.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence([config.rng_seed, 17]))
    opt = Adam(model.named_parameters(), config.beta1, config.beta2, config.epsilon)
    weights = [w for _, w in model.named_weights()]
    report = TrainReport()
    best_state, best_val = None, -np.inf
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        model.train()
        losses = []
        for idx in _batches(len(train), train.events, config, rng):
            batch = train if idx.size == len(train) else train.take(idx)
            model.zero_grad()
            scores = model(batch.features, batch.clouds)
            loss = regularized_loss(cox_loss(scores, (batch.times, batch.events)), weights, config.weight_decay)
            ad.backward(loss)
            opt.step(lr)
            losses.append(loss.item())
        report.train_loss.append(float(np.mean(losses)))
        report.learning_rate.append(lr)
        if val is not None:
            c = _val_c_index(model, val)
            report.val_c_index.append(c)
            if c > best_val:
                best_val = c
                best_state = model.state_dict()
                report.selected_epoch = epoch + 1
        log.debug("epoch %d lr %.3g loss %.5f", epoch + 1, lr, report.train_loss[-1])
    if best_state is None:
        best_state = model.state_dict()
        report.selected_epoch = config.epochs
    model.load_state_dict(best_state)
    model.eval()
    report.wall_seconds = time.perf_counter() - start
    return best_state, report


# ---------------------------------------------------------------------------
# experiment protocol


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to run split -> encode -> fit -> test on a cohort."""

    train: TrainConfig = TrainConfig()
    point_widths: tuple[int, ...] = (64, 128, 400)
    transform_fc: tuple[int, ...] = (200, 100)
    global_widths: tuple[int, ...] = (200, 100, 100)
    use_transform: bool = True
    education_levels: int = 4

    def model_config(self, variant: str, n_wide: int, with_volume: bool, seed: int) -> ModelConfig:
        return ModelConfig(
            variant=variant,
            n_wide=n_wide if variant != "deep" else 0,
            point_widths=self.point_widths,
            transform_fc=self.transform_fc,
            global_widths=self.global_widths,
            use_transform=self.use_transform,
            with_volume=with_volume,
            seed=seed,
        )

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        train_keys = {f.name for f in fields(TrainConfig)}
        t = {k: v for k, v in overrides.items() if k in train_keys}
        rest = {k: v for k, v in overrides.items() if k not in train_keys}
        unknown = set(rest) - {f.name for f in fields(ExperimentConfig)}
        if unknown:
            raise KeyError(f"unknown configuration key(s): {', '.join(sorted(unknown))}")
        return replace(self, train=replace(self.train, **t), **rest)


@dataclass
class ExperimentResult:
    model: WideDeepModel
    encoder: FeatureEncoder | None
    report: TrainReport
    test: EvaluationResult
    split: tuple[np.ndarray, np.ndarray, np.ndarray]
    test_data: SurvivalData


def prepare(cohort: Cohort, idx, encoder: FeatureEncoder | None) -> SurvivalData:
    recs = [cohort.clinical[i] for i in idx]
    feats = encoder.transform_many(recs) if encoder is not None else None
    return SurvivalData(cohort.times[idx], cohort.events[idx], feats, cohort.clouds[idx])


def train_variant(
    cohort: Cohort,
    split: tuple[np.ndarray, np.ndarray, np.ndarray],
    variant: str,
    with_volume: bool,
    config: ExperimentConfig,
    seed: int,
) -> tuple[WideDeepModel, FeatureEncoder | None, TrainReport, SurvivalData, SurvivalData]:
    """Fit the encoder on the training part, then the model; returns val/test data untouched."""
    train_idx, val_idx, test_idx = split
    encoder = None
    if variant != "deep":
        encoder = FeatureEncoder(num_levels=config.education_levels, with_volume=with_volume)
        encoder.fit([cohort.clinical[i] for i in train_idx])
    train = prepare(cohort, train_idx, encoder)
    val = prepare(cohort, val_idx, encoder)
    test = prepare(cohort, test_idx, encoder)
    mcfg = config.model_config(variant, encoder.width if encoder else 0, with_volume, seed)
    model = WideDeepModel(mcfg)
    _, report = fit(model, train, replace(config.train, rng_seed=seed), val)
    return model, encoder, report, val, test


def run_experiment(
    cohort: Cohort,
    variant: str,
    config: ExperimentConfig,
    with_volume: bool = False,
    seed: int | None = None,
) -> ExperimentResult:
    seed = config.train.rng_seed if seed is None else seed
    split = split_dataset(cohort.events, config.train.split_fractions, seed)
    model, encoder, report, _, test = train_variant(cohort, split, variant, with_volume, config, seed)
    result = evaluate(model, test)
    report.test_c_index = result.c_index
    return ExperimentResult(model, encoder, report, result, split, test)


def repeat_seeds(master_seed: int, n_repeats: int) -> list[int]:
    ss = np.random.SeedSequence(master_seed)
    return [int(child.generate_state(1)[0]) for child in ss.spawn(n_repeats)]


# ---------------------------------------------------------------------------
# hyperparameter search


@dataclass
class SearchResult:
    best: dict
    best_config: ExperimentConfig
    table: list[dict]


def search_candidates(space: dict[str, list], strategy: str = "grid", n_samples: int = 10, seed: int = 0) -> list[dict]:
    if not space:
        raise ValueError("search space is empty")
    keys = sorted(space)
    if strategy == "grid":
        return [dict(zip(keys, combo)) for combo in itertools.product(*(space[k] for k in keys))]
    if strategy == "random":
        rng = np.random.default_rng(seed)
        return [{k: space[k][rng.integers(len(space[k]))] for k in keys} for _ in range(n_samples)]
    raise ValueError(f"unknown search strategy {strategy!r}")


def hyperparameter_search(
    candidates: list[dict],
    cohort: Cohort,
    config: ExperimentConfig,
    variant: str = "widedeep",
    with_volume: bool = False,
) -> SearchResult:
    """Fit every candidate on one fixed split and rank by validation c-index.

    Only the training and validation parts are used; the first candidate wins
    ties.
    """
    if not candidates:
        raise ValueError("search space is empty")
    seed = config.train.rng_seed
    split = split_dataset(cohort.events, config.train.split_fractions, seed)
    table = []
    best_i, best_c = 0, -np.inf
    for i, cand in enumerate(candidates):
        cfg = config.with_overrides(**cand)
        model, _, report, val, _ = train_variant(cohort, split, variant, with_volume, cfg, seed)
        c = _val_c_index(model, val)
        table.append({**cand, "val_c_index": c, "selected_epoch": report.selected_epoch})
        if c > best_c:
            best_i, best_c = i, c
    return SearchResult(best=table[best_i], best_config=config.with_overrides(**candidates[best_i]), table=table)


# ---------------------------------------------------------------------------
# config files


def _parse_value(text: str, kind):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind in (int, float, str):
        return kind(text)
    # tuples of numbers
    return tuple(float(v) if "." in v or "e" in v.lower() else int(v) for v in text.split(","))


_TRAIN_TYPES = {
    "epochs": int,
    "learning_rate": float,
    "lr_schedule": str,
    "lr_decay_factor": float,
    "lr_decay_every": int,
    "beta1": float,
    "beta2": float,
    "epsilon": float,
    "weight_decay": float,
    "batch_mode": str,
    "batch_size": int,
    "split_fractions": tuple,
    "n_repeats": int,
    "rng_seed": int,
}
_MODEL_TYPES = {
    "point_widths": tuple,
    "transform_fc": tuple,
    "global_widths": tuple,
    "use_transform": bool,
    "education_levels": int,
}
CONFIG_TYPES = {**_TRAIN_TYPES, **_MODEL_TYPES}


@dataclass
class ConfigFile:
    """Contents of an experiment config file."""

    experiment: ExperimentConfig
    search_space: dict[str, list] = field(default_factory=dict)
    search_strategy: str = "grid"
    search_samples: int = 10
    points: int | None = None


def parse_config_text(text: str) -> ConfigFile:
    """Parse an INI-style config.

    Sections: ``[train]`` (TrainConfig fields), ``[model]`` (architecture and
    education levels), ``[data]`` (``points``: resampling size for clouds) and
    ``[search]`` (comma-separated candidate values per key, ``;`` between
    tuple-valued candidates, plus ``strategy`` and ``n_samples``).
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.read_string(text)
    unknown_sections = set(cp.sections()) - {"train", "model", "search", "data"}
    if unknown_sections:
        raise ValueError(f"unknown config section(s): {', '.join(sorted(unknown_sections))}")
    train_kw, model_kw = {}, {}
    for section, types, target in (("train", _TRAIN_TYPES, train_kw), ("model", _MODEL_TYPES, model_kw)):
        if not cp.has_section(section):
            continue
        for key, value in cp.items(section):
            if key not in types:
                raise ValueError(f"unknown key {key!r} in [{section}]")
            try:
                target[key] = _parse_value(value, types[key])
            except ValueError as exc:
                raise ValueError(f"[{section}] {key}: {exc}") from None
    out = ConfigFile(ExperimentConfig(train=TrainConfig(**train_kw), **model_kw))
    if cp.has_section("data"):
        for key, value in cp.items("data"):
            if key != "points":
                raise ValueError(f"unknown key {key!r} in [data]")
            out.points = int(value)
    if cp.has_section("search"):
        for key, value in cp.items("search"):
            if key == "strategy":
                out.search_strategy = value.strip()
            elif key == "n_samples":
                out.search_samples = int(value)
            elif key in CONFIG_TYPES:
                kind = CONFIG_TYPES[key]
                items = value.split(";") if kind is tuple else value.split(",")
                out.search_space[key] = [_parse_value(v, kind) for v in items]
            else:
                raise ValueError(f"unknown search key {key!r}")
    return out


def load_config(path) -> ConfigFile:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))
