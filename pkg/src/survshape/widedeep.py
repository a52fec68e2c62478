"""Wide-and-deep risk model: linear tabular pathway plus point-cloud pathway.

The risk score is

    mu = w_wide . concat(x, phi(x)) + w_deep . MLP_global(PointNet(cloud))

with no global bias, since the Cox loss only sees score differences.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import MLP, Module
from .pointnet import PointNet, PointNetConfig

CHECKPOINT_FORMAT = "survshape-checkpoint"
CHECKPOINT_VERSION = 1
VARIANTS = ("wide", "deep", "widedeep")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "widedeep"
    n_wide: int = 0
    point_widths: tuple[int, ...] = (64, 128, 400)
    transform_fc: tuple[int, ...] = (200, 100)
    global_widths: tuple[int, ...] = (200, 100, 100)
    use_transform: bool = True
    with_volume: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        object.__setattr__(self, "point_widths", tuple(int(w) for w in self.point_widths))
        object.__setattr__(self, "transform_fc", tuple(int(w) for w in self.transform_fc))
        object.__setattr__(self, "global_widths", tuple(int(w) for w in self.global_widths))

    @property
    def has_wide(self) -> bool:
        return self.variant in ("wide", "widedeep")

    @property
    def has_deep(self) -> bool:
        return self.variant in ("deep", "widedeep")

    def pointnet_config(self) -> PointNetConfig:
        return PointNetConfig(self.point_widths, self.transform_fc, self.use_transform)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("point_widths", "transform_fc", "global_widths"):
            d[k] = list(d[k])
        return d


@dataclass
class ScoreParts:
    """Per-subject wide and deep contributions; ``total`` is their sum."""

    wide: np.ndarray
    deep: np.ndarray
    total: np.ndarray = field(init=False)

    def __post_init__(self):
        self.total = self.wide + self.deep


class WideDeepModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.pointnet: PointNet | None = None
        self.global_mlp: MLP | None = None
        self.w_wide: Tensor | None = None
        self.w_deep: Tensor | None = None
        if config.has_wide:
            if config.n_wide < 1:
                raise ValueError("a wide component needs n_wide >= 1")
            self.w_wide = ad.parameter(np.zeros(config.n_wide))
        if config.has_deep:
            self.pointnet = PointNet(config.pointnet_config(), rng)
            self.global_mlp = MLP(self.pointnet.out_features, config.global_widths, rng)
            self.w_deep = ad.parameter(np.zeros(self.global_mlp.out_features))

    def children(self):
        if self.pointnet is not None:
            yield "pointnet", self.pointnet
            yield "global_mlp", self.global_mlp

    def own_parameters(self):
        if self.w_wide is not None:
            yield "w_wide", self.w_wide
        if self.w_deep is not None:
            yield "w_deep", self.w_deep

    # -- scoring ---------------------------------------------------------

    def wide_term(self, features) -> Tensor:
        x = ad.as_tensor(features)
        if x.ndim == 1:
            x = ad.reshape(x, (1, x.shape[0]))
        if x.shape[-1] != self.config.n_wide:
            raise ad.ShapeError(f"wide features have width {x.shape[-1]}, model expects {self.config.n_wide}")
        return ad.reshape(ad.matmul(x, ad.reshape(self.w_wide, (-1, 1))), (x.shape[0],))

    def deep_term(self, clouds) -> Tensor:
        c = ad.as_tensor(clouds)
        if c.ndim == 2:
            c = ad.reshape(c, (1, *c.shape))
        hidden = self.global_mlp(self.pointnet.encode(c))
        return ad.reshape(ad.matmul(hidden, ad.reshape(self.w_deep, (-1, 1))), (c.shape[0],))

    def forward(self, features=None, clouds=None) -> Tensor:
        """Risk scores for a batch; higher means higher hazard."""
        terms = []
        if self.config.has_wide:
            if features is None:
                raise ValueError("wide component needs tabular features")
            terms.append(self.wide_term(features))
        if self.config.has_deep:
            if clouds is None:
                raise ValueError("deep component needs point clouds")
            terms.append(self.deep_term(clouds))
        if len(terms) == 2 and terms[0].shape != terms[1].shape:
            raise ad.ShapeError(f"{terms[0].shape[0]} feature rows but {terms[1].shape[0]} clouds")
        return terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])

    __call__ = forward

    def score_parts(self, features=None, clouds=None) -> ScoreParts:
        n = None
        wide = deep = None
        if self.config.has_wide:
            wide = self.wide_term(features).data.copy()
            n = wide.size
        if self.config.has_deep:
            deep = self.deep_term(clouds).data.copy()
            n = deep.size
        zeros = np.zeros(n)
        return ScoreParts(wide if wide is not None else zeros, deep if deep is not None else zeros)

    def predict(self, features=None, clouds=None) -> np.ndarray:
        """Eval-mode scores as a plain array (mode is restored afterwards)."""
        was_training = self.training
        self.eval()
        try:
            return self.forward(features, clouds).data.copy()
        finally:
            self.train(was_training)

    # -- snapshots and checkpoints --------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": p.data.copy() for k, p in self.named_parameters()}
        for k, st in self.named_buffers():
            out[f"buffer/{k}/running_mean"] = st.running_mean.copy()
            out[f"buffer/{k}/running_var"] = st.running_var.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = {f"param/{k}" for k in params}
        expected |= {f"buffer/{k}/{s}" for k in buffers for s in ("running_mean", "running_var")}
        missing, extra = expected - set(state), set(state) - expected
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[f"param/{k}"], dtype=np.float64)
            if arr.shape != p.shape:
                raise ad.ShapeError(f"{k}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()
        for k, st in buffers.items():
            st.running_mean = np.asarray(state[f"buffer/{k}/running_mean"], dtype=np.float64).copy()
            st.running_var = np.asarray(state[f"buffer/{k}/running_var"], dtype=np.float64).copy()

    def wide_coefficients(self, column_names) -> list[tuple[str, float]]:
        if self.w_wide is None:
            raise ValueError("model has no wide component")
        if len(column_names) != self.w_wide.size:
            raise ValueError(f"{len(column_names)} column names for {self.w_wide.size} coefficients")
        return [(name, float(w)) for name, w in zip(column_names, self.w_wide.data)]


def risk_score(x, cloud, model: WideDeepModel) -> float:
    """Scalar risk for one subject, evaluated with running batch-norm statistics."""
    feats = None if x is None else np.asarray(getattr(x, "values", x), dtype=np.float64)
    return float(model.predict(feats, cloud)[0])


def wide_only_model(x, model: WideDeepModel) -> float:
    feats = np.asarray(getattr(x, "values", x), dtype=np.float64)
    return float(model.wide_term(feats).data[0])


def save_checkpoint(path, model: WideDeepModel, encoder: dict | None = None, extra: dict | None = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "encoder": encoder,
        "extra": extra or {},
    }
    arrays = model.state_dict()
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


@dataclass
class Checkpoint:
    model: WideDeepModel
    encoder: dict | None
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    with np.load(Path(path), allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise ValueError(f"{path}: not a model checkpoint (no metadata)")
        meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unrecognised checkpoint format {meta.get('format')!r}")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    model = WideDeepModel(ModelConfig(**meta["model_config"]))
    model.load_state_dict(arrays)
    model.eval()
    return Checkpoint(model=model, encoder=meta["encoder"], extra=meta["extra"])
