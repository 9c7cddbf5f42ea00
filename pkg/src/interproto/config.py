"""Flat ``key = value`` experiment configuration with a closed key registry."""

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Optional

from .data import SyntheticSpec
from .encoder import TrainConfig, config_digest
from .losses import KINDS, MarginConfig

ARMS = ("baseline", "ip", "ip_full", "reweight", "margin_up", "oversample")


def _int_list(text):
    return tuple(int(t) for t in text.split(",") if t.strip())


def _gap_list(text):
    out = []
    for t in text.split(","):
        t = t.strip()
        if not t:
            continue
        out.append(None if t.lower() == "none" else int(t))
    return tuple(out)


def _optional_int(text):
    return None if text.strip().lower() in ("all", "none") else int(text)


def _kind(text):
    text = text.strip()
    if text not in KINDS:
        raise ValueError(f"expected one of {KINDS}")
    return text


_PARSERS = {
    "int": int,
    "float": float,
    "str": str.strip,
    "ints": _int_list,
    "gaps": _gap_list,
    "optint": _optional_int,
    "kind": _kind,
}


def _key(default, kind, doc=""):
    return field(default=default, metadata={"kind": kind, "doc": doc})


@dataclass(frozen=True)
class ExperimentConfig:
    # synthetic data
    n_identities: int = _key(40, "int", "training identities")
    child_fraction: float = _key(0.3, "float", "fraction of identities with child samples")
    child_samples: int = _key(4, "int", "child samples per child identity")
    adult_samples: int = _key(16, "int", "adult samples per identity")
    d_in: int = _key(32, "int", "input feature dimension")
    kappa: float = _key(0.35, "float", "child identity specificity (0 = shared mode)")
    sigma: float = _key(0.05, "float", "per-coordinate noise")
    data_seed: int = _key(0, "int", "seed of the synthetic world")
    test_identities: int = _key(200, "int", "held-out identities for evaluation")
    # encoder and optimiser
    epochs: int = _key(30, "int")
    batch_size: int = _key(64, "int")
    lr: float = _key(0.1, "float")
    lr_decay_epochs: tuple = _key((17, 25), "ints")
    lr_decay_factor: float = _key(0.1, "float")
    momentum: float = _key(0.9, "float")
    weight_decay: float = _key(5e-4, "float")
    hidden: tuple = _key((64,), "ints", "hidden layer widths")
    embed_dim: int = _key(16, "int")
    # loss
    loss_kind: str = _key("arcface", "kind")
    scale: float = _key(64.0, "float")
    margin: float = _key(0.5, "float")
    lambda_ip: float = _key(1.0, "float")
    # baseline arms
    reweight_w: float = _key(2.0, "float", "child sample weight for arm=reweight")
    margin_up: float = _key(0.7, "float", "child-class margin for arm=margin_up")
    oversample_rho: float = _key(0.25, "float", "child:adult batch ratio for arm=oversample")
    # evaluation
    gaps: tuple = _key((20, 30), "gaps", "age gaps in years; 'none' disables the constraint")
    pair_count: Optional[int] = _key(None, "optint", "pairs per label; 'all' uses every qualifying pair")
    seeds: tuple = _key((0, 1, 2), "ints")
    out_dir: str = _key("runs", "str")

    def __post_init__(self):
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"seeds must be distinct, got {self.seeds}")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    def synthetic_spec(self, split="train"):
        base = SyntheticSpec(
            n_identities=self.n_identities, child_fraction=self.child_fraction,
            child_samples=self.child_samples, adult_samples=self.adult_samples,
            d_in=self.d_in, kappa=self.kappa, sigma=self.sigma, seed=self.data_seed)
        if split == "train":
            return base
        if split == "test":
            return dataclasses.replace(base, n_identities=self.test_identities,
                                       identity_offset=self.n_identities)
        raise ValueError(f"unknown split {split!r}")

    def margin_config(self, lambda_ip=None):
        return MarginConfig(kind=self.loss_kind, scale=self.scale, margin=self.margin,
                            lambda_ip=self.lambda_ip if lambda_ip is None else lambda_ip)

    def train_config(self, seed, margin=None, apply_ip_to="child_only", rho=None):
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            lr_decay_epochs=tuple(self.lr_decay_epochs), lr_decay_factor=self.lr_decay_factor,
            momentum=self.momentum, weight_decay=self.weight_decay, seed=seed,
            margin=margin or self.margin_config(), apply_ip_to=apply_ip_to,
            hidden=tuple(self.hidden), embed_dim=self.embed_dim, rho=rho)

    def digest(self):
        """Digest of everything except the seed list and output location."""
        d = dataclasses.asdict(self)
        d.pop("seeds")
        d.pop("out_dir")
        return config_digest(d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


KEYS = {f.name: f for f in fields(ExperimentConfig)}


def parse_config(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[KEYS[key].metadata["kind"]](value)
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return ExperimentConfig(**values)


def load_config(path):
    if path is None:
        return ExperimentConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), source=str(path))


def format_config(cfg):
    """Render ``cfg`` back to the text format (round-trips through parse_config)."""
    lines = []
    for name, f in KEYS.items():
        v = getattr(cfg, name)
        kind = f.metadata["kind"]
        if kind in ("ints", "gaps"):
            text = ",".join("none" if x is None else str(x) for x in v)
        elif kind == "optint":
            text = "all" if v is None else str(v)
        else:
            text = repr(v) if isinstance(v, float) else str(v)
        lines.append(f"{name} = {text}")
    return "\n".join(lines) + "\n"
