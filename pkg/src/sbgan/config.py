"""Run configuration: nested dataclasses, JSON round-trip, dotted overrides.

One RunConfig drives every command so a single file (plus ``--set`` overrides)
pins the whole experiment. Hashes over the serialized form guard checkpoints:
the full hash must match when resuming a run, the architecture fingerprint
when loading another stage's checkpoint as a prerequisite.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from . import data, end2end, imgsynth, seggen


@dataclass
class WorldSection:
    num_classes: int = 6
    height: int = 32
    width: int = 64
    noise: float = 0.05
    train_samples: int = 3000
    val_samples: int = 500


@dataclass
class GumbelSection:
    tau: float = 1.0
    eps: float = 1e-20


@dataclass
class SegSection:
    steps_per_stage: int = 400
    fadein_fraction: float = 0.3
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.99
    critic_steps: int = 1
    gp_weight: float = 10.0
    latent_dim: int = 64
    base_channels: int = 64
    min_channels: int = 16
    eval_interval: int = 25
    eval_samples: int = 64
    checkpoint_interval: int = 200


@dataclass
class SpadeSection:
    steps: int = 600
    batch_size: int = 8
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    beta1: float = 0.0
    beta2: float = 0.999
    lambda_perc: float = 10.0
    lambda_fm: float = 10.0
    base_channels: int = 64
    min_channels: int = 16
    hidden: int = 32
    disc_channels: int = 64
    disc_layers: int = 3
    perc_seed: int = 777
    eval_interval: int = 25
    checkpoint_interval: int = 200


@dataclass
class FinetuneSection:
    steps: int = 300
    batch_size: int = 8
    lambda_sb: float = 10.0
    lr_sb: float = 1e-5
    lr_sb_critic: float = 1e-5
    lr_spd_g: float = 1e-4
    lr_spd_d: float = 4e-4
    lr_d2: float = 4e-4
    beta1: float = 0.0
    beta2: float = 0.999
    gp_weight: float = 10.0
    lambda_perc: float = 10.0
    lambda_fm: float = 10.0
    d2_channels: int = 64
    d2_layers: int = 3
    eval_interval: int = 25
    checkpoint_interval: int = 200


@dataclass
class EvalSection:
    n_per_trial: int = 500
    trials: int = 5
    embed_seed: int = 1234
    sample_batch: int = 64
    layout_samples: int = 512


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldSection = field(default_factory=WorldSection)
    gumbel: GumbelSection = field(default_factory=GumbelSection)
    seg: SegSection = field(default_factory=SegSection)
    spade: SpadeSection = field(default_factory=SpadeSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # ---- serialization ----

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _dataclass_from_dict(cls, d, path="")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2,
                                         sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"no config file at {p}")
        try:
            payload = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ValueError(f"config file {p} is not valid JSON: {e}")
        return cls.from_dict(payload)

    # ---- domain object builders ----

    def resolution(self) -> tuple[int, int]:
        return (self.world.height, self.world.width)

    def world_spec(self) -> data.ToyWorldSpec:
        w = self.world
        return data.default_world(num_classes=w.num_classes,
                                  resolution=(w.height, w.width),
                                  seed=self.seed, noise=w.noise)

    def gumbel_config(self) -> seggen.GumbelConfig:
        return seggen.GumbelConfig(tau=self.gumbel.tau, eps=self.gumbel.eps)

    def seg_schedule(self) -> seggen.ProgressiveSchedule:
        return seggen.ProgressiveSchedule.from_final(
            self.resolution(), steps_per_stage=self.seg.steps_per_stage,
            fadein_fraction=self.seg.fadein_fraction)

    def seg_train_config(self) -> seggen.SegTrainConfig:
        s = self.seg
        return seggen.SegTrainConfig(
            batch_size=s.batch_size, lr=s.lr, betas=(s.beta1, s.beta2),
            critic_steps=s.critic_steps, gp_weight=s.gp_weight,
            eval_interval=s.eval_interval, eval_samples=s.eval_samples,
            checkpoint_interval=s.checkpoint_interval, seed=self.seed)

    def spade_train_config(self) -> imgsynth.SpadeTrainConfig:
        s = self.spade
        return imgsynth.SpadeTrainConfig(
            batch_size=s.batch_size, lr_g=s.lr_g, lr_d=s.lr_d,
            betas=(s.beta1, s.beta2), lambda_perc=s.lambda_perc,
            lambda_fm=s.lambda_fm, eval_interval=s.eval_interval,
            checkpoint_interval=s.checkpoint_interval, steps=s.steps,
            seed=self.seed)

    def finetune_config(self, ft_sb: bool = True,
                        ft_spade: bool = True) -> end2end.FinetuneConfig:
        f = self.finetune
        return end2end.FinetuneConfig(
            steps=f.steps, batch_size=f.batch_size, lambda_sb=f.lambda_sb,
            lr_sb=f.lr_sb, lr_sb_critic=f.lr_sb_critic, lr_spd_g=f.lr_spd_g,
            lr_spd_d=f.lr_spd_d, lr_d2=f.lr_d2, betas=(f.beta1, f.beta2),
            gp_weight=f.gp_weight, lambda_perc=f.lambda_perc,
            lambda_fm=f.lambda_fm, ft_sb=ft_sb, ft_spade=ft_spade,
            eval_interval=f.eval_interval,
            checkpoint_interval=f.checkpoint_interval, seed=self.seed)


def _coerce(value: str, typ, path: str):
    if typ is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse {value!r} as bool for {path}")
    try:
        return typ(value)
    except (TypeError, ValueError):
        raise ValueError(f"cannot parse {value!r} as {typ.__name__} for {path}")


def _dataclass_from_dict(cls, d: dict, path: str):
    if not isinstance(d, dict):
        raise ValueError(f"expected an object at {path or 'top level'}, "
                         f"got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ValueError(f"unknown config keys at {path or 'top level'}: "
                         f"{sorted(unknown)}")
    kwargs = {}
    for name, f in known.items():
        if name not in d:
            continue
        sub = f"{path}.{name}" if path else name
        if is_dataclass(f.type) or is_dataclass(_SECTION_TYPES.get(name)):
            kwargs[name] = _dataclass_from_dict(_SECTION_TYPES[name],
                                                d[name], sub)
        else:
            kwargs[name] = d[name]
    return cls(**kwargs)


_SECTION_TYPES = {
    "world": WorldSection, "gumbel": GumbelSection, "seg": SegSection,
    "spade": SpadeSection, "finetune": FinetuneSection, "eval": EvalSection,
}


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """Apply ``section.key=value`` strings; values parse to the field's type."""
    d = cfg.to_dict()
    for pair in pairs or ():
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not of the form key=value")
        dotted, raw = pair.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) == 1:
            section_cls, target, key = RunConfig, d, parts[0]
        elif len(parts) == 2 and parts[0] in _SECTION_TYPES:
            section_cls = _SECTION_TYPES[parts[0]]
            target, key = d[parts[0]], parts[1]
        else:
            raise ValueError(f"unknown config path {dotted!r}")
        ftypes = {f.name: f.type for f in fields(section_cls)}
        if key not in ftypes or is_dataclass(_SECTION_TYPES.get(key)):
            raise ValueError(f"unknown config path {dotted!r}")
        typ = ftypes[key]
        typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ)
        target[key] = _coerce(raw, typ, dotted)
    return RunConfig.from_dict(d)


def _hash_payload(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def config_hash(cfg: RunConfig) -> str:
    """Fingerprint of the complete configuration."""
    return _hash_payload(cfg.to_dict())


def arch_fingerprint(cfg: RunConfig, kind: str = "composite") -> str:
    """Fingerprint of the fields that fix model shapes for one stage.

    Two configs with the same fingerprint produce weight-compatible models
    of that ``kind``, so checkpoints move between them (for example into a
    fine-tuning run with different step counts). Scoping by kind keeps, say,
    a layout checkpoint valid when only image-synthesis widths change.
    """
    payload = {
        "world": {"num_classes": cfg.world.num_classes,
                  "height": cfg.world.height, "width": cfg.world.width},
    }
    if kind in ("seg", "composite"):
        payload["gumbel"] = asdict(cfg.gumbel)
        payload["seg"] = {k: getattr(cfg.seg, k)
                          for k in ("latent_dim", "base_channels",
                                    "min_channels")}
    if kind in ("spade", "composite"):
        payload["spade"] = {k: getattr(cfg.spade, k)
                            for k in ("base_channels", "min_channels",
                                      "hidden", "disc_channels",
                                      "disc_layers")}
    if kind == "composite":
        payload["finetune"] = {k: getattr(cfg.finetune, k)
                               for k in ("d2_channels", "d2_layers")}
    elif kind not in ("seg", "spade"):
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    return _hash_payload(payload)


def load_with_overrides(config_path, pairs) -> RunConfig:
    """Config file (optional) plus ``--set`` overrides, overrides winning."""
    cfg = RunConfig.load(config_path) if config_path else RunConfig()
    return apply_overrides(cfg, pairs)
